"""Scenarios, experiment configs and the model-fitting glue shared by the CLI and scripts."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import baselines, lisa
from .lisa import LisaConfig
from .metrics import EvalReport, domain_probe, mean_pairwise_mmd, overall_accuracy, r_squared
from .hsi import read_cube
from .pipeline import WeightConfig, crop_log_area, prepare_weight_input
from .preprocess import SgConfig
from .synth import SynthConfig, load_dataset, make_bunches, make_patch_set, render_cube, scan_layouts

SCENARIOS = {
    "IntraDomain": (("lab",), ("lab",)),
    "LabToField": (("lab",), ("field_am", "field_pm")),
    "FieldToField": (("field_am",), ("field_pm",)),
    "DomainGeneralization": (("lab", "field_pm"), ("field_am",)),
}

ABLATIONS = {"domain": "gamma", "manifold": "beta", "recon": "alpha"}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


@dataclass(frozen=True)
class Scenario:
    name: str
    source: tuple
    target: tuple

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.name!r}; choose from {sorted(SCENARIOS)}")
        if not self.source or not self.target:
            raise ConfigError("scenario needs at least one source and one target domain")
        if self.name != "IntraDomain" and set(self.source) & set(self.target):
            raise ConfigError(f"{self.name}: source and target domains overlap: {sorted(set(self.source) & set(self.target))}")

    @classmethod
    def named(cls, name, source=None, target=None):
        if name not in SCENARIOS:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        s, t = SCENARIOS[name]
        return cls(name, tuple(source or s), tuple(target or t))


@dataclass
class ExperimentConfig:
    scenario: Scenario = field(default_factory=lambda: Scenario.named("DomainGeneralization"))
    sg: SgConfig = field(default_factory=SgConfig)
    lisa: LisaConfig = field(default_factory=LisaConfig)
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    data_dir: str | None = None
    out_dir: str = "runs/default"
    pls_components: int = 10
    weight: WeightConfig = field(default_factory=WeightConfig)

    @classmethod
    def from_dict(cls, d):
        known = {"scenario", "source", "target", "sg", "lisa", "synth", "data_dir", "out_dir",
                 "pls_components", "weight"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        try:
            scen = Scenario.named(d.get("scenario", "DomainGeneralization"), d.get("source"), d.get("target"))
            sg = SgConfig(**d.get("sg", {}))
            lc = LisaConfig.from_dict(d.get("lisa", {}))
            synth = None if d.get("data_dir") else SynthConfig.from_dict(d.get("synth", {}))
            wc = WeightConfig(**d.get("weight", {}))
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from exc
        pls_k = d.get("pls_components", 10)
        if not isinstance(pls_k, int) or pls_k < 1:
            raise ConfigError("pls_components must be a positive integer")
        cfg = cls(scen, sg, lc, synth, d.get("data_dir"), d.get("out_dir", "runs/default"), pls_k, wc)
        if cfg.data_dir is not None and not Path(cfg.data_dir).is_dir():
            raise ConfigError(f"data_dir {cfg.data_dir} does not exist")
        return cfg

    @classmethod
    def load(cls, path):
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self):
        return {"scenario": self.scenario.name, "source": list(self.scenario.source),
                "target": list(self.scenario.target), "sg": asdict(self.sg), "lisa": self.lisa.to_dict(),
                "synth": None if self.synth is None else self.synth.to_dict(), "data_dir": self.data_dir,
                "out_dir": self.out_dir, "pls_components": self.pls_components, "weight": asdict(self.weight)}


def worker_count():
    """Worker cap from SPECTRA_INVAR_THREADS (default 1)."""
    raw = os.environ.get("SPECTRA_INVAR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"SPECTRA_INVAR_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("SPECTRA_INVAR_THREADS must be >= 1")
    return n


@dataclass
class Split:
    """SG-filtered inputs with labels; ``domain`` holds a name per sample."""

    x: np.ndarray
    brix: np.ndarray
    acid: np.ndarray
    is_grape: np.ndarray
    domain: np.ndarray

    def __len__(self):
        return len(self.x)


def patch_sets_for(cfg):
    """In-memory patch sets (synthetic) or those of a dataset directory."""
    if cfg.data_dir is not None:
        return load_dataset(cfg.data_dir)[1]
    bunches = make_bunches(cfg.synth)
    return {s.label.name: make_patch_set(cfg.synth, bunches, s) for s in cfg.synth.domains}


def build_split(patch_sets, domains, split, sg=SgConfig()):
    missing = [d for d in domains if d not in patch_sets]
    if missing:
        raise ConfigError(f"dataset has no domain(s) {missing}; available {sorted(patch_sets)}")
    parts = [patch_sets[d].subset(patch_sets[d].split == split) for d in domains]
    return Split(np.concatenate([lisa.prepare_inputs(p.x, sg) for p in parts]),
                 np.concatenate([p.brix for p in parts]), np.concatenate([p.acid for p in parts]),
                 np.concatenate([p.is_grape for p in parts]),
                 np.concatenate([np.full(len(p), p.domain, dtype=object) for p in parts]))


def scenario_splits(cfg, patch_sets=None):
    ps = patch_sets if patch_sets is not None else patch_sets_for(cfg)
    return (build_split(ps, cfg.scenario.source, "train", cfg.sg),
            build_split(ps, cfg.scenario.target, "test", cfg.sg))


def diagnostic_splits(cfg, patch_sets=None):
    """Every domain's train partition (probe fit) and test partition (probe score, MMD)."""
    ps = patch_sets if patch_sets is not None else patch_sets_for(cfg)
    doms = sorted(ps)
    return build_split(ps, doms, "train", cfg.sg), build_split(ps, doms, "test", cfg.sg)


def scans_for(cfg, domains):
    """{domain: (scan cube, ground-truth boxes, bunch table)} for the requested domains."""
    out = {}
    if cfg.data_dir is not None:
        d = Path(cfg.data_dir)
        manifest = json.loads((d / "manifest.json").read_text())
        table = {b["bunch_id"]: b for b in manifest["bunches"]}
        for name in domains:
            files = manifest["files"][name]
            out[name] = (read_cube(d / files["scan"]), json.loads((d / files["scan_gt"]).read_text()), table)
        return out
    sc = cfg.synth
    bunches = make_bunches(sc)
    table = {b.bunch_id: asdict(b) for b in bunches}
    layouts, lines, samples = scan_layouts(sc, bunches)
    for spec in sc.domains:
        name = spec.label.name
        if name in domains:
            rng = np.random.default_rng([sc.seed, 5, sum(map(ord, name))])
            cube, _, gt = render_cube(layouts, spec, rng, lines, samples, sc.noise_sd_dn,
                                      cube_id=f"scan_{name}", bunch_seed=sc.seed)
            out[name] = (cube, gt, table)
    return out


def weight_samples(cfg, domains, split):
    """Prepared bbox crops [N, B, 64, 64], crop log areas and bunch weights (g) for one bunch split."""
    xs, areas, grams = [], [], []
    for cube, gt, table in scans_for(cfg, domains).values():
        for g in gt:
            b = table[g["bunch_id"]]
            if b["split"] != split:
                continue
            x0, y0, x1, y1 = g["bbox"]
            crop = cube.dn[y0:y1, x0:x1]
            xs.append(prepare_weight_input(crop, cfg.sg))
            areas.append(crop_log_area(crop))
            grams.append(b["weight_g"])
    if not xs:
        raise ConfigError(f"no {split} bunches in the scans of {list(domains)}")
    return np.stack(xs), np.array(areas), np.array(grams)


def fit(kind, cfg, train, ablate=None):
    """Train one model kind on a Split; returns (model, per-epoch loss history)."""
    if not np.isfinite(train.brix).any():
        raise ConfigError("training split has no Brix/acid labels")
    lc = cfg.lisa
    if ablate is not None:
        if kind != "lisa":
            raise ConfigError("--ablate applies to the lisa model only")
        if ablate not in ABLATIONS:
            raise ConfigError(f"unknown ablation {ablate!r}; choose from {sorted(ABLATIONS)}")
        lc = replace(lc, **{ABLATIONS[ablate]: 0.0})
    if kind == "lisa":
        return lisa.train(lc, train.x, train.brix, train.acid, train.is_grape, train.domain)
    if kind == "predictor":
        return baselines.predictor_only_train(lc, train.x, train.brix, train.acid, train.is_grape, train.domain)
    if kind == "pls":
        lab = np.isfinite(train.brix) & np.isfinite(train.acid)
        return baselines.pls_fit(baselines.mean_spectra(train.x[lab]),
                                 np.stack([train.brix[lab], train.acid[lab]], axis=1), cfg.pls_components), []
    raise ConfigError(f"unknown model kind {kind!r}")


def predict(model, x):
    """Uniform prediction dict {brix, acid, grape (or None)} for any model kind."""
    if isinstance(model, baselines.PlsModel):
        y = model.predict(baselines.mean_spectra(x))
        return {"brix": y[:, 0], "acid": y[:, 1], "grape": None}
    return model.predict(x)


def _safe_r2(y, y_hat):
    m = np.isfinite(y)
    return float(r_squared(y[m], y_hat[m]))


def invariance_diagnostics(model, fit_split, held_split):
    """Domain-probe accuracy and mean pairwise MMD^2, on SG-filtered inputs and on latent z.

    The probe is fit on ``fit_split`` and scored on ``held_split``; MMD uses
    ``held_split``. Both splits should contain every domain of interest.
    """
    def flat(a):
        return np.asarray(a, dtype=np.float64).reshape(len(a), -1)

    out = {}
    z_fit = model.predict(fit_split.x)["z"]
    z_held = model.predict(held_split.x)["z"]
    for space, a, b in (("input", fit_split.x, held_split.x), ("latent", z_fit, z_held)):
        out[f"probe_{space}"] = domain_probe(flat(a), fit_split.domain, flat(b), held_split.domain)
        out[f"mmd_{space}"], out[f"mmd_{space}_pairs"] = mean_pairwise_mmd(flat(b), held_split.domain)
    return out


def evaluate(model, test, kind, scenario, diag=None):
    """EvalReport on ``test``; ``diag=(fit_split, held_split)`` adds latent-space probe and MMD."""
    pred = predict(model, test.x)
    rep = EvalReport(model=kind, scenario=scenario.name, target_domains=list(scenario.target))
    for dom in scenario.target:
        m = test.domain == dom
        rep.r2[f"{dom}/brix"] = _safe_r2(test.brix[m], pred["brix"][m])
        rep.r2[f"{dom}/acid"] = _safe_r2(test.acid[m], pred["acid"][m])
    if pred["grape"] is not None:
        rep.grape_oa = overall_accuracy(test.is_grape.astype(int), pred["grape"])
    if diag is not None and isinstance(model, lisa.LisaModel):
        d = invariance_diagnostics(model, *diag)
        rep.mmd = dict(d["mmd_latent_pairs"])
        rep.probe_accuracy = d["probe_latent"]
    return rep


def comparison_table(reports):
    """Plain-text table: rows are models, columns Brix/Acid R² and grape OA per target domain."""
    targets = reports[0].target_domains
    head = ["Model"] + [f"{t} {m}" for t in targets for m in ("Brix R2", "Acid R2", "Grape OA")]
    rows = [head]
    for r in reports:
        row = [r.model]
        for t in targets:
            row += [f"{r.r2[f'{t}/brix']:.3f}", f"{r.r2[f'{t}/acid']:.3f}",
                    "-" if r.grape_oa is None else f"{r.grape_oa:.3f}"]
        rows.append(row)
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
