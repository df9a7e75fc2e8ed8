"""Multi-seed synthetic benchmark: domain shift, leave-one-domain-out comparison, ablations, invariance.

Each seed re-draws the synthetic dataset and re-initialises every model, so a
seed is one independent replicate of the whole experiment.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .lisa import LisaConfig
from .metrics import overall_accuracy
from .synth import SynthConfig

DOMAINS = ("lab", "field_am", "field_pm")


@dataclass
class BenchmarkConfig:
    seeds: tuple = tuple(range(10))
    synth: SynthConfig = field(default_factory=SynthConfig)
    lisa: LisaConfig = field(default_factory=LisaConfig)
    pls_components: int = 10
    ablation_target: str = "field_am"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"seeds", "synth", "lisa", "pls_components", "ablation_target"}
        if unknown:
            raise ex.ConfigError(f"unknown benchmark config keys: {sorted(unknown)}")
        return cls(tuple(d.get("seeds", range(10))), SynthConfig.from_dict(d.get("synth", {})),
                   LisaConfig.from_dict(d.get("lisa", {})), d.get("pls_components", 10),
                   d.get("ablation_target", "field_am"))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return {"seeds": list(self.seeds), "synth": self.synth.to_dict(), "lisa": self.lisa.to_dict(),
                "pls_components": self.pls_components, "ablation_target": self.ablation_target}

    def experiment(self, seed, source, target):
        """ExperimentConfig for one seed and split; the synth and model seeds both follow ``seed``."""
        scen = ex.Scenario("IntraDomain" if source == target else "DomainGeneralization",
                           tuple(source), tuple(target))
        return ex.ExperimentConfig(scenario=scen, lisa=replace(self.lisa, seed=seed),
                                   synth=replace(self.synth, seed=seed), pls_components=self.pls_components)


def brix_r2(model, split):
    pred = ex.predict(model, split.x)
    return ex._safe_r2(split.brix, pred["brix"])


def grape_oa(model, split):
    return overall_accuracy(split.is_grape.astype(int), model.predict(split.x)["grape"])


def domain_shift(bcfg, seed, patch_sets=None):
    """Predictor-only trained on each single domain: intra-domain vs cross-domain Brix R^2."""
    base = bcfg.experiment(seed, ("lab",), ("lab",))
    t0 = time.perf_counter()
    ps = patch_sets if patch_sets is not None else ex.patch_sets_for(base)
    intra, cross = {}, {}
    for src in DOMAINS:
        cfg = bcfg.experiment(seed, (src,), (src,))
        model, _ = ex.fit("predictor", cfg, ex.build_split(ps, [src], "train", cfg.sg))
        for tgt in DOMAINS:
            r2 = brix_r2(model, ex.build_split(ps, [tgt], "test", cfg.sg))
            if tgt == src:
                intra[src] = r2
            else:
                cross[f"{src}->{tgt}"] = r2
    return {"intra": intra, "cross": cross, "intra_mean": float(np.mean(list(intra.values()))),
            "cross_mean": float(np.mean(list(cross.values()))), "seconds": time.perf_counter() - t0}


def held_out(bcfg, seed, target, kinds=("lisa", "predictor", "pls"), ablations=(), diagnostics=False,
             patch_sets=None):
    """Train on the two other domains, score Brix R^2 on ``target``'s test partition."""
    source = tuple(d for d in DOMAINS if d != target)
    cfg = bcfg.experiment(seed, source, (target,))
    ps = patch_sets if patch_sets is not None else ex.patch_sets_for(cfg)
    train, test = ex.scenario_splits(cfg, ps)
    out = {"r2": {}, "seconds": {}}
    for kind in kinds:
        t0 = time.perf_counter()
        model, _ = ex.fit(kind, cfg, train)
        out["r2"][kind] = brix_r2(model, test)
        out["seconds"][kind] = time.perf_counter() - t0
        if kind == "lisa":
            out["grape_oa"] = grape_oa(model, test)
        if kind == "lisa" and diagnostics:
            d = ex.invariance_diagnostics(model, *ex.diagnostic_splits(cfg, ps))
            out["diagnostics"] = {k: d[k] for k in ("probe_input", "probe_latent", "mmd_input", "mmd_latent")}
    for name in ablations:
        t0 = time.perf_counter()
        model, _ = ex.fit("lisa", cfg, train, ablate=name)
        out["r2"][f"no_{name}"] = brix_r2(model, test)
        out["seconds"][f"no_{name}"] = time.perf_counter() - t0
    return out


def run_seed(bcfg, seed, log=None):
    """All benchmark measurements for one seed."""
    t0 = time.perf_counter()
    ps = ex.patch_sets_for(bcfg.experiment(seed, ("lab",), ("lab",)))
    res = {"seed": seed, "shift": domain_shift(bcfg, seed, ps), "loo": {}}
    for target in DOMAINS:
        is_abl = target == bcfg.ablation_target
        res["loo"][target] = held_out(bcfg, seed, target, ablations=tuple(ex.ABLATIONS) if is_abl else (),
                                      diagnostics=is_abl, patch_sets=ps)
    res["seconds"] = time.perf_counter() - t0
    if log is not None:
        log(json.dumps(res))
    return res


def loo_mean(res, kind):
    return float(np.mean([res["loo"][t]["r2"][kind] for t in DOMAINS]))


def summarise(results, ablation_target="field_am"):
    """Per-criterion verdicts over a list of run_seed results."""
    n = len(results)
    gap = [r["shift"]["intra_mean"] - r["shift"]["cross_mean"] for r in results]
    lisa_r2 = np.array([loo_mean(r, "lisa") for r in results])
    po_r2 = np.array([loo_mean(r, "predictor") for r in results])
    pls_r2 = np.array([loo_mean(r, "pls") for r in results])
    wins = int(np.sum((lisa_r2 > po_r2) & (lisa_r2 > pls_r2)))
    improvement = float(np.median(lisa_r2 - np.maximum(po_r2, pls_r2)))
    abl = {k: float(np.median([r["loo"][ablation_target]["r2"][k] for r in results]))
           for k in ("lisa", "no_domain", "no_manifold", "no_recon")}
    diag = [r["loo"][ablation_target]["diagnostics"] for r in results]
    probe_ok = sum(d["probe_latent"] < d["probe_input"] for d in diag)
    mmd_ok = sum(d["mmd_latent"] < d["mmd_input"] for d in diag)
    both_ok = sum(d["probe_latent"] < d["probe_input"] and d["mmd_latent"] < d["mmd_input"] for d in diag)
    loo_seconds = sum(r["loo"][t]["seconds"][k] for r in results for t in DOMAINS
                      for k in ("lisa", "predictor", "pls"))
    full_vs_no_domain = sum(r["loo"][ablation_target]["r2"]["lisa"] >= r["loo"][ablation_target]["r2"]["no_domain"]
                            for r in results)
    oa = [r["loo"][t]["grape_oa"] for r in results for t in DOMAINS if "grape_oa" in r["loo"][t]]
    return {
        "n_seeds": n,
        "seconds": {"shift": sum(r["shift"]["seconds"] for r in results), "loo": loo_seconds},
        "shift": {"gaps": gap, "seeds_with_gap": int(sum(g >= 0.2 for g in gap))},
        "loo": {"lisa": lisa_r2.tolist(), "predictor": po_r2.tolist(), "pls": pls_r2.tolist(),
                "seeds_lisa_best": wins, "median_improvement": improvement},
        "ablation_median_r2": abl,
        "ablation_drop": {k: abl["lisa"] - abl[k] for k in ("no_domain", "no_manifold", "no_recon")},
        "seeds_full_ge_no_domain": int(full_vs_no_domain),
        "grape_oa_min": float(min(oa)) if oa else None,
        "invariance": {"probe_lower": probe_ok, "mmd_lower": mmd_ok, "both_lower": both_ok},
    }
