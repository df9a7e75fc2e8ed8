"""LISA: convolutional autoencoder with regression/classification heads and a
domain discriminator trained through gradient reversal."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .preprocess import SgConfig, sg_filter

log = logging.getLogger(__name__)


@dataclass
class LisaConfig:
    latent_channels: int = 16
    alpha: float = 0.011
    beta: float = 0.066
    gamma: float = 1.2e-4
    lr_ae: float = 1.5e-4
    lr_disc: float = 2.5e-4
    epochs: int = 200
    batch: int = 64
    brix_bin_width: float = 0.5
    grl_lambda: float = 1.0
    seed: int = 0
    hidden: tuple = (64, 32)
    head_hidden: int = 128
    disc_hidden: int = 64
    leaky_slope: float = 0.01

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.brix_bin_width <= 0:
            raise ValueError("brix_bin_width must be positive")
        if self.latent_channels < 1:
            raise ValueError("latent_channels must be >= 1")
        if self.epochs < 0 or self.batch < 1:
            raise ValueError("epochs must be >= 0 and batch >= 1")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown LisaConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class LossBreakdown:
    total: float
    task: float
    recon: float
    manifold: float
    domain: float

    def recomposed(self, cfg):
        return self.task + cfg.alpha * self.recon + cfg.beta * self.manifold + cfg.gamma * self.domain


LOSS_FIELDS = ("total", "task", "recon", "manifold", "domain")


def init_params(cfg, bands=224, n_domains=2, body=True):
    """Kaiming-uniform weights, zero biases. ``body=False`` gives the predictor-only layout."""
    ps = T.ParamStore(seed=cfg.seed)
    if body:
        chans = [bands, *cfg.hidden, cfg.latent_channels]
        for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
            ps.kaiming(f"enc.{i}.w", (cout, cin, 3, 3), cin * 9)
            ps.zeros(f"enc.{i}.b", (cout,))
        rev = chans[::-1]
        for i, (cin, cout) in enumerate(zip(rev[:-1], rev[1:])):
            ps.kaiming(f"dec.{i}.w", (cout, cin, 3, 3), cin * 9)
            ps.zeros(f"dec.{i}.b", (cout,))
        feat = cfg.latent_channels * 64
    else:
        feat = bands * 64
    for head, out in (("brix", 1), ("acid", 1), ("grape", 2)):
        ps.kaiming(f"head.{head}.0.w", (feat, cfg.head_hidden), feat)
        ps.zeros(f"head.{head}.0.b", (cfg.head_hidden,))
        ps.kaiming(f"head.{head}.1.w", (cfg.head_hidden, out), cfg.head_hidden)
        ps.zeros(f"head.{head}.1.b", (out,))
    if body:
        ps.kaiming("disc.0.w", (feat, cfg.disc_hidden), feat)
        ps.zeros("disc.0.b", (cfg.disc_hidden,))
        ps.kaiming("disc.1.w", (cfg.disc_hidden, n_domains), cfg.disc_hidden)
        ps.zeros("disc.1.b", (n_domains,))
    return ps


def _n_layers(params, prefix):
    return len([n for n in params if n.startswith(prefix) and n.endswith(".w")])


def encode(params, x, slope=0.01):
    """[N, B, 8, 8] -> latent [N, C, 8, 8]; spatial size is preserved."""
    if x.data.ndim != 4 or x.shape[2:] != (8, 8):
        raise T.ShapeError(f"encode expects [N, bands, 8, 8], got {x.shape}")
    n = _n_layers(params, "enc.")
    h = x
    for i in range(n):
        h = T.conv2d(h, params[f"enc.{i}.w"], params[f"enc.{i}.b"], stride=1, pad=1)
        if i < n - 1:
            h = T.leaky_relu(h, slope)
    return h


def decode(params, z, slope=0.01):
    n = _n_layers(params, "dec.")
    if z.data.ndim != 4 or z.shape[1] != params["dec.0.w"].shape[1]:
        raise T.ShapeError(f"decode expects [N, {params['dec.0.w'].shape[1]}, H, W], got {z.shape}")
    h = z
    for i in range(n):
        h = T.conv2d(h, params[f"dec.{i}.w"], params[f"dec.{i}.b"], stride=1, pad=1)
        if i < n - 1:
            h = T.leaky_relu(h, slope)
    return h


def _mlp(params, prefix, x, slope):
    h = T.leaky_relu(T.linear(x, params[f"{prefix}.0.w"], params[f"{prefix}.0.b"]), slope)
    return T.linear(h, params[f"{prefix}.1.w"], params[f"{prefix}.1.b"])


def predict_heads(params, feats, slope=0.01):
    """Flattened features -> (brix [N], acid [N], grape logits [N, 2]); class 1 is grape."""
    if feats.data.ndim != 2:
        feats = T.flatten(feats)
    brix = T.column(_mlp(params, "head.brix", feats, slope), 0)
    acid = T.column(_mlp(params, "head.acid", feats, slope), 0)
    return brix, acid, _mlp(params, "head.grape", feats, slope)


def grape_decision(logits):
    """argmax with ties resolved to class 0 (non-grape)."""
    logits = np.asarray(logits)
    return (logits[:, 1] > logits[:, 0]).astype(np.int64)


def brix_bins(brix, bin_width):
    return np.floor(np.asarray(brix, dtype=np.float64) / bin_width).astype(np.int64)


def loss_manifold(z, brix, bin_width):
    """Mean squared latent distance over pairs i<j that fall in the same Brix bin; 0 without pairs."""
    if not isinstance(z, T.Tensor):
        z = T.Tensor(np.asarray(z, dtype=np.float64))
    zf = T.flatten(z) if z.data.ndim > 2 else z
    bins = brix_bins(brix, bin_width)
    w = (bins[:, None] == bins[None, :]).astype(zf.data.dtype)
    np.fill_diagonal(w, 0.0)
    n_pairs = w.sum() / 2.0
    if n_pairs == 0:
        return T.scale(T.sum(zf), 0.0)
    return T.scale(T.pair_sq_dist(zf, w), 1.0 / n_pairs)


def loss_domain(params, z, domains, lam=1.0, reverse=True, slope=0.01):
    """Mean cross-entropy of the discriminator; the GRL sits between ``z`` and the discriminator."""
    domains = np.asarray(domains, dtype=np.int64)
    n_dom = params["disc.1.b"].shape[0]
    if domains.size and (domains.min() < 0 or domains.max() >= n_dom):
        raise ValueError(f"domain label outside the {n_dom} training domains")
    zf = T.flatten(z) if z.data.ndim > 2 else z
    h = T.grl(zf, lam) if reverse else zf
    return T.cross_entropy(_mlp(params, "disc", h, slope), domains)


@dataclass
class Normaliser:
    input_scale: float = 1.0
    brix_mean: float = 0.0
    brix_sd: float = 1.0
    acid_mean: float = 0.0
    acid_sd: float = 1.0

    @classmethod
    def fit(cls, x, brix, acid):
        sd = float(np.std(x))
        b = brix[np.isfinite(brix)]
        a = acid[np.isfinite(acid)]
        return cls(1.0 / sd if sd > 0 else 1.0,
                   float(b.mean()) if b.size else 0.0, float(b.std()) if b.size > 1 and b.std() > 0 else 1.0,
                   float(a.mean()) if a.size else 0.0, float(a.std()) if a.size > 1 and a.std() > 0 else 1.0)


def prepare_inputs(x_raw, sg=SgConfig()):
    """Raw DN patches [N, 8, 8, B] -> SG-filtered float32 [N, B, 8, 8]."""
    x = sg_filter(np.asarray(x_raw, dtype=np.float64), sg)
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=np.float32)


@dataclass
class LisaModel:
    params: T.ParamStore
    config: LisaConfig
    norm: Normaliser
    domains: list
    kind: str = "lisa"
    bands: int = 224

    @property
    def has_body(self):
        return "enc.0.w" in self.params

    def features(self, x):
        """Latent z for LISA, the scaled input itself for predictor-only."""
        xt = T.Tensor(np.asarray(x, dtype=np.float32) * np.float32(self.norm.input_scale))
        if not self.has_body:
            return xt
        return encode(self.params, xt, self.config.leaky_slope)

    def predict(self, x, batch=256):
        """Returns dict with brix, acid (physical units), grape class, logits and latent features."""
        out = {"brix": [], "acid": [], "grape": [], "logits": [], "z": []}
        for i in range(0, len(x), batch):
            z = self.features(x[i:i + batch])
            b, a, g = predict_heads(self.params, T.flatten(z), self.config.leaky_slope)
            out["brix"].append(b.data * self.norm.brix_sd + self.norm.brix_mean)
            out["acid"].append(a.data * self.norm.acid_sd + self.norm.acid_mean)
            out["logits"].append(g.data)
            out["grape"].append(grape_decision(g.data))
            out["z"].append(z.data)
        if not len(x):
            return {k: np.zeros((0,)) for k in out}
        return {k: np.concatenate(v) for k, v in out.items()}

    def save(self, path):
        path = Path(path)
        self.params.meta = {"kind": self.kind}
        self.params.save(path)
        sidecar = {"kind": self.kind, "config": self.config.to_dict(), "domains": list(self.domains),
                   "norm": asdict(self.norm), "bands": self.bands}
        Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        params = T.ParamStore.load(path)
        side = json.loads(Path(str(path) + ".json").read_text())
        return cls(params, LisaConfig.from_dict(side["config"]), Normaliser(**side["norm"]),
                   side["domains"], side["kind"], side["bands"])


def _step_losses(model, xb, brix, acid, grape, dom, cfg, reverse=True):
    """Forward one minibatch; returns (total tensor, LossBreakdown)."""
    ps = model.params
    slope = cfg.leaky_slope
    x = T.Tensor(xb * np.float32(model.norm.input_scale))
    z = model.features(xb) if not model.has_body else encode(ps, x, slope)
    zf = T.flatten(z)
    bp, ap, logits = predict_heads(ps, zf, slope)
    lab = np.flatnonzero(np.isfinite(brix))
    task = T.cross_entropy(logits, grape.astype(np.int64))
    if lab.size:
        yb = (brix[lab] - model.norm.brix_mean) / model.norm.brix_sd
        task = task + T.mse(T.take_rows(bp, lab), yb.astype(np.float32))
    lab_a = np.flatnonzero(np.isfinite(acid))
    if lab_a.size:
        ya = (acid[lab_a] - model.norm.acid_mean) / model.norm.acid_sd
        task = task + T.mse(T.take_rows(ap, lab_a), ya.astype(np.float32))
    total = task
    parts = {"task": task}
    if model.has_body:
        zin = z if cfg.alpha > 0 else T.Tensor(z.data)
        parts["recon"] = T.mse(decode(ps, zin, slope), x)
        if lab.size >= 2:
            zl = T.take_rows(zf, lab) if cfg.beta > 0 else T.Tensor(zf.data[lab])
            parts["manifold"] = loss_manifold(zl, brix[lab], cfg.brix_bin_width)
        zd = zf if cfg.gamma > 0 else T.Tensor(zf.data)
        parts["domain"] = loss_domain(ps, zd, dom, cfg.grl_lambda, reverse, slope)
        for key, w in (("recon", cfg.alpha), ("manifold", cfg.beta), ("domain", cfg.gamma)):
            if key in parts and w > 0:
                total = total + T.scale(parts[key], w)
    vals = {k: float(parts[k].data) if k in parts else 0.0 for k in ("task", "recon", "manifold", "domain")}
    for k, v in vals.items():
        if not np.isfinite(v):
            raise T.NumericInstabilityError(f"non-finite {k} loss")
    return total, LossBreakdown(total=float(total.data), **vals)


def _check_recomposition(lb, cfg):
    ref = lb.recomposed(cfg)
    if abs(lb.total - ref) > 1e-5 * max(abs(ref), 1e-12):
        raise AssertionError(f"loss recomposition failed: total {lb.total} vs parts {ref}")


def train(cfg, x, brix, acid, is_grape, domain_of_each, body=True, kind="lisa", on_step=None):
    """Fit LISA (or, with ``body=False``, the predictor-only heads).

    ``x`` is SG-filtered input [N, B, 8, 8]; ``brix``/``acid`` hold NaN for
    unlabeled samples; ``domain_of_each`` are domain names. Returns
    (model, per-epoch LossBreakdown list).
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    brix = np.asarray(brix, dtype=np.float64)
    acid = np.asarray(acid, dtype=np.float64)
    is_grape = np.asarray(is_grape, dtype=bool)
    if not np.isfinite(brix).any() or not np.isfinite(acid).any():
        raise ValueError("training needs at least one sample with Brix and acid labels")
    names = sorted(set(map(str, domain_of_each)))
    dom = np.array([names.index(str(d)) for d in domain_of_each], dtype=np.int64)
    bands = x.shape[1]
    params = init_params(cfg, bands, max(2, len(names)), body)
    model = LisaModel(params, cfg, Normaliser.fit(x, brix, acid), names, kind, bands)
    ae = [t for n, t in params.items() if not n.startswith("disc.")]
    disc = [t for n, t in params.items() if n.startswith("disc.")]
    groups = [(ae, cfg.lr_ae)] + ([(disc, cfg.lr_disc)] if disc else [])
    opt = T.Adam(groups)
    rng = np.random.default_rng([cfg.seed, 11])
    history = []
    n = len(x)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(len(LOSS_FIELDS))
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            opt.zero_grad()
            total, lb = _step_losses(model, x[idx], brix[idx], acid[idx], is_grape[idx], dom[idx], cfg)
            _check_recomposition(lb, cfg)
            total.backward()
            opt.step()
            if on_step is not None:
                on_step(epoch, lb)
            sums += np.array([getattr(lb, f) for f in LOSS_FIELDS]) * len(idx)
        history.append(LossBreakdown(*(sums / n)))
    return model, history


def write_epoch_log(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *LOSS_FIELDS])
        for i, lb in enumerate(history):
            w.writerow([i + 1, *(f"{getattr(lb, f):.9g}" for f in LOSS_FIELDS)])


@dataclass
class BunchQuality:
    brix_mean: float | None
    acid_mean: float | None
    grape_fraction: float
    empty: bool


def aggregate_quality(brix, acid, grape):
    """Average per-patch predictions over patches classified as grape."""
    grape = np.asarray(grape).astype(bool)
    if grape.size == 0:
        raise ValueError("at least one patch is required")
    frac = float(grape.mean())
    if not grape.any():
        return BunchQuality(None, None, frac, True)
    return BunchQuality(float(np.mean(np.asarray(brix)[grape])), float(np.mean(np.asarray(acid)[grape])), frac, False)


def predict_bunch_quality(model, patches_in_bbox):
    """``patches_in_bbox`` are SG-filtered [N, B, 8, 8] inputs from one bounding box."""
    pred = model.predict(patches_in_bbox)
    return aggregate_quality(pred["brix"], pred["acid"], pred["grape"])
