"""Synthetic paired multi-domain grape spectra and push-broom scans.

The forward model is deliberately simple: a structured grape reflectance
(red-edge base, Gaussian absorption features whose depths follow Brix and
acid) multiplied by a domain illuminant, a shading field and the O2
transmission, then quantised to u16 digital numbers.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .hsi import FIELD_AM, FIELD_PM, LAB, PATCH, DomainLabel, HsiCube, default_wavelengths, write_cube

BANDS = 224
WL = default_wavelengths(BANDS)

BRIX_FEATURES = ((850.0, 22.0), (905.0, 16.0))
ACID_FEATURES = ((485.0, 18.0), (615.0, 14.0))
O2_NM, O2_WIDTH = 760.0, 3.5


def _gauss(center, width, wl=WL):
    return np.exp(-0.5 * ((wl - center) / width) ** 2)


def planck(temp_k, wl=WL):
    lam = wl * 1e-9
    spd = 1.0 / (lam ** 5 * (np.exp(1.4388e-2 / (lam * temp_k)) - 1.0))
    return spd / spd.max()


def sensor_response(wl=WL):
    return 0.25 + 0.75 * np.exp(-(((wl - 640.0) / 230.0) ** 2))


def o2_transmission(depth, wl=WL):
    return 1.0 - depth * _gauss(O2_NM, O2_WIDTH, wl)


@dataclass
class DomainSpec:
    label: DomainLabel
    illuminant: np.ndarray  # relative power incl. sensor response, > 0
    intensity_scale: float = 1.0
    o2_absorption_depth: float = 0.0
    shadow_prob: float = 0.0
    blur_sigma: float = 0.0
    sky: np.ndarray | None = None  # diffuse light reaching shaded pixels
    shadow_depth: float = 0.0
    gain_jitter: float = 0.0  # per-patch log-normal exposure spread
    tilt_jitter: float = 0.0  # per-patch spectral slope spread (colour-temperature drift)
    o2_jitter: float = 0.0  # per-patch spread of the O2 depth (air-mass drift)
    brix_offset: float = 0.0  # ripening between capture dates, added to every bunch
    acid_offset: float = 0.0

    def __post_init__(self):
        self.illuminant = np.asarray(self.illuminant, dtype=np.float64)
        if np.any(self.illuminant <= 0):
            raise ValueError("illuminant must be strictly positive")
        for name in ("o2_absorption_depth", "shadow_prob", "shadow_depth"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def irradiance(self, shade=1.0, tilt=0.0, o2_delta=0.0):
        """Effective DN per unit reflectance; ``shade`` in [0, 1] is the direct-light fraction.

        ``tilt`` bends the direct illuminant by exp(tilt * (wl - 700) / 300);
        ``o2_delta`` shifts the O2 depth (clipped to [0, 1]).
        """
        shade = np.asarray(shade, dtype=np.float64)[..., None]
        illum = self.illuminant if tilt == 0.0 else self.illuminant * np.exp(tilt * (WL - 700.0) / 300.0)
        direct = illum * shade
        if self.sky is not None:
            direct = direct + self.sky * (1.0 - shade)
        depth = float(np.clip(self.o2_absorption_depth + o2_delta, 0.0, 1.0))
        return direct * self.intensity_scale * o2_transmission(depth)

    def draw_drift(self, rng):
        """Per-capture (tilt, o2_delta); no draws are consumed when both spreads are zero."""
        tilt = self.tilt_jitter * rng.standard_normal() if self.tilt_jitter > 0 else 0.0
        o2 = self.o2_jitter * rng.standard_normal() if self.o2_jitter > 0 else 0.0
        return tilt, o2

    def to_dict(self):
        d = asdict(self)
        d["label"] = self.label.name
        d["illuminant"] = [float(v) for v in self.illuminant]
        d["sky"] = None if self.sky is None else [float(v) for v in self.sky]
        return d


def default_domains(mean_dn=1800.0):
    """Lab halogen, morning sun and afternoon sun; each illuminant is scaled to ``mean_dn`` on average."""
    qe = sensor_response()
    halogen = planck(2900.0) * qe
    morning = planck(4300.0) * qe * (1.0 - 0.25 * _gauss(940.0, 22.0))
    afternoon = planck(6200.0) * qe * (1.0 - 0.3 * _gauss(940.0, 22.0))
    blue_sky = planck(15000.0) * qe

    def norm(spd):
        return spd / spd.mean() * mean_dn

    return [
        DomainSpec(LAB, norm(halogen), 1.0, 0.0, 0.0, 0.0, None, 0.0, 0.04),
        DomainSpec(FIELD_AM, norm(morning), 0.8, 0.55, 0.35, 0.4, 0.25 * norm(blue_sky), 0.7, 0.12),
        DomainSpec(FIELD_PM, norm(afternoon), 0.62, 0.45, 0.5, 1.2, 0.35 * norm(blue_sky), 0.75, 0.15),
    ]


@dataclass
class SynthConfig:
    n_bunches: int = 60
    brix_range: tuple = (17.0, 24.0)
    acid_range: tuple = (4.0, 9.0)
    noise_sd_dn: float = 6.0
    seed: int = 0
    patches_per_bunch: int = 6
    nongrape_per_bunch: int = 1
    test_fraction: float = 1.0 / 3.0
    berry_brix_sd: float = 0.4
    berry_acid_sd: float = 0.25
    reflectance_variation: float = 1.0
    scan_bunches_per_row: int = 3
    scan_samples: int = 160
    weight_per_px: float = 0.12
    weight_offset_g: float = 25.0
    weight_noise_g: float = 6.0
    radius_range: tuple = (7.0, 18.0)
    domains: list = field(default_factory=default_domains)
    drift: tuple | None = None  # (gain, tilt, o2) per-capture spreads applied to every domain

    def __post_init__(self):
        if self.n_bunches < 1:
            raise ValueError("n_bunches must be >= 1")
        for name in ("brix_range", "acid_range", "radius_range"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"{name} must be non-degenerate, got {(lo, hi)}")
        if len(self.domains) < 1:
            raise ValueError("at least one domain is required")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        if self.drift is not None:
            self.drift = tuple(float(v) for v in self.drift)
            if len(self.drift) != 3 or min(self.drift) < 0:
                raise ValueError("drift must be three non-negative spreads (gain, tilt, o2)")
            g, t, o = self.drift
            self.domains = [replace(s, gain_jitter=g, tilt_jitter=t, o2_jitter=o) for s in self.domains]

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "domains" in d:
            by_name = {s.label.name: s for s in default_domains()}
            doms = []
            for spec in d["domains"]:
                if isinstance(spec, str):
                    doms.append(by_name[DomainLabel.parse(spec).name])
                else:
                    spec = dict(spec)
                    spec["label"] = DomainLabel.parse(spec["label"])
                    if spec.get("sky") is not None:
                        spec["sky"] = np.asarray(spec["sky"])
                    doms.append(DomainSpec(**spec))
            d["domains"] = doms
        for key in ("brix_range", "acid_range", "radius_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "domains"}
        d["domains"] = [s.label.name for s in self.domains]
        for key in ("brix_range", "acid_range", "radius_range"):
            d[key] = list(d[key])
        d["drift"] = None if self.drift is None else list(self.drift)
        return d


def grape_reflectance(brix, acid, rng=None, variation=1.0, brix_range=(15.0, 26.0), acid_range=(2.0, 12.0)):
    """Reflectance in (0, 1) of a green grape berry with the given sugar and acid content."""
    if not brix_range[0] <= brix <= brix_range[1]:
        raise ValueError(f"brix {brix} outside {brix_range}")
    if not acid_range[0] <= acid <= acid_range[1]:
        raise ValueError(f"acid {acid} outside {acid_range}")
    base = (0.05 + 0.07 * _gauss(555.0, 35.0) - 0.025 * _gauss(675.0, 18.0)
            + 0.36 / (1.0 + np.exp(-(WL - 705.0) / 14.0)))
    base = base * (1.0 - 0.3 * _gauss(975.0, 25.0))
    b = (brix - 17.0) / 7.0
    a = (acid - 4.0) / 5.0
    for center, width in BRIX_FEATURES:
        base = base * (1.0 - (0.06 + 0.22 * b) * _gauss(center, width))
    for center, width in ACID_FEATURES:
        base = base * (1.0 - (0.05 + 0.2 * a) * _gauss(center, width))
    if rng is not None and variation > 0:
        gain = 1.0 + 0.05 * variation * rng.standard_normal()
        tilt = 0.04 * variation * rng.standard_normal() * (WL - 700.0) / 300.0
        wiggle = 0.015 * variation * rng.standard_normal() * np.sin((WL - 400.0) / 600.0 * np.pi * 2.0 + rng.uniform(0, 2 * np.pi))
        base = base * gain * (1.0 + tilt + wiggle)
    return np.clip(base, 1e-4, 0.999)


def leaf_reflectance(rng=None):
    base = (0.04 + 0.1 * _gauss(550.0, 30.0) - 0.03 * _gauss(675.0, 15.0)
            + 0.45 / (1.0 + np.exp(-(WL - 718.0) / 10.0)))
    base = base * (1.0 - 0.25 * _gauss(975.0, 25.0))
    if rng is not None:
        base = base * (1.0 + 0.08 * rng.standard_normal())
    return np.clip(base, 1e-4, 0.999)


def stem_reflectance(rng=None):
    base = 0.08 + 0.22 * (WL - 400.0) / 600.0
    if rng is not None:
        base = base * (1.0 + 0.1 * rng.standard_normal())
    return np.clip(base, 1e-4, 0.999)


def _berry_shading(rng, size=PATCH):
    """Smooth curvature shading across a patch, values in (0.7, 1]."""
    yy, xx = np.mgrid[0:size, 0:size] - (size - 1) / 2.0
    cy, cx = rng.uniform(-3, 3, size=2)
    r2 = ((yy - cy) ** 2 + (xx - cx) ** 2) / (size * size)
    return 1.0 - 0.3 * np.clip(r2, 0.0, 1.0)


def shadow_field(shape, spec, rng):
    """Direct-light fraction per pixel from smoothed binary noise."""
    if spec.shadow_prob <= 0 or spec.shadow_depth <= 0:
        return np.ones(shape)
    raw = (rng.random(shape) < spec.shadow_prob).astype(np.float64)
    smooth = gaussian_filter(raw, sigma=max(1.0, min(shape) / 4.0))
    smooth = smooth / max(smooth.max(), 1e-9)
    return 1.0 - spec.shadow_depth * smooth


def _quantise(radiance, noise_sd, rng):
    if noise_sd > 0:
        radiance = radiance + rng.normal(0.0, noise_sd, size=radiance.shape)
    return np.round(np.clip(radiance, 0, 65535)).astype(np.uint16)


def render_patch(reflectance, spec, rng, noise_sd=0.0, shading=None):
    """8x8xB DN patch of a homogeneous material under ``spec``."""
    shade = shadow_field((PATCH, PATCH), spec, rng)
    gain = float(np.exp(spec.gain_jitter * rng.standard_normal())) if spec.gain_jitter > 0 else 1.0
    tilt, o2 = spec.draw_drift(rng)
    pixel = reflectance[None, None, :] * (1.0 + 0.01 * rng.standard_normal((PATCH, PATCH, 1)))
    if shading is not None:
        pixel = pixel * shading[..., None]
    radiance = pixel * spec.irradiance(shade, tilt, o2) * gain
    if spec.blur_sigma > 0:
        radiance = gaussian_filter(radiance, sigma=(spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
    return _quantise(radiance, noise_sd, rng)


@dataclass
class BunchLayout:
    bunch_id: int
    center_line: float
    center_sample: float
    radius: float
    brix: float
    acid: float
    weight_g: float = 0.0

    @property
    def bbox(self):
        """[x0, y0, x1, y1] in cube pixels (x = sample, y = line)."""
        r = self.radius
        return [int(np.floor(self.center_sample - r)), int(np.floor(self.center_line - r)),
                int(np.ceil(self.center_sample + r)), int(np.ceil(self.center_line + r))]


def render_cube(layouts, spec, rng, lines, samples, noise_sd=0.0, berry_radius=2.5,
                geo_origin=(50.78, 5.20), geo_step=(1e-6, 2e-7), cube_id="scan", with_background=True,
                bunch_seed=0):
    """Render a push-broom scan with berry-cluster bunches over a leaf/stem background.

    Returns (cube, annotations, ground-truth boxes). Berry placement depends
    only on ``bunch_seed`` and the bunch id, so the same layout renders to the
    same geometry in every domain.
    """
    refl = np.empty((lines, samples, BANDS))
    if with_background:
        leaf = leaf_reflectance()
        stem = stem_reflectance()
        mix = gaussian_filter(rng.random((lines, samples)), 3.0)
        mix = (mix > np.median(mix)).astype(np.float64)[..., None]
        refl[:] = leaf * mix + stem * (1.0 - mix)
    else:
        refl[:] = 0.0
    annotations, gt = [], []
    yy, xx = np.mgrid[0:lines, 0:samples]
    for lay in layouts:
        x0, y0, x1, y1 = lay.bbox
        if x0 < 0 or y0 < 0 or x1 > samples or y1 > lines:
            raise ValueError(f"bunch {lay.bunch_id} bbox {lay.bbox} overflows a {lines}x{samples} cube")
        brng = np.random.default_rng([bunch_seed, lay.bunch_id, 7])
        n_berries = max(3, int(2.2 * (lay.radius / berry_radius) ** 2))
        ang = brng.uniform(0, 2 * np.pi, n_berries)
        rad = lay.radius * np.sqrt(brng.uniform(0, 1, n_berries)) * 0.85
        cls_ = lay.center_line + rad * np.sin(ang)
        css = lay.center_sample + rad * np.cos(ang)
        fruit = grape_reflectance(lay.brix, lay.acid, brng, variation=0.5)
        sl_y = slice(max(0, y0), min(lines, y1))
        sl_x = slice(max(0, x0), min(samples, x1))
        for cy, cx in zip(cls_, css):
            d2 = (yy[sl_y, sl_x] - cy) ** 2 + (xx[sl_y, sl_x] - cx) ** 2
            inside = d2 <= berry_radius ** 2
            shade = 1.0 - 0.35 * np.clip(d2 / berry_radius ** 2, 0, 1)
            block = refl[sl_y, sl_x]
            block[inside] = fruit * shade[inside][:, None]
        annotations.append({"cube_id": cube_id, "rect": [y0, x0, y1 - y0, x1 - x0], "brix": lay.brix,
                            "acid": lay.acid, "is_grape": True, "bunch_id": lay.bunch_id,
                            "weight_g": lay.weight_g})
        gt.append({"bunch_id": lay.bunch_id, "bbox": lay.bbox})
    shade = shadow_field((lines, samples), spec, rng)
    radiance = refl * spec.irradiance(shade)
    if spec.blur_sigma > 0:
        radiance = gaussian_filter(radiance, sigma=(spec.blur_sigma, spec.blur_sigma, 0), mode="nearest")
    dn = _quantise(radiance, noise_sd, rng)
    lat0, lon0 = geo_origin
    dlat, dlon = geo_step
    idx = np.arange(lines)
    geotags = np.stack([lat0 + idx * dlat, lon0 + idx * dlon], axis=1)
    cube = HsiCube(dn=dn, wavelengths_nm=WL.copy(), geotags=geotags, domain=spec.label,
                   capture_meta={"cube_id": cube_id, "synthetic": True})
    return cube, annotations, gt


@dataclass
class Bunch:
    bunch_id: int
    brix: float
    acid: float
    radius: float
    weight_g: float
    split: str


def make_bunches(cfg):
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.n_bunches
    brix = rng.uniform(*cfg.brix_range, size=n)
    acid = rng.uniform(*cfg.acid_range, size=n)
    radius = rng.uniform(*cfg.radius_range, size=n)
    area = np.pi * radius ** 2
    weight = cfg.weight_per_px * area + cfg.weight_offset_g + rng.normal(0, cfg.weight_noise_g, size=n)
    n_test = max(1, int(round(cfg.test_fraction * n))) if n > 1 else 0
    order = rng.permutation(n)
    test_ids = set(order[:n_test].tolist())
    return [Bunch(i, float(brix[i]), float(acid[i]), float(radius[i]), float(max(weight[i], 1.0)),
                  "test" if i in test_ids else "train") for i in range(n)]


@dataclass
class PatchSet:
    """Patches of one domain as arrays; ``x`` is [N, 8, 8, B] raw DN."""

    domain: str
    x: np.ndarray
    brix: np.ndarray  # NaN where unlabeled
    acid: np.ndarray
    is_grape: np.ndarray
    bunch_id: np.ndarray
    split: np.ndarray

    def subset(self, mask):
        return PatchSet(self.domain, self.x[mask], self.brix[mask], self.acid[mask], self.is_grape[mask],
                        self.bunch_id[mask], self.split[mask])

    def __len__(self):
        return len(self.x)


def make_patch_set(cfg, bunches, spec):
    """Paired patches: berry identity and reflectance depend on (seed, bunch, index), never on the domain."""
    xs, brix, acid, grape, bid, split = [], [], [], [], [], []
    drng = np.random.default_rng([cfg.seed, 2, sum(map(ord, spec.label.name))])
    wide_b = (min(cfg.brix_range[0], 15.0) - 3, max(cfg.brix_range[1], 26.0) + 3)
    wide_a = (min(cfg.acid_range[0], 2.0) - 2, max(cfg.acid_range[1], 12.0) + 2)
    for b in bunches:
        for k in range(cfg.patches_per_bunch):
            brng = np.random.default_rng([cfg.seed, 3, b.bunch_id, k])
            true_brix = b.brix + spec.brix_offset + cfg.berry_brix_sd * brng.standard_normal()
            true_acid = b.acid + spec.acid_offset + cfg.berry_acid_sd * brng.standard_normal()
            refl = grape_reflectance(true_brix, true_acid, brng, cfg.reflectance_variation, wide_b, wide_a)
            shading = _berry_shading(brng)
            xs.append(render_patch(refl, spec, drng, cfg.noise_sd_dn, shading))
            brix.append(b.brix + spec.brix_offset)
            acid.append(b.acid + spec.acid_offset)
            grape.append(True)
            bid.append(b.bunch_id)
            split.append(b.split)
        for k in range(cfg.nongrape_per_bunch):
            brng = np.random.default_rng([cfg.seed, 4, b.bunch_id, k])
            refl = leaf_reflectance(brng) if k % 2 == 0 else stem_reflectance(brng)
            xs.append(render_patch(refl, spec, drng, cfg.noise_sd_dn))
            brix.append(np.nan)
            acid.append(np.nan)
            grape.append(False)
            bid.append(b.bunch_id)
            split.append(b.split)
    return PatchSet(spec.label.name, np.stack(xs), np.array(brix), np.array(acid), np.array(grape),
                    np.array(bid), np.array(split))


def scan_layouts(cfg, bunches):
    """Bunches packed a few per row along the travel axis; returns (layouts, lines, samples)."""
    per_row = cfg.scan_bunches_per_row
    rmax = cfg.radius_range[1]
    pitch_s = cfg.scan_samples / per_row
    if pitch_s < 2 * rmax + 2:
        raise ValueError("scan_samples too small for the requested bunches per row")
    row_pitch = 2 * rmax + 12
    layouts = []
    for i, b in enumerate(bunches):
        row, col = divmod(i, per_row)
        layouts.append(BunchLayout(b.bunch_id, 10 + rmax + row * row_pitch, pitch_s * (col + 0.5), b.radius,
                                   b.brix, b.acid, b.weight_g))
    rows = (len(bunches) + per_row - 1) // per_row
    lines = int(np.ceil(20 + 2 * rmax + (rows - 1) * row_pitch))
    return layouts, lines, cfg.scan_samples


def make_dataset(cfg):
    """Paired patch sets, bunch table and one scan cube per domain."""
    bunches = make_bunches(cfg)
    patch_sets = {s.label.name: make_patch_set(cfg, bunches, s) for s in cfg.domains}
    layouts, lines, samples = scan_layouts(cfg, bunches)
    scans = {}
    for s in cfg.domains:
        rng = np.random.default_rng([cfg.seed, 5, sum(map(ord, s.label.name))])
        scans[s.label.name] = render_cube(layouts, s, rng, lines, samples, cfg.noise_sd_dn,
                                          cube_id=f"scan_{s.label.name}", bunch_seed=cfg.seed)
    return {"bunches": bunches, "patches": patch_sets, "scans": scans}


def mosaic_cube(ps, cube_id, per_row=128):
    """Tile a patch set into one cube (<=1024 samples wide) with a matching annotation list."""
    n = len(ps)
    rows = (n + per_row - 1) // per_row
    cols = min(n, per_row)
    dn = np.zeros((rows * PATCH, cols * PATCH, ps.x.shape[-1]), dtype=np.uint16)
    ann = []
    for i in range(n):
        r, c = divmod(i, per_row)
        dn[r * PATCH:(r + 1) * PATCH, c * PATCH:(c + 1) * PATCH] = ps.x[i]
        ann.append({"cube_id": cube_id, "rect": [r * PATCH, c * PATCH, PATCH, PATCH],
                    "brix": None if np.isnan(ps.brix[i]) else float(ps.brix[i]),
                    "acid": None if np.isnan(ps.acid[i]) else float(ps.acid[i]),
                    "is_grape": bool(ps.is_grape[i]), "bunch_id": int(ps.bunch_id[i]),
                    "split": str(ps.split[i]), "index": i})
    cube = HsiCube(dn=dn, wavelengths_nm=WL.copy(), geotags=np.zeros((rows * PATCH, 2)),
                   domain=DomainLabel.parse(ps.domain), capture_meta={"cube_id": cube_id, "kind": "patch_mosaic"})
    return cube, ann


def patch_set_from_mosaic(cube, ann):
    ann = sorted(ann, key=lambda a: a["index"])
    x = np.stack([cube.dn[a["rect"][0]:a["rect"][0] + PATCH, a["rect"][1]:a["rect"][1] + PATCH] for a in ann])
    nan = float("nan")
    return PatchSet(cube.domain.name, x,
                    np.array([nan if a["brix"] is None else a["brix"] for a in ann], dtype=np.float64),
                    np.array([nan if a["acid"] is None else a["acid"] for a in ann], dtype=np.float64),
                    np.array([a["is_grape"] for a in ann]), np.array([a["bunch_id"] for a in ann]),
                    np.array([a["split"] for a in ann]))


def write_dataset(cfg, out_dir, window_lines=64, overlap=0.5):
    """Write mosaic cubes, scan cubes, annotations, per-window detections and the manifest."""
    from .pipeline import windowed_ground_truth

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(cfg)
    manifest = {"config": cfg.to_dict(), "domains": [s.label.name for s in cfg.domains],
                "bunches": [asdict(b) for b in ds["bunches"]], "files": {}}
    for name, ps in ds["patches"].items():
        cube, ann = mosaic_cube(ps, f"patches_{name}")
        write_cube(cube, out / f"patches_{name}.hsic")
        (out / f"patches_{name}.json").write_text(json.dumps(ann, sort_keys=True))
        scube, sann, gt = ds["scans"][name]
        write_cube(scube, out / f"scan_{name}.hsic")
        (out / f"scan_{name}_annotations.json").write_text(json.dumps(sann, sort_keys=True))
        (out / f"scan_{name}_gt.json").write_text(json.dumps(gt, sort_keys=True))
        window_lines = min(window_lines, scube.lines)  # short scans get a single full-length window
        dets = windowed_ground_truth([g["bbox"] for g in gt], scube.lines, window_lines, overlap)
        with open(out / f"scan_{name}_detections.jsonl", "w") as fh:
            for d in dets:
                fh.write(json.dumps(d, sort_keys=True) + "\n")
        manifest["files"][name] = {"patches": f"patches_{name}.hsic", "patch_labels": f"patches_{name}.json",
                                   "scan": f"scan_{name}.hsic", "scan_annotations": f"scan_{name}_annotations.json",
                                   "scan_gt": f"scan_{name}_gt.json",
                                   "detections": f"scan_{name}_detections.jsonl"}
    manifest["scan_window"] = {"window_lines": window_lines, "overlap": overlap}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(data_dir):
    from .hsi import read_cube

    d = Path(data_dir)
    manifest = json.loads((d / "manifest.json").read_text())
    patches = {}
    for name, files in manifest["files"].items():
        cube = read_cube(d / files["patches"])
        ann = json.loads((d / files["patch_labels"]).read_text())
        patches[name] = patch_set_from_mosaic(cube, ann)
    return manifest, patches
