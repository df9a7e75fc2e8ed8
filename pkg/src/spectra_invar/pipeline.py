"""Sliding-window scan processing: detections -> tracks -> per-bunch weight and quality records."""
from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensor as T
from .hsi import PATCH, HsiCube
from .lisa import predict_bunch_quality, prepare_inputs
from .metrics import box_iou
from .preprocess import SgConfig, sg_filter

log = logging.getLogger(__name__)

WEIGHT_INPUT = 64


class DetectionFormatError(ValueError):
    pass


class BandMismatchError(ValueError):
    pass


@dataclass
class PipelineConfig:
    window_lines: int = 64
    overlap: float = 0.5
    iou_match: float = 0.5
    margin: int = 4
    g_min: float = 0.5
    patch_stride: int = 4
    max_age: int = 1

    def __post_init__(self):
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap fraction must lie in [0, 1), got {self.overlap}")
        if not 0.0 < self.iou_match < 1.0:
            raise ValueError(f"iou_match must lie in (0, 1), got {self.iou_match}")
        if self.window_lines < PATCH:
            raise ValueError(f"window_lines must be >= {PATCH}")


def window_offsets(lines, window_lines, overlap):
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap fraction must lie in [0, 1), got {overlap}")
    if window_lines > lines or window_lines < 1:
        raise ValueError(f"window of {window_lines} lines does not fit a {lines}-line cube")
    stride = max(1, int(np.floor(window_lines * (1.0 - overlap))))
    offsets = list(range(0, lines - window_lines + 1, stride))
    if offsets[-1] + window_lines < lines:
        offsets.append(lines - window_lines)
    return offsets


def window_view(cube, offset, window_lines):
    meta = dict(cube.capture_meta)
    meta["line_offset"] = offset
    return HsiCube(dn=cube.dn[offset:offset + window_lines], wavelengths_nm=cube.wavelengths_nm,
                   geotags=cube.geotags[offset:offset + window_lines], domain=cube.domain, capture_meta=meta)


def slide_windows(cube, window_lines, overlap_fraction):
    """Yield (window view, line offset); the last window is clamped to the cube end."""
    for off in window_offsets(cube.lines, window_lines, overlap_fraction):
        yield window_view(cube, off, window_lines), off


@dataclass
class Detection:
    bbox: list  # window-local [x0, y0, x1, y1]
    score: float
    window_offset: int

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (x1 > x0 and y1 > y0):
            raise DetectionFormatError(f"invalid box {self.bbox}")
        if not 0.0 <= self.score <= 1.0:
            raise DetectionFormatError(f"score {self.score} outside [0, 1]")

    @property
    def cube_bbox(self):
        x0, y0, x1, y1 = self.bbox
        return [x0, y0 + self.window_offset, x1, y1 + self.window_offset]


def _parse_detection(rec, where, window_lines=None, samples=None):
    try:
        det = Detection([float(v) for v in rec["bbox"]], float(rec.get("score", 1.0)), int(rec["window_offset"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise DetectionFormatError(f"{where}: {exc}") from exc
    x0, y0, x1, y1 = det.bbox
    if x0 < 0 or y0 < 0 or (samples is not None and x1 > samples) or (window_lines is not None and y1 > window_lines):
        raise DetectionFormatError(f"{where}: bbox {det.bbox} lies outside the "
                                   f"{window_lines}x{samples} window at offset {det.window_offset}")
    return det


def ingest_detections(source, window_lines=None, samples=None):
    """Group detections by window offset.

    ``source`` is a JSONL path (one {window_offset, bbox, score} per line) or
    an iterable of such dicts.
    """
    grouped = {}
    if isinstance(source, (str, Path)):
        with open(source) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DetectionFormatError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
                det = _parse_detection(rec, f"line {lineno}", window_lines, samples)
                grouped.setdefault(det.window_offset, []).append(det)
    else:
        for i, rec in enumerate(source):
            det = rec if isinstance(rec, Detection) else _parse_detection(rec, f"record {i}", window_lines, samples)
            grouped.setdefault(det.window_offset, []).append(det)
    return grouped


def windowed_ground_truth(boxes, lines, window_lines, overlap, min_visible=2):
    """Per-window detections (window-local, score 1) from cube-coordinate boxes."""
    out = []
    for off in window_offsets(lines, window_lines, overlap):
        for x0, y0, x1, y1 in boxes:
            top, bot = max(y0, off), min(y1, off + window_lines)
            if bot - top >= min_visible:
                out.append({"window_offset": off, "bbox": [x0, top - off, x1, bot - off], "score": 1.0})
    return out


class TrackState(enum.Enum):
    OPEN = "open"
    FULLY_FRAMED = "fully_framed"
    EMITTED = "emitted"
    SUPPRESSED = "suppressed"


_NEXT = {TrackState.OPEN: {TrackState.FULLY_FRAMED},
         TrackState.FULLY_FRAMED: {TrackState.EMITTED, TrackState.SUPPRESSED}}


@dataclass
class TrackedBunch:
    id: int
    bbox: list  # cube coordinates, latest observation
    window: tuple  # (first line, end line) of the window it was last seen in
    observations: int = 1
    state: TrackState = TrackState.OPEN
    last_seen: int = 0

    def advance(self, new):
        if new not in _NEXT.get(self.state, ()):
            raise ValueError(f"track {self.id}: illegal transition {self.state.value} -> {new.value}")
        self.state = new


def _clip_lines(box, lo, hi):
    x0, y0, x1, y1 = box
    return [x0, max(y0, lo), x1, min(y1, hi)]


def overlap_iou(track_box, track_window, det_box, det_window):
    """IoU after clipping both boxes to the lines shared by the two windows."""
    lo = max(track_window[0], det_window[0])
    hi = min(track_window[1], det_window[1])
    if hi <= lo:
        return 0.0
    a = _clip_lines(track_box, lo, hi)
    b = _clip_lines(det_box, lo, hi)
    if a[3] <= a[1] or b[3] <= b[1]:
        return 0.0
    return box_iou(a, b)


class BunchTracker:
    """Greedy IoU association of per-window detections to bunch identities."""

    def __init__(self, iou_match=0.5, margin=4, max_age=1, total_lines=None):
        if not 0.0 < iou_match < 1.0:
            raise ValueError("iou_match must lie in (0, 1)")
        self.iou_match = iou_match
        self.margin = margin
        self.max_age = max_age
        self.total_lines = total_lines
        self.tracks: list[TrackedBunch] = []
        self.step = 0
        self._next_id = 0

    def _framed(self, box, window):
        start, end = window
        lead_ok = box[1] - start >= self.margin or start == 0
        trail_ok = end - box[3] >= self.margin or (self.total_lines is not None and end >= self.total_lines)
        return lead_ok and trail_ok

    def update(self, boxes, window):
        """Associate cube-coordinate ``boxes`` seen in ``window``; returns tracks that just became fully framed."""
        self.step += 1
        alive = [t for t in self.tracks if self.step - t.last_seen <= self.max_age]
        pairs = []
        for ti, t in enumerate(alive):
            for di, box in enumerate(boxes):
                iou = overlap_iou(t.bbox, t.window, box, window)
                if iou >= self.iou_match:
                    pairs.append((-iou, t.id, di, ti))
        pairs.sort()
        used_t, used_d = set(), set()
        touched = []
        for _, _, di, ti in pairs:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            t = alive[ti]
            t.bbox, t.window = list(boxes[di]), tuple(window)
            t.observations += 1
            t.last_seen = self.step
            touched.append(t)
        for di, box in enumerate(boxes):
            if di in used_d:
                continue
            t = TrackedBunch(self._next_id, list(box), tuple(window), last_seen=self.step)
            self._next_id += 1
            self.tracks.append(t)
            touched.append(t)
        framed = []
        for t in sorted(touched, key=lambda t: t.id):
            if t.state is TrackState.OPEN and self._framed(t.bbox, window):
                t.advance(TrackState.FULLY_FRAMED)
                framed.append(t)
        return framed


def track(prev, boxes, window, iou_match=0.5, margin=4):
    """Functional form: one association step against an existing tracker (or a fresh one)."""
    tracker = prev if isinstance(prev, BunchTracker) else BunchTracker(iou_match, margin)
    tracker.update(boxes, window)
    return tracker


# --- weight regression ---------------------------------------------------

def resample_bilinear(crop, size=WEIGHT_INPUT):
    """[h, w, B] -> [size, size, B] by bilinear interpolation (pixel-centre aligned)."""
    crop = np.asarray(crop, dtype=np.float64)
    h, w = crop.shape[:2]

    def axis(n):
        pos = np.clip((np.arange(size) + 0.5) * n / size - 0.5, 0, n - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = crop[y0][:, x0] * (1 - fx)[None, :, None] + crop[y0][:, x1] * fx[None, :, None]
    bot = crop[y1][:, x0] * (1 - fx)[None, :, None] + crop[y1][:, x1] * fx[None, :, None]
    return top * (1 - fy)[:, None, None] + bot * fy[:, None, None]


def prepare_weight_input(crop_dn, sg=SgConfig()):
    """Bbox crop [h, w, B] of raw DN -> SG-filtered [B, 64, 64] float32."""
    if crop_dn.shape[0] * crop_dn.shape[1] < 4:
        raise ValueError(f"degenerate bbox crop of shape {crop_dn.shape[:2]}")
    x = sg_filter(resample_bilinear(crop_dn), sg)
    return np.ascontiguousarray(x.transpose(2, 0, 1), dtype=np.float32)


def crop_log_area(crop_dn):
    """log of the crop's pixel area; the 64x64 rescale discards absolute size, so it is fed separately."""
    return float(np.log(crop_dn.shape[0] * crop_dn.shape[1]))


@dataclass
class WeightConfig:
    epochs: int = 80
    lr: float = 1e-3
    batch: int = 16
    seed: int = 0
    reduce_channels: int = 16
    channels: int = 16
    hidden: int = 32
    leaky_slope: float = 0.01


def init_weight_params(cfg, bands=224):
    ps = T.ParamStore(seed=cfg.seed)
    ps.kaiming("w.reduce.w", (cfg.reduce_channels, bands, 1, 1), bands)
    ps.zeros("w.reduce.b", (cfg.reduce_channels,))
    cin = cfg.reduce_channels
    for i in range(3):
        ps.kaiming(f"w.conv{i}.w", (cfg.channels, cin, 3, 3), cin * 9)
        ps.zeros(f"w.conv{i}.b", (cfg.channels,))
        cin = cfg.channels
    feat = cfg.channels  # global average pool over the 8x8 map
    ps.kaiming("w.fc0.w", (feat, cfg.hidden), feat + 1)
    ps.kaiming("w.area.w", (1, cfg.hidden), feat + 1)
    ps.zeros("w.fc0.b", (cfg.hidden,))
    ps.kaiming("w.fc1.w", (cfg.hidden, 1), cfg.hidden)
    ps.zeros("w.fc1.b", (1,))
    return ps


def weight_forward(params, x, area, slope=0.01):
    """[N, B, 64, 64] plus standardised log area [N] -> standardised weight [N]."""
    if x.data.ndim != 4 or x.shape[2:] != (WEIGHT_INPUT, WEIGHT_INPUT):
        raise T.ShapeError(f"weight model expects [N, bands, 64, 64], got {x.shape}")
    h = T.leaky_relu(T.conv2d(x, params["w.reduce.w"], params["w.reduce.b"]), slope)
    for i in range(3):
        h = T.leaky_relu(T.conv2d(h, params[f"w.conv{i}.w"], params[f"w.conv{i}.b"], stride=2, pad=1), slope)
    n, c, hh, ww = h.shape
    dt = h.data.dtype
    pool = T.linear(T.reshape(h, (n * c, hh * ww)), T.Tensor(np.full((hh * ww, 1), 1.0 / (hh * ww), dtype=dt)),
                    T.Tensor(np.zeros(1, dtype=dt)))
    a = T.Tensor(np.asarray(area, dtype=dt).reshape(-1, 1))
    no_bias = T.Tensor(np.zeros(params["w.fc0.b"].shape, dtype=dt))
    h = T.add(T.linear(T.reshape(pool, (n, c)), params["w.fc0.w"], params["w.fc0.b"]),
              T.linear(a, params["w.area.w"], no_bias))
    h = T.leaky_relu(h, slope)
    return T.column(T.linear(h, params["w.fc1.w"], params["w.fc1.b"]), 0)


@dataclass
class WeightModel:
    params: T.ParamStore
    config: WeightConfig
    input_scale: float = 1.0
    w_mean: float = 0.0
    w_sd: float = 1.0
    bands: int = 224
    area_mean: float = 0.0
    area_sd: float = 1.0

    def _area(self, log_area):
        return (np.asarray(log_area, dtype=np.float64) - self.area_mean) / self.area_sd

    def predict(self, x, log_area, batch=16):
        """Grams for prepared inputs [N, B, 64, 64] and crop log areas [N]; clamped at zero."""
        area = self._area(log_area)
        out = []
        for i in range(0, len(x), batch):
            xt = T.Tensor(np.asarray(x[i:i + batch], dtype=np.float32) * np.float32(self.input_scale))
            z = weight_forward(self.params, xt, area[i:i + batch], self.config.leaky_slope)
            out.append(z.data * self.w_sd + self.w_mean)
        if not out:
            return np.zeros(0)
        return np.maximum(np.concatenate(out).astype(np.float64), 0.0)

    def save(self, path):
        self.params.meta = {"kind": "weight"}
        self.params.save(path)
        side = {"kind": "weight", "config": asdict(self.config), "input_scale": self.input_scale,
                "w_mean": self.w_mean, "w_sd": self.w_sd, "bands": self.bands,
                "area_mean": self.area_mean, "area_sd": self.area_sd}
        Path(str(path) + ".json").write_text(json.dumps(side, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        side = json.loads(Path(str(path) + ".json").read_text())
        if side.get("kind") != "weight":
            raise ValueError(f"{path} is not a weight-model checkpoint")
        return cls(T.ParamStore.load(path), WeightConfig(**side["config"]), side["input_scale"],
                   side["w_mean"], side["w_sd"], side["bands"], side["area_mean"], side["area_sd"])


def train_weight_model(cfg, x, log_area, grams):
    """Fit the 2D CNN on prepared inputs [N, B, 64, 64]; returns (model, per-epoch MSE)."""
    x = np.asarray(x, dtype=np.float32)
    grams = np.asarray(grams, dtype=np.float64)
    log_area = np.asarray(log_area, dtype=np.float64)
    sd = float(np.std(x))
    model = WeightModel(init_weight_params(cfg, x.shape[1]), cfg, 1.0 / sd if sd > 0 else 1.0,
                        float(grams.mean()), float(grams.std()) if grams.std() > 0 else 1.0, x.shape[1],
                        float(log_area.mean()), float(log_area.std()) if log_area.std() > 0 else 1.0)
    area = model._area(log_area)
    opt = T.Adam([(list(model.params.params.values()), cfg.lr)])
    rng = np.random.default_rng([cfg.seed, 13])
    target = ((grams - model.w_mean) / model.w_sd).astype(np.float32)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for s in range(0, len(x), cfg.batch):
            idx = order[s:s + cfg.batch]
            opt.zero_grad()
            xt = T.Tensor(x[idx] * np.float32(model.input_scale))
            loss = T.mse(weight_forward(model.params, xt, area[idx], cfg.leaky_slope), target[idx])
            if not np.isfinite(loss.data):
                raise T.NumericInstabilityError("non-finite weight loss")
            loss.backward()
            opt.step()
            total += float(loss.data) * len(idx)
        history.append(total / len(x))
    return model, history


def predict_weight(model, crop_dn, sg=SgConfig()):
    return float(model.predict(prepare_weight_input(crop_dn, sg)[None], [crop_log_area(crop_dn)])[0])


# --- scan processing ------------------------------------------------------

@dataclass
class BunchRecord:
    id: int
    lat: float
    lon: float
    weight_g: float
    brix: float
    acid: float
    grape_fraction: float


def bbox_patches(dn, box, stride=4):
    """8x8 patches tiling ``box`` (window-local [x0, y0, x1, y1]) of a [L, S, B] array."""
    lines, samples = dn.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box)

    def span(a, b, n):
        if b - a < PATCH:
            c = (a + b) // 2
            a = min(max(0, c - PATCH // 2), n - PATCH)
            b = a + PATCH
        return a, b

    y0, y1 = span(y0, y1, lines)
    x0, x1 = span(x0, x1, samples)
    out = [dn[l0:l0 + PATCH, s0:s0 + PATCH] for l0 in range(y0, y1 - PATCH + 1, stride)
           for s0 in range(x0, x1 - PATCH + 1, stride)]
    return np.stack(out)


class ScanSession:
    """Stateful, window-at-a-time scan processor; feed windows in line order."""

    def __init__(self, lisa_model, weight_model, cfg=None, total_lines=None, bands=None, sg=SgConfig()):
        self.cfg = cfg or PipelineConfig()
        for m, name in ((lisa_model, "LISA"), (weight_model, "weight")):
            if bands is not None and m.bands != bands:
                raise BandMismatchError(f"{name} checkpoint expects {m.bands} bands, cube has {bands}")
        self.lisa = lisa_model
        self.weight = weight_model
        self.sg = sg
        self.tracker = BunchTracker(self.cfg.iou_match, self.cfg.margin, self.cfg.max_age, total_lines)
        self.records: list[BunchRecord] = []
        self.suppressed: list[tuple] = []
        self.failed: list[tuple] = []
        self.lost: list[int] = []

    def close(self):
        """End of scan: tracks never fully framed are reported as lost (no record is emitted)."""
        self.lost = [t.id for t in self.tracker.tracks if t.state is TrackState.OPEN]
        for tid in self.lost:
            log.warning("bunch %d was never fully framed; widen the window or lower the margin", tid)
        return self.lost

    def feed(self, window, offset, detections):
        """Process one window (an HsiCube view starting at cube line ``offset``)."""
        if window.bands != self.lisa.bands:
            raise BandMismatchError(f"window has {window.bands} bands, LISA expects {self.lisa.bands}")
        boxes = [d.cube_bbox for d in detections]
        framed = self.tracker.update(boxes, (offset, offset + window.lines))
        new = []
        for t in framed:
            local = [t.bbox[0], t.bbox[1] - offset, t.bbox[2], t.bbox[3] - offset]
            try:
                rec = self._predict(t, window, local)
            except Exception as exc:  # one bad bunch must not stop the scan
                log.warning("bunch %d: prediction failed (%s)", t.id, exc)
                self.failed.append((t.id, str(exc)))
                t.advance(TrackState.SUPPRESSED)
                continue
            if rec is None:
                t.advance(TrackState.SUPPRESSED)
                continue
            t.advance(TrackState.EMITTED)
            new.append(rec)
        self.records.extend(new)
        return new

    def _predict(self, t, window, box):
        x0, y0, x1, y1 = (int(round(v)) for v in box)
        patches = bbox_patches(window.dn, box, self.cfg.patch_stride)
        q = predict_bunch_quality(self.lisa, prepare_inputs(patches, self.sg))
        if q.empty or q.grape_fraction < self.cfg.g_min:
            log.info("bunch %d suppressed: grape fraction %.3f below %.3f", t.id, q.grape_fraction, self.cfg.g_min)
            self.suppressed.append((t.id, q.grape_fraction))
            return None
        grams = predict_weight(self.weight, window.dn[y0:y1, x0:x1], self.sg)
        centre = min(max((y0 + y1) // 2, 0), window.lines - 1)
        lat, lon = window.geotags[centre]
        return BunchRecord(t.id, float(lat), float(lon), grams, q.brix_mean, q.acid_mean, q.grape_fraction)


def process_scan(cube, detections, lisa_model, weight_model, cfg=None):
    """Run the whole scan; ``detections`` is a JSONL path, a list of dicts, or a per-offset mapping."""
    cfg = cfg or PipelineConfig()
    if not isinstance(detections, dict):
        detections = ingest_detections(detections, cfg.window_lines, cube.samples)
    session = ScanSession(lisa_model, weight_model, cfg, cube.lines, cube.bands)
    for view, off in slide_windows(cube, cfg.window_lines, cfg.overlap):
        session.feed(view, off, detections.get(off, []))
    session.close()
    return sorted(session.records, key=lambda r: r.id), session


RECORD_FIELDS = ("id", "lat", "lon", "weight_g", "brix", "acid", "grape_fraction")


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else f"{v:.6f}"


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])


def write_records_geojson(records, path):
    # hand-rolled so every float keeps exactly six decimals
    feats = []
    for r in records:
        props = ", ".join(f'"{f}": {_fmt(getattr(r, f))}' for f in RECORD_FIELDS)
        feats.append('    {"type": "Feature", "geometry": {"type": "Point", "coordinates": '
                     f'[{r.lon:.6f}, {r.lat:.6f}]}}, "properties": {{{props}}}}}')
    body = ",\n".join(feats)
    Path(path).write_text('{"type": "FeatureCollection", "features": [\n' + body + "\n]}\n")


def blob_detector(window, min_area=30, close_radius=2, rel_drop=0.08):
    """Reference fixture detector (not a trained model): sugar-band contrast blobs -> boxes.

    Berries absorb near 850 nm while leaf and stem stay flat between 800 and
    850 nm, so pixels whose 850/800 ratio falls ``rel_drop`` below the scene
    median are taken as grape; a closing merges berries into bunches.
    """
    a = window.dn[..., window.band_index(850.0)].astype(np.float64)
    b = np.maximum(window.dn[..., window.band_index(800.0)].astype(np.float64), 1.0)
    ratio = ndimage.uniform_filter(a / b, size=3)
    mask = ratio < (1.0 - rel_drop) * np.median(ratio)
    mask = ndimage.binary_opening(mask, structure=np.ones((2, 2)))
    mask = ndimage.binary_closing(mask, structure=np.ones((2 * close_radius + 1,) * 2))
    labels, _ = ndimage.label(mask)
    out = []
    for sl in ndimage.find_objects(labels):
        if sl is None:
            continue
        h, w = sl[0].stop - sl[0].start, sl[1].stop - sl[1].start
        if h * w >= min_area:
            out.append([sl[1].start, sl[0].start, sl[1].stop, sl[0].stop])
    return out
