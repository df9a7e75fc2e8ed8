"""Hyperspectral cube model, the HSIC1 file format, pseudo-RGB and patch extraction."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PATCH = 8
CUBE_MAGIC = b"HSIC1\n"
RGB_BANDS = (114, 58, 20)


class CubeFormatError(ValueError):
    pass


class BadMagicError(CubeFormatError):
    pass


class TruncatedPayloadError(CubeFormatError):
    pass


class SizeMismatchError(CubeFormatError):
    pass


@dataclass(frozen=True)
class DomainLabel:
    """Acquisition domain. ``name`` is one of lab / field_am / field_pm, or a free lowercase tag."""

    name: str

    def __post_init__(self):
        if not self.name or self.name != self.name.lower() or not self.name.strip():
            raise ValueError(f"domain tag must be non-empty lowercase, got {self.name!r}")

    @classmethod
    def parse(cls, text):
        key = str(text).strip().lower().replace("-", "_")
        return KNOWN_DOMAINS.get(key, None) or cls(key)

    @property
    def is_other(self):
        return self.name not in KNOWN_DOMAINS

    def __str__(self):
        return self.name


LAB = DomainLabel("lab")
FIELD_AM = DomainLabel("field_am")
FIELD_PM = DomainLabel("field_pm")
KNOWN_DOMAINS = {"lab": LAB, "field_am": FIELD_AM, "field_pm": FIELD_PM}


def default_wavelengths(bands=224):
    return np.linspace(400.0, 1000.0, bands)


@dataclass(eq=False)
class HsiCube:
    dn: np.ndarray  # uint16 [lines, samples, bands]
    wavelengths_nm: np.ndarray
    geotags: np.ndarray  # [lines, 2] (lat, lon)
    domain: DomainLabel = LAB
    capture_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.dn = np.asarray(self.dn)
        if self.dn.dtype != np.uint16:
            raise TypeError(f"dn must be uint16, got {self.dn.dtype}")
        if self.dn.ndim != 3:
            raise ValueError(f"dn must be [lines, samples, bands], got shape {self.dn.shape}")
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=np.float64)
        self.geotags = np.asarray(self.geotags, dtype=np.float64).reshape(-1, 2)
        wl = self.wavelengths_nm
        if wl.shape != (self.bands,):
            raise ValueError(f"{wl.size} wavelengths for {self.bands} bands")
        if np.any(np.diff(wl) <= 0) or wl[0] < 400 or wl[-1] > 1000:
            raise ValueError("wavelengths must be strictly increasing within [400, 1000] nm")
        if len(self.geotags) != self.lines:
            raise ValueError(f"{len(self.geotags)} geotags for {self.lines} lines")

    @property
    def lines(self):
        return self.dn.shape[0]

    @property
    def samples(self):
        return self.dn.shape[1]

    @property
    def bands(self):
        return self.dn.shape[2]

    @property
    def cube_id(self):
        return str(self.capture_meta.get("cube_id", ""))

    def band_index(self, nm):
        return int(np.argmin(np.abs(self.wavelengths_nm - nm)))

    def __eq__(self, other):
        if not isinstance(other, HsiCube):
            return NotImplemented
        return (np.array_equal(self.dn, other.dn)
                and np.array_equal(self.wavelengths_nm, other.wavelengths_nm)
                and np.array_equal(self.geotags, other.geotags)
                and self.domain == other.domain
                and self.capture_meta == other.capture_meta)


@dataclass(eq=False)
class SpectralPatch:
    data: np.ndarray  # float [8, 8, bands]
    brix: float | None = None
    acid: float | None = None
    is_grape: bool = True
    domain: DomainLabel = LAB
    source: tuple = ("", 0, 0)
    bunch_id: int | None = None

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[:2] != (PATCH, PATCH):
            raise ValueError(f"patch must be 8x8xB, got {self.data.shape}")


def write_cube(cube, path):
    header = {
        "lines": cube.lines,
        "samples": cube.samples,
        "bands": cube.bands,
        "dtype": "u16",
        "wavelengths_nm": [float(w) for w in cube.wavelengths_nm],
        "domain": cube.domain.name,
        "geotags": [[float(a), float(b)] for a, b in cube.geotags],
        "meta": cube.capture_meta,
        "payload_bytes": cube.dn.size * 2,
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(cube.dn, dtype="<u2").tobytes())


def read_cube(path):
    blob = Path(path).read_bytes()
    if blob[:len(CUBE_MAGIC)] != CUBE_MAGIC:
        raise BadMagicError(f"{path}: missing HSIC1 magic")
    pos = len(CUBE_MAGIC)
    if len(blob) < pos + 8:
        raise TruncatedPayloadError(f"{path}: header length field is cut off")
    (hlen,) = struct.unpack("<Q", blob[pos:pos + 8])
    pos += 8
    if len(blob) < pos + hlen:
        raise TruncatedPayloadError(f"{path}: header is cut off")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CubeFormatError(f"{path}: header is not valid JSON") from exc
    payload = blob[pos + hlen:]
    lines, samples, bands = header["lines"], header["samples"], header["bands"]
    expected = lines * samples * bands * 2
    declared = header.get("payload_bytes", expected)
    if len(payload) < declared:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} of {declared} bytes")
    if declared != expected or len(payload) != expected:
        raise SizeMismatchError(f"{path}: header implies {expected} payload bytes "
                                f"({lines}x{samples}x{bands} u16), file carries {len(payload)}")
    if len(header["wavelengths_nm"]) != bands:
        raise SizeMismatchError(f"{path}: {len(header['wavelengths_nm'])} wavelengths but {bands} bands declared")
    dn = np.frombuffer(payload, dtype="<u2").reshape(lines, samples, bands).astype(np.uint16)
    return HsiCube(
        dn=dn,
        wavelengths_nm=np.array(header["wavelengths_nm"]),
        geotags=np.array(header["geotags"], dtype=np.float64).reshape(-1, 2),
        domain=DomainLabel.parse(header["domain"]),
        capture_meta=header.get("meta", {}),
    )


def _minmax_u8(channel):
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return np.zeros(channel.shape, dtype=np.uint8)
    return np.round((channel - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def pseudo_rgb(cube):
    """8-bit visualisation: R <- band 114, G <- band 58, B <- band 20 (0-based), min-max per channel."""
    dn = cube.dn if isinstance(cube, HsiCube) else np.asarray(cube)
    if dn.shape[-1] <= max(RGB_BANDS):
        raise ValueError(f"pseudo_rgb needs at least {max(RGB_BANDS) + 1} bands, got {dn.shape[-1]}")
    return np.stack([_minmax_u8(dn[..., b].astype(np.float64)) for b in RGB_BANDS], axis=-1)


def patch_offsets(lines, samples, stride):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if lines < PATCH or samples < PATCH:
        raise ValueError(f"cube {lines}x{samples} is smaller than one {PATCH}x{PATCH} patch")
    return [(l0, s0) for l0 in range(0, lines - PATCH + 1, stride) for s0 in range(0, samples - PATCH + 1, stride)]


def load_annotations(path):
    """Annotation JSON: list of {cube_id, rect: [line0, sample0, lines, samples], brix, acid, is_grape}."""
    return json.loads(Path(path).read_text())


def _coverage(l0, s0, rect):
    a0, b0, al, bs = rect
    dl = max(0, min(l0 + PATCH, a0 + al) - max(l0, a0))
    ds = max(0, min(s0 + PATCH, b0 + bs) - max(s0, b0))
    return dl * ds / float(PATCH * PATCH)


def extract_patches(cube, stride=PATCH, labels=None, min_coverage=0.5):
    """Tile ``cube`` with 8x8 patches; a patch takes the labels of the first annotation covering >= half of it."""
    offsets = patch_offsets(cube.lines, cube.samples, stride)
    regions = [a for a in (labels or []) if a.get("cube_id", cube.cube_id) == cube.cube_id]
    out = []
    for l0, s0 in offsets:
        data = cube.dn[l0:l0 + PATCH, s0:s0 + PATCH, :].astype(np.float32)
        brix = acid = None
        is_grape = False
        bunch = None
        for reg in regions:
            if _coverage(l0, s0, reg["rect"]) >= min_coverage:
                brix, acid = reg.get("brix"), reg.get("acid")
                is_grape = bool(reg.get("is_grape", True))
                bunch = reg.get("bunch_id")
                break
        out.append(SpectralPatch(data=data, brix=brix, acid=acid, is_grape=is_grape,
                                 domain=cube.domain, source=(cube.cube_id, l0, s0), bunch_id=bunch))
    return out
