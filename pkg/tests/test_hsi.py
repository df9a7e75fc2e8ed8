import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectra_invar.hsi import (CUBE_MAGIC, FIELD_AM, FIELD_PM, LAB, BadMagicError, DomainLabel, HsiCube,
                               SizeMismatchError, TruncatedPayloadError, default_wavelengths, extract_patches,
                               patch_offsets, pseudo_rgb, read_cube, write_cube)


def make_cube(lines=10, samples=12, bands=224, seed=0, domain=LAB, meta=None):
    rng = np.random.default_rng(seed)
    return HsiCube(rng.integers(0, 65536, size=(lines, samples, bands), dtype=np.uint16),
                   default_wavelengths(bands), np.c_[np.linspace(50, 50.001, lines), np.full(lines, 5.2)],
                   domain, meta or {"cube_id": "c0"})


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 40), st.integers(0, 2 ** 32 - 1),
       st.sampled_from([LAB, FIELD_AM, FIELD_PM, DomainLabel("greenhouse")]),
       st.dictionaries(st.text(min_size=1, max_size=6), st.one_of(st.integers(), st.text(max_size=8)), max_size=3))
def test_cube_round_trip(tmp_path_factory, lines, samples, bands, seed, domain, meta):
    cube = make_cube(lines, samples, bands, seed, domain, meta)
    path = tmp_path_factory.mktemp("cube") / "c.hsic"
    write_cube(cube, path)
    back = read_cube(path)
    assert back == cube
    assert back.dn.dtype == np.uint16


def test_header_is_little_endian_u64(tmp_path):
    cube = make_cube(2, 3, 16)
    write_cube(cube, tmp_path / "c.hsic")
    blob = (tmp_path / "c.hsic").read_bytes()
    assert blob.startswith(CUBE_MAGIC)
    (hlen,) = struct.unpack("<Q", blob[6:14])
    header = json.loads(blob[14:14 + hlen])
    assert header["payload_bytes"] == 2 * 3 * 16 * 2
    assert len(blob) == 14 + hlen + header["payload_bytes"]


def test_bad_magic(tmp_path):
    (tmp_path / "c.hsic").write_bytes(b"ENVI..." + bytes(32))
    with pytest.raises(BadMagicError):
        read_cube(tmp_path / "c.hsic")


def test_truncated_payload(tmp_path):
    write_cube(make_cube(), tmp_path / "c.hsic")
    blob = (tmp_path / "c.hsic").read_bytes()
    (tmp_path / "c.hsic").write_bytes(blob[:-3])
    with pytest.raises(TruncatedPayloadError):
        read_cube(tmp_path / "c.hsic")


def test_header_payload_disagreement(tmp_path):
    cube = make_cube(4, 4, 16)
    write_cube(cube, tmp_path / "c.hsic")
    blob = (tmp_path / "c.hsic").read_bytes()
    (hlen,) = struct.unpack("<Q", blob[6:14])
    header = json.loads(blob[14:14 + hlen])
    header["lines"] = 3  # payload still holds four lines
    header["geotags"] = header["geotags"][:3]
    raw = json.dumps(header).encode()
    (tmp_path / "c.hsic").write_bytes(CUBE_MAGIC + struct.pack("<Q", len(raw)) + raw + blob[14 + hlen:])
    with pytest.raises(SizeMismatchError):
        read_cube(tmp_path / "c.hsic")


def test_cube_validation():
    with pytest.raises(TypeError):
        HsiCube(np.zeros((2, 2, 3)), default_wavelengths(3), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        HsiCube(np.zeros((2, 2, 3), np.uint16), [400, 500, 450], np.zeros((2, 2)))
    with pytest.raises(ValueError):
        HsiCube(np.zeros((2, 2, 3), np.uint16), default_wavelengths(3), np.zeros((3, 2)))


def test_domain_label_parse():
    assert DomainLabel.parse("Field_AM") == FIELD_AM
    with pytest.raises(ValueError):
        DomainLabel.parse("")


def test_pseudo_rgb_band_mapping_and_scaling():
    cube = make_cube(4, 5, 224, seed=2)
    rgb = pseudo_rgb(cube)
    assert rgb.dtype == np.uint8 and rgb.shape == (4, 5, 3)
    for ch, band in enumerate((114, 58, 20)):
        x = cube.dn[..., band].astype(float)
        expect = np.round((x - x.min()) * 255 / (x.max() - x.min()))
        np.testing.assert_array_equal(rgb[..., ch], expect)
        assert rgb[..., ch].min() == 0 and rgb[..., ch].max() == 255


def test_pseudo_rgb_constant_channel_is_zero():
    cube = make_cube(3, 3, 224)
    cube.dn[..., 58] = 1234
    assert not pseudo_rgb(cube)[..., 1].any()


def test_pseudo_rgb_needs_enough_bands():
    with pytest.raises(ValueError):
        pseudo_rgb(make_cube(2, 2, 100))


def test_patch_grid():
    assert patch_offsets(16, 24, 8) == [(0, 0), (0, 8), (0, 16), (8, 0), (8, 8), (8, 16)]
    assert len(patch_offsets(17, 8, 8)) == 2
    with pytest.raises(ValueError):
        patch_offsets(7, 8, 8)


def test_extract_patches_labels():
    cube = make_cube(16, 16, 20)
    labels = [{"cube_id": "c0", "rect": [0, 0, 8, 12], "brix": 21.0, "acid": 6.0, "is_grape": True, "bunch_id": 3}]
    patches = extract_patches(cube, 8, labels)
    assert len(patches) == 4
    assert patches[0].brix == 21.0 and patches[0].is_grape and patches[0].bunch_id == 3
    # (0, 8) is covered 4 of 8 columns: exactly half counts
    assert patches[1].brix == 21.0
    assert patches[2].brix is None and not patches[2].is_grape
    np.testing.assert_array_equal(patches[3].data, cube.dn[8:16, 8:16].astype(np.float32))
