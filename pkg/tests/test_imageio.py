import numpy as np
import pytest

from dropin.imageio import read_pfm, read_png, write_pfm, write_png


def test_pfm_round_trip(tmp_path, rng):
    img = rng.random((12, 17, 3)).astype(np.float32) * 10.0
    path = tmp_path / "map.pfm"
    write_pfm(path, img)
    back = read_pfm(path)
    assert back.shape == (12, 17, 3)
    assert np.allclose(back, img, atol=1e-6)
    with open(path, "rb") as fh:
        assert fh.readline().strip() == b"PF"
        assert fh.readline().split() == [b"17", b"12"]
        assert float(fh.readline()) == -1.0


def test_pfm_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.pfm"
    p.write_bytes(b"PX\n2 2\n-1.0\n" + b"\0" * 48)
    with pytest.raises(ValueError):
        read_pfm(p)


def test_png_round_trip(tmp_path, rng):
    img = (rng.random((9, 11, 3)) * 255).astype(np.uint8)
    path = tmp_path / "img.png"
    write_png(path, img)
    assert np.array_equal(read_png(path), img)


def test_png_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_png(tmp_path / "nope.png")
