import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcstra.data import build_dataset
from mcstra.fourier import random_line_mask
from mcstra.io import (
    decode_checkpoint,
    decode_cras,
    decode_pgm16,
    encode_checkpoint,
    encode_cras,
    encode_pgm16,
    read_dataset,
    read_mask,
    write_dataset,
    write_mask,
)


@given(h=st.sampled_from([2, 4, 8]), w=st.sampled_from([2, 4, 16]), seed=st.integers(0, 2**32))
@settings(max_examples=20, deadline=None)
def test_cras_roundtrip(h, w, seed):
    rng = np.random.default_rng(seed)
    x = (rng.normal(size=(h, w)) + 1j * rng.normal(size=(h, w))).astype(np.complex64)
    np.testing.assert_array_equal(decode_cras(encode_cras(x)), x)


def test_cras_errors():
    buf = encode_cras(np.ones((4, 4)))
    with pytest.raises(ValueError, match="bad magic"):
        decode_cras(b"XXXX0001" + buf[8:])
    with pytest.raises(ValueError, match="expected"):
        decode_cras(buf[:-1])
    with pytest.raises(ValueError):
        encode_cras(np.ones((3, 4)))


def test_mask_file_roundtrip(tmp_path):
    m = random_line_mask(64, 4, 0.08, 2)
    write_mask(tmp_path / "m.txt", m)
    assert np.array_equal(read_mask(tmp_path / "m.txt").lines, m.lines)
    (tmp_path / "bad.txt").write_text("01x0\n")
    with pytest.raises(ValueError, match="bad.txt"):
        read_mask(tmp_path / "bad.txt")


def test_pgm_header_and_scaling():
    img = np.array([[0.0, 0.5], [1.0, 2.0]])
    buf = encode_pgm16(img, max_value=1.0)
    assert buf.startswith(b"P5\n2 2\n65535\n")
    px = decode_pgm16(buf)
    assert px.tolist() == [[0, 32768], [65535, 65535]]


def test_checkpoint_roundtrip_and_validation():
    items = [("a", np.arange(6, dtype=np.float32).reshape(2, 3)), ("b.c", np.float32(2.5) * np.ones(()))]
    buf = encode_checkpoint(items)
    back = decode_checkpoint(buf)
    assert [n for n, _ in back] == ["a", "b.c"]
    for (_, x), (_, y) in zip(items, back):
        np.testing.assert_array_equal(x, y)
    assert encode_checkpoint(back) == buf
    with pytest.raises(ValueError, match="magic"):
        decode_checkpoint(b"MCKP0002" + buf[8:])
    with pytest.raises(ValueError, match="truncated"):
        decode_checkpoint(buf[:-3])
    with pytest.raises(ValueError, match="trailing"):
        decode_checkpoint(buf + b"\0")


def test_dataset_directory_roundtrip(tmp_path):
    ds = build_dataset(3, 2, 16, 16, seed=1)
    write_dataset(tmp_path, ds)
    lines = (tmp_path / "manifest.txt").read_text().splitlines()
    assert len(lines) == 6 and lines[0].count(",") == 3
    back = read_dataset(tmp_path, seed=1)
    for a, b in zip(ds.records, back.records):
        assert (a.volume_id, a.slice_index, a.split) == (b.volume_id, b.slice_index, b.split)
        np.testing.assert_allclose(a.image, b.image, atol=1e-6)
    assert not list(tmp_path.glob(".*"))  # no temp files left behind
