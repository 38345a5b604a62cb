import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpatch.checkpoint import (
    MAGIC,
    BadMagicError,
    Checkpoint,
    CheckpointError,
    IncompatibleCheckpointsError,
    OverlappingTensorsError,
    TruncatedDataError,
    VersionMismatchError,
    compat_check,
    interpolate,
    load,
    save,
)


def make_ckpt(seed, names=("w", "b", "scale"), stage=None):
    r = np.random.Generator(np.random.Philox(seed))
    shapes = {"w": (4, 3), "b": (3,), "scale": (1,)}
    meta = {"arch": "toy", "embed_dim": "3", "seed": str(seed)}
    if stage:
        meta["stage"] = stage
    return Checkpoint(
        {n: r.normal(size=shapes[n]).astype(np.float32) for n in names}, meta
    )


def bytes_equal(a: Checkpoint, b: Checkpoint):
    return a.names() == b.names() and all(
        a[n].tobytes() == b[n].tobytes() for n in a.names()
    )


def assert_within_one_ulp(x, y):
    x, y = np.asarray(x), np.asarray(y)
    ok = (x == y) | (np.nextafter(x, y) == y)
    assert ok.all(), f"values differ by more than 1 ulp: {x[~ok]} vs {y[~ok]}"


# ---------------------------------------------------------------- container

def test_roundtrip_single_tensor(tmp_path):
    ck = make_ckpt(0, names=("w",))
    save(ck, tmp_path / "a.mpc")
    back = load(tmp_path / "a.mpc")
    assert bytes_equal(ck, back)
    assert back.meta == ck.meta


def test_roundtrip_preserves_insertion_order(tmp_path):
    ck = Checkpoint(
        {"zz": np.zeros(2, np.float32), "aa": np.ones(3, np.float32),
         "mm": np.full(1, 2.0, np.float32)},
        {"arch": "toy", "embed_dim": "1"},
    )
    save(ck, tmp_path / "o.mpc")
    assert load(tmp_path / "o.mpc").names() == ["zz", "aa", "mm"]


def test_save_is_deterministic(tmp_path):
    ck = make_ckpt(1)
    save(ck, tmp_path / "x1.mpc")
    save(ck, tmp_path / "x2.mpc")
    assert (tmp_path / "x1.mpc").read_bytes() == (tmp_path / "x2.mpc").read_bytes()


def test_bad_magic(tmp_path):
    p = tmp_path / "bad.mpc"
    p.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(BadMagicError):
        load(p)


def test_version_mismatch(tmp_path):
    p = tmp_path / "v2.mpc"
    save(make_ckpt(2), p)
    raw = bytearray(p.read_bytes())
    raw[3] = ord("2")
    p.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        load(p)


def test_truncated_data_region(tmp_path):
    p = tmp_path / "t.mpc"
    save(make_ckpt(3), p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(TruncatedDataError):
        load(p)


def test_overlapping_extents(tmp_path):
    header = json.dumps(
        {
            "tensors": [
                {"name": "a", "shape": [2], "dtype": "f32", "offset": 0,
                 "nbytes": 8},
                {"name": "b", "shape": [2], "dtype": "f32", "offset": 4,
                 "nbytes": 8},
            ],
            "meta": {"arch": "toy", "embed_dim": "1"},
        },
        sort_keys=True, separators=(",", ":"),
    ).encode()
    p = tmp_path / "ov.mpc"
    p.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header + b"\0" * 12)
    with pytest.raises(OverlappingTensorsError):
        load(p)


def test_meta_requires_arch_and_dim():
    with pytest.raises(CheckpointError, match="arch"):
        Checkpoint({"w": np.zeros(1, np.float32)}, {"embed_dim": "1"})
    with pytest.raises(CheckpointError, match="stage"):
        Checkpoint({}, {"arch": "t", "embed_dim": "1", "stage": "bogus"})


# ---------------------------------------------------------------- compat

def test_compat_identical_ok():
    assert compat_check(make_ckpt(4), make_ckpt(5)).ok


def test_compat_missing_tensor_named():
    rep = compat_check(make_ckpt(4), make_ckpt(4, names=("w", "b")))
    assert not rep.ok and rep.missing == ["scale"]
    assert "scale" in str(rep)


def test_compat_shape_conflict_named():
    a = make_ckpt(4)
    b = make_ckpt(4)
    b.tensors["b"] = np.zeros((7,), np.float32)
    rep = compat_check(a, b)
    assert not rep.ok
    assert rep.shape_mismatches[0][0] == "b"


# ---------------------------------------------------------------- interpolate

def test_interpolate_endpoints_bit_equal():
    zs, ft = make_ckpt(10, stage="zeroshot"), make_ckpt(11, stage="finetuned")
    assert bytes_equal(interpolate(zs, ft, 0.0), zs)
    assert bytes_equal(interpolate(zs, ft, 1.0), ft)


def test_interpolate_scalar_midpoint():
    meta = {"arch": "toy", "embed_dim": "1"}
    zs = Checkpoint({"w": np.array([2.0], np.float32)}, meta)
    ft = Checkpoint({"w": np.array([4.0], np.float32)}, meta)
    out = interpolate(zs, ft, 0.5)
    assert out["w"][0] == 3.0
    assert out.meta["stage"] == "patched"
    assert out.meta["alpha"] == "0.5"


def test_interpolate_rejects_incompatible():
    with pytest.raises(IncompatibleCheckpointsError, match="missing"):
        interpolate(make_ckpt(1), make_ckpt(1, names=("w",)), 0.5)


def test_interpolate_rejects_bad_alpha():
    with pytest.raises(ValueError):
        interpolate(make_ckpt(1), make_ckpt(2), 1.5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_interpolate_linearity_and_symmetry(seed, alpha):
    zs, ft = make_ckpt(seed), make_ckpt(seed ^ 0xFFFF)
    out = interpolate(zs, ft, alpha)
    rev = interpolate(ft, zs, 1.0 - alpha)
    for name in zs.names():
        a64 = zs[name].astype(np.float64)
        b64 = ft[name].astype(np.float64)
        direct = (a64 + alpha * (b64 - a64)).astype(np.float32)
        assert_within_one_ulp(out[name], direct)
        assert_within_one_ulp(out[name], rev[name])
