import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from atunlearn.nets import MLP
from atunlearn.params import (
    BadMagicError,
    Checkpoint,
    CheckpointMeta,
    LayoutError,
    SchemaVersionError,
    TruncatedCheckpointError,
    affine_combine,
    dumps_checkpoint,
    flatten,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
    sq_distance,
    unflatten,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def test_flatten_layout_is_lexicographic():
    pv = flatten({"w": np.ones((2, 2)), "b": np.zeros(2)})
    assert pv.values.size == 6
    assert [(s.name, s.shape, s.offset) for s in pv.layout] == [("b", (2,), 0), ("w", (2, 2), 2)]
    np.testing.assert_array_equal(pv.values, [0, 0, 1, 1, 1, 1])


def test_flatten_empty():
    pv = flatten({})
    assert pv.values.size == 0 and pv.layout == ()


def test_duplicate_names_rejected():
    with pytest.raises(ValueError):
        flatten([("a", np.ones(2)), ("a", np.zeros(1))])


def test_values_are_read_only():
    pv = flatten({"a": np.ones(3)})
    with pytest.raises(ValueError):
        pv.values[0] = 5.0


def test_round_trip_three_layer_perceptron():
    net = MLP([4, 16, 16, 3])
    theta = net.init_params(np.random.default_rng(7))
    pv = net.to_vector(theta)
    again = flatten(unflatten(pv))
    np.testing.assert_array_equal(again.values, pv.values)
    assert again.layout == pv.layout


@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.integers(0, 2**32 - 1))
def test_sq_distance_matches_loop(a, seed):
    b = a + np.random.default_rng(seed).standard_normal(a.size)
    pa, pb = flatten({"x": a}), flatten({"x": b})
    loop = 0.0
    for i in range(a.size):
        loop += (float(a[i]) - float(b[i])) ** 2
    assert sq_distance(pa, pb) == pytest.approx(loop, rel=1e-12, abs=1e-12)


def test_sq_distance_trivial_cases():
    a = flatten({"x": np.zeros(5)})
    assert sq_distance(a, a) == 0.0
    assert sq_distance(a, a.with_values(np.eye(5)[2])) == 1.0


def test_sq_distance_100_dim_against_loop(rng):
    a, b = rng.standard_normal(100), rng.standard_normal(100)
    loop = sum((x - y) ** 2 for x, y in zip(a.tolist(), b.tolist()))
    assert abs(sq_distance(flatten({"x": a}), flatten({"x": b})) - loop) / loop < 1e-12


def test_layout_mismatch_raises():
    with pytest.raises(LayoutError):
        sq_distance(flatten({"x": np.zeros(3)}), flatten({"y": np.zeros(3)}))
    with pytest.raises(LayoutError):
        affine_combine(flatten({"x": np.zeros(3)}), flatten({"x": np.zeros(4)}), 0.5)


def test_affine_combine_endpoints_and_midpoint():
    a = flatten({"v": np.array([0.0, 0.0])})
    b = flatten({"v": np.array([2.0, 4.0])})
    assert affine_combine(a, b, 0) is a
    assert affine_combine(a, b, 1) is b
    np.testing.assert_array_equal(affine_combine(a, b, 0.5).values, [1.0, 2.0])
    np.testing.assert_array_equal(affine_combine(a, b, 2.0).values, [4.0, 8.0])


@settings(max_examples=30)
@given(arrays(np.float32, st.integers(1, 30), elements=finite), st.integers(0, 10**6), st.text(st.characters(blacklist_characters="\n", blacklist_categories=("Cs",)), max_size=20))
def test_checkpoint_round_trip(values, step, arch):
    meta = CheckpointMeta(arch or "net", "adapted", seed=5, step=step, extra=(("run", "1"),))
    ckpt = Checkpoint(flatten({"layer0.weight": values}), meta)
    back = loads_checkpoint(dumps_checkpoint(ckpt))
    assert back == ckpt
    np.testing.assert_array_equal(back.params.values, ckpt.params.values)


def test_checkpoint_file_round_trip(tmp_path, rng):
    net = MLP([2, 5, 2])
    ckpt = Checkpoint(net.to_vector(net.init_params(rng)), CheckpointMeta("generator;x", "pretrained", 1, 2))
    save_checkpoint(ckpt, tmp_path / "c.atuc")
    assert load_checkpoint(tmp_path / "c.atuc") == ckpt


def _blob():
    return dumps_checkpoint(Checkpoint(flatten({"a": np.arange(8.0)}), CheckpointMeta("x", "pretrained")))


def test_bad_magic():
    with pytest.raises(BadMagicError) as exc:
        loads_checkpoint(b"XXXX" + _blob()[4:])
    assert exc.value.code


def test_truncated_mid_tensor():
    blob = _blob()
    with pytest.raises(TruncatedCheckpointError):
        loads_checkpoint(blob[:-5])


def test_unknown_schema_version():
    blob = bytearray(_blob())
    blob[4:8] = (99).to_bytes(4, "little")
    with pytest.raises(SchemaVersionError):
        loads_checkpoint(bytes(blob))


def test_error_codes_are_distinct():
    codes = {BadMagicError.code, SchemaVersionError.code, TruncatedCheckpointError.code}
    assert len(codes) == 3
