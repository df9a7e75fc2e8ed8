import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spectra_invar import tensor as T
from gradcases import CASES, check_case

SEEDS = range(20)


@pytest.mark.parametrize("seed", SEEDS)
@pytest.mark.parametrize("op", sorted(CASES))
def test_gradient_matches_central_differences(op, seed):
    assert check_case(op, seed) < 1e-4


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 6, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=2, pad=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for n in range(2):
        for k in range(4):
            for i in range(3):
                for j in range(3):
                    ref[n, k, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[k]) + b[k]
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(T.ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 3, 4, 4))), T.Tensor(np.zeros((2, 4, 3, 3))), T.Tensor(np.zeros(2)))


def test_linear_shape_error():
    with pytest.raises(T.ShapeError):
        T.linear(T.Tensor(np.zeros((2, 3))), T.Tensor(np.zeros((4, 1))), T.Tensor(np.zeros(1)))


def test_backward_needs_scalar_root(leaf):
    with pytest.raises(T.ShapeError):
        T.scale(leaf(np.ones(3)), 2.0).backward()


def test_graph_cannot_be_reused(leaf):
    loss = T.sum(T.relu(leaf(np.ones((2, 2)))))
    loss.backward()
    with pytest.raises(T.GraphReusedError):
        loss.backward()


def test_shared_subgraph_accumulates(leaf):
    a = leaf([1.0, -2.0, 3.0])
    h = T.scale(a, 3.0)
    T.add(T.sum(h), T.sum(h)).backward()
    np.testing.assert_array_equal(a.grad, [6.0, 6.0, 6.0])


def test_cross_entropy_rejects_bad_class(leaf):
    with pytest.raises(ValueError):
        T.cross_entropy(leaf(np.zeros((2, 3))), [0, 3])


def test_grl_forward_identity_is_bit_exact():
    x = np.random.default_rng(0).normal(size=(5, 7)).astype(np.float32)
    out = T.grl(T.Tensor(x, requires_grad=True), 0.7)
    assert out.data.dtype == x.dtype
    assert out.data.tobytes() == x.tobytes()


def test_grl_backward_is_scaled_negation(leaf):
    x = leaf(np.arange(6.0).reshape(2, 3))
    T.sum(T.grl(x, 0.25)).backward()
    np.testing.assert_array_equal(x.grad, np.full((2, 3), -0.25))


def test_kaiming_bounds_and_seed():
    a = T.ParamStore(seed=5).kaiming("w", (64, 32), 32).data
    b = T.ParamStore(seed=5).kaiming("w", (64, 32), 32).data
    assert np.abs(a).max() <= np.sqrt(6 / 32)
    assert a.tobytes() == b.tobytes()


def test_param_store_rejects_duplicates():
    ps = T.ParamStore()
    ps.zeros("w", (2,))
    with pytest.raises(KeyError):
        ps.zeros("w", (2,))


def _adam_reference(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_matches_reference_update():
    rng = np.random.default_rng(1)
    p0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(5)]
    w = T.Tensor(p0.copy(), requires_grad=True)
    opt = T.Adam([([w], 0.01)])
    for g in grads:
        w.grad = g.copy()
        opt.step()
    np.testing.assert_allclose(w.data, _adam_reference(p0, grads, 0.01), rtol=1e-12, atol=1e-14)


def test_adam_groups_use_their_own_rate():
    a = T.Tensor(np.zeros(2), requires_grad=True)
    b = T.Tensor(np.zeros(2), requires_grad=True)
    opt = T.Adam([([a], 0.1), ([b], 0.2)])
    a.grad = np.ones(2)
    b.grad = np.ones(2)
    opt.step()
    # the first bias-corrected step moves each parameter by exactly its lr (up to eps)
    np.testing.assert_allclose(a.data, -0.1, rtol=1e-6)
    np.testing.assert_allclose(b.data, -0.2, rtol=1e-6)


def test_adam_rejects_shared_parameter():
    a = T.Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ValueError):
        T.Adam([([a], 0.1), ([a], 0.2)])


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_adam_raises_on_non_finite_gradient(bad):
    a = T.Tensor(np.zeros(3), requires_grad=True)
    a.grad = np.array([0.0, bad, 1.0])
    opt = T.Adam([([a], 0.1)])
    with pytest.raises(T.NumericInstabilityError):
        opt.step()
    np.testing.assert_array_equal(a.data, 0.0)


shapes = st.lists(st.integers(1, 4), min_size=0, max_size=3).map(tuple)


@settings(max_examples=120, deadline=None)
@given(st.dictionaries(st.text("abcdefghij._", min_size=1, max_size=12), shapes, min_size=0, max_size=4),
       st.sampled_from(["f4", "f8"]), st.integers(0, 2 ** 31 - 1))
def test_checkpoint_container_round_trips(tmp_path_factory, spec, dtype, seed):
    rng = np.random.default_rng(seed)
    arrays = {k: (rng.normal(size=s) * 10.0 ** rng.integers(-30, 30)).astype(dtype) for k, s in spec.items()}
    path = tmp_path_factory.mktemp("ck") / "a.ckpt"
    T.save_arrays(path, arrays, {"seed": seed, "note": "x"})
    back, meta = T.load_arrays(path)
    assert meta == {"seed": seed, "note": "x"}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"NOPE!" + bytes(20))
    with pytest.raises(T.CheckpointError):
        T.load_arrays(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "x.ckpt"
    T.save_arrays(p, {"w": np.ones(10)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(T.CheckpointError):
        T.load_arrays(p)


def test_param_store_save_load(tmp_path):
    ps = T.ParamStore(seed=9)
    ps.kaiming("a", (3, 2), 2)
    ps.zeros("b", (2,))
    ps.save(tmp_path / "p.ckpt")
    back = T.ParamStore.load(tmp_path / "p.ckpt")
    assert back.seed == 9
    for n in ps:
        assert back[n].data.tobytes() == ps[n].data.tobytes()
