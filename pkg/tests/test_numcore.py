import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dcfdg import numcore as nc
from dcfdg.errors import CheckpointError, ContractError, DimensionError, NumericError
from dcfdg.numcore import GaussianDiag, Tensor

from gradcheck import numeric_grad, rel_err


def _gd(mean, log_var):
    return GaussianDiag(Tensor(np.asarray(mean, float)), Tensor(np.asarray(log_var, float)))


def test_relu_and_leaky_relu_definitions():
    assert nc.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    np.testing.assert_allclose(nc.leaky_relu(Tensor([-1.0, 2.0]), 0.2).data, [-0.2, 2.0], rtol=0, atol=1e-15)


def test_backward_identity_and_square_sum():
    x = nc.parameter([3.0])
    nc.backward(x)
    assert x.grad.tolist() == [1.0]

    x = nc.parameter([1.0, 2.0])
    nc.backward(nc.sum(x * x))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_accumulates_until_zeroed():
    x = nc.parameter([1.0, 2.0])
    nc.backward(nc.sum(x * x))
    nc.backward(nc.sum(x * x))
    assert x.grad.tolist() == [4.0, 8.0]
    x.zero_grad()
    nc.backward(nc.sum(x * x))
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    x = nc.parameter([1.0, 2.0])
    with pytest.raises(ContractError):
        nc.backward(x * 2.0)


def test_shape_mismatch_names_operation_and_shapes():
    with pytest.raises(DimensionError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    with pytest.raises(DimensionError, match="add"):
        nc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4,))))
    with pytest.raises(DimensionError, match="concat"):
        nc.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)


def test_affine_gradient_matches_finite_differences(rng):
    x = nc.parameter(rng.normal(size=(5, 3)))
    w = nc.parameter(rng.normal(size=(3, 4)))
    b = nc.parameter(rng.normal(size=4))
    target = rng.normal(size=(5, 4))

    def loss():
        return nc.sum(nc.square(nc.affine(x, w, b) - target))

    nc.backward(loss())
    for p in (x, w, b):
        num = numeric_grad(lambda: loss().item(), p.data)
        assert np.linalg.norm(p.grad - num) / np.linalg.norm(num) < 1e-4


# every registered op, each wrapped into a scalar with a random projection
UNARY_OPS = {
    "exp": nc.exp,
    "log": lambda t: nc.log(nc.add(nc.square(t), 1.0)),
    "square": nc.square,
    "relu": nc.relu,
    "leaky_relu": lambda t: nc.leaky_relu(t, 0.2),
    "sigmoid": nc.sigmoid,
    "tanh": nc.tanh,
    "softplus": nc.softplus,
    "softmax": nc.softmax,
    "log_softmax": nc.log_softmax,
    "neg": nc.neg,
    "clip": lambda t: nc.clip(t, -0.5, 0.5),
    "index": lambda t: t[:, 1:3],
    "fancy_index": lambda t: t[np.array([0, 2, 2]), np.array([1, 0, 1])],
    "mean_rows": lambda t: nc.mean(t, axis=0, keepdims=True),
    "sum_cols": lambda t: nc.sum(t, axis=1),
    "mean_all": nc.mean,
    "row_norm": nc.row_norm,
    "broadcast_rows": lambda t: nc.broadcast_rows(t[0:1, :], 5),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_ops_finite_difference(name, rng):
    op = UNARY_OPS[name]
    x = nc.parameter(rng.normal(size=(4, 3)) + 0.05)
    proj = rng.normal(size=op(Tensor(x.data)).shape)

    def loss():
        return nc.sum(op(x) * proj)

    nc.backward(loss())
    num = numeric_grad(lambda: loss().item(), x.data)
    denom = max(np.linalg.norm(num), np.linalg.norm(x.grad), 1e-12)
    assert np.linalg.norm(x.grad - num) / denom < 1e-4


BINARY_OPS = {
    "add": nc.add,
    "sub": nc.sub,
    "mul": nc.mul,
    "div": lambda a, b: nc.div(a, nc.add(nc.square(b), 1.0)),
    "matmul": lambda a, b: nc.matmul(a[:, :3], b[:3, :]),
    "concat": lambda a, b: nc.concat([a, b], axis=1),
    "add_row_bias": lambda a, b: nc.add(a, b[0]),
}


@pytest.mark.parametrize("name", sorted(BINARY_OPS))
def test_binary_ops_finite_difference(name, rng):
    op = BINARY_OPS[name]
    a = nc.parameter(rng.normal(size=(4, 3)))
    b = nc.parameter(rng.normal(size=(4, 3)))
    proj = rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape)

    def loss():
        return nc.sum(op(a, b) * proj)

    nc.backward(loss())
    for p in (a, b):
        num = numeric_grad(lambda: loss().item(), p.data)
        denom = max(np.linalg.norm(num), np.linalg.norm(p.grad), 1e-12)
        assert np.linalg.norm(p.grad - num) / denom < 1e-4


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_finite_difference(training, rng):
    x = nc.parameter(rng.normal(size=(6, 3)))
    gamma = nc.parameter(rng.normal(size=3))
    beta = nc.parameter(rng.normal(size=3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    proj = rng.normal(size=(6, 3))

    def loss():
        # copies keep running-stat updates from leaking between evaluations
        return nc.sum(nc.batch_norm(x, gamma, beta, rm.copy(), rv.copy(), training) * proj)

    nc.backward(loss())
    for p in (x, gamma, beta):
        num = numeric_grad(lambda: loss().item(), p.data)
        assert np.linalg.norm(p.grad - num) / np.linalg.norm(num) < 1e-4


def test_batch_norm_running_stats_and_batch_of_one(rng):
    x = Tensor(rng.normal(size=(8, 2)))
    rm, rv = np.zeros(2), np.ones(2)
    nc.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True, momentum=0.9)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.data.var(axis=0, ddof=1), rtol=1e-12)
    with pytest.raises(DimensionError):
        nc.batch_norm(Tensor(np.zeros((1, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)


def test_no_grad_skips_graph():
    x = nc.parameter([1.0])
    with nc.no_grad():
        y = x * 2.0
    assert not y.requires_grad


# ---------------------------------------------------------------- reparameterize


def test_reparameterize_examples(rng):
    mean = rng.normal(size=(3, 2))
    g = _gd(mean, rng.normal(size=(3, 2)))
    assert np.array_equal(nc.reparameterize(g, np.zeros((3, 2))).data, mean)
    assert nc.reparameterize(_gd([[0.0]], [[0.0]]), np.ones((1, 1))).data.item() == 1.0
    with pytest.raises(DimensionError):
        nc.reparameterize(g, np.zeros((2, 2)))


def test_reparameterize_gradients_match_finite_differences(rng):
    m = nc.parameter(rng.normal(size=(3, 2)))
    lv = nc.parameter(rng.normal(size=(3, 2)))
    noise = rng.normal(size=(3, 2))
    proj = rng.normal(size=(3, 2))

    def loss():
        return nc.sum(nc.reparameterize(GaussianDiag(m, lv), noise) * proj)

    nc.backward(loss())
    # d/d mean of sum(out * proj) is proj: identity Jacobian
    np.testing.assert_allclose(m.grad, proj, rtol=1e-14)
    for p in (m, lv):
        num = numeric_grad(lambda: loss().item(), p.data)
        assert np.linalg.norm(p.grad - num) / np.linalg.norm(num) < 1e-4


def test_reparameterize_seeded_is_bit_reproducible():
    g = _gd(np.full((4, 3), 0.3), np.full((4, 3), -0.2))
    a = nc.reparameterize(g, np.random.default_rng(9).standard_normal((4, 3))).data
    b = nc.reparameterize(g, np.random.default_rng(9).standard_normal((4, 3))).data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- KL


def test_kl_examples():
    z = np.zeros((1, 1))
    assert nc.gaussian_kl(_gd(z, z), _gd(z, z)).item() == 0.0
    assert nc.gaussian_kl(_gd(np.ones((1, 1)), z), _gd(z, z)).item() == pytest.approx(0.5, abs=1e-15)


def test_kl_rejects_non_finite():
    z = np.zeros((1, 2))
    with pytest.raises(NumericError):
        nc.gaussian_kl(_gd([[np.nan, 0.0]], z), _gd(z, z))


def _mc_kl(mq, lq, mp, lp, n, rng):
    """Monte-Carlo E_q[log q(u) - log p(u)] for one row."""
    u = mq + np.exp(0.5 * lq) * rng.standard_normal((n, len(mq)))

    def logpdf(u, m, lv):
        return -0.5 * (np.log(2 * np.pi) + lv + (u - m) ** 2 / np.exp(lv)).sum(axis=1)

    return float(np.mean(logpdf(u, mq, lq) - logpdf(u, mp, lp)))


def test_kl_matches_monte_carlo(rng):
    mq, mp = rng.normal(size=8), rng.normal(size=8)
    lq, lp = rng.uniform(-1, 1, size=8), rng.uniform(-1, 1, size=8)
    closed = nc.gaussian_kl(_gd(mq[None], lq[None]), _gd(mp[None], lp[None])).item()
    assert abs(closed - _mc_kl(mq, lq, mp, lp, 10**6, rng)) < 1e-2


finite = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_kl_properties(mq, lq, mp, lp):
    q, p = _gd(mq, lq), _gd(mp, lp)
    assert nc.gaussian_kl(q, q).item() == 0.0
    assert nc.gaussian_kl(q, p).item() >= -1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (2, 6), elements=finite), arrays(np.float64, (2, 6), elements=finite),
       arrays(np.float64, (2, 6), elements=finite), arrays(np.float64, (2, 6), elements=finite),
       st.integers(1, 5))
def test_kl_additive_over_independent_blocks(mq, lq, mp, lp, cut):
    joint = nc.gaussian_kl(_gd(mq, lq), _gd(mp, lp)).item()
    left = nc.gaussian_kl(_gd(mq[:, :cut], lq[:, :cut]), _gd(mp[:, :cut], lp[:, :cut])).item()
    right = nc.gaussian_kl(_gd(mq[:, cut:], lq[:, cut:]), _gd(mp[:, cut:], lp[:, cut:])).item()
    assert abs(joint - (left + right)) <= 1e-10 * max(1.0, abs(joint))


def test_kl_gradient_finite_difference(rng):
    mq, lq = nc.parameter(rng.normal(size=(3, 4))), nc.parameter(rng.normal(size=(3, 4)))
    mp, lp = nc.parameter(rng.normal(size=(3, 4))), nc.parameter(rng.normal(size=(3, 4)))

    def loss():
        return nc.gaussian_kl(GaussianDiag(mq, lq), GaussianDiag(mp, lp))

    nc.backward(loss())
    for p in (mq, lq, mp, lp):
        num = numeric_grad(lambda: loss().item(), p.data)
        assert np.linalg.norm(p.grad - num) / np.linalg.norm(num) < 1e-4


# ---------------------------------------------------------------- Adam


def test_adam_zero_grad_leaves_params():
    p = nc.parameter([1.5, -2.0])
    p.grad = np.zeros(2)
    state = nc.AdamState(lr=0.1)
    nc.adam_step([p], state)
    assert p.data.tolist() == [1.5, -2.0]
    assert state.step == 1


def test_adam_first_step_moves_by_lr():
    p = nc.parameter([0.0])
    p.grad = np.ones(1)
    nc.adam_step([p], nc.AdamState(lr=0.1))
    assert p.data[0] == pytest.approx(-0.1, rel=1e-6)


def test_adam_missing_grad_is_contract_error():
    with pytest.raises(ContractError):
        nc.adam_step([nc.parameter([0.0])], nc.AdamState())


# Plain bias-corrected Adam at a fixed rate keeps oscillating around the
# optimum; across lr in [0.05, 2] only a narrow band near 0.45 gets inside 1e-3
# by step 100.  The example names no rate, so it is run at 0.1 and left visible.
@pytest.mark.xfail(strict=True, reason="fixed-rate Adam does not settle within 1e-3 in 100 steps at lr=0.1")
def test_adam_converges_on_quadratic():
    x = nc.parameter([0.0])
    opt = nc.Adam([x], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        nc.backward(nc.sum(nc.square(x - 3.0)))
        opt.step()
    assert abs(x.data[0] - 3.0) < 1e-3, x.data[0]


# ---------------------------------------------------------------- container


def test_container_roundtrip_and_errors(tmp_path, rng):
    arrays = {"a": rng.normal(size=(2, 3)), "b": np.arange(4.0)}
    path = tmp_path / "c.bin"
    nc.save_container(path, arrays, {"k": 1})
    back, meta = nc.load_container(path)
    assert meta == {"k": 1}
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    blob = path.read_bytes()
    (tmp_path / "trunc.bin").write_bytes(blob[:-5])
    with pytest.raises(CheckpointError, match="corrupt"):
        nc.load_container(tmp_path / "trunc.bin")
    (tmp_path / "v.bin").write_bytes(blob.replace(b"dcfdg-ckpt-1", b"dcfdg-ckpt-9"))
    with pytest.raises(CheckpointError, match="version"):
        nc.load_container(tmp_path / "v.bin")


def test_rel_err_helper():
    assert rel_err(1.0, 1.0) == 0.0
