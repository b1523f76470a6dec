import struct

import numpy as np
import pytest

from gradcases import CASES, run_case
from pctrees import tensor as T
from pctrees.errors import FormatError, LabelOutOfRange, ShapeMismatch
from pctrees.tensor import Tensor


# ---------------------------------------------------------------- gradients vs finite differences

@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_double_precision(name, seed):
    report = run_case(name, seed, np.float64, 1e-5)
    assert report.passed, report


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradients_single_precision(name):
    report = run_case(name, 7, np.float32, 1e-2)
    assert report.passed, report


def test_grad_check_flags_a_wrong_gradient():
    def bad_square(x):
        # forward x**2 but backward claims 3x
        return T.sum_over(T._make(x.data ** 2, (x,), lambda g: (3.0 * x.data * g,)))

    report = T.grad_check(bad_square, np.array([1.0, -2.0, 0.5]))
    assert not report.passed
    assert report.max_rel_error == pytest.approx(1 / 3, rel=1e-4)


def test_grad_check_steps_past_a_nearby_kink():
    # relu has a kink 1e-7 away; the default 1e-6 step straddles it
    x = np.array([1e-7, 0.5])
    report = T.grad_check(lambda t: T.sum_over(T.relu(t)), x, tolerance=1e-5)
    assert report.passed
    np.testing.assert_allclose(report.numeric, [1.0, 1.0], rtol=1e-6)


def test_grad_check_still_flags_a_wrong_gradient_at_a_kink():
    def bad_relu(t):
        return T.sum_over(T._make(np.maximum(t.data, 0), (t,), lambda g: (0.5 * (t.data > 0) * g,)))

    assert not T.grad_check(bad_relu, np.array([1e-7, 0.5]), tolerance=1e-5).passed


# ---------------------------------------------------------------- graph mechanics

def test_shared_subexpression_gradients_accumulate():
    x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
    y = x * x + x          # dy/dx = 2x + 1
    T.sum_over(y * y).backward()
    expected = 2 * (x.data ** 2 + x.data) * (2 * x.data + 1)
    np.testing.assert_allclose(x.grad, expected)


def test_leaf_grad_accumulates_across_backward_calls():
    x = Tensor(np.ones(3), requires_grad=True)
    T.sum_over(x * 2.0).backward()
    T.sum_over(x * 3.0).backward()
    np.testing.assert_allclose(x.grad, 5.0)


def test_broadcast_gradient_reduces_to_parameter_shape():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    T.sum_over(x + b).backward()
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, 4.0)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert y._parents == ()


def test_backward_needs_scalar_or_explicit_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeMismatch):
        (x * 2.0).backward()
    (x * 2.0).backward(np.ones(3))
    np.testing.assert_allclose(x.grad, 2.0)


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32))
    assert (x * 0.5 + 1.0).dtype == np.float32
    assert T.softmax(x).dtype == np.float32


def test_default_dtype_switch():
    with T.default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


# ---------------------------------------------------------------- forward oracles

def _conv_brute(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for i in range(n):
        for o in range(f):
            for r in range(oh):
                for s in range(ow):
                    patch = xp[i, :, r * stride:r * stride + kh, s * stride:s * stride + kw]
                    out[i, o, r, s] = (patch * w[o]).sum() + (b[o] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (2, 3, 7), (1, 0, 1), (2, 0, 1)])
def test_conv2d_matches_direct_loops(rng, stride, pad, k):
    x = rng.normal(size=(2, 3, 9, 8))
    w = rng.normal(size=(4, 3, k, k))
    b = rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, _conv_brute(x, w, b, stride, pad), atol=1e-10)


def test_maxpool_matches_direct_loops(rng):
    x = rng.normal(size=(2, 3, 7, 6))
    got = T.maxpool2d(Tensor(x), 3, 2, 1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), constant_values=-np.inf)
    oh, ow = (7 + 2 - 3) // 2 + 1, (6 + 2 - 3) // 2 + 1
    want = np.array([[[[xp[i, c, 2 * r:2 * r + 3, 2 * s:2 * s + 3].max() for s in range(ow)]
                       for r in range(oh)] for c in range(3)] for i in range(2)])
    np.testing.assert_array_equal(got, want)


def test_batchnorm_training_statistics_and_running_update(rng):
    x = rng.normal(loc=3.0, scale=2.0, size=(50, 4))
    rm, rv = np.zeros(4), np.ones(4)
    out = T.batchnorm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, -1, True).data
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=0), x.var(axis=0) / (x.var(axis=0) + 1e-5), rtol=1e-9)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_batchnorm_eval_uses_running_statistics():
    x = np.array([[1.0, 2.0], [3.0, 6.0]])
    rm, rv = np.array([1.0, 2.0]), np.array([4.0, 16.0])
    out = T.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, -1, False, eps=0.0).data
    np.testing.assert_allclose(out, [[0.0, 0.0], [1.0, 1.0]])


def test_softmax_rows_sum_to_one_even_for_huge_logits(rng):
    x = rng.normal(scale=300.0, size=(20, 7))
    p = T.softmax(Tensor(x)).data
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


def test_cross_entropy_value_and_label_range():
    logits = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0]])
    loss = T.cross_entropy(Tensor(logits), [0, 2]).data
    lse0 = np.log(np.exp(logits[0]).sum())
    assert float(loss) == pytest.approx(((lse0 - 2.0) + np.log(3.0)) / 2)
    with pytest.raises(LabelOutOfRange):
        T.cross_entropy(Tensor(logits), [0, 3])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_max_over_gradient_goes_to_first_maximum():
    x = Tensor(np.array([[1.0, 5.0, 5.0, 2.0]]), requires_grad=True)
    T.sum_over(T.max_over(x, dim=1)).backward()
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0, 0.0, 0.0]])


def test_grouped_linear_equals_explicit_concat(rng):
    x = rng.normal(size=(2, 9, 4))
    w = rng.normal(size=(8, 5))
    nbrs = rng.integers(0, 9, size=(2, 3, 4))
    centers = rng.integers(0, 9, size=(2, 3))
    got = T.grouped_linear(Tensor(x), Tensor(w), nbrs, centers).data
    xn = np.take_along_axis(x[:, :, None, :], nbrs.reshape(2, -1)[:, :, None, None], axis=1).reshape(2, 3, 4, 4)
    xc = np.take_along_axis(x, centers[..., None], axis=1)[:, :, None, :]
    want = np.concatenate([xn, xn - xc], axis=-1) @ w
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_dropout_identity_in_eval_and_scaled_in_train(rng):
    x = Tensor(np.ones((200, 50)))
    assert T.dropout(x, 0.5, False, rng) is x
    y = T.dropout(x, 0.5, True, rng).data
    assert set(np.unique(y)) <= {0.0, 2.0}
    assert abs(y.mean() - 1.0) < 0.05


# ---------------------------------------------------------------- optimizers

def test_adam_first_step_moves_by_lr_times_sign():
    p = np.array([1.0, -2.0, 3.0])
    g = np.array([0.5, -4.0, 1e-3])
    state = T.AdamState.zeros_like([p])
    T.adam_step([p], [g], state, lr=0.1, eps=0.0)
    # bias correction makes the first update exactly lr * g / |g|
    np.testing.assert_allclose(p, [0.9, -1.9, 2.9])


def test_adam_matches_reference_recurrence(rng):
    p = rng.normal(size=5)
    ref = p.copy()
    state = T.AdamState.zeros_like([p])
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 6):
        g = rng.normal(size=5)
        T.adam_step([p], [g], state, lr=1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p, ref, rtol=1e-12)


@pytest.mark.parametrize("opt_cls", [T.Adam, T.SGD])
def test_optimizers_minimize_a_quadratic(opt_cls):
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = opt_cls([w], lr=0.05)
    for _ in range(300):
        opt.zero_grad()
        T.sum_over(w * w).backward()
        opt.step()
    assert np.abs(w.data).max() < 0.05


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path, rng):
    named = [("a.weight", rng.normal(size=(3, 4)).astype(np.float32)),
             ("b", np.arange(5, dtype=np.float32)),
             ("scalar_like", np.ones((1,), dtype=np.float32))]
    path = tmp_path / "m.pctw"
    T.save_checkpoint(path, named)
    back = T.load_checkpoint(path)
    assert list(back) == [n for n, _ in named]
    for n, arr in named:
        np.testing.assert_array_equal(back[n], arr)


def test_checkpoint_layout_is_little_endian(tmp_path):
    path = tmp_path / "m.pctw"
    T.save_checkpoint(path, [("w", np.array([1.5, -2.0], dtype=np.float32))])
    buf = path.read_bytes()
    assert buf[:4] == b"PCTW"
    assert struct.unpack_from("<I", buf, 4)[0] == 1
    assert buf[-8:] == np.array([1.5, -2.0], dtype="<f4").tobytes()


def test_checkpoint_rejects_bad_files(tmp_path):
    bad = tmp_path / "bad.pctw"
    bad.write_bytes(b"NOPE1234")
    with pytest.raises(FormatError):
        T.load_checkpoint(bad)
    good = tmp_path / "good.pctw"
    T.save_checkpoint(good, [("w", np.ones((4, 4), dtype=np.float32))])
    truncated = tmp_path / "trunc.pctw"
    truncated.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(FormatError):
        T.load_checkpoint(truncated)
