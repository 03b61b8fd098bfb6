from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocsp import autodiff as ad
from geocsp.autodiff import Adam, AdamState, Tape, Tensor, adam_step, finite_difference_check
from geocsp.errors import ConfigError, DegenerateInputError, NumericError, ShapeError, UsageError

finite = st.floats(-50, 50, allow_nan=False)


def test_cosine_examples():
    assert ad.cosine_similarity([1.0, 0.0], [1.0, 0.0]) == 1.0
    assert ad.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert ad.cosine_similarity([1.0, 0.0], [1.0, 1.0]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ShapeError):
        ad.cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(DegenerateInputError):
        ad.cosine_similarity([0.0, 0.0], [0.0, 0.0])
    # one zero vector is allowed and scores 0
    assert ad.cosine_similarity([0.0, 0.0], [1.0, 2.0]) == 0.0


def test_cosine_identical_rows_exactly_one(rng):
    a = rng.standard_normal((50, 16))
    s = ad.pair_cosine(Tensor(a), Tensor(a.copy()), np.arange(50), np.arange(50)).data
    assert np.all(s == 1.0)


def test_log_sigmoid_examples():
    assert ad.log_sigmoid(0.0) == pytest.approx(-math.log(2), abs=1e-15)
    assert ad.log_sigmoid(-100.0) == pytest.approx(-100.0, abs=1e-12)
    big = ad.log_sigmoid(100.0)
    assert -1e-40 <= big <= 0 and big != 0.0


def test_log_sigmoid_rejects_non_finite():
    with pytest.raises(NumericError):
        ad.log_sigmoid(float("inf"))
    with pytest.raises(NumericError):
        ad.log_sigmoid(Tensor(np.array([0.0, np.nan])))


@given(finite)
def test_log_sigmoid_identities(x):
    a, b = ad.log_sigmoid(x), ad.log_sigmoid(-x)
    # log(s(1-s)) = -|x| - 2 log(1 + e^-|x|), evaluated without cancellation
    expected = -abs(x) - 2 * math.log1p(math.exp(-abs(x)))
    assert a + b == pytest.approx(expected, abs=1e-12)
    assert a <= min(0.0, x)


def test_log_softmax_entry_examples():
    assert ad.log_softmax_entry([0.0, 0.0], 0, 1.0) == pytest.approx(-math.log(2), abs=1e-15)
    assert ad.log_softmax_entry([10.0, 0.0], 0, 1.0) == pytest.approx(-math.log1p(math.exp(-10)), rel=1e-12)
    assert ad.log_softmax_entry([1.0, 1.0, 1.0, 1.0], 2, 0.5) == pytest.approx(-math.log(4), abs=1e-15)
    with pytest.raises(ConfigError):
        ad.log_softmax_entry([1.0, 2.0], 0, 0.0)


@settings(max_examples=25)
@given(st.integers(1, 10_000), st.integers(0, 2**32 - 1))
def test_log_softmax_normalises(n, seed):
    scores = np.random.default_rng(seed).normal(0, 5, n)
    total = sum(math.exp(ad.log_softmax_entry(scores, i, 1.0)) for i in range(min(n, 10)))
    full = np.exp(scores - scores.max()) / np.exp(scores - scores.max()).sum()
    assert total == pytest.approx(full[: min(n, 10)].sum(), abs=1e-10)
    row = ad.logsumexp(Tensor(scores[None, :])).data[0]
    assert np.exp(scores - row).sum() == pytest.approx(1.0, abs=1e-10)


def test_adam_first_step():
    p = Tensor(np.array([2.0]), requires_grad=True)
    state = AdamState.zeros_like([p])
    adam_step([p], [np.array([1.0])], state, lr=0.001)
    assert p.data[0] - 2.0 == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)
    assert state.t == 1


def test_adam_zero_grad_and_zero_lr_are_identity(rng):
    w = rng.standard_normal((3, 4))
    p = Tensor(w.copy(), requires_grad=True)
    state = AdamState.zeros_like([p])
    adam_step([p], [np.zeros_like(w)], state, lr=0.1)
    assert np.array_equal(p.data, w)
    adam_step([p], [rng.standard_normal(w.shape)], state, lr=0.0)
    assert np.array_equal(p.data, w)
    assert state.t == 2


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(4)], AdamState.zeros_like([p]), lr=0.1)


def test_adam_deterministic(rng):
    def run():
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        opt = Adam([p], 0.01)
        for k in range(20):
            opt.minimize(lambda: ad.square(p - float(k)).sum())
        return p.data
    assert np.array_equal(run(), run())


def test_tape_records_only_when_active():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = (x * x).sum()
    with Tape() as tape:
        z = (x * x).sum()
    assert len(tape) > 0
    (g,) = tape.gradient(z, [x])
    assert np.array_equal(g, [2.0, 4.0])
    with pytest.raises(UsageError):
        tape.gradient(y, [x])


def test_tape_unused_source_gets_zero():
    x = Tensor(np.array([1.0]), requires_grad=True)
    w = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    with Tape() as tape:
        z = (x * 3.0).sum()
    gx, gw = tape.gradient(z, [x, w])
    assert gx[0] == 3.0 and np.array_equal(gw, np.zeros((1, 2)))


def test_fd_square():
    assert finite_difference_check(lambda t: ad.square(t).sum(), np.array([3.0])) < 1e-7


OPS = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: ad.square(a - b).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (ad.square(b) + 1.0)).sum(),
    "matmul": lambda a, b: ad.tsum(ad.square(a @ ad.transpose(b))),
    "leaky_relu": lambda a, b: (ad.leaky_relu(a) * b).sum(),
    "relu": lambda a, b: (ad.relu(a) * b).sum(),
    "gelu": lambda a, b: (ad.gelu(a) * b).sum(),
    "log_sigmoid": lambda a, b: ad.log_sigmoid(a * b).sum(),
    "logsumexp": lambda a, b: ad.logsumexp(ad.concat([a, b], axis=1)).sum(),
    "take": lambda a, b: ad.square(ad.take(a, np.array([[0, 1], [1, 1]]))).sum() + b.sum(),
    "mean": lambda a, b: ad.mean(a * b, axis=0).sum(),
    "reshape": lambda a, b: ad.square(ad.reshape(a, (-1,))).sum() + (b * b).sum(),
    "pair_cosine": lambda a, b: ad.pair_cosine(a, b, np.array([0, 1, 2]), np.array([2, 0, 2])).sum(),
    "pair_dot": lambda a, b: ad.square(ad.pair_dot(a, b, np.array([0, 1]), np.array([1, 1]))).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_gradient_check(name):
    f = OPS[name]
    rng = np.random.default_rng(sum(map(ord, name)))
    for _ in range(100):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        if name in ("relu", "leaky_relu"):
            a = np.where(np.abs(a) < 1e-3, 0.5, a)  # keep clear of the kink
        assert finite_difference_check(lambda ts: f(*ts), [a, b]) < 1e-4


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0])) / 0.0


def test_linear_shape_checks(rng):
    layer = ad.Linear.init(3, 2, rng)
    assert layer(np.ones((5, 3))).shape == (5, 2)
    with pytest.raises(ShapeError):
        layer(np.ones((5, 4)))
    bound = math.sqrt(6 / 5)
    assert np.all(np.abs(layer.weight.data) <= bound)
