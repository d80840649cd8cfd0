import numpy as np
import pytest

from nlreg import datagen
from nlreg.funcs import get_function
from nlreg.nlista.model import (LayerGrads, NlistaLayerParams, NlistaModel,
                                backward, forward_batch)

from conftest import normalize_columns

KINK_GUARD = 1e-3


def random_case(seed, m=5, n=8, T=2, B=3, f_id="2x+cos(x)", x_scale=1.0):
    # x_scale shrinks the signals (hence the residual products), steering the
    # per-sample clip scales toward the unclipped branch
    rng = np.random.default_rng(seed)
    A = normalize_columns(rng.standard_normal((m, n)))
    layers = [NlistaLayerParams(A + 0.05 * rng.standard_normal((m, n)),
                                0.1 + 0.2 * rng.random(),
                                0.02 + 0.03 * rng.random())
              for _ in range(T)]
    model = NlistaModel(layers=layers, f_id=f_id, A=A)
    Xs = x_scale * rng.standard_normal((n, B)) * (rng.random((n, B)) < 0.4)
    f = get_function(f_id)
    Y = f.value(A @ Xs)
    return model, Y, Xs


def batch_loss(model, Y, Xs, gamma_override=None):
    X, _ = forward_batch(model, Y, gamma_override=gamma_override)
    d = X - Xs
    return float(np.mean(np.sum(d * d, axis=0)))


def kink_distance(model, Y):
    _, tape = forward_batch(model, Y, record=True)
    return min(np.abs(np.abs(Z) - lay.theta).min()
               for Z, lay in zip(tape.zs, model.layers))


def clip_distance(model, Y):
    _, tape = forward_batch(model, Y, record=True)
    return min(np.abs(np.sqrt(np.sum(V * V, axis=0)) - 1.0).min() for V in tape.vs)


def fd_check(model, Y, Xs, grads, pinned=None, h=1e-6, rtol=1e-4, n_w=10, seed=0):
    rng = np.random.default_rng(seed)

    def fd(get, setv):
        v0 = get()
        setv(v0 + h)
        lp = batch_loss(model, Y, Xs, pinned)
        setv(v0 - h)
        lm = batch_loss(model, Y, Xs, pinned)
        setv(v0)
        return (lp - lm) / (2 * h)

    worst = 0.0
    for t, lay in enumerate(model.layers):
        pairs = [(fd(lambda: lay.beta, lambda v: setattr(lay, "beta", v)), grads[t].beta),
                 (fd(lambda: lay.theta, lambda v: setattr(lay, "theta", v)), grads[t].theta)]
        for _ in range(n_w):
            i, j = rng.integers(model.m), rng.integers(model.n)

            def set_w(v, lay=lay, i=i, j=j):
                lay.W[i, j] = v

            pairs.append((fd(lambda lay=lay, i=i, j=j: lay.W[i, j], set_w), grads[t].W[i, j]))
        for g_fd, g_an in pairs:
            denom = max(abs(g_fd), 1e-8)
            worst = max(worst, abs(g_fd - g_an) / denom)
    return worst


class TestBackward:
    def test_matches_fd_with_pinned_gamma(self):
        # stop-gradient convention: the oracle is finite differences of the
        # forward pass with the clip scales pinned to their tape values
        checked = 0
        for seed in range(20):
            model, Y, Xs = random_case(seed)
            if kink_distance(model, Y) < KINK_GUARD:
                continue
            X, tape = forward_batch(model, Y, record=True)
            grads = backward(model, tape, 2.0 / Y.shape[1] * (X - Xs))
            pinned = [g.copy() for g in tape.gammas]
            assert fd_check(model, Y, Xs, grads, pinned) < 1e-4
            checked += 1
        assert checked >= 10

    def test_matches_plain_fd_when_unclipped(self):
        # with every ||v|| < 1 the convention is vacuous and plain finite
        # differences of the true forward must match
        checked = 0
        for seed in range(30):
            model, Y, Xs = random_case(seed, x_scale=0.05)
            _, tape = forward_batch(model, Y, record=True)
            if any(np.any(g < 1.0) for g in tape.gammas):
                continue
            if kink_distance(model, Y) < KINK_GUARD:
                continue
            X = tape.xs[-1]
            grads = backward(model, tape, 2.0 / Y.shape[1] * (X - Xs))
            assert fd_check(model, Y, Xs, grads) < 1e-4
            checked += 1
        assert checked >= 5

    def test_full_differentiation_mode(self):
        # ablation switch: differentiate through the clip; guard both kinds of
        # kink (threshold and the ||v|| = 1 boundary)
        checked = 0
        for seed in range(20):
            model, Y, Xs = random_case(100 + seed, x_scale=1.5)
            if kink_distance(model, Y) < KINK_GUARD or clip_distance(model, Y) < 1e-2:
                continue
            X, tape = forward_batch(model, Y, record=True)
            grads = backward(model, tape, 2.0 / Y.shape[1] * (X - Xs),
                             differentiate_gamma=True)
            assert fd_check(model, Y, Xs, grads) < 1e-4
            checked += 1
        assert checked >= 5

    def test_theta_gradient_closed_form(self, rng):
        # d loss / d theta = - sum over active i of sign(x_i) * g_i
        model, Y, Xs = random_case(7, T=1)
        X, tape = forward_batch(model, Y, record=True)
        G = rng.standard_normal(X.shape)
        grads = backward(model, tape, G)
        active = np.abs(tape.zs[0]) > model.layers[0].theta
        expect = -float(np.sum(np.sign(X) * G * active))
        assert grads[0].theta == pytest.approx(expect, rel=1e-12)

    def test_zero_grad_out(self):
        model, Y, Xs = random_case(8)
        X, tape = forward_batch(model, Y, record=True)
        grads = backward(model, tape, np.zeros_like(X))
        for g in grads:
            assert np.array_equal(g.W, np.zeros_like(g.W))
            assert g.beta == 0.0 and g.theta == 0.0

    def test_frozen_prefix(self):
        model, Y, Xs = random_case(9, T=3)
        X, tape = forward_batch(model, Y, record=True)
        G = 2.0 / Y.shape[1] * (X - Xs)
        grads = backward(model, tape, G, frozen_prefix=2)
        assert np.array_equal(grads[0].W, np.zeros_like(grads[0].W))
        assert grads[1].beta == 0.0 and grads[1].theta == 0.0
        # trainable tail still gets the same gradient as the unfrozen run
        full = backward(model, tape, G)
        assert np.array_equal(grads[2].W, full[2].W)
        assert grads[2].beta == full[2].beta

    def test_requires_tape(self):
        model, Y, Xs = random_case(10)
        X, _ = forward_batch(model, Y)
        with pytest.raises(ValueError, match="tape"):
            backward(model, None, np.zeros_like(X))
