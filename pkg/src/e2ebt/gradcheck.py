"""Finite-difference verification of every differentiable primitive.

Each suite entry builds a fresh scalar loss from double-precision leaf
parameters (define-by-run, so rebuilding after a perturbation is exact),
backpropagates once, and compares the stored gradients against central
finite differences at randomly chosen coordinates.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad


def fd_gradient(build, param, index, h=1e-5):
    """Central finite difference of ``build()`` w.r.t. one coordinate."""
    original = param.values[index]
    param.values[index] = original + h
    up = float(build().values)
    param.values[index] = original - h
    down = float(build().values)
    param.values[index] = original
    return (up - down) / (2.0 * h)


def check(build, params, rng, n_points=20, rel_tol=1e-4, h=1e-5, fd_build=None):
    """Compare autodiff gradients of ``build()`` with finite differences.

    Samples ``n_points`` coordinates per parameter. ``fd_build`` lets ops
    whose forward is decoupled from the gradient path (straight-through
    estimators) supply the equivalent differentiable surrogate for the
    finite-difference side. Returns the worst relative error seen; raises
    AssertionError beyond ``rel_tol``.
    """
    if fd_build is None:
        fd_build = build
    for p in params:
        p.grad = None
    loss = build()
    ad.backward(loss)
    worst = 0.0
    for p in params:
        grad = p.grad if p.grad is not None else np.zeros_like(p.values)
        flat_size = p.values.size
        n = min(n_points, flat_size)
        picks = rng.choice(flat_size, size=n, replace=False)
        for flat_index in picks:
            index = np.unravel_index(flat_index, p.values.shape)
            fd = fd_gradient(fd_build, p, index, h=h)
            got = float(grad[index])
            err = abs(got - fd) / max(abs(fd), abs(got), 1e-8)
            worst = max(worst, err)
            if err > rel_tol:
                raise AssertionError(
                    f"gradient mismatch at {index}: autodiff={got:.10g} "
                    f"fd={fd:.10g} rel_err={err:.3g}")
    return worst


def _param(rng, shape, scale=1.0):
    return ad.tensor(rng.normal(size=shape) * scale, requires_grad=True)


def primitive_suites(rng):
    """(name, params, build) triples covering every primitive.

    Every loss funnels through a fixed random weighting so the upstream
    gradient is generic.
    """
    suites = []

    def weighted(node, rng):
        w = ad.constant(rng.normal(size=node.values.shape))
        return ad.sum_all(ad.mul(node, w))

    def entry(name, make):
        local = np.random.default_rng(rng.integers(2**63))
        made = make(local)
        params, build = made[0], made[1]
        fd_build = made[2] if len(made) > 2 else None
        suites.append((name, params, build, fd_build, local))

    def add_suite(r):
        a, b = _param(r, (3, 5)), _param(r, (5,))
        return [a, b], lambda: weighted(ad.add(a, b), np.random.default_rng(7))

    def mul_suite(r):
        a, b = _param(r, (4, 6)), _param(r, (6,))
        return [a, b], lambda: weighted(ad.mul(a, b), np.random.default_rng(8))

    def scale_suite(r):
        a = _param(r, (3, 4))
        return [a], lambda: weighted(ad.scale(a, -2.5), np.random.default_rng(9))

    def matmul_suite(r):
        a, b = _param(r, (2, 3, 4)), _param(r, (4, 5))
        return [a, b], lambda: weighted(ad.matmul(a, b), np.random.default_rng(10))

    def matmul_batched_suite(r):
        a, b = _param(r, (2, 3, 4)), _param(r, (2, 4, 3))
        return [a, b], lambda: weighted(ad.matmul(a, b), np.random.default_rng(11))

    def reshape_transpose_suite(r):
        a = _param(r, (2, 3, 4))
        def build():
            t = ad.transpose(a, (1, 0, 2))
            return weighted(ad.reshape(t, (3, 8)), np.random.default_rng(12))
        return [a], build

    def concat_narrow_suite(r):
        a, b = _param(r, (2, 3)), _param(r, (4, 3))
        def build():
            cat = ad.concat([a, b], axis=0)
            return weighted(ad.narrow(cat, 0, 1, 4), np.random.default_rng(13))
        return [a, b], build

    def softmax_suite(r):
        a = _param(r, (3, 7))
        return [a], lambda: weighted(ad.softmax(a), np.random.default_rng(14))

    def log_softmax_suite(r):
        a = _param(r, (3, 7))
        return [a], lambda: weighted(ad.log_softmax(a), np.random.default_rng(15))

    def masked_attention_suite(r):
        a = _param(r, (2, 4, 5))
        mask = np.random.default_rng(3).random((2, 4, 5)) < 0.7
        mask[..., 0] = True  # keep at least one key per row
        return [a], lambda: weighted(ad.masked_attention(a, mask),
                                     np.random.default_rng(16))

    def log_exp_suite(r):
        a = _param(r, (3, 4))
        def build():
            pos = ad.exp(a)
            return weighted(ad.log(pos), np.random.default_rng(17))
        return [a], build

    def relu_suite(r):
        a = _param(r, (5, 5))
        return [a], lambda: weighted(ad.relu(a), np.random.default_rng(18))

    def layer_norm_suite(r):
        x = _param(r, (4, 8))
        gain = ad.tensor(1.0 + 0.1 * r.normal(size=8), requires_grad=True)
        bias = ad.tensor(0.1 * r.normal(size=8), requires_grad=True)
        return [x, gain, bias], lambda: weighted(ad.layer_norm(x, gain, bias),
                                                 np.random.default_rng(19))

    def embedding_suite(r):
        table = _param(r, (9, 4))
        ids = np.random.default_rng(4).integers(0, 9, size=(3, 5))
        return [table], lambda: weighted(ad.embedding(table, ids),
                                         np.random.default_rng(20))

    def embedding_onehot_suite(r):
        from .reparam import one_hot
        table = _param(r, (9, 4))
        hots_values = one_hot(np.random.default_rng(5).integers(0, 9, size=(6,)), 9)
        hots = ad.tensor(hots_values, requires_grad=True)
        return [table, hots], lambda: weighted(ad.matmul(hots, table),
                                               np.random.default_rng(21))

    def cross_entropy_int_suite(r):
        logits = _param(r, (4, 6))
        ids = np.random.default_rng(6).integers(0, 6, size=4)
        mask = np.array([1.0, 1.0, 0.0, 1.0])
        return [logits], lambda: ad.cross_entropy(logits, ids, mask=mask)

    def cross_entropy_probs_suite(r):
        logits = _param(r, (4, 6))
        raw = np.abs(np.random.default_rng(2).normal(size=(4, 6))) + 0.1
        probs = ad.tensor(raw / raw.sum(axis=1, keepdims=True), requires_grad=True)
        return [logits, probs], lambda: ad.cross_entropy(logits, probs)

    def categorical_kl_suite(r):
        logits = _param(r, (5, 6))
        raw = np.abs(np.random.default_rng(1).normal(size=(5, 6))) + 0.1
        prior = raw / raw.sum(axis=1, keepdims=True)
        mask = np.array([1.0, 1.0, 1.0, 0.0, 1.0])
        return [logits], lambda: ad.categorical_kl(logits, prior, mask=mask)

    def passthrough_suite(r):
        # The straight-through forward is decoupled from its input, so the
        # finite-difference side uses the equivalent surrogate
        # coeff * a + const with const frozen at the unperturbed values.
        a = _param(r, (4, 6))
        coeff = 0.37
        forced = np.random.default_rng(0).normal(size=(4, 6))
        const = ad.constant(forced - coeff * a.values)
        def build():
            z = ad.passthrough(a, forced, coeff=coeff)
            return weighted(z, np.random.default_rng(22))
        def fd_build():
            z = ad.add(ad.scale(a, coeff), const)
            return weighted(z, np.random.default_rng(22))
        return [a], build, fd_build

    entry("add", add_suite)
    entry("mul", mul_suite)
    entry("scale", scale_suite)
    entry("matmul", matmul_suite)
    entry("matmul_batched", matmul_batched_suite)
    entry("reshape_transpose", reshape_transpose_suite)
    entry("concat_narrow", concat_narrow_suite)
    entry("softmax", softmax_suite)
    entry("log_softmax", log_softmax_suite)
    entry("masked_attention", masked_attention_suite)
    entry("log_exp", log_exp_suite)
    entry("relu", relu_suite)
    entry("layer_norm", layer_norm_suite)
    entry("embedding", embedding_suite)
    entry("embedding_onehot", embedding_onehot_suite)
    entry("cross_entropy_int", cross_entropy_int_suite)
    entry("cross_entropy_probs", cross_entropy_probs_suite)
    entry("categorical_kl", categorical_kl_suite)
    entry("passthrough", passthrough_suite)
    return suites


def run_all(seed=0, rel_tol=1e-4, n_points=20, verbose=False):
    """Run every primitive suite; returns a list of (name, worst_rel_err)."""
    rng = np.random.default_rng(seed)
    results = []
    for name, params, build, fd_build, local in primitive_suites(rng):
        worst = check(build, params, local, n_points=n_points, rel_tol=rel_tol,
                      fd_build=fd_build)
        results.append((name, worst))
        if verbose:
            print(f"gradcheck {name}: worst rel err {worst:.3g}")
    return results
