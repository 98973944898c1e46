"""Differentiable discrete sampling.

The categorical straight-through trick turns a sampled one-hot ``s`` drawn
from a probability vector ``p`` into a node whose forward value *is* ``s``
while gradient flows into ``p`` scaled by a coefficient ``lam``:

    c = s * (1 - lam*p) + (1 - s) * (-lam*p)      (conjugate, detached)
    z = lam*p + detach(c)

``conjugate`` computes c exactly as written; the ``crt`` op itself uses the
equivalent exact construction (forward buffer = s, backward = lam * g),
which keeps the forward identity bitwise and independent of ``lam``. The
straight-through Gumbel-softmax baseline is provided for comparison; note
it needs two softmax normalizations per token where the categorical trick
needs only the one that produced ``p``.

Everything here is stateless given an rng; independent rng streams make
calls safe from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .kernels import impl as K

GREEDY = "greedy"
STOCHASTIC = "stochastic"
MIXED = "mixed"


@dataclass(frozen=True)
class SamplingStrategy:
    """How tokens are drawn from a distribution during free-running decoding.

    ``mixed`` draws stochastically with probability ``stochastic_ratio``
    and greedily otherwise, decided per token.
    """

    kind: str = GREEDY
    stochastic_ratio: float = 0.0

    def __post_init__(self):
        if self.kind not in (GREEDY, STOCHASTIC, MIXED):
            raise ValueError(f"unknown sampling kind: {self.kind!r}")
        if not 0.0 <= self.stochastic_ratio <= 1.0:
            raise ValueError("stochastic_ratio must lie in [0, 1]")


@dataclass
class ReparamOutput:
    """A differentiable one-hot token (or a batch of them).

    ``z`` carries the gradient path into ``p``; ``token_id`` is the index
    of the hot entry (an int array for batched calls); ``lam`` is the
    gradient-scale coefficient that was applied.
    """

    z: ad.Node
    token_id: np.ndarray
    p: ad.Node
    lam: float


def binary_reparam(p, rng):
    """Differentiable Bernoulli sample: z = p + detach(c).

    ``p`` is a scalar probability node (or float). The forward value is the
    drawn s in {0, 1} (up to one rounding ulp) and d(z)/dp = 1.
    """
    node = p if isinstance(p, ad.Node) else ad.tensor(float(p))
    value = float(node.values)
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"binary_reparam: p={value} outside [0, 1]")
    s = 1.0 if rng.random() < value else 0.0
    c = s * (1.0 - value) + (1.0 - s) * (-value)
    return ad.add(node, ad.constant(np.asarray(c, dtype=node.values.dtype)))


def _validate_probs(p):
    sums = p.sum(axis=-1)
    if not (np.abs(sums - 1.0) <= 1e-6).all() or (p < 0).any():
        raise ValueError("probabilities must be non-negative and sum to 1")


def sample_token(p, strategy, rng):
    """Draw a plain (non-differentiable) one-hot vector from ``p``.

    Greedy picks the argmax with ties broken by lowest index; stochastic
    draws from the categorical distribution; mixed flips a coin with the
    strategy's stochastic ratio.
    """
    values = p.values if isinstance(p, ad.Node) else np.asarray(p)
    if values.ndim != 1:
        raise ValueError("sample_token expects a single probability vector")
    _validate_probs(values)
    idx = int(sample_ids(values[None, :], strategy, rng)[0])
    s = np.zeros(values.shape[0], dtype=np.int64)
    s[idx] = 1
    return s


def sample_ids(p, strategy, rng):
    """Batched token draw: (rows, vocab) probabilities -> (rows,) ids."""
    rows = p.shape[0]
    if strategy.kind == GREEDY:
        return p.argmax(axis=1).astype(np.int64)
    if strategy.kind == STOCHASTIC:
        stochastic = np.ones(rows, dtype=bool)
    else:
        stochastic = rng.random(rows) < strategy.stochastic_ratio
    ids = p.argmax(axis=1).astype(np.int64)
    if stochastic.any():
        sub = np.ascontiguousarray(p[stochastic])
        ids[stochastic] = K.sample_rows(sub, rng.random(stochastic.sum()))
    return ids


def one_hot(ids, vocab_size, dtype=np.float64):
    """Plain one-hot rows for integer ids of any shape."""
    ids = np.asarray(ids)
    out = np.zeros(ids.shape + (vocab_size,), dtype=dtype)
    np.put_along_axis(out, ids[..., None], 1, axis=-1)
    return out


def conjugate(p, s, lam=1.0):
    """The detached conjugate part c = s*(1 - lam*p) + (1-s)*(-lam*p)."""
    lp = lam * p
    return s * (1.0 - lp) + (1.0 - s) * (-lp)


def crt(p, s, lam=1.0):
    """Reparameterize an arbitrary one-hot sample ``s`` against ``p``.

    ``p`` is a probability-vector node (or batch of them), ``s`` a one-hot
    array of the same shape — any token, not only the argmax; sampling is
    decoupled from reparameterization. The forward value equals ``s``
    exactly and, for any downstream loss L, dL/dp = lam * (dL/dz at z=s).
    ``lam`` acts as an extra learning rate for whatever ``p`` depends on;
    lam=0 degenerates to a plain sample.
    """
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if not isinstance(p, ad.Node):
        p = ad.tensor(p)
    s = np.asarray(s)
    if s.shape != p.values.shape:
        raise ValueError(f"crt: sample shape {s.shape} != p shape {p.values.shape}")
    hot = s != 0
    if not ((s == 0) | (s == 1)).all() or (hot.sum(axis=-1) != 1).any():
        raise ValueError("crt: s must be one-hot")
    z = ad.passthrough(p, s.astype(p.values.dtype), coeff=lam)
    token_id = s.argmax(axis=-1)
    return ReparamOutput(z=z, token_id=token_id, p=p, lam=float(lam))


def gumbel_softmax(logits, tau, rng):
    """Straight-through Gumbel-softmax baseline.

    Soft sample y = softmax((log_softmax(logits) + g) / tau) with standard
    Gumbel noise g; the forward value is the exact one-hot at argmax(y) and
    gradient flows through y. Exactly two softmax normalizations per token.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not isinstance(logits, ad.Node):
        logits = ad.tensor(logits)
    lp = ad.log_softmax(logits)
    noise = rng.gumbel(size=lp.values.shape).astype(lp.values.dtype)
    y = ad.softmax(ad.scale(ad.add(lp, ad.constant(noise)), 1.0 / tau))
    token_id = y.values.argmax(axis=-1)
    hard = one_hot(token_id, y.values.shape[-1], dtype=y.values.dtype)
    z = ad.passthrough(y, hard, coeff=1.0)
    return ReparamOutput(z=z, token_id=token_id, p=y, lam=1.0)
