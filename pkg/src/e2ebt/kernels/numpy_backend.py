"""Pure numpy implementations of the hot row-wise kernels.

Every function here has a drop-in twin in the compiled ``_ckernels``
extension. All 2-D arguments are (rows, width) with the reduction running
over the last axis; callers flatten leading batch dimensions first.
"""

import numpy as np


def softmax2d(x):
    """Row-wise softmax, numerically stabilized by the row max."""
    shifted = x - x.max(axis=1, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=1, keepdims=True)
    return shifted


def softmax2d_grad(p, gout):
    """Backward of softmax2d: p * (gout - sum(gout * p))."""
    inner = (gout * p).sum(axis=1, keepdims=True)
    return p * (gout - inner)


def log_softmax2d(x):
    """Row-wise log-softmax via the shifted log-sum-exp."""
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    shifted -= lse
    return shifted


def log_softmax2d_grad(lp, gout):
    """Backward of log_softmax2d: gout - exp(lp) * sum(gout)."""
    return gout - np.exp(lp) * gout.sum(axis=1, keepdims=True)


def layernorm2d(x, gain, bias, eps):
    """Row-wise layer normalization.

    Returns (y, mean, rstd); mean/rstd are cached for the backward pass.
    """
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    y = centered * rstd[:, None] * gain + bias
    return y, mean[:, 0], rstd


def layernorm2d_grad(x, gain, mean, rstd, gout):
    """Backward of layernorm2d. Returns (gx, ggain, gbias)."""
    xhat = (x - mean[:, None]) * rstd[:, None]
    gy = gout * gain
    gbias = gout.sum(axis=0)
    ggain = (gout * xhat).sum(axis=0)
    m1 = gy.mean(axis=1, keepdims=True)
    m2 = (gy * xhat).mean(axis=1, keepdims=True)
    gx = (gy - m1 - xhat * m2) * rstd[:, None]
    return gx, ggain, gbias


def nll_rows(lp, targets):
    """Negative log-likelihood per row given log-probabilities.

    ``targets`` is either an int vector of class ids or a (rows, width)
    probability matrix.
    """
    if targets.ndim == 1:
        rows = np.arange(lp.shape[0])
        return -lp[rows, targets]
    return -(targets * lp).sum(axis=1)


def kl_rows(logq, prior):
    """Row-wise KL(q || prior) with q = exp(logq); prior is a plain
    probability matrix. Zero-prior entries are floored at the smallest
    positive normal of the dtype to keep the result finite."""
    tiny = np.finfo(prior.dtype).tiny
    q = np.exp(logq)
    return (q * (logq - np.log(np.maximum(prior, tiny)))).sum(axis=1)


def kl_rows_grad(logq, prior, kl, gout):
    """Backward of kl_rows w.r.t. the posterior *logits*.

    With q = softmax(logits) and logq = log_softmax(logits):
    d KL / d logit_j = q_j * (logq_j - log prior_j - KL).
    """
    tiny = np.finfo(prior.dtype).tiny
    q = np.exp(logq)
    glogits = q * (logq - np.log(np.maximum(prior, tiny)) - kl[:, None])
    glogits *= gout[:, None]
    return glogits


def sample_rows(p, u):
    """Inverse-CDF draw per row: smallest j with cumsum(p)_j > u_i.

    ``u`` is one uniform(0, 1) draw per row. Returns int64 indices.
    """
    cdf = np.cumsum(p, axis=1)
    idx = (cdf > u[:, None]).argmax(axis=1)
    # float round-off can leave total mass below u; fall back to the last column
    short = cdf[:, -1] <= u
    if short.any():
        idx = np.where(short, p.shape[1] - 1, idx)
    return idx.astype(np.int64)
