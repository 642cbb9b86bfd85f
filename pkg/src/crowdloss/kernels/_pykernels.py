"""Pure numpy versions of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
``np.einsum`` is used instead of ``@`` so no BLAS call is made: results then
do not depend on how many threads the BLAS library happens to use.
"""
import numpy as np
from scipy.special import betaln

PROB_FLOOR = 1e-12


def dense_tanh_forward(X, W, b):
    return np.tanh(np.einsum("bi,io->bo", X, W) + b)


def dense_tanh_backward(X, W, Y, dY):
    """Backprop through ``Y = tanh(X @ W + b)``; returns ``(dW, db, dX)``."""
    dZ = dY * (1.0 - Y * Y)
    dW = np.einsum("bi,bo->io", X, dZ)
    db = dZ.sum(axis=0)
    dX = np.einsum("bo,io->bi", dZ, W)
    return dW, db, dX


def heads_forward(Hh, W, b):
    """Per-head softmax. ``Hh`` is (B, H), ``W`` is (A, H, M), ``b`` is (A, M)."""
    logits = np.einsum("bh,ahm->bam", Hh, W) + b
    logits -= logits.max(axis=2, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=2, keepdims=True)
    return logits


def heads_objective(P, T, ent_coeff, cb_coeff):
    """Batch objective over head probabilities ``P`` and soft targets ``T``.

    objective = (1/B) sum_{i,a} -sum_m T log p
              + ent_coeff * (1/B) sum_i (1/A) sum_a sum_m p log p
              + cb_coeff * (1/A) sum_a KL(uniform || mean_i p_ia)

    Returns ``(objective, dlogits)`` with ``dlogits`` shaped like ``P``.
    """
    B, A, M = P.shape
    logp = np.log(np.maximum(P, PROB_FLOOR))
    s = T.sum(axis=2, keepdims=True)
    loss = -(T * logp).sum() / B
    grad = (s * P - T) / B

    if ent_coeff != 0.0:
        plogp = P * logp
        neg_entropy = plogp.sum(axis=2, keepdims=True)
        loss += ent_coeff * neg_entropy.sum() / (B * A)
        grad += (ent_coeff / (B * A)) * (plogp - P * neg_entropy)

    if cb_coeff != 0.0:
        pbar = P.mean(axis=0)
        lp = np.log(np.maximum(pbar, PROB_FLOOR))
        loss += cb_coeff * (np.log(1.0 / M) - lp).sum() / (A * M)
        g = -cb_coeff / (A * M * B) / pbar
        grad += P * (g - (P * g).sum(axis=2, keepdims=True))

    return float(loss), grad


def heads_backward(Hh, W, dlogits):
    dW = np.einsum("bh,bam->ahm", Hh, dlogits)
    db = dlogits.sum(axis=0)
    dH = np.einsum("bam,ahm->bh", dlogits, W)
    return dW, db, dH


def beta_log_pdf(x, a, b):
    x = np.asarray(x, dtype=float)
    return (a - 1.0) * np.log(x) + (b - 1.0) * np.log1p(-x) - betaln(a, b)
