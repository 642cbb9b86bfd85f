"""Loss functions: cross-entropy, multitask, label correction and regularizers.

Scalar functions here operate on one sample; ``batch_targets`` turns a batch
of sparse labels, correction weights and self-guesses into the soft target
tensor consumed by the compiled objective kernel. The two paths are checked
against each other in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12

ARMS = ("baseline", "baseline_lc", "multitask", "multitask_lc")
ARM_ALIASES = {
    "ce_majority": "baseline",
    "ce_majority+lc": "baseline_lc",
    "baseline+lc": "baseline_lc",
    "mt": "multitask",
    "mt+lc": "multitask_lc",
    "multitask+lc": "multitask_lc",
}
MT_NORMS = ("present", "total")


def canonical_arm(mode: str) -> str:
    key = mode.strip().lower()
    key = ARM_ALIASES.get(key, key)
    if key not in ARMS:
        raise ValueError(f"unknown mode {mode!r}; expected one of {ARMS}")
    return key


def arm_uses_correction(mode: str) -> bool:
    return canonical_arm(mode).endswith("_lc")


def arm_is_multitask(mode: str) -> bool:
    return canonical_arm(mode).startswith("multitask")


@dataclass(frozen=True)
class LossSpec:
    mode: str = "multitask_lc"
    psi: float = 0.5
    entropy_penalty_coeff: float = 0.1
    class_balance_coeff: float = 1.0
    weight_source: object = "mixture"
    mt_norm: str = "present"

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_arm(self.mode))
        for name in ("psi", "entropy_penalty_coeff", "class_balance_coeff"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and non-negative")
        if self.mt_norm not in MT_NORMS:
            raise ValueError(f"mt_norm must be one of {MT_NORMS}")
        ws = self.weight_source
        if ws != "mixture" and not (isinstance(ws, (int, float)) and 0.0 <= ws <= 1.0):
            raise ValueError("weight_source must be 'mixture' or a fixed w in [0, 1]")


def _log(p):
    return np.log(np.clip(p, PROB_FLOOR, 1.0))


def _onehot(y, num_classes):
    y = np.asarray(y)
    if y.ndim == 0:
        out = np.zeros(num_classes)
        out[int(y)] = 1.0
        return out
    return y.astype(float)


def loss_ce(p, y) -> float:
    """-sum_m y_m log p_m; ``y`` may be a one-hot vector or a class index."""
    p = np.asarray(p, dtype=float)
    return float(-(_onehot(y, p.shape[-1]) * _log(p)).sum())


def cross_entropy_to(p, target) -> float:
    """-sum_m target_m log p_m for an arbitrary (e.g. soft, detached) target."""
    return float(-(np.asarray(target, dtype=float) * _log(np.asarray(p, dtype=float))).sum())


def _present(y_all):
    y_all = np.asarray(y_all)
    present = np.flatnonzero(y_all >= 0)
    if present.size == 0:
        raise ValueError("no annotators present")
    return present


def _norm(present, num_annotators, mt_norm):
    return present.size if mt_norm == "present" else num_annotators


def loss_mt(p_all, y_all, mt_norm: str = "present") -> float:
    """Mean cross-entropy over the annotators that labeled the sample.

    ``y_all`` holds one class index per annotator, negative for missing.
    With ``mt_norm="total"`` the sum is divided by A instead.
    """
    p_all = np.asarray(p_all, dtype=float)
    present = _present(y_all)
    total = sum(loss_ce(p_all[a], int(y_all[a])) for a in present)
    return total / _norm(present, len(y_all), mt_norm)


def detach_guess(p_all) -> np.ndarray:
    """Self-guess targets: a read-only copy of the predictions, held constant in training."""
    z = np.array(p_all, dtype=float, copy=True)
    z.setflags(write=False)
    return z


def loss_lc(p, y, z, w: float) -> float:
    if not 0.0 <= w <= 1.0:
        raise ValueError("correction weight w must be in [0, 1]")
    return (1.0 - w) * loss_ce(p, y) + w * cross_entropy_to(p, z)


def loss_guess(p_all, y_all, z_all, mt_norm: str = "present") -> float:
    """Mean self-guess cross-entropy over present annotators."""
    p_all = np.asarray(p_all, dtype=float)
    present = _present(y_all)
    total = sum(cross_entropy_to(p_all[a], z_all[a]) for a in present)
    return total / _norm(present, len(y_all), mt_norm)


def loss_mlc(p_all, y_all, z_all, weights, psi: float, mt_norm: str = "present") -> float:
    """Multitask label-correction loss for one sample.

    mean over present a of (1 - w_a) CE(p_a, y_a) + psi * w_a * CE(p_a, z_a).
    ``weights`` is a scalar (shared by all annotators) or one w per annotator.
    """
    if psi < 0:
        raise ValueError("psi must be non-negative")
    p_all = np.asarray(p_all, dtype=float)
    present = _present(y_all)
    w = np.broadcast_to(np.asarray(weights, dtype=float), (len(y_all),))
    if ((w[present] < 0) | (w[present] > 1)).any():
        raise ValueError("correction weights must be in [0, 1]")
    total = 0.0
    for a in present:
        total += (1.0 - w[a]) * loss_ce(p_all[a], int(y_all[a]))
        total += psi * w[a] * cross_entropy_to(p_all[a], z_all[a])
    return total / _norm(present, len(y_all), mt_norm)


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return -(p * _log(p)).sum(axis=-1)


def entropy_penalty(p_all) -> float:
    """Negative mean Shannon entropy over heads (added to the loss during warm-up)."""
    return float(-np.mean(entropy(np.atleast_2d(p_all))))


def class_balance_reg(batch_mean_p) -> float:
    """Mean over heads of KL(uniform || batch-mean prediction)."""
    pbar = np.atleast_2d(np.asarray(batch_mean_p, dtype=float))
    M = pbar.shape[-1]
    kl = ((1.0 / M) * (np.log(1.0 / M) - _log(pbar))).sum(axis=-1)
    return float(kl.mean())


def batch_targets(labels, num_classes, weights=None, guesses=None, psi=0.0, mt_norm="present"):
    """Soft target tensor T of shape (B, A, M).

    For a present cell: T = ((1 - w) onehot(y) + psi * w * z) / n, with n the
    present count (or A); missing cells get T = 0. The batch objective is then
    (1/B) sum -T log p, which equals the mean over samples of ``loss_mlc``.
    """
    labels = np.asarray(labels)
    B, A = labels.shape
    present = labels >= 0
    if mt_norm == "present":
        n = present.sum(axis=1, keepdims=True).astype(float)
    else:
        n = np.full((B, 1), float(A))
    n[n == 0] = 1.0
    T = np.zeros((B, A, num_classes))
    rows, cols = np.nonzero(present)
    T[rows, cols, labels[rows, cols]] = 1.0
    if weights is not None:
        w = np.where(present, np.asarray(weights, dtype=float), 0.0)
        T *= (1.0 - w)[:, :, None]
        if guesses is not None and psi != 0.0:
            T += (psi * w)[:, :, None] * np.asarray(guesses, dtype=float)
    return T / n[:, :, None]
