"""Two-component mixture modelling of per-annotation losses.

An epoch's per-(sample, annotator) cross-entropy losses are min-max
normalized into (0, 1) and fitted with a two-component Beta mixture by EM.
The posterior probability of the high-loss component is the correction
weight w for that annotation.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import betaln, digamma, zeta

from . import kernels

log = logging.getLogger(__name__)

NORM_EPS = 1e-4
MIN_FIT_OBS = 50
SCOPES = ("per_annotator", "global")
FAMILIES = ("beta", "gaussian")
WEAK_SEPARATION = 0.1
HIST_BINS = 50


@dataclass(frozen=True)
class LossLedger:
    """Raw CE loss of every annotated cell over one pass of the training data."""
    epoch: int
    samples: np.ndarray
    annotators: np.ndarray
    losses: np.ndarray

    def __post_init__(self):
        for name, dtype in (("samples", np.int64), ("annotators", np.int64), ("losses", np.float64)):
            arr = np.array(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.samples) == len(self.annotators) == len(self.losses)):
            raise ValueError("ledger columns must have equal length")
        if not np.isfinite(self.losses).all() or (self.losses < 0).any():
            raise ValueError("ledger losses must be finite and non-negative")

    @classmethod
    def from_matrix(cls, epoch, loss_matrix, mask):
        rows, cols = np.nonzero(mask)
        return cls(epoch, rows, cols, np.asarray(loss_matrix)[rows, cols])

    def __len__(self):
        return len(self.losses)

    def to_matrix(self, values, shape, fill=0.0):
        out = np.full(shape, fill, dtype=float)
        out[self.samples, self.annotators] = values
        return out


def normalize_losses(losses, eps: float = NORM_EPS) -> np.ndarray:
    """Min-max scale to [0, 1] then clamp to [eps, 1 - eps], keeping order."""
    x = np.asarray(losses.losses if isinstance(losses, LossLedger) else losses, dtype=float)
    if x.size == 0:
        raise ValueError("empty ledger")
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        raise ValueError("degenerate ledger")
    return np.clip((x - lo) / (hi - lo), eps, 1.0 - eps)


@dataclass(frozen=True)
class MixtureParams:
    """Fitted two-component mixture.

    ``low`` and ``high`` are (alpha, beta) for the Beta family or (mean, std)
    for the Gaussian family. ``mixing_pi`` is the weight of the low-loss
    component. ``ll_trace`` holds the log-likelihood after every accepted
    iteration.
    """
    family: str
    low: tuple
    high: tuple
    mixing_pi: float
    iterations: int
    log_likelihood: float
    ll_trace: tuple = field(repr=False, default=())
    converged: bool = True
    max_iter_reached: bool = False
    weak_separation: bool = False

    @property
    def pi_low(self):
        return self.mixing_pi

    @property
    def pi_high(self):
        return 1.0 - self.mixing_pi

    @property
    def mean_low(self):
        return _component_mean(self.family, self.low)

    @property
    def mean_high(self):
        return _component_mean(self.family, self.high)

    def log_pdfs(self, x):
        x = np.asarray(x, dtype=float)
        return _log_pdf(self.family, x, self.low), _log_pdf(self.family, x, self.high)

    def pdf(self, x):
        lo, hi = self.log_pdfs(x)
        return self.pi_low * np.exp(lo) + self.pi_high * np.exp(hi)

    def to_dict(self):
        d = asdict(self)
        d["ll_trace"] = list(self.ll_trace)
        d["mean_low"], d["mean_high"] = self.mean_low, self.mean_high
        return d


def _component_mean(family, params):
    a, b = params
    return a / (a + b) if family == "beta" else a


def _log_pdf(family, x, params):
    a, b = params
    if family == "beta":
        return kernels.beta_log_pdf(np.clip(x, NORM_EPS, 1.0 - NORM_EPS), float(a), float(b))
    return -0.5 * ((x - a) / b) ** 2 - np.log(b) - 0.5 * np.log(2 * np.pi)


def _weighted_moments(x, r):
    tot = r.sum()
    mu = (r * x).sum() / tot
    var = (r * (x - mu) ** 2).sum() / tot
    return mu, var


def _m_step(family, x, r_high):
    params = []
    for r in (1.0 - r_high, r_high):
        if r.sum() <= 1e-12:
            r = np.full_like(x, 1e-12)
        mu, var = _weighted_moments(x, r)
        if family == "beta":
            mu = min(max(mu, 1e-6), 1 - 1e-6)
            var = min(max(var, 1e-8), mu * (1 - mu) * (1 - 1e-6))
            common = mu * (1 - mu) / var - 1.0
            params.append((mu * common, (1 - mu) * common))
        else:
            params.append((mu, max(np.sqrt(var), 1e-4)))
    pi_low = float(np.clip(1.0 - r_high.mean(), 1e-6, 1 - 1e-6))
    return params[0], params[1], pi_low


def _beta_mle(x, r, start, iters=25):
    """Weighted Beta maximum likelihood by damped Newton from ``start``.

    The weighted negative log-likelihood is convex in (a, b), and a step is
    only taken when it lowers the objective, so the result never does worse
    than ``start``.
    """
    w = r / max(r.sum(), 1e-300)
    s1 = (w * np.log(x)).sum()
    s2 = (w * np.log1p(-x)).sum()

    def nll(a, b):
        return betaln(a, b) - (a - 1) * s1 - (b - 1) * s2

    ab = np.array(start, dtype=float)
    f = nll(*ab)
    for _ in range(iters):
        a, b = ab
        dab, tab = digamma(a + b), zeta(2, a + b)
        g = np.array([digamma(a) - dab - s1, digamma(b) - dab - s2])
        hess = np.array([[zeta(2, a) - tab, -tab], [-tab, zeta(2, b) - tab]])
        step = np.linalg.solve(hess, g)
        t = 1.0
        while t > 1e-8:
            cand = ab - t * step
            if (cand > 0).all():
                fc = nll(*cand)
                if fc <= f:
                    break
            t *= 0.5
        else:
            break
        done = f - fc <= 1e-12 * max(abs(f), 1.0)
        ab, f = cand, fc
        if done:
            break
    return float(ab[0]), float(ab[1])


def _mle_step(x, r_high, low, high):
    """Exact M-step for the Beta family: maximizes the expected complete log-likelihood."""
    xc = np.clip(x, NORM_EPS, 1.0 - NORM_EPS)
    pi_low = float(np.clip(1.0 - r_high.mean(), 1e-6, 1 - 1e-6))
    return _beta_mle(xc, 1.0 - r_high, low), _beta_mle(xc, r_high, high), pi_low


def _e_step(family, x, low, high, pi_low):
    lo = np.log(pi_low) + _log_pdf(family, x, low)
    hi = np.log(1.0 - pi_low) + _log_pdf(family, x, high)
    total = np.logaddexp(lo, hi)
    return np.exp(hi - total), float(total.sum())


def fit_mixture_em(values, family: str = "beta", max_iter: int = 100, tol: float = 1e-6) -> MixtureParams:
    """EM for a two-component mixture on values in (0, 1).

    Responsibilities are seeded by thresholding at the median. The M-step is
    a weighted method-of-moments update per component (exact for the
    Gaussian family). When a moment update would lower the Beta likelihood,
    the step falls back to weighted maximum likelihood. Iteration stops when the relative change in
    log-likelihood drops below ``tol``, after ``max_iter`` iterations, or if
    a step would lower the log-likelihood (the previous parameters are kept,
    so the recorded trace never decreases).
    """
    if family not in FAMILIES:
        raise ValueError(f"family must be one of {FAMILIES}")
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise ValueError("need at least two values to fit a mixture")
    med = np.median(x)
    r = (x > med).astype(float)
    if r.sum() == 0 or r.sum() == x.size:
        r = (x >= med).astype(float)
    low, high, pi_low = _m_step(family, x, r)
    r, ll = _e_step(family, x, low, high, pi_low)
    trace = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        cand = _m_step(family, x, r)
        cand_r, cand_ll = _e_step(family, x, *cand)
        if family == "beta" and not (np.isfinite(cand_ll) and cand_ll >= ll):
            cand = _mle_step(x, r, low, high)
            cand_r, cand_ll = _e_step(family, x, *cand)
        if not np.isfinite(cand_ll) or cand_ll < ll:
            converged = True
            it -= 1
            break
        change = abs(cand_ll - ll) / max(abs(ll), 1e-300)
        low, high, pi_low = cand
        r, ll = cand_r, cand_ll
        trace.append(ll)
        if change < tol:
            converged = True
            break
    max_reached = not converged
    if max_reached:
        log.debug("mixture EM did not converge in %d iterations", max_iter)
    if _component_mean(family, low) > _component_mean(family, high):
        low, high, pi_low = high, low, 1.0 - pi_low
    weak = (abs(_component_mean(family, high) - _component_mean(family, low)) < WEAK_SEPARATION
            or _count_modes(family, low, high, pi_low) < 2)
    to_tuple = lambda p: (float(p[0]), float(p[1]))  # noqa: E731
    return MixtureParams(family, to_tuple(low), to_tuple(high), float(pi_low), it, float(ll),
                         tuple(trace), bool(converged), bool(max_reached), bool(weak))


def _count_modes(family, low, high, pi_low, grid=999):
    x = np.linspace(0.0, 1.0, grid + 2)[1:-1]
    dens = pi_low * np.exp(_log_pdf(family, x, low)) + (1 - pi_low) * np.exp(_log_pdf(family, x, high))
    slope = np.sign(np.diff(dens))
    slope = slope[slope != 0]
    if slope.size == 0:
        return 1
    modes = int(((slope[:-1] > 0) & (slope[1:] < 0)).sum())
    return modes + int(slope[0] < 0) + int(slope[-1] > 0)


def fit_beta_mixture_em(values, max_iter: int = 100, tol: float = 1e-6) -> MixtureParams:
    return fit_mixture_em(values, "beta", max_iter, tol)


def posterior_weight(mixture: MixtureParams, x) -> np.ndarray | float:
    """Posterior probability that ``x`` came from the high-loss component."""
    lo, hi = mixture.log_pdfs(x)
    lo = lo + np.log(mixture.pi_low)
    hi = hi + np.log(mixture.pi_high)
    w = np.exp(hi - np.logaddexp(lo, hi))
    return float(np.reshape(w, -1)[0]) if np.ndim(x) == 0 else w


def posterior_low(mixture: MixtureParams, x):
    return 1.0 - posterior_weight(mixture, x)


@dataclass
class GroupFit:
    lo: float
    hi: float
    mixture: MixtureParams | None
    n: int
    reason: str = ""

    def normalize(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lo) / (self.hi - self.lo), NORM_EPS, 1.0 - NORM_EPS)


@dataclass
class LossMixtureModel:
    """Mixtures fitted to a ledger, per annotator or over all annotations.

    Groups with fewer than ``min_obs`` losses (or identical losses) get no
    mixture and contribute w = 0.
    """
    scope: str
    family: str
    groups: dict

    @classmethod
    def fit(cls, ledger: LossLedger, scope: str = "per_annotator", family: str = "beta",
            min_obs: int = MIN_FIT_OBS, max_iter: int = 100, tol: float = 1e-6):
        if scope not in SCOPES:
            raise ValueError(f"mixture_scope must be one of {SCOPES}")
        groups = {}
        for key, values in _group_values(ledger, scope):
            if len(values) < min_obs:
                groups[key] = GroupFit(0.0, 1.0, None, len(values), "too few observations")
                continue
            lo, hi = float(values.min()), float(values.max())
            if hi <= lo:
                groups[key] = GroupFit(lo, lo + 1.0, None, len(values), "degenerate ledger")
                continue
            fit = GroupFit(lo, hi, None, len(values))
            fit.mixture = fit_mixture_em(normalize_losses(values), family, max_iter, tol)
            groups[key] = fit
        return cls(scope, family, groups)

    def normalized(self, ledger: LossLedger) -> np.ndarray:
        """Each ledger value normalized with its group's fitted range."""
        out = np.empty(len(ledger))
        if self.scope == "global":
            g = self.groups.get("all")
            return g.normalize(ledger.losses) if g else np.full(len(ledger), NORM_EPS)
        for a in np.unique(ledger.annotators):
            sel = ledger.annotators == a
            g = self.groups.get(int(a))
            out[sel] = g.normalize(ledger.losses[sel]) if g else NORM_EPS
        return out

    def weights(self, ledger: LossLedger) -> np.ndarray:
        """Correction weight w for every ledger cell."""
        w = np.zeros(len(ledger))
        if self.scope == "global":
            g = self.groups.get("all")
            if g is None or g.mixture is None:
                return w
            # one w per sample: posterior at the sample's mean normalized loss
            norm = g.normalize(ledger.losses)
            n = int(ledger.samples.max()) + 1 if len(ledger) else 0
            sums = np.bincount(ledger.samples, norm, minlength=n)
            counts = np.bincount(ledger.samples, minlength=n)
            per_sample = sums[ledger.samples] / counts[ledger.samples]
            return np.asarray(posterior_weight(g.mixture, per_sample), dtype=float)
        for a in np.unique(ledger.annotators):
            g = self.groups.get(int(a))
            if g is None or g.mixture is None:
                continue
            sel = ledger.annotators == a
            w[sel] = posterior_weight(g.mixture, g.normalize(ledger.losses[sel]))
        return w

    def diagnostics(self) -> list[dict]:
        rows = []
        for key, g in self.groups.items():
            row = {"group": key, "n": g.n, "fitted": g.mixture is not None, "reason": g.reason}
            if g.mixture is not None:
                m = g.mixture
                row.update(mean_low=m.mean_low, mean_high=m.mean_high, pi_low=m.pi_low,
                           iterations=m.iterations, log_likelihood=m.log_likelihood,
                           weak_separation=m.weak_separation, max_iter_reached=m.max_iter_reached)
            rows.append(row)
        return rows


def _group_values(ledger, scope):
    if scope == "global":
        yield "all", ledger.losses
        return
    for a in np.unique(ledger.annotators):
        yield int(a), ledger.losses[ledger.annotators == a]


@dataclass(frozen=True)
class SplitReport:
    agree_frac: float
    disagree_frac: float
    agree_majority_frac: float
    disagree_majority_frac: float
    n_agree: int
    n_disagree: int

    def to_dict(self):
        return asdict(self)


def agree_disagree_split(ledger: LossLedger, mixture, annotations, majorities) -> SplitReport:
    """Split annotated cells into Agree (w < 0.5) and Disagree (w >= 0.5).

    ``mixture`` is a LossMixtureModel or an array of per-cell weights aligned
    with the ledger. Within each mode, reports the fraction of annotations
    equal to the sample's majority label.
    """
    w = mixture.weights(ledger) if isinstance(mixture, LossMixtureModel) else np.asarray(mixture, dtype=float)
    labels = np.asarray(getattr(annotations, "labels", annotations))
    conforms = labels[ledger.samples, ledger.annotators] == np.asarray(majorities)[ledger.samples]
    agree = w < 0.5
    n = max(len(w), 1)
    n_a, n_d = int(agree.sum()), int((~agree).sum())
    return SplitReport(
        n_a / n, n_d / n,
        float(conforms[agree].mean()) if n_a else 0.0,
        float(conforms[~agree].mean()) if n_d else 0.0,
        n_a, n_d)


def loss_histogram(normalized, conforms, bins: int = HIST_BINS):
    """Counts over ``bins`` equal-width bins on [0, 1], split by majority agreement.

    Returns rows ``(bin_lo, bin_hi, majority_count, minority_count)``.
    """
    normalized = np.asarray(normalized, dtype=float)
    conforms = np.asarray(conforms, dtype=bool)
    edges = np.linspace(0.0, 1.0, bins + 1)
    maj, _ = np.histogram(normalized[conforms], edges)
    mino, _ = np.histogram(normalized[~conforms], edges)
    return [(float(edges[k]), float(edges[k + 1]), int(maj[k]), int(mino[k])) for k in range(bins)]
