"""Training loop: SGD with momentum, warm-up, per-epoch mixture refits and mixup.

Epoch schedule (0-based epoch ``e``, ``W = warmup_epochs``):

* ``e < W``: correction weights are 0 and the entropy confidence penalty is on.
* after every epoch ``e >= W - 1`` of a label-correction arm, an evaluation
  pass over the training set fills a LossLedger, the mixture is refit, and
  the resulting weights (and self-guesses) are used during epoch ``e + 1``.

Every random draw comes from ``numpy.random.default_rng([seed, stream, ...])``
so a run is a pure function of (config, dataset).
"""
from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .annotations import MISSING, Dataset, majority_dataset
from .losses import MT_NORMS, LossSpec, arm_is_multitask, arm_uses_correction, canonical_arm
from .metrics import assemble_report, cell_losses
from .mixture import FAMILIES, SCOPES, LossLedger, LossMixtureModel, agree_disagree_split
from .model import Batch, Dims, ModelParams, compute_gradients, init_model, predict_proba

log = logging.getLogger(__name__)

MIXUP_MODES = ("auto", "off", "input", "manifold")
GUESS_SOURCES = ("epoch", "batch")


class TrainingDiverged(RuntimeError):
    """Non-finite loss or gradient. ``history`` holds the completed epochs."""

    def __init__(self, message, epoch, batch, history):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.history = history


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    warmup_epochs: int = 2
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.01
    batch_size: int = 64
    psi: float = 0.5
    mode: str = "multitask_lc"
    mixup: str = "auto"
    mixup_alpha: float = 1.0
    mixture_scope: str = "per_annotator"
    mixture_family: str = "beta"
    mt_norm: str = "present"
    entropy_penalty_coeff: float = 0.1
    class_balance_coeff: float = 1.0
    fixed_w: float | None = None
    hidden: int = 32
    layers: int = 2
    seed: int = 0
    seeds: tuple = ()
    lr_ramp: bool = False
    guess_source: str = "epoch"
    metric_average: str = "macro"
    variance_heads: str = "all"
    min_mixture_obs: int = 50
    em_max_iter: int = 100
    em_tol: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "mode", canonical_arm(self.mode))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        self.validate()

    def validate(self):
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must be in [0, epochs]")
        for name in ("learning_rate", "momentum", "weight_decay", "psi", "mixup_alpha",
                     "entropy_penalty_coeff", "class_balance_coeff", "em_tol"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0 or self.psi < 0:
            raise ValueError("weight_decay and psi must be non-negative")
        if self.entropy_penalty_coeff < 0 or self.class_balance_coeff < 0:
            raise ValueError("penalty coefficients must be non-negative")
        if self.mixup_alpha <= 0:
            raise ValueError("mixup_alpha must be positive")
        if min(self.batch_size, self.hidden, self.layers, self.em_max_iter) < 1:
            raise ValueError("batch_size, hidden, layers and em_max_iter must be positive")
        if self.fixed_w is not None and not 0 <= self.fixed_w <= 1:
            raise ValueError("fixed_w must be in [0, 1]")
        for name, allowed in (("mixup", MIXUP_MODES), ("mixture_scope", SCOPES),
                              ("mixture_family", FAMILIES), ("mt_norm", MT_NORMS),
                              ("guess_source", GUESS_SOURCES),
                              ("metric_average", ("macro", "positive")),
                              ("variance_heads", ("all", "annotated"))):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}")

    @property
    def uses_correction(self):
        return arm_uses_correction(self.mode)

    @property
    def effective_mixup(self):
        if self.mixup == "auto":
            return "manifold" if self.uses_correction else "off"
        return self.mixup

    def loss_spec(self, warm: bool) -> LossSpec:
        return LossSpec(self.mode, self.psi,
                        self.entropy_penalty_coeff if warm else 0.0,
                        self.class_balance_coeff,
                        "mixture" if self.fixed_w is None else self.fixed_w,
                        self.mt_norm)

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    def config_hash(self):
        text = "\n".join(f"{k}={v!r}" for k, v in sorted(self.to_dict().items()))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @classmethod
    def field_names(cls):
        return tuple(f.name for f in fields(cls))


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    metrics: dict
    mixture: dict
    wall_clock: float = field(default=0.0, compare=False)

    def row(self) -> dict:
        m = self.metrics
        out = {"epoch": self.epoch, "loss": self.loss, "f1_majority": m["f1"],
               "annotator_acc": m["annotator_acc"], "pred_variance": m["pred_variance"],
               "agree_frac": m["agree_frac"]}
        for k in ("precision", "recall", "accuracy", "disagree_frac", "agree_majority_frac",
                  "disagree_majority_frac"):
            out[k] = m[k]
        out.update(self.mixture)
        out["wall_clock"] = self.wall_clock
        return out


HISTORY_FIELDS = ("epoch", "loss", "f1_majority", "annotator_acc", "pred_variance", "agree_frac",
                  "precision", "recall", "accuracy", "disagree_frac", "agree_majority_frac",
                  "disagree_majority_frac", "correction_active", "mean_weight",
                  "train_agree_frac", "groups_fitted", "wall_clock")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    final_ledger: LossLedger | None = field(default=None, compare=False, repr=False)
    final_weights: np.ndarray | None = field(default=None, compare=False, repr=False)
    final_mixture: LossMixtureModel | None = field(default=None, compare=False, repr=False)

    def __len__(self):
        return len(self.records)

    def rows(self):
        return [r.row() for r in self.records]


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """v <- momentum * v + (grad + weight_decay * param);  param <- param - lr * v.

    Works on arrays (or scalars); returns ``(new_params, new_velocity)``.
    """
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    with np.errstate(over="ignore", invalid="ignore"):
        v = momentum * np.asarray(velocity, dtype=float) + (grads + weight_decay * params)
        return params - lr * v, v


def _training_view(config: TrainConfig, dataset: Dataset) -> Dataset:
    return dataset if arm_is_multitask(config.mode) else majority_dataset(dataset)


def train(config: TrainConfig, dataset: Dataset, eval_dataset: Dataset | None = None):
    """Train one arm; returns ``(ModelParams, TrainHistory)``.

    Metrics in the history are computed on ``eval_dataset`` (default: the
    training data) at the end of every epoch.
    """
    t0 = time.perf_counter()
    train_ds = _training_view(config, dataset)
    eval_ds = dataset if eval_dataset is None else eval_dataset
    X = np.ascontiguousarray(train_ds.features)
    labels = train_ds.annotations.labels
    present = labels != MISSING
    N, A = labels.shape
    M = train_ds.num_classes
    dims = Dims(X.shape[1], config.hidden, M, A, config.layers)
    model = init_model(dims, config.seed)
    velocity = np.zeros(model.num_params)
    weights = np.zeros((N, A))
    guesses = None
    correcting = False
    mixup = config.effective_mixup
    history = TrainHistory()
    steps_per_epoch = -(-N // config.batch_size)

    for epoch in range(config.epochs):
        warm = epoch < config.warmup_epochs
        spec = config.loss_spec(warm)
        apply_w = weights if (correcting and not warm) else None
        rng = np.random.default_rng([config.seed, 100, epoch])
        order = rng.permutation(N)
        batch_losses = []
        for b in range(steps_per_epoch):
            idx = order[b * config.batch_size:(b + 1) * config.batch_size]
            z = None
            if apply_w is not None and config.psi != 0.0:
                if config.guess_source == "batch" or guesses is None:
                    z = predict_proba(model, X[idx])
                else:
                    z = guesses[idx]
            batch = Batch(X[idx], labels[idx], None if apply_w is None else apply_w[idx], z)
            if mixup != "off":
                batch.mix_perm = rng.permutation(len(idx))
                batch.mix_lambda = float(rng.beta(config.mixup_alpha, config.mixup_alpha))
                batch.mix_layer = 0 if mixup == "input" else int(rng.integers(0, config.layers + 1))
            grad, loss = compute_gradients(model, batch, spec)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad.vector)):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch + 1}, batch {b}",
                                       epoch + 1, b, history)
            lr = config.learning_rate
            if config.lr_ramp and warm:
                lr *= (epoch * steps_per_epoch + b + 1) / (config.warmup_epochs * steps_per_epoch)
            new_vec, velocity = sgd_step(model.vector, grad.vector, velocity, lr,
                                         config.momentum, config.weight_decay)
            model = model.like(new_vec)
            batch_losses.append(loss)

        # evaluation pass: ledger of plain per-cell CE and detached self-guesses
        probs = predict_proba(model, X)
        ledger = LossLedger.from_matrix(epoch + 1, cell_losses(probs, labels), present)
        guesses = probs
        mix_info = {"correction_active": int(apply_w is not None), "mean_weight": 0.0,
                    "train_agree_frac": None, "groups_fitted": 0}
        if apply_w is not None:
            mix_info["mean_weight"] = float(apply_w[present].mean())
        if config.uses_correction and epoch >= config.warmup_epochs - 1:
            if config.fixed_w is not None:
                weights = np.where(present, config.fixed_w, 0.0)
                history.final_mixture = None
            else:
                mix = LossMixtureModel.fit(ledger, config.mixture_scope, config.mixture_family,
                                           config.min_mixture_obs, config.em_max_iter, config.em_tol)
                cell_w = mix.weights(ledger)
                weights = ledger.to_matrix(cell_w, (N, A))
                maj, _, _ = train_ds.annotations.majorities()
                split = agree_disagree_split(ledger, cell_w, labels, maj)
                mix_info["train_agree_frac"] = split.agree_frac
                mix_info["groups_fitted"] = sum(g.mixture is not None for g in mix.groups.values())
                history.final_mixture = mix
            correcting = True
            history.final_weights = weights
        history.final_ledger = ledger

        report = assemble_report(model, eval_ds, config)
        history.records.append(EpochRecord(epoch + 1, float(np.mean(batch_losses)), report.row(),
                                           mix_info, time.perf_counter() - t0))
        log.info("epoch %d loss %.4f f1 %.4f", epoch + 1, history.records[-1].loss, report.f1)
    return model, history


@dataclass
class SweepReport:
    rows: list
    runs: list

    FIELDS = ("psi", "n_seeds", "precision", "recall", "f1", "f1_std", "accuracy",
              "annotator_acc", "pred_variance", "agree_frac")


def _one_run(config, dataset, eval_dataset):
    model, history = train(config, dataset, eval_dataset)
    report = assemble_report(model, dataset if eval_dataset is None else eval_dataset, config)
    return {"psi": config.psi, "seed": config.seed, **report.row()}


def run_psi_sweep(config: TrainConfig, psi_values, dataset: Dataset,
                  eval_dataset: Dataset | None = None, threads: int = 1) -> SweepReport:
    """Train one model per (psi, seed) and average final metrics over seeds per psi.

    Seeds come from ``config.seeds`` (or ``config.seed`` alone). Runs are
    independent and may execute on ``threads`` worker threads; results are
    collected in (psi, seed) order either way.
    """
    psi_values = [float(p) for p in psi_values]
    if not psi_values:
        raise ValueError("psi_values must be non-empty")
    seeds = config.seeds or (config.seed,)
    jobs = [replace(config, psi=p, seed=s) for p in psi_values for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(lambda c: _one_run(c, dataset, eval_dataset), jobs))
    else:
        runs = [_one_run(c, dataset, eval_dataset) for c in jobs]
    rows = []
    for p in psi_values:
        sel = [r for r in runs if r["psi"] == p]
        mean = lambda k: float(np.mean([r[k] for r in sel]))  # noqa: E731
        rows.append({"psi": p, "n_seeds": len(sel),
                     "precision": mean("precision"), "recall": mean("recall"), "f1": mean("f1"),
                     "f1_std": float(np.std([r["f1"] for r in sel])),
                     "accuracy": mean("accuracy"), "annotator_acc": mean("annotator_acc"),
                     "pred_variance": mean("pred_variance"), "agree_frac": mean("agree_frac")})
    return SweepReport(rows, runs)
