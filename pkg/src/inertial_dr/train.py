"""Desk-scale training of the noise adapter and the twelve learnable noise levels.

Gradients come from simultaneous-perturbation stochastic approximation
(SPSA): every coordinate is perturbed at once by ``+-c`` with a shared
Rademacher draw and the loss difference of two filter runs gives a gradient
estimate. Both runs see the same windows, augmentation noise and dropout
masks, so the estimate only reflects the parameter change. The estimate is
clipped to unit norm and fed to Adam.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import adapter
from .adapter import AdapterWeights
from .data import Sequence
from .geom import ExtendedPose
from .iekf import NumericalError, run_filter
from .metrics import LENGTHS, relative_errors
from .model import FilterConfig, InitialBeliefs, ProcessNoise, initial_state

log = logging.getLogger(__name__)

SIGMA_NAMES = tuple(f"sigma0_{f.name}" for f in fields(InitialBeliefs)) + tuple(
    f"sigma_{f.name}" for f in fields(ProcessNoise)
)
SIGMA_SECTION = "sigma.log"


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 9
    window_s: float = 60.0
    augmentation_std: float = 1e-4
    grad_clip_norm: float = 1.0
    dropout_p: float = 0.5
    seed: int = 0
    steps_per_epoch: int = 1
    spsa_c: float = 1e-2
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise TrainingError("epochs must be >= 0; batch_size and steps_per_epoch >= 1")
        if self.window_s <= 0 or self.grad_clip_norm <= 0 or self.spsa_c <= 0:
            raise TrainingError("window_s, grad_clip_norm and spsa_c must be positive")
        if self.augmentation_std < 0:
            raise TrainingError("augmentation_std must be non-negative")
        if not 0.0 <= self.dropout_p < 1.0:
            raise TrainingError("dropout_p must lie in [0, 1)")


@dataclass(frozen=True)
class LearnableSet:
    """Adapter weights plus log standard deviations of P0 and Q (order: ``SIGMA_NAMES``)."""

    weights: AdapterWeights
    log_sigma: np.ndarray

    def __post_init__(self):
        ls = np.asarray(self.log_sigma, dtype=float)
        if ls.shape != (len(SIGMA_NAMES),):
            raise TrainingError(f"log_sigma must have {len(SIGMA_NAMES)} entries, got {ls.shape}")
        object.__setattr__(self, "log_sigma", ls)

    @classmethod
    def initial(cls, weights: AdapterWeights, cfg: FilterConfig | None = None) -> "LearnableSet":
        cfg = cfg or FilterConfig()
        sig = [getattr(cfg.beliefs, f.name) for f in fields(InitialBeliefs)]
        sig += [getattr(cfg.process, f.name) for f in fields(ProcessNoise)]
        return cls(weights, np.log(sig))

    @property
    def sigmas(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    def beliefs(self) -> InitialBeliefs:
        s = self.sigmas
        return InitialBeliefs(*s[:6])

    def process(self) -> ProcessNoise:
        s = self.sigmas
        return ProcessNoise(*s[6:])

    def filter_config(self, base: FilterConfig | None = None) -> FilterConfig:
        return replace(base or FilterConfig(), beliefs=self.beliefs(), process=self.process())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weights.to_vector(), self.log_sigma])

    def with_vector(self, vec) -> "LearnableSet":
        vec = np.asarray(vec, dtype=float)
        k = len(SIGMA_NAMES)
        return LearnableSet(self.weights.with_vector(vec[:-k]), vec[-k:])


def save_checkpoint(params: LearnableSet, path) -> Path:
    return adapter.save_weights(params.weights, path, extra={SIGMA_SECTION: params.log_sigma})


def load_checkpoint(path, cfg: FilterConfig | None = None) -> LearnableSet:
    """Load a checkpoint; a plain weight file gets the configured noise levels."""
    w, extra = adapter.parse_weights(Path(path).read_text())
    if SIGMA_SECTION in extra:
        return LearnableSet(w, extra[SIGMA_SECTION])
    return LearnableSet.initial(w, cfg)


# ------------------------------------------------------------------ loss


def relative_translation_loss(est, gt, lengths=LENGTHS) -> tuple[float, bool]:
    """Mean relative translation error in percent and a flag for "no valid length".

    Lengths with no sub-trajectory are skipped; if none is available the
    loss is NaN and the flag is set.
    """
    rep = relative_errors(est, gt, lengths)
    return rep.t_rel, rep.flagged


def filter_sequence(params: LearnableSet, seq: Sequence, base: FilterConfig | None = None,
                    dropout=None, omega=None, accel=None):
    """Run the adaptive filter on ``seq`` (optionally with replaced IMU channels)."""
    cfg = params.filter_config(base)
    omega = seq.omega if omega is None else omega
    accel = seq.accel if accel is None else accel
    N = adapter.noise_sequence(params.weights, omega, accel, cfg.beta, cfg.sigma_lat, cfg.sigma_up, dropout)
    x0 = initial_state(ExtendedPose(seq.gt_rot[0], seq.gt_vel[0], seq.gt_pos[0]))
    return run_filter(seq.t, omega, accel, x0, cfg.beliefs.covariance(), cfg.process, N,
                      gravity=cfg.gravity, theta_small=cfg.theta_small, dt_warn=cfg.dt_warn)


def sequence_loss(params: LearnableSet, seq: Sequence, base: FilterConfig | None = None,
                  dropout=None, omega=None, accel=None) -> float:
    try:
        res = filter_sequence(params, seq, base, dropout, omega, accel)
    except NumericalError:
        return float("nan")
    return relative_translation_loss((res.rotation, res.position), (seq.gt_rot, seq.gt_pos))[0]


# ------------------------------------------------------------------ batches


@dataclass
class Window:
    seq: Sequence
    omega: np.ndarray
    accel: np.ndarray
    dropout: np.ndarray


def sample_batch(dataset, cfg: TrainConfig, rng: np.random.Generator) -> list[Window]:
    """Windows of ``cfg.window_s`` drawn uniformly (with replacement) over sequences and start times."""
    if not dataset:
        raise TrainingError("empty dataset")
    batch = []
    for _ in range(cfg.batch_size):
        seq = dataset[int(rng.integers(len(dataset)))]
        dt = float(np.median(np.diff(seq.t)))
        n = min(len(seq), int(round(cfg.window_s / dt)) + 1)
        start = int(rng.integers(len(seq) - n + 1))
        win = seq.slice(start, start + n)
        omega = win.omega + rng.normal(0.0, cfg.augmentation_std, win.omega.shape)
        accel = win.accel + rng.normal(0.0, cfg.augmentation_std, win.accel.shape)
        mask = adapter.dropout_mask(rng, cfg.dropout_p)
        batch.append(Window(win, omega, accel, mask))
    return batch


def batch_loss(params: LearnableSet, batch, base: FilterConfig | None = None) -> float:
    """Mean loss over windows that contain at least one valid sub-trajectory."""
    losses = []
    for w in batch:
        if w.seq.distance() < min(LENGTHS):
            continue  # too short for any length: no signal, not a failure
        losses.append(sequence_loss(params, w.seq, base, w.dropout, w.omega, w.accel))
    return float(np.mean(losses)) if losses else float("nan")


# ------------------------------------------------------------------ optimiser


def clip_by_norm(g, max_norm: float) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    norm = np.linalg.norm(g)
    return g * (max_norm / norm) if norm > max_norm else g


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n))


def adam_update(theta, grad, state: AdamState, cfg: TrainConfig) -> np.ndarray:
    b1, b2 = cfg.adam_betas
    state.t += 1
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad**2
    m_hat = state.m / (1 - b1**state.t)
    v_hat = state.v / (1 - b2**state.t)
    return theta - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def spsa_gradient(params: LearnableSet, batch, cfg: TrainConfig, rng, base=None):
    """Return ``(gradient estimate, L+, L-)``."""
    theta = params.to_vector()
    delta = rng.choice([-1.0, 1.0], size=theta.size)
    lp = batch_loss(params.with_vector(theta + cfg.spsa_c * delta), batch, base)
    lm = batch_loss(params.with_vector(theta - cfg.spsa_c * delta), batch, base)
    return (lp - lm) / (2.0 * cfg.spsa_c) * delta, lp, lm


@dataclass
class StepInfo:
    loss: float
    grad_norm: float
    rejected: bool


def training_step(params: LearnableSet, batch, cfg: TrainConfig, rng: np.random.Generator | None = None,
                  adam: AdamState | None = None, base: FilterConfig | None = None, info: list | None = None):
    """One SPSA + clip + Adam update; returns ``(new_params, loss)``.

    ``loss`` is the mean of the two perturbed batch losses. A non-finite
    loss rejects the step: parameters and optimiser state stay unchanged.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    theta = params.to_vector()
    adam = AdamState.zeros(theta.size) if adam is None else adam
    g, lp, lm = spsa_gradient(params, batch, cfg, rng, base)
    loss = 0.5 * (lp + lm)
    if not (np.isfinite(lp) and np.isfinite(lm)):
        log.warning("non-finite training loss (L+=%s, L-=%s): step rejected", lp, lm)
        if info is not None:
            info.append(StepInfo(float("nan"), float("nan"), True))
        return params, float("nan")
    g_norm = float(np.linalg.norm(g))
    g = clip_by_norm(g, cfg.grad_clip_norm)
    new = params.with_vector(adam_update(theta, g, adam, cfg))
    if info is not None:
        info.append(StepInfo(loss, g_norm, False))
    return new, float(loss)


# ------------------------------------------------------------------ loop


@dataclass
class TrainingResult:
    params: LearnableSet  # best by validation (or training) loss
    final: LearnableSet
    history: list = field(default_factory=list)  # (epoch, train_loss, val_loss)
    initial_val_loss: float = float("nan")
    best_epoch: int = 0


def evaluate(params: LearnableSet, sequences, base: FilterConfig | None = None) -> float:
    """Mean relative translation error (%) over full sequences, no dropout."""
    losses = [sequence_loss(params, s, base) for s in sequences]
    losses = [x for x in losses if not np.isnan(x)]
    return float(np.mean(losses)) if losses else float("nan")


def history_csv(history) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("epoch", "train_loss", "val_loss"))
    for epoch, tr, va in history:
        w.writerow((epoch, repr(float(tr)), repr(float(va))))
    return buf.getvalue()


def run_training(train_set, cfg: TrainConfig, val_set=(), init: LearnableSet | None = None,
                 out_dir=None, base: FilterConfig | None = None) -> TrainingResult:
    """Train for ``cfg.epochs`` epochs of ``cfg.steps_per_epoch`` minibatch updates.

    Writes ``checkpoint_XXX.txt`` per epoch, ``best.txt`` and
    ``loss_history.csv`` into ``out_dir`` when given.
    """
    train_set = list(train_set)
    val_set = list(val_set)
    if not train_set:
        raise TrainingError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    if init is None:
        mean, std = adapter.normalization_stats(np.hstack([s.omega, s.accel]) for s in train_set)
        init = LearnableSet.initial(adapter.init_weights(cfg.seed, mean, std), base)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    score_set = val_set or train_set
    best_score = evaluate(init, score_set, base)
    result = TrainingResult(init, init, [], best_score if val_set else float("nan"), 0)
    params = init
    adam = AdamState.zeros(init.to_vector().size)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for _ in range(cfg.steps_per_epoch):
            batch = sample_batch(train_set, cfg, rng)
            params, loss = training_step(params, batch, cfg, rng, adam, base)
            if np.isfinite(loss):
                losses.append(loss)
        train_loss = float(np.mean(losses)) if losses else float("nan")
        score = evaluate(params, score_set, base)
        val_loss = score if val_set else float("nan")
        result.history.append((epoch, train_loss, val_loss))
        log.info("epoch %d: train %.4f%%  val %.4f%%", epoch, train_loss, val_loss)
        if out is not None:
            save_checkpoint(params, out / f"checkpoint_{epoch:03d}.txt")
        if np.isfinite(score) and (not np.isfinite(best_score) or score < best_score):
            best_score = score
            result.params = params
            result.best_epoch = epoch
    result.final = params
    if out is not None:
        save_checkpoint(result.params, out / "best.txt")
        (out / "loss_history.csv").write_text(history_csv(result.history))
    return result
