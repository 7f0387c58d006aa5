"""Optimization of the tolerance-map estimator against a frozen task network.

The two-term objective trades off distortion magnitude against task-output
consistency: for a feature f with predicted map d = G(f),

    loss = lambda_t * D_task(heads(f), heads(f + d)) - ||d||_2

with D_task the task discrepancy (clean outputs are the KL reference) and
the magnitude term the per-sample l2 norm, both averaged over the batch.
The task network stays frozen for the whole run; every step asserts its
checksum.  Given (seed, data order) the run is fully deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .discrepancy import DiscrepancyConfig, discrepancy
from .errors import DivergenceError, FeatJndError, ValidationError
from .estimator import EstimatorConfig, JndEstimator, init_estimator
from .features import as_array
from .taskbench import TaskBundle

TRAIN_LOG_SCHEMA = "# featjnd-train-log-v1"


@dataclass(frozen=True)
class TrainConfig:
    lambda_t: float = 50.0
    temperature: float = 4.0
    learning_rate: float = 1e-4
    batch_size: int = 64
    epochs: int = 30
    grad_clip_norm: float = 1.0
    magnitude_mode: str = "l2_sum"
    task: str = "classification"
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_t", "temperature", "learning_rate", "grad_clip_norm"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.magnitude_mode != "l2_sum":
            raise ValidationError(f"unknown magnitude mode {self.magnitude_mode!r}")


@dataclass
class StepStats:
    loss: float
    discrepancy: float
    magnitude: float
    nrmse: float
    batch_size: int


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    mean_magnitude: float
    mean_discrepancy: float
    mean_nrmse: float


def _as_levels(x) -> list[torch.Tensor]:
    if isinstance(x, torch.Tensor):
        return [x]
    return list(x)


def _per_sample_l2(levels: list[torch.Tensor]) -> torch.Tensor:
    """l2 norm over all elements of all levels, one value per batch sample."""
    sq = None
    for lvl in levels:
        flat = lvl.reshape(lvl.shape[0], -1)
        contrib = (flat * flat).sum(dim=1)
        sq = contrib if sq is None else sq + contrib
    return torch.sqrt(sq)


def magnitude(delta, mode: str = "l2_sum") -> float:
    """Distortion amplitude of one map (or multi-level map): l2_sum = full l2 norm."""
    if mode != "l2_sum":
        raise ValidationError(f"unknown magnitude mode {mode!r}")
    levels = list(delta) if isinstance(delta, (list, tuple)) else [delta]
    total = 0.0
    for lvl in levels:
        arr = lvl.detach().numpy() if isinstance(lvl, torch.Tensor) else as_array(lvl)
        arr = np.asarray(arr, dtype=np.float64)
        total += float(np.sum(arr * arr))
    return float(np.sqrt(total))


def _loss_terms(f, delta, head_eval: Callable, cfg: TrainConfig):
    """(loss, discrepancy term, batch-mean magnitude); inputs may be batched."""
    f_levels = _as_levels(f)
    d_levels = _as_levels(delta)
    if len(f_levels) != len(d_levels):
        raise ValidationError(
            f"feature has {len(f_levels)} levels but map has {len(d_levels)}"
        )
    batched = f_levels[0].dim() == 4
    for a, b in zip(f_levels, d_levels):
        if a.shape != b.shape:
            raise ValidationError(f"map shape {tuple(b.shape)} != feature shape {tuple(a.shape)}")
    if not batched:
        f_levels = [a.unsqueeze(0) for a in f_levels]
        d_levels = [b.unsqueeze(0) for b in d_levels]

    def rewrap(levels):
        if isinstance(f, torch.Tensor):
            out = levels[0]
            return out if batched else out.squeeze(0)
        return levels if batched else [lvl.squeeze(0) for lvl in levels]

    distorted = [a + b for a, b in zip(f_levels, d_levels)]
    out_clean = head_eval(rewrap(f_levels))
    out_dist = head_eval(rewrap(distorted))
    dcfg = DiscrepancyConfig(temperature=cfg.temperature, task=cfg.task)
    disc = discrepancy(out_clean, out_dist, dcfg)
    mag = _per_sample_l2(d_levels).mean()
    return cfg.lambda_t * disc - mag, disc, mag


def featjnd_loss(f, delta, head_eval: Callable, cfg: TrainConfig) -> torch.Tensor:
    """Two-term objective lambda_t * D_task - ||delta||; negative values are normal."""
    loss, _, _ = _loss_terms(f, delta, head_eval, cfg)
    return loss


def _batch_nrmse(f_levels, d_levels, eps: float = 1e-8) -> float:
    """Mean over samples of the per-level-averaged distortion ratio ||d||/||f||."""
    with torch.no_grad():
        ratios = []
        for a, b in zip(f_levels, d_levels):
            fn = a.reshape(a.shape[0], -1).double().norm(dim=1)
            dn = b.reshape(b.shape[0], -1).double().norm(dim=1)
            ratios.append(dn / (fn + eps))
        return float(torch.stack(ratios).mean())


def train_step(
    estimator: JndEstimator,
    optimizer: torch.optim.Optimizer,
    batch_features: Sequence[torch.Tensor],
    bundle: TaskBundle,
    cfg: TrainConfig,
) -> StepStats:
    """One clipped adaptive-moment step on the estimator; the bundle stays frozen."""
    before = bundle.checksum()
    f_levels = list(batch_features)
    with torch.no_grad():
        rois = bundle.select_rois(f_levels)
    delta_levels = [estimator(lvl) for lvl in f_levels]
    for d in delta_levels:
        if not torch.isfinite(d).all():
            raise DivergenceError("estimator produced a non-finite map; aborting training")
    head_eval = lambda feats: bundle.eval_heads(_as_levels(feats), rois)
    try:
        loss, disc, mag = _loss_terms(f_levels, delta_levels, head_eval, cfg)
    except ValidationError as exc:
        if "non-finite" in str(exc):
            raise DivergenceError(f"task-head outputs diverged: {exc}") from exc
        raise

    if not torch.isfinite(disc):
        raise DivergenceError("discrepancy term is non-finite; aborting training")
    if not torch.isfinite(mag):
        raise DivergenceError("magnitude term is non-finite; aborting training")
    if not torch.isfinite(loss):
        raise DivergenceError("loss is non-finite; aborting training")

    optimizer.zero_grad()
    loss.backward()
    torch.nn.utils.clip_grad_norm_(estimator.parameters(), cfg.grad_clip_norm)
    optimizer.step()

    if bundle.checksum() != before:
        raise FeatJndError("frozen task network changed during a training step")
    return StepStats(
        loss=float(loss.detach()),
        discrepancy=float(disc.detach()),
        magnitude=float(mag.detach()),
        nrmse=_batch_nrmse(f_levels, delta_levels),
        batch_size=f_levels[0].shape[0],
    )


def train_loop(
    bundle: TaskBundle,
    cfg: TrainConfig,
    est_cfg: EstimatorConfig | None = None,
    estimator: JndEstimator | None = None,
) -> tuple[JndEstimator, list[EpochStats]]:
    """Full deterministic training run; returns the estimator in eval mode.

    With ``epochs == 0`` the freshly initialized estimator is returned
    untouched.  The per-epoch log records batch-size-weighted means.
    """
    if cfg.task != bundle.discrepancy_task:
        raise ValidationError(
            f"config task {cfg.task!r} != bundle task {bundle.discrepancy_task!r}"
        )
    if estimator is None:
        if est_cfg is None:
            est_cfg = EstimatorConfig(in_channels=bundle.feature_channels)
        estimator = init_estimator(est_cfg, cfg.seed)
    checksum_start = bundle.checksum()
    optimizer = torch.optim.Adam(estimator.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    n = bundle.train_features[0].shape[0]
    log: list[EpochStats] = []
    estimator.train()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            batch = [lvl[idx] for lvl in bundle.train_features]
            stats = train_step(estimator, optimizer, batch, bundle, cfg)
            w = stats.batch_size
            sums += w * np.array([stats.loss, stats.magnitude, stats.discrepancy, stats.nrmse])
            seen += w
        log.append(EpochStats(epoch, *(sums / seen)))
    estimator.eval()
    if bundle.checksum() != checksum_start:
        raise FeatJndError("frozen task network changed during the training run")
    return estimator, log


def write_training_log(log: Sequence[EpochStats], path) -> None:
    """Training log CSV; schema version in a leading comment row."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(TRAIN_LOG_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "mean_magnitude", "mean_discrepancy", "mean_nrmse"])
        for row in log:
            writer.writerow(
                [
                    row.epoch,
                    repr(row.mean_loss),
                    repr(row.mean_magnitude),
                    repr(row.mean_discrepancy),
                    repr(row.mean_nrmse),
                ]
            )
