"""Comparison protocols: matched-distortion sweeps, the alpha knob, and
budget-matched quantization.

The matched-distortion protocol perturbs eval-set features two ways —
scaled predicted maps (f + alpha * d) and i.i.d. Gaussian noise of varying
sigma — and compares task performance at equal mean NRMSE by piecewise
linear interpolation of both (NRMSE, performance) curves onto a shared
grid.  Interpolation never extrapolates: grid points outside either
curve's NRMSE range are reported as absent.

Gaussian cells draw a unit-variance noise block per (seed, level) and
scale it by sigma, so every cell is deterministic and independent of
evaluation order; per-seed rows are recorded even though curves compare
seed means.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .errors import DegenerateInputError, FormatError, ValidationError
from .estimator import JndEstimator
from .features import FeatureTensor
from .quantization import round_half_away
from .taskbench import TaskBundle

SWEEP_SCHEMA = "# featjnd-sweep-v1"
QUANT_SCHEMA = "# featjnd-quant-v1"


@dataclass(frozen=True)
class DistortionSpec:
    """One distortion setting: scaled predicted map, or seeded Gaussian noise."""

    kind: str
    alpha: Optional[float] = None
    sigma: Optional[float] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.kind == "featjnd_scaled":
            if self.alpha is None or self.alpha < 0:
                raise ValidationError(f"featjnd_scaled needs alpha >= 0, got {self.alpha}")
            if self.sigma is not None or self.seed is not None:
                raise ValidationError("featjnd_scaled takes no sigma/seed")
        elif self.kind == "gaussian":
            if self.sigma is None or self.sigma < 0:
                raise ValidationError(f"gaussian needs sigma >= 0, got {self.sigma}")
            if self.seed is None:
                raise ValidationError("gaussian needs a seed")
            if self.alpha is not None:
                raise ValidationError("gaussian takes no alpha")
        else:
            raise ValidationError(f"unknown distortion kind {self.kind!r}")


def apply_distortion(f: FeatureTensor, delta: Optional[FeatureTensor], spec: DistortionSpec) -> FeatureTensor:
    """Distort one feature tensor; deterministic given ``spec``."""
    fa = f.values.astype(np.float64)
    if spec.kind == "featjnd_scaled":
        if delta is None:
            raise ValidationError("featjnd_scaled needs the predicted map")
        if delta.shape != f.shape:
            raise ValidationError(f"map shape {delta.shape} != feature shape {f.shape}")
        out = fa + spec.alpha * delta.values.astype(np.float64)
    else:
        rng = np.random.default_rng(spec.seed)
        out = fa + spec.sigma * rng.standard_normal(fa.shape)
    return FeatureTensor(out.astype(np.float32))


@dataclass
class SweepRow:
    kind: str
    alpha: Optional[float]
    sigma: Optional[float]
    seed: Optional[int]
    nrmse: float
    performance: float


@dataclass
class SweepResult:
    rows: list[SweepRow] = field(default_factory=list)
    clean_score: float = 0.0
    metadata: dict = field(default_factory=dict)

    def featjnd_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """(nrmse, performance) of the scaled-map rows, sorted by nrmse."""
        pts = sorted(
            (r.nrmse, r.performance) for r in self.rows if r.kind == "featjnd_scaled"
        )
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        return xs, ys

    def gaussian_curve(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-sigma seed means of (nrmse, performance), sorted by nrmse."""
        by_sigma: dict[float, list[SweepRow]] = {}
        for r in self.rows:
            if r.kind == "gaussian":
                by_sigma.setdefault(r.sigma, []).append(r)
        pts = sorted(
            (float(np.mean([r.nrmse for r in rows])), float(np.mean([r.performance for r in rows])))
            for rows in by_sigma.values()
        )
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        return xs, ys

    def drops(self) -> list[tuple[float, float]]:
        """(alpha, clean_score - performance) for the scaled-map rows."""
        pts = [
            (r.alpha, self.clean_score - r.performance)
            for r in self.rows
            if r.kind == "featjnd_scaled"
        ]
        return sorted(pts)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(SWEEP_SCHEMA + "\n")
            writer = csv.writer(fh)
            writer.writerow(["kind", "alpha", "sigma", "seed", "nrmse", "performance"])
            for r in self.rows:
                writer.writerow(
                    [
                        r.kind,
                        "" if r.alpha is None else repr(r.alpha),
                        "" if r.sigma is None else repr(r.sigma),
                        "" if r.seed is None else r.seed,
                        repr(r.nrmse),
                        repr(r.performance),
                    ]
                )

    @classmethod
    def from_csv(cls, path, clean_score: float = 0.0) -> "SweepResult":
        rows = []
        with open(path, "r", encoding="utf-8") as fh:
            schema = fh.readline().strip()
            if schema != SWEEP_SCHEMA:
                raise FormatError(f"unexpected sweep schema line in {path}: {schema!r}")
            for rec in csv.DictReader(fh):
                rows.append(
                    SweepRow(
                        kind=rec["kind"],
                        alpha=float(rec["alpha"]) if rec["alpha"] else None,
                        sigma=float(rec["sigma"]) if rec["sigma"] else None,
                        seed=int(rec["seed"]) if rec["seed"] else None,
                        nrmse=float(rec["nrmse"]),
                        performance=float(rec["performance"]),
                    )
                )
        return cls(rows=rows, clean_score=clean_score)


def _predict_maps(bundle: TaskBundle, estimator: JndEstimator) -> list[torch.Tensor]:
    """Inference-mode maps for the whole eval set, one tensor per level."""
    if estimator.cfg.in_channels != bundle.feature_channels:
        raise ValidationError(
            f"estimator expects {estimator.cfg.in_channels} channels,"
            f" bundle provides {bundle.feature_channels}"
        )
    was_training = estimator.training
    estimator.eval()
    try:
        with torch.no_grad():
            maps = [estimator(lvl) for lvl in bundle.eval_features]
    finally:
        estimator.train(was_training)
    return maps


def _mean_nrmse(
    clean: Sequence[torch.Tensor], distorted: Sequence[torch.Tensor], eps: float
) -> float:
    """Mean over examples of the per-level-averaged NRMSE."""
    per_level = []
    for a, b in zip(clean, distorted):
        fa = a.numpy().astype(np.float64).reshape(a.shape[0], -1)
        fb = b.numpy().astype(np.float64).reshape(b.shape[0], -1)
        num = np.linalg.norm(fb - fa, axis=1)
        den = np.linalg.norm(fa, axis=1) + eps
        per_level.append(num / den)
    return float(np.mean(np.stack(per_level, axis=0).mean(axis=0)))


def _unit_noise(shape, seed: int, level: int) -> torch.Tensor:
    rng = np.random.default_rng([seed, level])
    return torch.from_numpy(rng.standard_normal(shape).astype(np.float32))


def matched_sweep(
    bundle: TaskBundle,
    estimator: JndEstimator,
    alphas: Sequence[float],
    sigmas: Sequence[float],
    seeds: Sequence[int],
    eps: float = 1e-8,
    jobs: int = 1,
) -> SweepResult:
    """Scaled-map rows for each alpha; Gaussian rows for each (sigma, seed)."""
    if not alphas and not sigmas:
        raise ValidationError("nothing to sweep: both grids are empty")
    if bundle.eval_size() == 0:
        raise ValidationError("empty evaluation set")
    maps = _predict_maps(bundle, estimator)
    clean = bundle.eval_features

    def featjnd_cell(alpha: float) -> SweepRow:
        distorted = [a + alpha * d for a, d in zip(clean, maps)]
        return SweepRow(
            kind="featjnd_scaled",
            alpha=alpha,
            sigma=None,
            seed=None,
            nrmse=_mean_nrmse(clean, distorted, eps),
            performance=bundle.performance(distorted),
        )

    def gaussian_cell(sigma: float, seed: int) -> SweepRow:
        distorted = [
            a + sigma * _unit_noise(tuple(a.shape), seed, lvl)
            for lvl, a in enumerate(clean)
        ]
        return SweepRow(
            kind="gaussian",
            alpha=None,
            sigma=sigma,
            seed=seed,
            nrmse=_mean_nrmse(clean, distorted, eps),
            performance=bundle.performance(distorted),
        )

    rows: list[SweepRow] = []
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            f_rows = list(pool.map(featjnd_cell, alphas))
            g_keys = [(s, k) for s in sigmas for k in seeds]
            g_rows = list(pool.map(lambda sk: gaussian_cell(*sk), g_keys))
        rows = f_rows + g_rows
    else:
        rows = [featjnd_cell(a) for a in alphas]
        rows += [gaussian_cell(s, k) for s in sigmas for k in seeds]
    return SweepResult(
        rows=rows,
        clean_score=bundle.performance(),
        metadata={"alphas": list(alphas), "sigmas": list(sigmas), "seeds": list(seeds)},
    )


def alpha_sweep(
    bundle: TaskBundle, estimator: JndEstimator, alphas: Sequence[float], eps: float = 1e-8
) -> SweepResult:
    """Performance-drop curve vs alpha (no Gaussian rows)."""
    return matched_sweep(bundle, estimator, alphas, sigmas=[], seeds=[], eps=eps)


def _dedup_curve(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ux, inverse = np.unique(xs, return_inverse=True)
    uy = np.zeros_like(ux)
    for i in range(ux.size):
        uy[i] = ys[inverse == i].mean()
    return ux, uy


def matched_comparison(result: SweepResult, grid: Sequence[float]) -> list[dict]:
    """Interpolate both curves onto ``grid``; skip points outside shared coverage.

    Returns one dict per covered grid point: nrmse, featjnd, gaussian,
    margin (featjnd - gaussian).
    """
    fx, fy = result.featjnd_curve()
    gx, gy = result.gaussian_curve()
    if fx.size < 2 or gx.size < 2:
        return []
    fx, fy = _dedup_curve(fx, fy)
    gx, gy = _dedup_curve(gx, gy)
    lo = max(fx.min(), gx.min())
    hi = min(fx.max(), gx.max())
    out = []
    for x in grid:
        if x < lo or x > hi:
            continue
        pf = float(np.interp(x, fx, fy))
        pg = float(np.interp(x, gx, gy))
        out.append({"nrmse": float(x), "featjnd": pf, "gaussian": pg, "margin": pf - pg})
    return out


# ---------------------------------------------------------------------------
# Budget-matched quantization comparison
# ---------------------------------------------------------------------------

@dataclass
class QuantRow:
    sigma_tgt: float
    method: str  # featjnd | random | uniform
    seed: Optional[int]
    performance: float
    mean_nrmse: float
    budget: float  # realized E[step^2/12], averaged over examples and levels
    status: str = "ok"


def batch_tolerance_grids(
    features: np.ndarray, maps: np.ndarray, eps: float, agg: str
) -> np.ndarray:
    """Vectorized tolerance grids for a stack of examples: (M,C,H,W) -> (M,H,W)."""
    ratio = np.abs(maps) / (np.abs(features) + eps)
    if agg == "channel_mean":
        return ratio.mean(axis=1)
    if agg == "channel_min":
        return ratio.min(axis=1)
    if agg == "channel_max":
        return ratio.max(axis=1)
    raise ValidationError(f"unknown aggregation {agg!r}")


def batch_solve_steps(grids: np.ndarray, floors: np.ndarray, sigma_tgt: float) -> np.ndarray:
    """Budget-exact step grids per example; raises on an all-zero floored grid."""
    v = np.maximum(grids, floors[:, None, None])
    mean_sq = (v * v).mean(axis=(1, 2))
    if np.any(mean_sq == 0.0):
        raise DegenerateInputError("an example's tolerance grid is identically zero")
    lam = np.sqrt(12.0 * sigma_tgt**2 / mean_sq)
    return lam[:, None, None] * v


def batch_quantize(features: np.ndarray, steps: np.ndarray) -> np.ndarray:
    """Round-to-nearest with per-token steps, float64, ties away from zero."""
    z = features / steps[:, None, :, :]
    return steps[:, None, :, :] * round_half_away(z)


def quant_comparison(
    bundle: TaskBundle,
    estimator: JndEstimator,
    sigma_tgts: Sequence[float],
    seeds: Sequence[int],
    agg: str = "channel_mean",
    floor_rel: float = 1e-3,
    eps: float = 1e-8,
) -> list[QuantRow]:
    """Compare map-guided, permuted, and uniform step allocation per budget.

    All three share the verifier-exact noise budget E[step^2/12] =
    sigma_tgt^2 per feature tensor (per example, per level).  The permuted
    baseline reshuffles each example's tolerance tokens within its level
    using a (seed, level)-keyed stream; uniform rows are seed-independent
    and replicated per seed for table symmetry.  The batched math here
    matches the per-tensor operations exactly (cross-checked in tests).
    """
    est_maps = _predict_maps(bundle, estimator)
    clean = bundle.eval_features
    n = bundle.eval_size()
    levels = len(clean)

    feats = [lvl.numpy().astype(np.float64) for lvl in clean]
    grids, floors = [], []
    for l in range(levels):
        g = batch_tolerance_grids(feats[l], est_maps[l].numpy().astype(np.float64), eps, agg)
        flo = np.zeros(n)
        for i in range(n):
            nz = g[i][g[i] > 0]
            flo[i] = floor_rel * nz.mean() if nz.size else 0.0
        grids.append(g)
        floors.append(flo)

    def run(step_grids_per_level) -> tuple[float, float, float]:
        distorted, devs = [], []
        for l in range(levels):
            steps = step_grids_per_level[l]
            devs.append((steps * steps).mean(axis=(1, 2)) / 12.0)
            q = batch_quantize(feats[l], steps)
            distorted.append(torch.from_numpy(q.astype(np.float32)))
        perf = bundle.performance(distorted)
        mean_nrmse = _mean_nrmse(clean, distorted, eps)
        return perf, mean_nrmse, float(np.mean(np.concatenate(devs)))

    rows: list[QuantRow] = []
    for sigma_tgt in sigma_tgts:
        try:
            steps = [batch_solve_steps(grids[l], floors[l], sigma_tgt) for l in range(levels)]
            perf, mn, bud = run(steps)
            rows.append(QuantRow(sigma_tgt, "featjnd", None, perf, mn, bud, "ok"))
        except DegenerateInputError:
            rows.append(
                QuantRow(sigma_tgt, "featjnd", None, float("nan"), float("nan"), float("nan"),
                         "degenerate")
            )
        for seed in seeds:
            try:
                steps = []
                for l in range(levels):
                    rng = np.random.default_rng([seed, l])
                    flat = grids[l].reshape(n, -1)
                    permuted = rng.permuted(flat, axis=1).reshape(grids[l].shape)
                    steps.append(batch_solve_steps(permuted, floors[l], sigma_tgt))
                perf, mn, bud = run(steps)
                rows.append(QuantRow(sigma_tgt, "random", seed, perf, mn, bud, "ok"))
            except DegenerateInputError:
                rows.append(
                    QuantRow(sigma_tgt, "random", seed, float("nan"), float("nan"), float("nan"),
                             "degenerate")
                )
        uniform_steps = [
            np.full_like(grids[l], np.sqrt(12.0) * sigma_tgt) for l in range(levels)
        ]
        perf, mn, bud = run(uniform_steps)
        for seed in seeds:
            rows.append(QuantRow(sigma_tgt, "uniform", seed, perf, mn, bud, "ok"))
    return rows


def quant_rows_to_csv(rows: Sequence[QuantRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(QUANT_SCHEMA + "\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["sigma_tgt", "method", "seed", "performance", "mean_nrmse", "budget", "status"]
        )
        for r in rows:
            writer.writerow(
                [
                    repr(r.sigma_tgt),
                    r.method,
                    "" if r.seed is None else r.seed,
                    repr(r.performance),
                    repr(r.mean_nrmse),
                    repr(r.budget),
                    r.status,
                ]
            )


def quant_rows_from_csv(path) -> list[QuantRow]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        schema = fh.readline().strip()
        if schema != QUANT_SCHEMA:
            raise FormatError(f"unexpected quant schema line in {path}: {schema!r}")
        for rec in csv.DictReader(fh):
            rows.append(
                QuantRow(
                    sigma_tgt=float(rec["sigma_tgt"]),
                    method=rec["method"],
                    seed=int(rec["seed"]) if rec["seed"] else None,
                    performance=float(rec["performance"]),
                    mean_nrmse=float(rec["mean_nrmse"]),
                    budget=float(rec["budget"]),
                    status=rec["status"],
                )
            )
    return rows
