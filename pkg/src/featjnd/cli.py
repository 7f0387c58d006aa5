"""Command-line entry point: reproducible experiments with CSV and plot outputs.

Commands (all driven by one YAML config; every run rewrites the resolved
config next to its outputs):

    featjnd train      --config CFG [--out DIR] [--seed N]
    featjnd eval-sweep --config CFG --checkpoint DIR [--out DIR] [--jobs N]
    featjnd quantize   --config CFG --checkpoint DIR [--out DIR]
    featjnd attribute  --config CFG --checkpoint DIR [--out DIR] [--zero-delta]
    featjnd report     --out DIR

Exit codes: 0 ok, 2 config error, 3 training divergence, 4 missing artifact.
Commands are idempotent: re-running with identical inputs rewrites
byte-identical outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .attribution import attribution_delta, classification_pipelines, display_map  # noqa: E402
from .config import RunConfig  # noqa: E402
from .errors import (  # noqa: E402
    ConfigError,
    DivergenceError,
    FeatJndError,
    MissingArtifactError,
    ValidationError,
)
from .estimator import load_checkpoint, save_checkpoint  # noqa: E402
from .evaluation import (  # noqa: E402
    SweepResult,
    matched_comparison,
    matched_sweep,
    quant_comparison,
    quant_rows_from_csv,
    quant_rows_to_csv,
)
from .features import FeatureTensor, save_feature  # noqa: E402
from .taskbench import make_bundle  # noqa: E402
from .training import train_loop, write_training_log  # noqa: E402

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_MISSING = 4

ACCEPTANCE_IDS = [f"A{i}" for i in range(1, 11)]
_MARGIN_GRID = [round(0.1 + 0.05 * i, 2) for i in range(19)]  # 0.10 .. 1.00


def _load_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required for this command")
    cfg = RunConfig.from_yaml(args.config)
    if args.seed is not None:
        cfg.bundle.seed = args.seed
        cfg.train.seed = args.seed
    if args.out:
        cfg.output.dir = args.out
    # surface bad config values (wrong types, out-of-range numbers) as config
    # errors rather than late contract failures
    try:
        cfg.estimator_config(in_channels=1)
        cfg.train_config(task="classification")
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / "resolved_config.yaml")
    return out


def _build_bundle(cfg: RunConfig):
    try:
        return make_bundle(cfg.bundle.kind, **cfg.bundle_kwargs())
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid bundle config: {exc}") from exc


def _load_estimator(args, bundle):
    if not args.checkpoint:
        raise MissingArtifactError("--checkpoint is required for this command")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise MissingArtifactError(f"checkpoint not found: {ckpt}")
    est = load_checkpoint(ckpt)
    if est.cfg.in_channels != bundle.feature_channels:
        raise ConfigError(
            f"checkpoint/bundle mismatch: checkpoint has {est.cfg.in_channels} input"
            f" channels, bundle features have {bundle.feature_channels}"
        )
    return est


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    bundle = _build_bundle(cfg)
    est_cfg = cfg.estimator_config(bundle.feature_channels)
    train_cfg = cfg.train_config(bundle.discrepancy_task)
    estimator, log = train_loop(bundle, train_cfg, est_cfg)
    save_checkpoint(estimator, out / "checkpoint")
    write_training_log(log, out / "train_log.csv")
    with open(out / "bundle_manifest.json", "w", encoding="utf-8") as fh:
        json.dump(bundle.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"trained {train_cfg.epochs} epochs; checkpoint at {out / 'checkpoint'}")
    return EXIT_OK


def _plot_sweep(result: SweepResult, path: Path) -> None:
    fx, fy = result.featjnd_curve()
    gx, gy = result.gaussian_curve()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(fx, fy, "o-", label="tolerance-map scaled")
    if gx.size:
        ax.plot(gx, gy, "s--", label="gaussian (seed mean)")
    ax.axhline(result.clean_score, color="gray", lw=0.8, ls=":", label="clean")
    ax.set_xlabel("mean NRMSE")
    ax.set_ylabel("task performance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_alpha_drop(result: SweepResult, path: Path) -> None:
    drops = result.drops()
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot([a for a, _ in drops], [d for _, d in drops], "o-")
    ax.set_xlabel("alpha")
    ax.set_ylabel("performance drop vs clean")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_eval_sweep(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    bundle = _build_bundle(cfg)
    estimator = _load_estimator(args, bundle)
    result = matched_sweep(
        bundle,
        estimator,
        alphas=cfg.eval.alphas,
        sigmas=cfg.eval.sigmas,
        seeds=cfg.eval.seeds,
        eps=cfg.eval.eps,
        jobs=args.jobs,
    )
    result.to_csv(out / "sweep.csv")
    _plot_sweep(result, out / "sweep_perf_vs_nrmse.png")
    _plot_alpha_drop(result, out / "alpha_drop.png")
    print(f"sweep rows: {len(result.rows)}; clean score {result.clean_score:.4f}")
    return EXIT_OK


def cmd_quantize(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    bundle = _build_bundle(cfg)
    estimator = _load_estimator(args, bundle)
    rows = quant_comparison(
        bundle,
        estimator,
        sigma_tgts=cfg.quant.sigma_tgt,
        seeds=cfg.quant.seeds,
        agg=cfg.quant.agg,
        floor_rel=cfg.quant.floor_rel,
    )
    quant_rows_to_csv(rows, out / "quant.csv")
    degenerate = sum(1 for r in rows if r.status != "ok")
    print(f"quant rows: {len(rows)} ({degenerate} degenerate)")
    return EXIT_OK


def _plot_attribution_grid(panels: dict[str, np.ndarray], path: Path) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for ax, (title, arr) in zip(axes, panels.items()):
        im = ax.imshow(arr, cmap="viridis")
        ax.set_title(title, fontsize=9)
        ax.axis("off")
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_attribute(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    bundle = _build_bundle(cfg)
    if bundle.kind != "classification":
        raise ConfigError("attribution runs on the classification bundle only")
    estimator = _load_estimator(args, bundle)
    clean_fn, dist_fn = classification_pipelines(bundle, estimator, zero_delta=args.zero_delta)
    maps_dir = out / "attributions"
    grids_dir = out / "grids"
    maps_dir.mkdir(exist_ok=True)
    grids_dir.mkdir(exist_ok=True)
    n = bundle.eval_images.shape[0]
    for idx in cfg.attribution.examples:
        if not (0 <= idx < n):
            raise ConfigError(f"example index {idx} out of range [0, {n})")
        image = bundle.eval_images[idx]
        attr_clean, attr_dist, diff = attribution_delta(
            clean_fn, dist_fn, image, cfg.attribution.steps
        )
        for tag, arr in (("clean", attr_clean), ("distorted", attr_dist), ("difference", diff)):
            save_feature(
                FeatureTensor(arr.astype(np.float32)),
                maps_dir / f"example_{idx:04d}_{tag}.fjnd",
            )
        _plot_attribution_grid(
            {
                "clean": display_map(attr_clean),
                "distorted": display_map(attr_dist),
                "difference": display_map(diff),
            },
            grids_dir / f"example_{idx:04d}.png",
        )
    print(f"attributed {len(cfg.attribution.examples)} examples with K={cfg.attribution.steps}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _report_sections(run_dir: Path) -> tuple[list[str], dict[str, str]]:
    lines: list[str] = []
    status = {aid: "see test suite (tests/test_acceptance.py)" for aid in ACCEPTANCE_IDS}
    sweep_path = run_dir / "sweep.csv"
    quant_path = run_dir / "quant.csv"

    if sweep_path.exists():
        result = SweepResult.from_csv(sweep_path)
        clean_rows = [r for r in result.rows if r.kind == "featjnd_scaled" and r.alpha == 0.0]
        clean = clean_rows[0].performance if clean_rows else 0.0
        result.clean_score = clean
        comparison = matched_comparison(result, _MARGIN_GRID)
        lines.append("## Matched-distortion comparison")
        lines.append("")
        if comparison:
            lines.append("| NRMSE | map-guided | gaussian | margin |")
            lines.append("|---|---|---|---|")
            for c in comparison:
                lines.append(
                    f"| {_fmt(c['nrmse'])} | {_fmt(c['featjnd'])} |"
                    f" {_fmt(c['gaussian'])} | {_fmt(c['margin'])} |"
                )
            margins = [c["margin"] for c in comparison]
            ok6 = all(m >= 0 for m in margins) and (
                sum(1 for m in margins if m > 0.02) >= (len(margins) + 1) // 2
            )
            status["A6"] = "pass" if ok6 else "FAIL"
            lines.append("")
            lines.append(
                f"min margin {_fmt(min(margins))}, mean margin {_fmt(float(np.mean(margins)))},"
                f" points with margin > 0.02: {sum(1 for m in margins if m > 0.02)}/{len(margins)}"
            )
        else:
            lines.append("curves do not share any grid point; no comparison available")
        lines.append("")

        drops = dict(result.drops())
        if 1.0 in drops and clean > 0:
            worse = [d for a, d in drops.items() if a > 1.0]
            ok7 = drops[1.0] < 0.05 * clean and bool(worse) and max(worse) > drops[1.0]
            status["A7"] = "pass" if ok7 else "FAIL"
            lines.append("## Distortion-strength knob")
            lines.append("")
            lines.append(
                f"drop at alpha=1: {_fmt(drops[1.0])} (clean {_fmt(clean)});"
                f" max drop at alpha>1: {_fmt(max(worse) if worse else 0.0)}"
            )
            lines.append("")

    if quant_path.exists():
        rows = quant_rows_from_csv(quant_path)
        lines.append("## Budget-matched quantization")
        lines.append("")
        lines.append("| sigma_tgt | map-guided | random (mean) | uniform | budget ok |")
        lines.append("|---|---|---|---|---|")
        sigmas = sorted({r.sigma_tgt for r in rows})
        ok8 = True
        budget_ok_all = True
        for s in sigmas:
            fj = [r for r in rows if r.sigma_tgt == s and r.method == "featjnd"]
            rnd = [r for r in rows if r.sigma_tgt == s and r.method == "random"]
            uni = [r for r in rows if r.sigma_tgt == s and r.method == "uniform"]
            if not (fj and rnd and uni):
                continue
            perf_f = fj[0].performance
            perf_r = float(np.mean([r.performance for r in rnd]))
            perf_u = uni[0].performance
            budget_ok = all(
                abs(r.budget / s**2 - 1.0) <= 1e-10 for r in fj + rnd + uni if r.status == "ok"
            )
            budget_ok_all = budget_ok_all and budget_ok
            ok8 = ok8 and perf_f >= perf_r and perf_f >= perf_u
            lines.append(
                f"| {s:.4g} | {_fmt(perf_f)} | {_fmt(perf_r)} | {_fmt(perf_u)} |"
                f" {'yes' if budget_ok else 'NO'} |"
            )
        status["A8"] = "pass" if ok8 else "FAIL"
        status["A2"] = (
            "budget column exact (partial; solver identities in test suite)"
            if budget_ok_all
            else "FAIL (budget column deviates)"
        )
        lines.append("")
    return lines, status


def cmd_report(args) -> int:
    if not args.out:
        raise ConfigError("--out is required for report")
    run_dir = Path(args.out)
    expected = ["sweep.csv", "quant.csv", "train_log.csv"]
    present = [name for name in expected if (run_dir / name).exists()]
    if not present:
        raise MissingArtifactError(
            f"no result files in {run_dir}; expected at least one of {expected}"
        )
    missing = [name for name in expected if name not in present]

    body, status = _report_sections(run_dir)
    lines = ["# Run report", ""]
    lines.append(f"Inputs: {', '.join(present)}")
    if missing:
        lines.append(f"Missing (sections skipped): {', '.join(missing)}")
    lines.append("")
    lines.extend(body)
    lines.append("## Acceptance checks")
    lines.append("")
    lines.append("| id | status |")
    lines.append("|---|---|")
    for aid in ACCEPTANCE_IDS:
        lines.append(f"| {aid} | {status[aid]} |")
    lines.append("")
    with open(run_dir / "report.md", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    print(f"report written to {run_dir / 'report.md'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="featjnd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("train", cmd_train),
        ("eval-sweep", cmd_eval_sweep),
        ("quantize", cmd_quantize),
        ("attribute", cmd_attribute),
        ("report", cmd_report),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--zero-delta", action="store_true")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FeatJndError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
