"""Acceptance suite: every release criterion at its stated tolerance.

Each criterion prints one ``[PASS]``/``[FAIL]`` line (run with ``-s`` to
see them live).  A1-A5 and A9-A10 are exact or tolerance-pinned checks;
A6-A8 reproduce the directional comparative claims on the converged toy
bundles.
"""

import copy
import dataclasses
import math
import time

import numpy as np
import pytest
import torch
import yaml

from featjnd.attribution import classification_pipelines, integrated_attribution
from featjnd.cli import main as cli_main
from featjnd.discrepancy import (
    DiscrepancyConfig,
    HeadOutputs,
    d_cls,
    d_det,
    d_ins,
    kl_temperature,
    objectness_two_class,
    smooth_l1,
)
from featjnd.evaluation import matched_comparison, matched_sweep, quant_comparison
from featjnd.features import FeatureTensor, load_feature, save_feature
from featjnd.metrics import cosine, nmse, nrmse, orthogonal_cosine_prediction
from featjnd.quantization import (
    BudgetSpec,
    ToleranceMap,
    default_floor,
    permute_baseline,
    quant_error_moment,
    quantize_values,
    realized_budget,
    solve_lambda,
    solve_step_map,
)
from featjnd.training import featjnd_loss

from test_cli import TINY, _tree_hashes

ALPHA_GRID = [round(0.25 * i, 2) for i in range(13)]  # 0 .. 3
CLS_SIGMA_GRID = [0.25, 0.5, 1.0, 1.75, 2.75, 4.0, 5.5, 7.0]
PYR_SIGMA_GRID = [0.25, 0.5, 1.0, 1.75, 2.75, 4.0, 5.5, 7.0, 9.0]
GAUSS_SEEDS = [0, 1, 2, 3, 4]
NRMSE_GRID = [round(0.1 + 0.05 * i, 2) for i in range(19)]  # 0.10 .. 1.00
CLS_QUANT_GRID = [1.0, 1.6, 2.2, 2.8, 3.4]
PYR_QUANT_GRID = [0.2, 0.4, 0.8, 1.2, 1.6]


def _verdict(cid: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {cid}: {detail}")
    assert ok, f"{cid} failed: {detail}"


@pytest.fixture(scope="module")
def cls_sweep(cls_bundle, trained_cls):
    est, _ = trained_cls
    return matched_sweep(cls_bundle, est, ALPHA_GRID, CLS_SIGMA_GRID, GAUSS_SEEDS)


@pytest.fixture(scope="module")
def pyramid_sweep(pyramid_bundle, trained_pyramid):
    est, _ = trained_pyramid
    return matched_sweep(pyramid_bundle, est, ALPHA_GRID, PYR_SIGMA_GRID, GAUSS_SEEDS)


# ---------------------------------------------------------------------------
# A1 - metric identities
# ---------------------------------------------------------------------------

def test_a1_metric_identities():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)

    ok = True
    for _ in range(100):
        f = rng.standard_normal(int(rng.integers(2, 64))) + 0.05
        ok &= nrmse(f, f) == 0.0
        gamma = float(rng.uniform(-2, 3))
        ok &= abs(nrmse(f, gamma * f, eps=0.0) - abs(gamma - 1)) <= 1e-9 * max(1, abs(gamma - 1))
        g = f + rng.standard_normal(f.size)
        n, m = nrmse(f, g, eps=0.0), nmse(f, g, eps=0.0)
        ok &= abs(m - n * n) <= 1e-12 * max(m, 1e-300)

    for _ in range(100):
        n = 64
        f = np.zeros(n, dtype=np.float32)
        e = np.zeros(n, dtype=np.float32)
        f[0::2] = rng.standard_normal(n // 2).astype(np.float32)
        e[1::2] = rng.standard_normal(n // 2).astype(np.float32)
        r = np.linalg.norm(e.astype(np.float64)) / np.linalg.norm(f.astype(np.float64))
        ok &= abs(cosine(f, f + e) - orthogonal_cosine_prediction(r)) <= 1e-10

    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    _verdict("A1", ok, f"nrmse/nmse/orthogonal-cosine identities ({elapsed:.2f}s < 1s)")


# ---------------------------------------------------------------------------
# A2 - quantization budget math
# ---------------------------------------------------------------------------

def test_a2_budget_math():
    t0 = time.perf_counter()
    ok = True

    lam1 = solve_lambda(ToleranceMap(np.ones((4, 4))), BudgetSpec(math.sqrt(1 / 12)))
    ok &= abs(lam1 - 1.0) <= 1e-12
    lam2 = solve_lambda(ToleranceMap(np.full((5, 5), 2.0)), BudgetSpec(1.0))
    ok &= abs(lam2 - math.sqrt(3)) <= 1e-12

    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        h, w = rng.integers(1, 10, size=2)
        vals = rng.uniform(0, 3, size=(h, w))
        vals[rng.uniform(size=(h, w)) < 0.25] = 0.0
        if np.all(vals == 0):
            vals[0, 0] = rng.uniform(0.1, 1.0)
        s = ToleranceMap(vals)
        sigma = float(rng.uniform(0.02, 4.0))
        floor = default_floor(s)
        steps = solve_step_map(s, BudgetSpec(sigma), floor)
        worst = max(worst, abs(realized_budget(steps) / sigma**2 - 1.0))
        budget = BudgetSpec(sigma)
        ok &= solve_lambda(s, budget, floor) == solve_lambda(
            permute_baseline(s, seed=int(rng.integers(1 << 30))), budget, floor
        )
    ok &= worst <= 1e-10

    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5.0
    _verdict(
        "A2",
        ok,
        f"lambda identities, budget exact to {worst:.1e} on 1000 maps,"
        f" permutation-invariant lambda ({elapsed:.2f}s < 5s)",
    )


# ---------------------------------------------------------------------------
# A3 - uniform quantization noise model
# ---------------------------------------------------------------------------

def test_a3_noise_model():
    t0 = time.perf_counter()
    ok = True

    moment = quant_error_moment(lambda rng, n: rng.uniform(0, 10, n), step=0.1, n=1_000_000, seed=7)
    expected = 0.1**2 / 12
    ok &= abs(moment / expected - 1.0) <= 0.02

    moment_unit = quant_error_moment(
        lambda rng, n: rng.uniform(0, 100, n), step=1.0, n=1_000_000, seed=8
    )
    ok &= abs(moment_unit / (1 / 12) - 1.0) <= 0.02

    rng = np.random.default_rng(303)
    x = rng.uniform(-1000, 1000, size=1_000_000)
    delta = rng.uniform(0.001, 10.0, size=1_000_000)
    q = quantize_values(x, delta)
    ok &= bool(np.all(np.abs(q - x) <= delta / 2))
    ok &= bool(np.array_equal(quantize_values(q, delta), q))

    elapsed = time.perf_counter() - t0
    ok &= elapsed < 30.0
    _verdict(
        "A3",
        ok,
        f"error moment {moment:.5e} vs {expected:.5e}; bounded error and"
        f" idempotence on 1e6 elements ({elapsed:.1f}s < 30s)",
    )


# ---------------------------------------------------------------------------
# A4 - discrepancy correctness
# ---------------------------------------------------------------------------

def _rand_heads(rng, num_rois=4, num_classes=5, mask=4):
    def t(*shape):
        return torch.tensor(rng.standard_normal(shape), dtype=torch.float64)

    return HeadOutputs(
        rpn_logits=t(num_rois * 2),
        roi_logits=t(num_rois, num_classes),
        rpn_reg=t(num_rois * 2, 4),
        roi_reg=t(num_rois, 4),
        mask_logits=t(num_rois, mask, mask),
    )


def _grad_matches_fd(fn, tensor, rng, samples=3, step=1e-4, rtol=1e-4):
    leaf = tensor.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fn(leaf), leaf)
    for idx in rng.choice(tensor.numel(), size=min(samples, tensor.numel()), replace=False):
        plus, minus = tensor.clone().reshape(-1), tensor.clone().reshape(-1)
        plus[idx] += step
        minus[idx] -= step
        num = (float(fn(plus.reshape(tensor.shape))) - float(fn(minus.reshape(tensor.shape)))) / (
            2 * step
        )
        ana = float(grad.reshape(-1)[idx])
        if abs(ana - num) > rtol * max(abs(num), 1e-7):
            return False
    return True


def test_a4_discrepancy_correctness():
    t0 = time.perf_counter()
    ok = True
    two_class = (1 / (1 + math.exp(-1)) - 1 / (1 + math.exp(1)))  # 0.4621171573

    y = torch.tensor([1.0, 0.0], dtype=torch.float64)
    yt = torch.tensor([0.0, 1.0], dtype=torch.float64)
    ok &= abs(float(kl_temperature(y, yt, 1.0)) - 0.46212) <= 1e-5
    ok &= abs(float(kl_temperature(2 * y, 2 * yt, 2.0)) - 4 * two_class) <= 1e-5
    cfg16 = DiscrepancyConfig(temperature=4.0, task="classification")
    ok &= (
        abs(
            float(d_cls(HeadOutputs(cls_logits=4 * y), HeadOutputs(cls_logits=4 * yt), cfg16))
            - 16 * two_class
        )
        <= 1e-4
    )

    cfg = DiscrepancyConfig(temperature=4.0, task="instance_segmentation")
    rng = np.random.default_rng(404)
    for _ in range(20):
        out, out_t = _rand_heads(rng), _rand_heads(rng)
        expected_det = (
            kl_temperature(
                objectness_two_class(out.rpn_logits), objectness_two_class(out_t.rpn_logits), 4.0
            )
            + smooth_l1(out.rpn_reg, out_t.rpn_reg)
            + kl_temperature(out.roi_logits, out_t.roi_logits, 4.0)
            + smooth_l1(out.roi_reg, out_t.roi_reg)
        )
        ok &= float(d_det(out, out_t, cfg)) == float(expected_det)
        mse = ((out.mask_logits - out_t.mask_logits) ** 2).mean()
        ok &= float(d_ins(out, out_t, cfg)) == float(expected_det + mse)

    grad_rng = np.random.default_rng(405)
    for _ in range(20):
        out, out_t = _rand_heads(grad_rng), _rand_heads(grad_rng)

        def det_from(field, x):
            alt = dataclasses.replace(out_t, **{field: x})
            return d_det(out, alt, cfg)

        ok &= _grad_matches_fd(
            lambda x: d_cls(
                HeadOutputs(cls_logits=out.roi_logits[0]), HeadOutputs(cls_logits=x), cfg16
            ),
            out_t.roi_logits[0],
            grad_rng,
        )
        ok &= _grad_matches_fd(lambda x: det_from("rpn_logits", x), out_t.rpn_logits, grad_rng)
        ok &= _grad_matches_fd(lambda x: det_from("roi_reg", x), out_t.roi_reg, grad_rng)
        ok &= _grad_matches_fd(
            lambda x: d_ins(out, dataclasses.replace(out_t, mask_logits=x), cfg),
            out_t.mask_logits,
            grad_rng,
        )

    elapsed = time.perf_counter() - t0
    ok &= elapsed < 60.0
    _verdict(
        "A4",
        ok,
        f"two-class KL closed form, exact decomposition, FD gradients on 20 instances"
        f" ({elapsed:.1f}s < 1min)",
    )


# ---------------------------------------------------------------------------
# A5 - loss identity and training contract
# ---------------------------------------------------------------------------

def test_a5_loss_and_training_contract(
    cls_bundle, trained_cls, pyramid_bundle, trained_pyramid, cls_train_config, pyramid_train_config
):
    t0 = time.perf_counter()
    ok = True

    # loss identity at delta = 0, every task type
    cls_batch = [cls_bundle.train_features[0][:8]]
    he_cls = lambda f: cls_bundle.eval_heads(f if isinstance(f, list) else [f], None)
    zero = [torch.zeros_like(lvl) for lvl in cls_batch]
    ok &= abs(float(featjnd_loss(cls_batch, zero, he_cls, cls_train_config))) <= 1e-12

    pyr_batch = [lvl[:8] for lvl in pyramid_bundle.train_features]
    rois = pyramid_bundle.select_rois(pyr_batch)
    he_pyr = lambda f: pyramid_bundle.eval_heads(f, rois)
    zero_p = [torch.zeros_like(lvl) for lvl in pyr_batch]
    ok &= abs(float(featjnd_loss(pyr_batch, zero_p, he_pyr, pyramid_train_config))) <= 1e-12
    det_cfg = dataclasses.replace(pyramid_train_config, task="detection")
    ok &= abs(float(featjnd_loss(pyr_batch, zero_p, he_pyr, det_cfg))) <= 1e-12

    # frozen-task checksum across the full converged runs
    ok &= cls_bundle.checksum() == cls_bundle.manifest["checksum"]
    ok &= pyramid_bundle.checksum() == pyramid_bundle.manifest["checksum"]

    # end-to-end gradient vs central finite differences, 10 sampled coordinates
    est, _ = trained_cls
    est64 = copy.deepcopy(est).double().train()
    b64 = dataclasses.replace(
        cls_bundle,
        backbone=copy.deepcopy(cls_bundle.backbone).double(),
        heads=copy.deepcopy(cls_bundle.heads).double(),
    )
    batch = cls_bundle.train_features[0][:16].double()
    he64 = lambda f: b64.eval_heads(f if isinstance(f, list) else [f], None)

    def loss_value():
        return featjnd_loss(batch, est64(batch), he64, cls_train_config)

    params = list(est64.parameters())
    grads = torch.autograd.grad(loss_value(), params)
    rng = np.random.default_rng(505)
    h = 1e-4
    worst = 0.0
    for _ in range(10):
        pi = int(rng.integers(0, len(params)))
        flat = params[pi].data.reshape(-1)
        ci = int(rng.integers(0, flat.numel()))
        orig = float(flat[ci])
        flat[ci] = orig + h
        lp = float(loss_value().detach())
        flat[ci] = orig - h
        lm = float(loss_value().detach())
        flat[ci] = orig
        num = (lp - lm) / (2 * h)
        ana = float(grads[pi].reshape(-1)[ci])
        worst = max(worst, abs(ana - num) / max(abs(num), 1e-8))
    ok &= worst <= 1e-4

    elapsed = time.perf_counter() - t0
    ok &= elapsed < 300.0
    _verdict(
        "A5",
        ok,
        f"zero-map loss identity, frozen checksums, end-to-end FD gradients"
        f" (worst rel {worst:.1e}; {elapsed:.1f}s < 5min)",
    )


# ---------------------------------------------------------------------------
# A6 - matched-distortion directional claim
# ---------------------------------------------------------------------------

def _check_margins(sweep):
    comparison = matched_comparison(sweep, NRMSE_GRID)
    margins = [c["margin"] for c in comparison]
    nonneg = all(m >= 0 for m in margins)
    strong = sum(1 for m in margins if m > 0.02)
    enough = strong >= (len(margins) + 1) // 2 and len(margins) > 0
    return nonneg and enough, margins, strong


def test_a6_matched_distortion(cls_sweep, pyramid_sweep, timings):
    t0 = time.perf_counter()
    ok_cls, m_cls, strong_cls = _check_margins(cls_sweep)
    ok_pyr, m_pyr, strong_pyr = _check_margins(pyramid_sweep)
    elapsed = time.perf_counter() - t0
    budget = (
        timings.get("cls_bundle", 0.0)
        + timings.get("pyramid_bundle", 0.0)
        + timings.get("trained_cls", 0.0)
        + timings.get("trained_pyramid", 0.0)
        + elapsed
    )
    ok = ok_cls and ok_pyr and budget < 1200.0
    _verdict(
        "A6",
        ok,
        f"cls margins >=0 at {len(m_cls)} pts ({strong_cls} over 0.02),"
        f" pyramid margins >=0 at {len(m_pyr)} pts ({strong_pyr} over 0.02);"
        f" total incl. pretraining+training {budget:.0f}s < 1200s",
    )


# ---------------------------------------------------------------------------
# A7 - distortion-strength knob shape
# ---------------------------------------------------------------------------

def test_a7_alpha_knob(cls_sweep, cls_bundle):
    drops = dict(cls_sweep.drops())
    clean = cls_bundle.clean_score
    ok = drops[1.0] < 0.05 * clean and drops[3.0] > drops[1.0]
    _verdict(
        "A7",
        ok,
        f"drop(alpha=1) {drops[1.0]:.4f} < {0.05 * clean:.4f}"
        f" and drop(alpha=3) {drops[3.0]:.4f} exceeds it",
    )


# ---------------------------------------------------------------------------
# A8 - budget-matched quantization ordering
# ---------------------------------------------------------------------------

def _check_quant(bundle, estimator, grid):
    rows = quant_comparison(bundle, estimator, grid, seeds=GAUSS_SEEDS)
    ok = True
    worst_dev = 0.0
    details = []
    for sigma in grid:
        fj = [r for r in rows if r.sigma_tgt == sigma and r.method == "featjnd"][0]
        rnd = [r.performance for r in rows if r.sigma_tgt == sigma and r.method == "random"]
        uni = [r for r in rows if r.sigma_tgt == sigma and r.method == "uniform"][0]
        ok &= fj.status == "ok"
        ok &= fj.performance >= float(np.mean(rnd))
        ok &= fj.performance >= uni.performance
        worst_dev = max(
            worst_dev,
            max(abs(r.budget / sigma**2 - 1.0) for r in rows if r.sigma_tgt == sigma and r.status == "ok"),
        )
        details.append(f"{sigma:g}:{fj.performance - float(np.mean(rnd)):+.3f}")
    ok &= worst_dev <= 1e-10
    return ok, worst_dev, details


def test_a8_quantization_ordering(cls_bundle, trained_cls, pyramid_bundle, trained_pyramid):
    est_c, _ = trained_cls
    est_p, _ = trained_pyramid
    ok_c, dev_c, det_c = _check_quant(cls_bundle, est_c, CLS_QUANT_GRID)
    ok_p, dev_p, det_p = _check_quant(pyramid_bundle, est_p, PYR_QUANT_GRID)
    ok = ok_c and ok_p
    _verdict(
        "A8",
        ok,
        f"map-guided >= random-mean and >= uniform on both bundles"
        f" (margins vs random cls {','.join(det_c)}; pyr {','.join(det_p)};"
        f" budget dev <= {max(dev_c, dev_p):.1e})",
    )


# ---------------------------------------------------------------------------
# A9 - attribution
# ---------------------------------------------------------------------------

def test_a9_attribution(cls_bundle, trained_cls):
    ok = True
    rng = np.random.default_rng(606)
    w = torch.tensor(rng.standard_normal((2, 5, 5)), dtype=torch.float64)
    x = torch.tensor(rng.standard_normal((2, 5, 5)), dtype=torch.float64)
    linear = lambda t: (w * t).sum()
    expected = (w * x).numpy()
    for steps in (1, 5, 20):
        attr = integrated_attribution(linear, x, steps)
        ok &= np.allclose(attr, expected, rtol=1e-10, atol=1e-12)
        ok &= abs(attr.sum() - float(linear(x))) <= 1e-9

    est, _ = trained_cls
    clean_fn, dist_fn = classification_pipelines(cls_bundle, est)
    worst_rel = 0.0
    for idx in range(5):
        image = cls_bundle.eval_images[idx]
        with torch.no_grad():
            logits = clean_fn(image)
        c = int(logits.argmax())
        span = float(logits[c]) - float(clean_fn(torch.zeros_like(image))[c])
        attr = integrated_attribution(lambda t: clean_fn(t)[c], image, 200)
        worst_rel = max(worst_rel, abs(attr.sum() - span) / abs(span))
    ok &= worst_rel <= 0.05

    zc, zd = classification_pipelines(cls_bundle, est, zero_delta=True)
    from featjnd.attribution import attribution_delta

    _, _, diff = attribution_delta(zc, zd, cls_bundle.eval_images[0], 20)
    ok &= bool(np.all(diff == 0.0))

    _verdict(
        "A9",
        ok,
        f"linear exactness at K=1/5/20, completeness residual {worst_rel:.3%} <= 5% at K=200,"
        f" zero-map difference identically zero",
    )


# ---------------------------------------------------------------------------
# A10 - plumbing: container round trips and CLI determinism
# ---------------------------------------------------------------------------

def test_a10_plumbing(tmp_path):
    ok = True
    rng = np.random.default_rng(707)
    for i in range(100):
        shape = tuple(rng.integers(1, 7, size=3))
        t = FeatureTensor(rng.standard_normal(shape).astype(np.float32))
        path = tmp_path / f"rt_{i}.fjnd"
        save_feature(t, path)
        ok &= load_feature(path) == t

    cfg = dict(TINY)
    cfg["output"] = {"dir": str(tmp_path / "run")}
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg))
    run_dir = tmp_path / "run"

    sequence = (
        ["train", "--config", str(cfg_path)],
        ["eval-sweep", "--config", str(cfg_path), "--checkpoint", str(run_dir / "checkpoint")],
        ["quantize", "--config", str(cfg_path), "--checkpoint", str(run_dir / "checkpoint")],
        ["report", "--out", str(run_dir)],
    )
    for argv in sequence:
        ok &= cli_main(argv) == 0
    snapshot = _tree_hashes(run_dir)
    for argv in sequence:  # full re-run must rewrite every output byte-identically
        ok &= cli_main(argv) == 0
        ok &= _tree_hashes(run_dir) == snapshot

    _verdict(
        "A10",
        bool(ok),
        "bit-exact container round trip on 100 tensors;"
        " train/eval-sweep/quantize/report byte-identical on re-run",
    )
