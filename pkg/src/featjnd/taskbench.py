"""Desk-scale surrogate tasks with frozen backbones and heads.

Two bundles are provided:

* a blob classifier split at the backbone output (head = global average
  pool + linear), pretrained on seeded synthetic images;
* a two-level feature-pyramid model with detection/mask-style heads and an
  aligned-ROI evaluation path, pretrained on seeded synthetic scenes.

Synthetic data, in full:

* Classification images are ``image_size x image_size`` single-channel.
  Class ``c`` places a Gaussian blob at a fixed per-class anchor on a
  circle around the image center, jittered per sample by up to 1.5 px,
  with amplitude U(0.8, 1.2) and width U(1.6, 2.4); i.i.d. Gaussian
  texture noise (std 0.3) is added everywhere.
* Scene images contain exactly one object: class 0 a filled disk, class 1
  an annulus, class 2 an axis-aligned square, at a uniformly random
  center (margin 6 px) with radius U(3.5, 6.0), amplitude U(0.9, 1.1),
  plus Gaussian texture noise (std 0.2).  Ground truth per image is
  (class, center_y, center_x, radius).

Both generators are pure functions of a numpy Generator, so a bundle seed
fully determines the data, the pretraining trajectory, and the frozen
parameters.  ROIs for the pyramid bundle are always a pure function of the
clean features: evaluation on distorted features reuses the clean ROIs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .discrepancy import HeadOutputs
from .errors import BundleQualityError, ValidationError
from .features import FeaturePyramid, FeatureTensor

BACKGROUND = -1  # placeholder; real background id is num_fg_classes


# ---------------------------------------------------------------------------
# Synthetic data generators
# ---------------------------------------------------------------------------

def generate_blob_classification(
    rng: np.random.Generator, n: int, num_classes: int, image_size: int = 16
):
    """Gaussian-blob class images with texture noise; returns (images, labels)."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    center = (image_size - 1) / 2.0
    ring_r = image_size * 0.28
    anchors = [
        (
            center + ring_r * math.sin(2 * math.pi * c / num_classes),
            center + ring_r * math.cos(2 * math.pi * c / num_classes),
        )
        for c in range(num_classes)
    ]
    labels = rng.integers(0, num_classes, size=n)
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)
    for i in range(n):
        cy, cx = anchors[labels[i]]
        cy += rng.uniform(-1.5, 1.5)
        cx += rng.uniform(-1.5, 1.5)
        amp = rng.uniform(0.8, 1.2)
        width = rng.uniform(1.6, 2.4)
        blob = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        img = blob + 0.3 * rng.standard_normal((image_size, image_size))
        images[i, 0] = img.astype(np.float32)
    return images, labels.astype(np.int64)


def object_support(cls_id: int, yy: np.ndarray, xx: np.ndarray, cy, cx, r) -> np.ndarray:
    """Boolean support of a scene object evaluated at pixel centers (yy, xx)."""
    if cls_id == 0:  # filled disk
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return d2 <= r * r
    if cls_id == 1:  # annulus
        d2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return ((0.5 * r) ** 2 <= d2) & (d2 <= r * r)
    if cls_id == 2:  # axis-aligned square
        return np.maximum(np.abs(yy - cy), np.abs(xx - cx)) <= 0.8 * r
    raise ValidationError(f"unknown scene class {cls_id}")


def generate_blob_scenes(rng: np.random.Generator, n: int, image_size: int = 32, num_fg: int = 3):
    """One-object scenes; returns (images, gt) with gt arrays cls/cy/cx/r."""
    yy, xx = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    images = np.empty((n, 1, image_size, image_size), dtype=np.float32)
    cls = rng.integers(0, num_fg, size=n)
    cy = rng.uniform(6.0, image_size - 6.0, size=n)
    cx = rng.uniform(6.0, image_size - 6.0, size=n)
    r = rng.uniform(3.5, 6.0, size=n)
    for i in range(n):
        amp = rng.uniform(0.9, 1.1)
        img = amp * object_support(int(cls[i]), yy, xx, cy[i], cx[i], r[i]).astype(np.float64)
        img = img + 0.2 * rng.standard_normal((image_size, image_size))
        images[i, 0] = img.astype(np.float32)
    gt = {
        "cls": cls.astype(np.int64),
        "cy": cy.astype(np.float64),
        "cx": cx.astype(np.float64),
        "r": r.astype(np.float64),
    }
    return images, gt


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class _ClsBackbone(nn.Module):
    def __init__(self, feature_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, feature_channels, 3, stride=2, padding=1)

    def forward(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class _ClsHead(nn.Module):
    def __init__(self, feature_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(feature_channels, num_classes)

    def forward(self, f):
        return self.fc(f.mean(dim=(2, 3)))


class _PyramidBackbone(nn.Module):
    """Stride-2 conv ladder emitting `levels` maps of shared channel width."""

    def __init__(self, channels: int, levels: int):
        super().__init__()
        self.levels = levels
        self.stem1 = nn.Conv2d(1, 16, 3, stride=2, padding=1)
        self.stem2 = nn.Conv2d(16, channels, 3, stride=2, padding=1)
        self.refine = nn.ModuleList(
            [nn.Conv2d(channels, channels, 3, padding=1) for _ in range(levels)]
        )
        self.down = nn.ModuleList(
            [nn.Conv2d(channels, channels, 3, stride=2, padding=1) for _ in range(levels - 1)]
        )

    def forward(self, x):
        h = F.relu(self.stem2(F.relu(self.stem1(x))))
        outs = [F.relu(self.refine[0](h))]
        for i in range(self.levels - 1):
            h = F.relu(self.down[i](h))
            outs.append(F.relu(self.refine[i + 1](h)))
        return outs


class _PyramidHeads(nn.Module):
    """Shared per-level objectness/regression convs plus ROI-column heads."""

    def __init__(self, channels: int, num_classes: int, mask_size: int):
        super().__init__()
        self.mask_size = mask_size
        self.obj = nn.Conv2d(channels, 1, 1)
        self.reg = nn.Conv2d(channels, 4, 1)
        self.roi_cls = nn.Linear(channels, num_classes)
        self.roi_reg = nn.Linear(channels, 4)
        self.mask = nn.Linear(channels, mask_size * mask_size)


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------

@dataclass
class TaskBundle:
    """Frozen task surrogate: backbone, heads, seeded data, and a [0,1] metric.

    ``*_features`` hold precomputed split-point features as one tensor per
    pyramid level (a single-entry list for classification), all computed
    once from the frozen backbone.
    """

    kind: str
    seed: int
    discrepancy_task: str
    feature_channels: int
    backbone: nn.Module
    heads: nn.Module
    train_images: torch.Tensor
    eval_images: torch.Tensor
    train_features: list[torch.Tensor]
    eval_features: list[torch.Tensor]
    clean_score: float = 0.0
    manifest: dict = field(default_factory=dict)
    # classification only
    eval_labels: Optional[torch.Tensor] = None
    num_classes: int = 0
    # pyramid only
    level_strides: tuple[int, ...] = ()
    roi_per_level: int = 8
    mask_size: int = 6
    mask_window_factor: float = 4.0
    reg_threshold: float = 0.2
    mask_iou_threshold: float = 0.5
    eval_rois: Optional[list[torch.Tensor]] = None
    eval_targets: Optional[dict] = None

    @property
    def num_levels(self) -> int:
        return len(self.train_features)

    @property
    def level_ids(self) -> tuple[str, ...]:
        return tuple(f"P{i}" for i in range(self.num_levels))

    # -- feature views -----------------------------------------------------

    def eval_size(self) -> int:
        return self.eval_features[0].shape[0]

    def feature_example(self, index: int, split: str = "eval"):
        """Example `index` as FeatureTensor (classification) or FeaturePyramid."""
        feats = self.eval_features if split == "eval" else self.train_features
        levels = [FeatureTensor(lvl[index].numpy().copy()) for lvl in feats]
        if self.kind == "classification":
            return levels[0]
        return FeaturePyramid(tuple(levels), self.level_ids)

    # -- head evaluation ---------------------------------------------------

    def select_rois(self, features: list[torch.Tensor]) -> Optional[list[torch.Tensor]]:
        """Top-k positions per level by objectness; pure function of its input."""
        if self.kind == "classification":
            return None
        rois = []
        for lvl in features:
            scores = self.heads.obj(lvl).flatten(1)
            k = min(self.roi_per_level, scores.shape[1])
            idx = torch.topk(scores, k, dim=1).indices
            rois.append(torch.sort(idx, dim=1).values)
        return rois

    def eval_heads(self, features: list[torch.Tensor], rois=None) -> HeadOutputs:
        """Run the frozen heads; for the pyramid task `rois` must come from
        the clean features being compared against (aligned-ROI contract)."""
        if self.kind == "classification":
            return HeadOutputs(cls_logits=self.heads(features[0]))
        if rois is None:
            rois = self.select_rois(features)
        heads: _PyramidHeads = self.heads
        obj_maps, reg_maps, roi_cols = [], [], []
        for lvl, idx in zip(features, rois):
            obj_maps.append(heads.obj(lvl).flatten(1))
            reg_maps.append(heads.reg(lvl).flatten(2).transpose(1, 2))
            cols = lvl.flatten(2).transpose(1, 2)  # (B, HW, C)
            gathered = torch.gather(
                cols, 1, idx.unsqueeze(-1).expand(-1, -1, cols.shape[-1])
            )
            roi_cols.append(gathered)
        roi_feats = torch.cat(roi_cols, dim=1)  # (B, K, C)
        b, k = roi_feats.shape[0], roi_feats.shape[1]
        return HeadOutputs(
            rpn_logits=torch.cat(obj_maps, dim=1),
            rpn_reg=torch.cat(reg_maps, dim=1),
            roi_logits=heads.roi_cls(roi_feats),
            roi_reg=heads.roi_reg(roi_feats),
            mask_logits=heads.mask(roi_feats).reshape(b, k, self.mask_size, self.mask_size),
        )

    # -- performance ---------------------------------------------------------

    @torch.no_grad()
    def performance(self, features: Optional[list[torch.Tensor]] = None) -> float:
        """Scalar task score in [0, 1] on the evaluation set.

        ``features`` defaults to the clean eval features; pass distorted
        ones (same layout) to measure degraded performance.  The pyramid
        score always uses ROIs selected from the *clean* eval features.
        """
        if features is None:
            features = self.eval_features
        if self.kind == "classification":
            logits = self.heads(features[0])
            pred = logits.argmax(dim=1)
            return float((pred == self.eval_labels).double().mean())
        out = self.eval_heads(features, rois=self.eval_rois)
        tgt = self.eval_targets
        cls_acc = float((out.roi_logits.argmax(dim=-1) == tgt["cls"]).double().mean())
        fg = tgt["fg"]
        if int(fg.sum()) == 0:
            return cls_acc / 3.0
        reg_err = (out.roi_reg - tgt["reg"]).abs().mean(dim=-1)
        reg_rate = float((reg_err[fg] < self.reg_threshold).double().mean())
        pred_mask = torch.sigmoid(out.mask_logits) > 0.5
        gt_mask = tgt["mask"] > 0.5
        inter = (pred_mask & gt_mask).sum(dim=(-1, -2)).double()
        union = (pred_mask | gt_mask).sum(dim=(-1, -2)).double().clamp(min=1.0)
        iou = inter / union
        mask_rate = float((iou[fg] > self.mask_iou_threshold).double().mean())
        return (cls_acc + reg_rate + mask_rate) / 3.0

    # -- integrity -----------------------------------------------------------

    def checksum(self) -> str:
        """SHA-256 over every frozen parameter and buffer, in sorted key order."""
        h = hashlib.sha256()
        for module in (self.backbone, self.heads):
            state = module.state_dict()
            for name in sorted(state):
                h.update(name.encode())
                h.update(state[name].numpy().tobytes())
        return h.hexdigest()


def _freeze(*modules: nn.Module) -> None:
    for m in modules:
        m.eval()
        for p in m.parameters():
            p.requires_grad_(False)


# ---------------------------------------------------------------------------
# Classification bundle
# ---------------------------------------------------------------------------

def make_cls_bundle(
    seed: int,
    num_classes: int = 4,
    feature_channels: int = 16,
    train_size: int = 1024,
    eval_size: int = 512,
    pretrain_epochs: int = 30,
    accuracy_threshold: float = 0.90,
) -> TaskBundle:
    """Pretrain and freeze the toy classifier; split point = backbone output."""
    if num_classes < 2:
        raise ValidationError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    train_x, train_y = generate_blob_classification(rng, train_size, num_classes)
    eval_x, eval_y = generate_blob_classification(rng, eval_size, num_classes)
    train_images = torch.from_numpy(train_x)
    eval_images = torch.from_numpy(eval_x)
    train_labels = torch.from_numpy(train_y)
    eval_labels = torch.from_numpy(eval_y)

    backbone = _ClsBackbone(feature_channels)
    head = _ClsHead(feature_channels, num_classes)
    params = list(backbone.parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=1e-3)
    batch = 64
    for _ in range(pretrain_epochs):
        order = rng.permutation(train_size)
        for start in range(0, train_size, batch):
            idx = torch.from_numpy(order[start : start + batch].copy())
            logits = head(backbone(train_images[idx]))
            loss = F.cross_entropy(logits, train_labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    _freeze(backbone, head)

    with torch.no_grad():
        train_feats = backbone(train_images)
        eval_feats = backbone(eval_images)
        acc = float((head(eval_feats).argmax(1) == eval_labels).double().mean())
    if acc < accuracy_threshold:
        raise BundleQualityError(
            f"classification pretraining reached {acc:.3f} < {accuracy_threshold};"
            f" retry with a different seed (got seed={seed})"
        )

    bundle = TaskBundle(
        kind="classification",
        seed=seed,
        discrepancy_task="classification",
        feature_channels=feature_channels,
        backbone=backbone,
        heads=head,
        train_images=train_images,
        eval_images=eval_images,
        train_features=[train_feats],
        eval_features=[eval_feats],
        eval_labels=eval_labels,
        num_classes=num_classes,
    )
    bundle.clean_score = bundle.performance()
    bundle.manifest = {
        "kind": "classification",
        "seed": seed,
        "num_classes": num_classes,
        "feature_channels": feature_channels,
        "train_size": train_size,
        "eval_size": eval_size,
        "pretrain_accuracy": acc,
        "clean_score": bundle.clean_score,
        "checksum": bundle.checksum(),
    }
    return bundle


# ---------------------------------------------------------------------------
# Pyramid bundle
# ---------------------------------------------------------------------------

def _positions(shape_hw: tuple[int, int], stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Image-plane coordinates of every cell center at one level."""
    h, w = shape_hw
    iy, ix = np.mgrid[0:h, 0:w]
    py = (iy.ravel() + 0.5) * stride
    px = (ix.ravel() + 0.5) * stride
    return py, px


def _assign_roi_targets(
    rois: list[torch.Tensor],
    gt: dict,
    level_shapes: Sequence[tuple[int, int]],
    level_strides: Sequence[int],
    num_fg: int,
    mask_size: int,
    window_factor: float,
) -> dict:
    """Per-ROI ground truth: class id, regression offsets, local window mask.

    A ROI whose cell center lies within the object radius is foreground
    with the object's class; all others take the background id ``num_fg``.
    Regression targets are (dy, dx, log r, log r) in units of the level
    stride.  The mask target rasterizes the object support on a
    ``mask_size`` grid over a window of ``window_factor * stride`` pixels
    centered on the cell.
    """
    n = rois[0].shape[0]
    cls_list, reg_list, fg_list, mask_list = [], [], [], []
    for lvl, (shape_hw, stride) in enumerate(zip(level_shapes, level_strides)):
        py_all, px_all = _positions(shape_hw, stride)
        idx = rois[lvl].numpy()  # (n, k)
        py, px = py_all[idx], px_all[idx]  # (n, k)
        cy, cx, r = gt["cy"][:, None], gt["cx"][:, None], gt["r"][:, None]
        dist = np.sqrt((py - cy) ** 2 + (px - cx) ** 2)
        fg = dist <= r
        cls_t = np.where(fg, gt["cls"][:, None], num_fg)
        reg_t = np.stack(
            [
                (cy - py) / stride,
                (cx - px) / stride,
                np.broadcast_to(np.log(r / stride), py.shape),
                np.broadcast_to(np.log(r / stride), py.shape),
            ],
            axis=-1,
        )
        half = 0.5 * window_factor * stride
        cell = window_factor * stride / mask_size
        offs = -half + (np.arange(mask_size) + 0.5) * cell
        wy = py[..., None, None] + offs[None, None, :, None]
        wx = px[..., None, None] + offs[None, None, None, :]
        masks = np.zeros((n, idx.shape[1], mask_size, mask_size), dtype=np.float32)
        for i in range(n):
            masks[i] = object_support(
                int(gt["cls"][i]), wy[i], wx[i], gt["cy"][i], gt["cx"][i], gt["r"][i]
            ).astype(np.float32)
        cls_list.append(torch.from_numpy(cls_t.astype(np.int64)))
        reg_list.append(torch.from_numpy(reg_t.astype(np.float32)))
        fg_list.append(torch.from_numpy(fg))
        mask_list.append(torch.from_numpy(masks))
    return {
        "cls": torch.cat(cls_list, dim=1),
        "reg": torch.cat(reg_list, dim=1),
        "fg": torch.cat(fg_list, dim=1),
        "mask": torch.cat(mask_list, dim=1),
    }


def make_pyramid_bundle(
    seed: int,
    levels: int = 2,
    feature_channels: int = 32,
    num_fg_classes: int = 3,
    train_size: int = 512,
    eval_size: int = 256,
    image_size: int = 32,
    roi_per_level: int = 8,
    pretrain_epochs: int = 40,
    score_threshold: float = 0.70,
) -> TaskBundle:
    """Pretrain and freeze the toy pyramid model; split point = level outputs."""
    if levels < 2:
        raise ValidationError(f"need at least 2 pyramid levels, got {levels}")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    num_classes = num_fg_classes + 1  # + background
    mask_size = 6
    window_factor = 4.0

    train_x, train_gt = generate_blob_scenes(rng, train_size, image_size, num_fg_classes)
    eval_x, eval_gt = generate_blob_scenes(rng, eval_size, image_size, num_fg_classes)
    train_images = torch.from_numpy(train_x)
    eval_images = torch.from_numpy(eval_x)

    backbone = _PyramidBackbone(feature_channels, levels)
    heads = _PyramidHeads(feature_channels, num_classes, mask_size)
    level_strides = tuple(4 * 2**i for i in range(levels))
    with torch.no_grad():
        level_shapes = [tuple(f.shape[2:]) for f in backbone(train_images[:1])]

    # pretraining uses every cell as a ROI so the heads see a balanced mix
    all_rois = [
        torch.arange(h * w).unsqueeze(0).expand(train_size, -1).contiguous()
        for (h, w) in level_shapes
    ]
    all_targets = _assign_roi_targets(
        all_rois, train_gt, level_shapes, level_strides, num_fg_classes, mask_size, window_factor
    )

    params = list(backbone.parameters()) + list(heads.parameters())
    opt = torch.optim.Adam(params, lr=1e-3)
    batch = 32
    bundle_proto = TaskBundle(
        kind="pyramid",
        seed=seed,
        discrepancy_task="instance_segmentation",
        feature_channels=feature_channels,
        backbone=backbone,
        heads=heads,
        train_images=train_images,
        eval_images=eval_images,
        train_features=[],
        eval_features=[],
        num_classes=num_classes,
        level_strides=level_strides,
        roi_per_level=roi_per_level,
        mask_size=mask_size,
        mask_window_factor=window_factor,
    )
    for _ in range(pretrain_epochs):
        order = rng.permutation(train_size)
        for start in range(0, train_size, batch):
            idx = torch.from_numpy(order[start : start + batch].copy())
            feats = backbone(train_images[idx])
            rois = [r[idx] for r in all_rois]
            out = bundle_proto.eval_heads(feats, rois)
            cls_t = all_targets["cls"][idx]
            reg_t = all_targets["reg"][idx]
            fg = all_targets["fg"][idx]
            mask_t = all_targets["mask"][idx]
            loss = F.binary_cross_entropy_with_logits(out.rpn_logits, fg.float())
            loss = loss + F.cross_entropy(
                out.roi_logits.reshape(-1, num_classes), cls_t.reshape(-1)
            )
            if int(fg.sum()) > 0:
                loss = loss + F.smooth_l1_loss(out.roi_reg[fg], reg_t[fg])
                loss = loss + F.binary_cross_entropy_with_logits(
                    out.mask_logits[fg], mask_t[fg]
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
    _freeze(backbone, heads)

    with torch.no_grad():
        train_feats = backbone(train_images)
        eval_feats = backbone(eval_images)
    bundle = bundle_proto
    bundle.train_features = list(train_feats)
    bundle.eval_features = list(eval_feats)
    bundle.eval_rois = bundle.select_rois(bundle.eval_features)
    bundle.eval_targets = _assign_roi_targets(
        bundle.eval_rois, eval_gt, level_shapes, level_strides,
        num_fg_classes, mask_size, window_factor,
    )
    bundle.clean_score = bundle.performance()
    if bundle.clean_score < score_threshold:
        raise BundleQualityError(
            f"pyramid pretraining reached score {bundle.clean_score:.3f} < {score_threshold};"
            f" retry with a different seed (got seed={seed})"
        )
    bundle.manifest = {
        "kind": "pyramid",
        "seed": seed,
        "levels": levels,
        "feature_channels": feature_channels,
        "num_fg_classes": num_fg_classes,
        "train_size": train_size,
        "eval_size": eval_size,
        "level_strides": list(level_strides),
        "roi_per_level": roi_per_level,
        "clean_score": bundle.clean_score,
        "checksum": bundle.checksum(),
    }
    return bundle


def make_bundle(kind: str, seed: int, **kwargs) -> TaskBundle:
    if kind == "classification":
        return make_cls_bundle(seed, **kwargs)
    if kind == "pyramid":
        return make_pyramid_bundle(seed, **kwargs)
    raise ValidationError(f"unknown bundle kind {kind!r}")
