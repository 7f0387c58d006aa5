"""Tolerance-map estimator: a small shared conv net from feature to same-shaped map.

One 3x3 convolution lifts the feature to a hidden width, a stack of 1x1
residual blocks (1x1 conv -> batch norm -> activation -> 1x1 conv, additive
skip) refines it, and a 1x1 projection maps back to the input channel
count.  The output is hard-clamped elementwise; the clamp gradient is zero
in the saturated region.  The same instance is applied to every pyramid
level, so the input channel count must be shared across levels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError, PersistenceError, ValidationError
from .features import FeaturePyramid, FeatureTensor, JndMap, load_feature, save_feature

_ACTIVATIONS = {"relu": nn.ReLU, "gelu": nn.GELU, "tanh": nn.Tanh}

CHECKPOINT_MANIFEST = "manifest.json"


@dataclass(frozen=True)
class EstimatorConfig:
    in_channels: int
    hidden_width: int = 64
    num_residual_blocks: int = 2
    clamp_bound: float = 10.0
    activation: str = "relu"

    def __post_init__(self):
        if self.in_channels < 1 or self.hidden_width < 1:
            raise ValidationError("channel counts must be positive")
        if self.num_residual_blocks < 1:
            raise ValidationError("need at least one residual block")
        if self.clamp_bound <= 0:
            raise ValidationError(f"clamp_bound must be > 0, got {self.clamp_bound}")
        if self.activation not in _ACTIVATIONS:
            raise ValidationError(
                f"unknown activation {self.activation!r}, expected one of {sorted(_ACTIVATIONS)}"
            )


class _ResidualBlock(nn.Module):
    def __init__(self, width: int, activation: str):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, kernel_size=1)
        self.norm = nn.BatchNorm2d(width)
        self.act = _ACTIVATIONS[activation]()
        self.conv2 = nn.Conv2d(width, width, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.norm(self.conv1(x))))


class JndEstimator(nn.Module):
    """Predicts a same-shaped tolerance map from a split-point feature."""

    def __init__(self, cfg: EstimatorConfig):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv2d(cfg.in_channels, cfg.hidden_width, kernel_size=3, padding=1)
        self.blocks = nn.Sequential(
            *[_ResidualBlock(cfg.hidden_width, cfg.activation) for _ in range(cfg.num_residual_blocks)]
        )
        self.proj = nn.Conv2d(cfg.hidden_width, cfg.in_channels, kernel_size=1)

    def forward_raw(self, x: torch.Tensor) -> torch.Tensor:
        """Forward pass without the output clamp (saturation oracle hook)."""
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if x.shape[1] != self.cfg.in_channels:
            raise ValidationError(
                f"channel mismatch: estimator expects {self.cfg.in_channels}, got {x.shape[1]}"
            )
        return self.proj(self.blocks(self.stem(x)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = self.cfg.clamp_bound
        return torch.clamp(self.forward_raw(x), -b, b)

    @torch.no_grad()
    def predict(self, f: FeatureTensor) -> JndMap:
        """Inference-mode map for a single feature tensor."""
        was_training = self.training
        self.eval()
        try:
            x = torch.from_numpy(np.array(f.values))
            out = self.forward(x.unsqueeze(0)).squeeze(0)
        finally:
            self.train(was_training)
        return FeatureTensor(out.numpy().astype(np.float32))

    @torch.no_grad()
    def predict_pyramid(self, p: FeaturePyramid) -> FeaturePyramid:
        """Per-level inference with shared weights; order and ids preserved."""
        maps = tuple(self.predict(level) for level in p.levels)
        return FeaturePyramid(maps, p.level_ids)


def init_estimator(cfg: EstimatorConfig, seed: int) -> JndEstimator:
    """Build an estimator with deterministic, seed-keyed initialization.

    Hidden convolutions get the usual fan-in-scaled uniform init; the final
    projection is drawn at tiny scale (small-gain init) so a fresh model
    predicts a near-zero map and training starts from the identity regime.
    """
    est = JndEstimator(cfg)
    g = torch.Generator().manual_seed(seed)
    final = est.proj
    for module in est.modules():
        if isinstance(module, nn.Conv2d) and module is not final:
            fan_in = module.in_channels * module.kernel_size[0] * module.kernel_size[1]
            bound = 1.0 / math.sqrt(fan_in)
            module.weight.data.uniform_(-bound, bound, generator=g)
            module.bias.data.uniform_(-bound, bound, generator=g)
    final.weight.data.normal_(0.0, 1e-3, generator=g)
    final.bias.data.zero_()
    return est


def parameter_vector(est: JndEstimator) -> np.ndarray:
    """All trainable parameters flattened, in registration order."""
    return np.concatenate([p.detach().numpy().ravel() for p in est.parameters()])


def save_checkpoint(est: JndEstimator, dir_path) -> None:
    """Persist config + full state (weights and norm statistics) to a directory.

    Float entries are stored one per .fjnd container (flattened); true
    shapes live in the manifest, as do integer counters.
    """
    dir_path = Path(dir_path)
    try:
        dir_path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create checkpoint directory {dir_path}: {exc}") from exc
    entries = []
    for i, (name, tensor) in enumerate(est.state_dict().items()):
        if tensor.dtype in (torch.int64, torch.int32):
            entries.append({"name": name, "kind": "int", "value": int(tensor.item())})
            continue
        arr = tensor.detach().numpy().astype(np.float32)
        fname = f"param_{i:03d}.fjnd"
        save_feature(FeatureTensor(arr.reshape(1, 1, -1)), dir_path / fname)
        entries.append(
            {"name": name, "kind": "tensor", "shape": list(tensor.shape), "file": fname}
        )
    manifest = {
        "format": "fjnd-estimator",
        "version": 1,
        "config": asdict(est.cfg),
        "entries": entries,
    }
    try:
        with open(dir_path / CHECKPOINT_MANIFEST, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint manifest in {dir_path}: {exc}") from exc


def load_checkpoint(dir_path) -> JndEstimator:
    dir_path = Path(dir_path)
    manifest_path = dir_path / CHECKPOINT_MANIFEST
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != "fjnd-estimator":
        raise FormatError(
            f"bad manifest format field in {manifest_path}: {manifest.get('format')!r}"
        )
    if manifest.get("version") != 1:
        raise FormatError(
            f"unsupported checkpoint version in {manifest_path}: {manifest.get('version')!r}"
        )
    est = JndEstimator(EstimatorConfig(**manifest["config"]))
    state = {}
    for entry in manifest["entries"]:
        if entry["kind"] == "int":
            state[entry["name"]] = torch.tensor(entry["value"], dtype=torch.int64)
        else:
            flat = load_feature(dir_path / entry["file"]).values.ravel()
            state[entry["name"]] = torch.from_numpy(np.array(flat)).reshape(entry["shape"])
    est.load_state_dict(state)
    est.eval()
    return est
