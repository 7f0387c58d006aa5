"""Feature tensors, feature pyramids, and the ``.fjnd`` binary container.

A feature tensor is an immutable ``(channels, height, width)`` block of
finite float32 values — the interface representation extracted at a model
split point.  A predicted tolerance map has the same shape and is carried
by the same type (see :data:`JndMap`).

File layout of a ``.fjnd`` container (all integers little-endian):

    bytes  0..3    magic ``b"FJND"``
    bytes  4..7    format version, uint32 (currently 1)
    bytes  8..15   element count, uint64 (= channels * height * width)
    bytes 16..27   channels, height, width (uint32 each)
    bytes 28..     float32 payload, row-major with channel outermost and
                   width innermost

Pyramids are stored as a directory holding one level file per entry plus a
``manifest.json`` recording the level ids in order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, PersistenceError, ShapeMismatchError, ValidationError

MAGIC = b"FJND"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQIII")

PYRAMID_MANIFEST = "manifest.json"


def _validate_values(values: np.ndarray) -> np.ndarray:
    if values.ndim != 3:
        raise ValidationError(f"feature values must be 3-d (c, h, w), got ndim={values.ndim}")
    if min(values.shape) < 1:
        raise ValidationError(f"all dimensions must be positive, got shape {values.shape}")
    if values.dtype != np.float32:
        values = values.astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise ValidationError("feature values must be finite (no NaN/Inf)")
    return values


@dataclass(frozen=True)
class FeatureTensor:
    """Immutable (channels, height, width) float32 feature block."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = _validate_values(np.asarray(self.values))
        values = np.ascontiguousarray(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @classmethod
    def from_flat(cls, flat: Sequence[float]) -> "FeatureTensor":
        """Wrap a flat value list as a (1, 1, n) tensor, for scalar-style uses."""
        arr = np.asarray(flat, dtype=np.float32).reshape(1, 1, -1)
        return cls(arr)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.values, other.values)


# A predicted per-element tolerance map: same layout as the feature it
# perturbs.  The estimator guarantees its entries stay inside the clamp
# bound; the shape contract is checked wherever the pair is consumed.
JndMap = FeatureTensor


@dataclass(frozen=True)
class FeaturePyramid:
    """Ordered multi-level feature stream (e.g. P2..P5), ids unique."""

    levels: tuple[FeatureTensor, ...]
    level_ids: tuple[str, ...]

    def __post_init__(self):
        levels = tuple(self.levels)
        level_ids = tuple(str(i) for i in self.level_ids)
        if len(levels) < 1:
            raise ValidationError("a pyramid needs at least one level")
        if len(levels) != len(level_ids):
            raise ValidationError(
                f"{len(levels)} levels but {len(level_ids)} level ids"
            )
        if len(set(level_ids)) != len(level_ids):
            raise ValidationError(f"level ids must be unique, got {level_ids}")
        for lv in levels:
            if not isinstance(lv, FeatureTensor):
                raise ValidationError("pyramid levels must be FeatureTensor instances")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "level_ids", level_ids)

    def __len__(self) -> int:
        return len(self.levels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeaturePyramid):
            return NotImplemented
        return self.level_ids == other.level_ids and all(
            a == b for a, b in zip(self.levels, other.levels)
        )


def as_array(t) -> np.ndarray:
    """Coerce a FeatureTensor or array-like to a float ndarray."""
    if isinstance(t, FeatureTensor):
        return t.values
    return np.asarray(t)


def l2_norm(t) -> float:
    """Euclidean norm over all elements, accumulated in float64."""
    arr = as_array(t).astype(np.float64, copy=False)
    return float(np.sqrt(np.sum(arr * arr)))


def require_same_shape(a, b, context: str = "") -> None:
    sa, sb = as_array(a).shape, as_array(b).shape
    if sa != sb:
        raise ShapeMismatchError(sa, sb, context)


def save_feature(t: FeatureTensor, path) -> None:
    """Write ``t`` to ``path`` in the .fjnd container format (deterministic bytes)."""
    if not isinstance(t, FeatureTensor):
        t = FeatureTensor(np.asarray(t))
    c, h, w = t.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, c * h * w, c, h, w)
    payload = np.ascontiguousarray(t.values, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise PersistenceError(f"cannot write feature file {path}: {exc}") from exc


def load_feature(path) -> FeatureTensor:
    """Read a .fjnd container back into a FeatureTensor."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise PersistenceError(f"cannot read feature file {path}: {exc}") from exc

    if len(raw) < _HEADER.size:
        raise FormatError(
            f"header truncated in {path}: expected {_HEADER.size} bytes, got {len(raw)}"
        )
    magic, version, count, c, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic in {path}: expected {MAGIC!r}, got {magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"unsupported format version in {path}: expected {FORMAT_VERSION}, got {version}"
        )
    if count != c * h * w:
        raise FormatError(
            f"element count mismatch in {path}: header says {count}, shape implies {c * h * w}"
        )
    expected = _HEADER.size + count * 4
    if len(raw) != expected:
        raise FormatError(
            f"payload truncated in {path}: expected {expected} bytes total, got {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(c, h, w)
    return FeatureTensor(values.copy())


def save_pyramid(p: FeaturePyramid, dir_path) -> None:
    """Store a pyramid as one .fjnd file per level plus an ordered manifest."""
    dir_path = Path(dir_path)
    try:
        dir_path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PersistenceError(f"cannot create pyramid directory {dir_path}: {exc}") from exc
    entries = []
    for i, (lid, level) in enumerate(zip(p.level_ids, p.levels)):
        fname = f"level_{i:03d}.fjnd"
        save_feature(level, dir_path / fname)
        entries.append({"id": lid, "file": fname})
    manifest = {"format": "fjnd-pyramid", "version": FORMAT_VERSION, "levels": entries}
    try:
        with open(dir_path / PYRAMID_MANIFEST, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise PersistenceError(f"cannot write pyramid manifest in {dir_path}: {exc}") from exc


def load_pyramid(dir_path) -> FeaturePyramid:
    dir_path = Path(dir_path)
    manifest_path = dir_path / PYRAMID_MANIFEST
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise PersistenceError(f"cannot read pyramid manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed pyramid manifest {manifest_path}: {exc}") from exc

    if manifest.get("format") != "fjnd-pyramid":
        raise FormatError(f"bad manifest format field in {manifest_path}: {manifest.get('format')!r}")
    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(
            f"unsupported pyramid manifest version in {manifest_path}: {manifest.get('version')!r}"
        )
    levels, ids = [], []
    for entry in manifest["levels"]:
        levels.append(load_feature(dir_path / entry["file"]))
        ids.append(entry["id"])
    return FeaturePyramid(tuple(levels), tuple(ids))
