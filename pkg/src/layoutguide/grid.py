"""Spatial primitives: boxes, layouts, masks, distance fields and priors.

Coordinates are normalized to the unit square with the origin at the top-left
corner; ``x`` runs along columns and ``y`` along rows. A cell ``(r, c)`` of an
``H x W`` grid is represented by its center ``((c + 0.5) / W, (r + 0.5) / H)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Literal, Sequence

import numpy as np

DEFAULT_LAMBDA = 4.0

_EDGE_TOL = 1e-12


class LayoutError(ValueError):
    """Raised for malformed boxes, layouts or degenerate box/grid pairings."""


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box ``[x, x + w) x [y, y + h)`` in normalized coordinates."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(np.isfinite(v) for v in vals):
            raise LayoutError(f"non-finite box {vals}")
        if not (0.0 <= self.x < 1.0 and 0.0 <= self.y < 1.0):
            raise LayoutError(f"box corner ({self.x}, {self.y}) outside [0, 1)")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise LayoutError(f"box extent ({self.w}, {self.h}) outside (0, 1]")
        if self.x + self.w > 1.0 + _EDGE_TOL or self.y + self.h > 1.0 + _EDGE_TOL:
            raise LayoutError(f"box {vals} extends past the unit square")

    @property
    def center(self) -> tuple[float, float]:
        return self.x + 0.5 * self.w, self.y + 0.5 * self.h

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class LayoutEntry:
    token: int
    box: BoundingBox


@dataclass(frozen=True)
class LayoutSpec:
    """Ordered, nonempty set of (token id, box) pairs with distinct tokens."""

    entries: tuple[LayoutEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise LayoutError("layout must contain at least one token")
        tokens = [e.token for e in self.entries]
        if len(set(tokens)) != len(tokens):
            raise LayoutError(f"duplicate token ids in layout: {tokens}")
        if any(t < 0 for t in tokens):
            raise LayoutError(f"token ids must be nonnegative: {tokens}")

    @classmethod
    def from_boxes(cls, boxes: Sequence[Sequence[float]], tokens: Sequence[int] | None = None):
        if tokens is None:
            tokens = range(len(boxes))
        return cls(tuple(LayoutEntry(int(t), BoundingBox(*map(float, b))) for t, b in zip(tokens, boxes)))

    @classmethod
    def from_dict(cls, doc: dict) -> "LayoutSpec":
        try:
            items = doc["tokens"]
            entries = []
            for item in items:
                box = item["box"]
                if len(box) != 4:
                    raise LayoutError(f"box for token {item['id']} needs 4 numbers, got {len(box)}")
                entries.append(LayoutEntry(int(item["id"]), BoundingBox(*map(float, box))))
        except (KeyError, TypeError) as exc:
            raise LayoutError(f"malformed layout document: {exc!r}") from exc
        return cls(tuple(entries))

    @classmethod
    def from_json(cls, text: str) -> "LayoutSpec":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "LayoutSpec":
        return cls.from_json(Path(path).read_text())

    def to_dict(self) -> dict:
        return {"tokens": [{"id": e.token, "box": e.box.as_list()} for e in self.entries]}

    @property
    def tokens(self) -> tuple[int, ...]:
        return tuple(e.token for e in self.entries)

    def __iter__(self) -> Iterator[LayoutEntry]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class TokenAttention:
    """Nonnegative spatial map tagged with how it has been normalized.

    ``kind`` is ``"raw"`` for unnormalized attention, ``"global"`` when the map
    sums to one over the whole grid, and ``"mask"`` when it sums to one over the
    cells of ``mask`` (and is zero elsewhere).
    """

    values: np.ndarray
    kind: Literal["raw", "global", "mask"] = "raw"
    mask: np.ndarray | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"attention must be a 2-D grid, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)) or np.any(vals < 0):
            raise ValueError("attention values must be finite and nonnegative")
        if self.kind == "global" and abs(vals.sum() - 1.0) > 1e-9:
            raise ValueError(f"globally normalized attention sums to {vals.sum()}")
        if self.kind == "mask":
            if self.mask is None:
                raise ValueError("mask-normalized attention needs its mask")
            if abs(vals[self.mask].sum() - 1.0) > 1e-9:
                raise ValueError(f"mask-normalized attention sums to {vals[self.mask].sum()} on the mask")
        object.__setattr__(self, "values", vals)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def cell_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(ux, uy)`` arrays of shape ``(height, width)``."""
    if height < 1 or width < 1:
        raise LayoutError(f"grid dimensions must be positive, got {height}x{width}")
    uy = (np.arange(height, dtype=np.float64) + 0.5) / height
    ux = (np.arange(width, dtype=np.float64) + 0.5) / width
    return np.broadcast_to(ux[None, :], (height, width)), np.broadcast_to(uy[:, None], (height, width))


def rasterize_mask(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Boolean mask of the cells whose centers fall inside ``box``.

    A box too small to contain any cell center maps to the single cell that
    contains the box center, so every valid box has a nonempty mask.
    """
    ux, uy = cell_centers(height, width)
    mask = (ux >= box.x) & (ux < box.x + box.w) & (uy >= box.y) & (uy < box.y + box.h)
    if not mask.any():
        cx, cy = box.center
        mask[min(int(cy * height), height - 1), min(int(cx * width), width - 1)] = True
    return mask


def center_distance_field(box: BoundingBox, height: int, width: int) -> np.ndarray:
    """Normalized squared distance of each in-box cell center to the box center.

    ``d = (ux - cx)**2 / w + (uy - cy)**2 / h``. Cells outside the mask hold
    ``inf``.
    """
    mask = rasterize_mask(box, height, width)
    ux, uy = cell_centers(height, width)
    cx, cy = box.center
    d = (ux - cx) ** 2 / box.w + (uy - cy) ** 2 / box.h
    return np.where(mask, d, np.inf)


def nonlocal_prior(box: BoundingBox, height: int, width: int, lam: float = DEFAULT_LAMBDA) -> TokenAttention:
    """Center-weighted distribution ``tau ~ exp(-lam * d)`` over the box mask."""
    if not lam >= 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    mask = rasterize_mask(box, height, width)
    d = center_distance_field(box, height, width)
    logits = -lam * d[mask]
    w = np.exp(logits - logits.max())
    tau = np.zeros((height, width))
    tau[mask] = w / w.sum()
    return TokenAttention(tau, "mask", mask)


def spatial_softmax(logits: np.ndarray, temperature: float = 1.0) -> TokenAttention:
    """Softmax over every cell of a 2-D grid of logits."""
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    x = logits / temperature
    e = np.exp(x - x.max())
    return TokenAttention(e / e.sum(), "global")


@lru_cache(maxsize=256)
def layout_fields(layout: LayoutSpec, height: int, width: int, lam: float) -> tuple[np.ndarray, np.ndarray]:
    """Stacked masks ``(K, H, W)`` and priors ``(K, H, W)`` for every layout entry.

    Cached; the returned arrays are read-only.
    """
    masks = np.stack([rasterize_mask(e.box, height, width) for e in layout])
    priors = np.stack([nonlocal_prior(e.box, height, width, lam).values for e in layout])
    masks.setflags(write=False)
    priors.setflags(write=False)
    return masks, priors
