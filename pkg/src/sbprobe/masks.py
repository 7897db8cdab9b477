"""Chess-pattern sliding masks and the coverage-weighted aggregation of inpainted results.

A base pattern of ``d x d`` zero squares repeating every ``d + spacing``
pixels is translated over a grid of (row, col) offsets. Each translation is one
mask; a pixel's *coverage* is the number of masks that zero it. Aggregation
averages every partially inpainted image over the pixels its mask zeroed,
dividing by coverage rather than testing pixel values, so genuinely black
pixels are handled correctly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import AggregationError, ContractViolation, ScheduleError
from .imaging import BinaryMask, FaceImage, Provenance


@dataclass(frozen=True)
class ChessPatternConfig:
    square_size: int
    spacing: int
    stride: int = 1
    image_dims: tuple[int, int] = (224, 224)
    squares_per_side: int | None = None  # None tiles the pattern across the whole image
    traversal: int | None = None  # offsets per axis span [0, traversal); None means one period

    @property
    def period(self) -> int:
        return self.square_size + self.spacing

    @property
    def traversal_extent(self) -> int:
        return self.period if self.traversal is None else self.traversal

    @property
    def offsets(self) -> range:
        return range(0, self.traversal_extent, self.stride)

    @property
    def n_masks(self) -> int:
        return len(self.offsets) ** 2

    @classmethod
    def standard(cls, image_dims: tuple[int, int] = (224, 224)) -> "ChessPatternConfig":
        """5x5 squares, 30 px apart, 1 px shifts over 34 offsets per axis: 1,156 masks."""
        return cls(square_size=5, spacing=30, stride=1, image_dims=tuple(image_dims), traversal=34)

    @classmethod
    def from_dict(cls, d: dict, image_dims: tuple[int, int] | None = None) -> "ChessPatternConfig":
        allowed = {"square_size", "spacing", "stride", "squares_per_side", "traversal", "image_dims"}
        unknown = set(d) - allowed
        if unknown:
            raise ScheduleError(f"unknown schedule keys: {sorted(unknown)}")
        kw = dict(d)
        if image_dims is not None:
            kw["image_dims"] = tuple(image_dims)
        elif "image_dims" in kw:
            kw["image_dims"] = tuple(kw["image_dims"])
        return cls(**kw)

    def validate(self) -> None:
        h, w = self.image_dims
        d = self.square_size
        if d < 1 or self.spacing < 0 or self.stride < 1:
            raise ScheduleError("need square_size >= 1, spacing >= 0, stride >= 1")
        if h < 1 or w < 1:
            raise ScheduleError("image dimensions must be positive")
        if d > min(h, w) / 4:
            raise ScheduleError(f"square_size {d} too large for {h}x{w} (limit min(h, w)/4)")
        if self.traversal is None and self.period % self.stride:
            raise ScheduleError(f"stride {self.stride} does not divide period {self.period}")
        if self.traversal is not None and self.traversal < 1:
            raise ScheduleError("traversal must be >= 1")
        if self.squares_per_side is not None:
            n = self.squares_per_side
            if n < 1:
                raise ScheduleError("squares_per_side must be >= 1")
            if (n - 1) * self.period + d > min(h, w):
                raise ScheduleError("explicit pattern does not fit inside the image")


def _axis_zeros(length: int, offset: int, cfg: ChessPatternConfig) -> np.ndarray:
    """Indicator of rows (or columns) covered by squares for one offset, clipped at the border."""
    ind = np.zeros(length, dtype=bool)
    p, d = cfg.period, cfg.square_size
    # a tiled pattern also has a clipped square entering from the near border
    k = 0 if cfg.squares_per_side is not None else -1
    while True:
        if cfg.squares_per_side is not None and k >= cfg.squares_per_side:
            break
        start = offset + k * p
        if start >= length:
            break
        if start + d > 0:
            ind[max(start, 0):min(start + d, length)] = True
        k += 1
    return ind


class MaskSchedule:
    """Ordered chess-pattern masks plus per-pixel coverage counts.

    The pattern is separable, so mask ``i`` is stored as a row indicator and a
    column indicator; full masks are materialised on demand.
    """

    def __init__(self, cfg: ChessPatternConfig, row_zero: np.ndarray, col_zero: np.ndarray,
                 pairs: np.ndarray):
        self.config = cfg
        self._row_zero = row_zero  # (n_offsets, h)
        self._col_zero = col_zero  # (n_offsets, w)
        self._pairs = pairs  # (N, 2) indices into the offset lists, row-major
        rc = row_zero.sum(axis=0).astype(np.int64)
        cc = col_zero.sum(axis=0).astype(np.int64)
        cov = np.outer(rc, cc)
        cov.flags.writeable = False
        self.coverage = cov

    @property
    def shape(self) -> tuple[int, int]:
        return self.coverage.shape

    def __len__(self) -> int:
        return len(self._pairs)

    def zero_region(self, i: int) -> np.ndarray:
        """Boolean grid that is True where mask ``i`` is zero."""
        a, b = self._pairs[i]
        return np.outer(self._row_zero[a], self._col_zero[b])

    def mask(self, i: int) -> BinaryMask:
        return BinaryMask(~self.zero_region(i))

    def __iter__(self) -> Iterator[BinaryMask]:
        for i in range(len(self)):
            yield self.mask(i)

    @property
    def masks(self) -> list[BinaryMask]:
        return list(self)


def build_schedule(cfg: ChessPatternConfig) -> MaskSchedule:
    cfg.validate()
    h, w = cfg.image_dims
    offs = list(cfg.offsets)
    row_zero = np.stack([_axis_zeros(h, o, cfg) for o in offs])
    col_zero = np.stack([_axis_zeros(w, o, cfg) for o in offs])
    n = len(offs)
    pairs = np.array([(a, b) for a in range(n) for b in range(n)], dtype=np.int64)
    sched = MaskSchedule(cfg, row_zero, col_zero, pairs)
    uncovered = int((sched.coverage == 0).sum())
    if uncovered:
        raise ScheduleError(f"{uncovered} pixel(s) are never masked by the schedule")
    return sched


class InpaintAccumulator:
    """Streaming form of :func:`aggregate_inpainted` for one image.

    Partials may be added in any order; each mask index must be added once.
    """

    def __init__(self, schedule: MaskSchedule):
        self.schedule = schedule
        h, w = schedule.shape
        self._sum = np.zeros((h, w, 3))
        self._seen = np.zeros(len(schedule), dtype=bool)
        self._source_id = ""

    def add(self, i: int, partial: FaceImage | np.ndarray) -> None:
        if self._seen[i]:
            raise AggregationError(f"mask {i} added twice")
        px = partial.pixels if isinstance(partial, FaceImage) else np.asarray(partial, dtype=np.float64)
        if px.shape[:2] != self.schedule.shape:
            raise ContractViolation(f"partial {i}: dimension mismatch {px.shape[:2]} vs {self.schedule.shape}")
        if isinstance(partial, FaceImage) and not self._source_id:
            self._source_id = partial.source_id
        zr = self.schedule.zero_region(i)
        self._sum[zr] += px[zr]
        self._seen[i] = True

    def result(self, source_id: str | None = None) -> FaceImage:
        if not self._seen.all():
            raise AggregationError(f"{int((~self._seen).sum())} partial result(s) missing")
        cov = self.schedule.coverage
        if (cov == 0).any():
            raise AggregationError("schedule leaves pixels with zero coverage")
        out = self._sum / cov[:, :, None]
        return FaceImage(out, Provenance.RECOVERED, source_id if source_id is not None else self._source_id)


def aggregate_inpainted(partials: Sequence[FaceImage], schedule: MaskSchedule) -> FaceImage:
    """Average each pixel over the partials whose mask zeroed it."""
    if len(partials) != len(schedule):
        raise AggregationError(f"expected {len(schedule)} partials, got {len(partials)}")
    acc = InpaintAccumulator(schedule)
    for i, p in enumerate(partials):
        acc.add(i, p)
    return acc.result()

