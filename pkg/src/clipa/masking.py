"""Image-token reduction (random / block / grid masks) and text truncation.

Masks act on the patch grid after patch embedding and positional-embedding
addition, before the first transformer block.  A class token, when the model
has one, is prepended after masking and is never dropped.

Keep count is ``max(1, floor((1 - r) * n + 0.5))``: round half up with a
floor of one token.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng
from .autodiff import Tensor, gather_rows

STRATEGIES = ("random", "block", "grid", "none")
GRID_RATIOS = (0.25, 0.5, 0.75)


class MaskError(ValueError):
    pass


class UnsupportedPatternError(MaskError):
    pass


class InfeasibleMaskError(MaskError):
    pass


@dataclass(frozen=True)
class MaskSpec:
    strategy: str = "none"
    ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise MaskError(f"unknown mask strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if not 0.0 <= self.ratio < 1.0:
            raise MaskError(f"mask ratio must lie in [0, 1), got {self.ratio}")
        if self.strategy == "none" and self.ratio != 0.0:
            raise MaskError("strategy 'none' requires ratio 0")


@dataclass(frozen=True)
class TokenMask:
    grid_h: int
    grid_w: int
    kept: tuple[int, ...] = field(default=())

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        prev = -1
        for i in self.kept:
            if not prev < i < n:
                raise MaskError(f"kept indices must be strictly increasing in [0, {n})")
            prev = i

    @property
    def n_tokens(self) -> int:
        return self.grid_h * self.grid_w

    def as_array(self) -> np.ndarray:
        return np.asarray(self.kept, dtype=np.int64)

    def removed(self) -> list[int]:
        keep = set(self.kept)
        return [i for i in range(self.n_tokens) if i not in keep]


def keep_count(n_tokens: int, mask_ratio: float) -> int:
    if n_tokens < 1:
        raise MaskError(f"n_tokens must be positive, got {n_tokens}")
    if not 0.0 <= mask_ratio < 1.0:
        raise MaskError(f"mask ratio must lie in [0, 1), got {mask_ratio}")
    return max(1, math.floor((1.0 - mask_ratio) * n_tokens + 0.5))


def full_mask(grid_h: int, grid_w: int) -> TokenMask:
    return TokenMask(grid_h, grid_w, tuple(range(grid_h * grid_w)))


def _check_grid(grid_h, grid_w):
    if grid_h < 1 or grid_w < 1:
        raise MaskError(f"grid extents must be >= 1, got {grid_h}x{grid_w}")


def make_random_mask(grid_h: int, grid_w: int, mask_ratio: float, seed: int,
                     sample_index: int) -> TokenMask:
    """Uniform random subset of ``keep_count`` tokens.

    Partial Fisher-Yates over ``range(n)``: for ``i < k`` swap position ``i``
    with ``i + below(key, i, n - i)`` where ``key = stream_key(seed, 1,
    sample_index)``; the first ``k`` entries, sorted, are kept.
    """
    _check_grid(grid_h, grid_w)
    n = grid_h * grid_w
    k = keep_count(n, mask_ratio)
    if k == n:
        return full_mask(grid_h, grid_w)
    key = rng.stream_key(seed, rng.TAG_RANDOM_MASK, sample_index)
    perm = list(range(n))
    for i in range(k):
        j = i + rng.below(key, i, n - i)
        perm[i], perm[j] = perm[j], perm[i]
    return TokenMask(grid_h, grid_w, tuple(sorted(perm[:k])))


# keep-set within each 2x2 window as (row, col) offsets
_GRID_PATTERNS = {
    0.25: ((0, 0), (0, 1), (1, 0)),
    0.5: ((0, 0), (1, 1)),
    0.75: ((0, 0),),
}


def make_grid_mask(grid_h: int, grid_w: int, mask_ratio: float) -> TokenMask:
    """Periodic keep pattern repeated over every 2x2 window.

    Ratio 0.25 keeps top-left, top-right, bottom-left; 0.5 keeps the
    top-left/bottom-right checkerboard; 0.75 keeps top-left only.
    """
    _check_grid(grid_h, grid_w)
    pattern = next((p for r, p in _GRID_PATTERNS.items() if abs(r - mask_ratio) < 1e-12), None)
    if pattern is None:
        raise UnsupportedPatternError(f"grid masking supports ratios {GRID_RATIOS}, got {mask_ratio}")
    if grid_h % 2 or grid_w % 2:
        raise UnsupportedPatternError(f"grid masking needs even extents, got {grid_h}x{grid_w}")
    kept = sorted(
        (wy * 2 + dy) * grid_w + wx * 2 + dx
        for wy in range(grid_h // 2)
        for wx in range(grid_w // 2)
        for dy, dx in pattern
    )
    return TokenMask(grid_h, grid_w, tuple(kept))


def block_shapes(grid_h: int, grid_w: int, target_area: float) -> list[tuple[int, int]]:
    """Candidate (h, w) rectangles for a block of area nearest ``target_area``.

    Ties between areas go to the smaller area.  Among rectangles of that area
    only the most square ones (minimal ``|h - w|``) are returned, in
    ascending ``h``.
    """
    areas = sorted({h * w for h in range(1, grid_h + 1) for w in range(1, grid_w + 1)})
    best = min(areas, key=lambda a: (abs(a - target_area), a))
    shapes = [(h, best // h) for h in range(1, grid_h + 1)
              if best % h == 0 and best // h <= grid_w]
    squareness = min(abs(h - w) for h, w in shapes)
    return [(h, w) for h, w in shapes if abs(h - w) == squareness]


def make_block_mask(grid_h: int, grid_w: int, mask_ratio: float, seed: int,
                    sample_index: int) -> TokenMask:
    """Remove one axis-aligned rectangle of area nearest ``mask_ratio * n``.

    With ``key = stream_key(seed, 2, sample_index)``: draw 0 picks among the
    equal-area shapes, draws 1 and 2 pick the top and left offsets.  The
    result must keep exactly ``keep_count(n, r)`` tokens, otherwise the
    request is infeasible on this grid.
    """
    _check_grid(grid_h, grid_w)
    if not 0.0 < mask_ratio < 1.0:
        raise MaskError(f"block masking needs a ratio in (0, 1), got {mask_ratio}")
    n = grid_h * grid_w
    k = keep_count(n, mask_ratio)
    shapes = block_shapes(grid_h, grid_w, mask_ratio * n)
    h, w = shapes[0]
    if n - h * w != k:
        raise InfeasibleMaskError(
            f"no rectangle on a {grid_h}x{grid_w} grid removes {n - k} tokens "
            f"(nearest area {h * w})")
    key = rng.stream_key(seed, rng.TAG_BLOCK_MASK, sample_index)
    h, w = shapes[rng.below(key, 0, len(shapes))]
    top = rng.below(key, 1, grid_h - h + 1)
    left = rng.below(key, 2, grid_w - w + 1)
    kept = tuple(
        y * grid_w + x
        for y in range(grid_h)
        for x in range(grid_w)
        if not (top <= y < top + h and left <= x < left + w)
    )
    return TokenMask(grid_h, grid_w, kept)


def make_mask(spec: MaskSpec, grid_h: int, grid_w: int, sample_index: int) -> TokenMask:
    if spec.strategy == "none" or spec.ratio == 0.0:
        return full_mask(grid_h, grid_w)
    if spec.strategy == "random":
        return make_random_mask(grid_h, grid_w, spec.ratio, spec.seed, sample_index)
    if spec.strategy == "block":
        return make_block_mask(grid_h, grid_w, spec.ratio, spec.seed, sample_index)
    return make_grid_mask(grid_h, grid_w, spec.ratio)


def apply_mask(tokens: Tensor, mask: TokenMask) -> Tensor:
    """Rows of ``tokens`` (``[n, d]``) at the kept indices, ascending."""
    if tokens.shape[0] != mask.n_tokens:
        raise MaskError(f"mask covers {mask.n_tokens} tokens but got {tokens.shape[0]} rows")
    return gather_rows(tokens, mask.as_array())


def truncate_text(token_ids: Sequence[int], max_len: int, pad_id: int = 0) -> tuple[list[int], list[bool]]:
    """First ``max_len`` ids right-padded with ``pad_id``, plus a real-token mask."""
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    ids = list(token_ids)[:max_len]
    real = [True] * len(ids) + [False] * (max_len - len(ids))
    return ids + [pad_id] * (max_len - len(ids)), real


# -- golden vectors (JSON Lines) ----------------------------------------------

def write_golden(path, records) -> None:
    """Each record: {strategy, grid_h, grid_w, ratio, seed, sample_index, kept}."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_golden(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def golden_record(strategy: str, grid_h: int, grid_w: int, ratio: float, seed: int = 0,
                  sample_index: int = 0) -> dict:
    mask = make_mask(MaskSpec(strategy, ratio, seed), grid_h, grid_w, sample_index)
    return {"strategy": strategy, "grid_h": grid_h, "grid_w": grid_w, "ratio": ratio,
            "seed": seed, "sample_index": sample_index, "kept": list(mask.kept)}
