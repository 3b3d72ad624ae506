"""Random masking of image patch grids and report token sequences."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .record_io import MASK_ID


@dataclass(frozen=True)
class MaskConfig:
    image_ratio: float = 0.75
    report_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        _check_ratio("image_ratio", self.image_ratio)
        _check_ratio("report_ratio", self.report_ratio)


@dataclass
class MaskedImageView:
    visible_patches: np.ndarray  # (k, p*p*C) low-res inputs
    visible_positions: np.ndarray  # (k,) grid indices, ascending
    masked_positions: np.ndarray  # (h,) grid indices, ascending
    targets: np.ndarray  # (h, t*t*C) high-res patches at masked_positions

    @property
    def num_patches(self) -> int:
        return len(self.visible_positions) + len(self.masked_positions)


@dataclass
class MaskedReportView:
    visible_tokens: np.ndarray  # (q,)
    visible_positions: np.ndarray  # (q,)
    masked_positions: np.ndarray  # (p,)
    targets: np.ndarray  # (p,)

    @property
    def length(self) -> int:
        return len(self.visible_positions) + len(self.masked_positions)

    def masked_input(self) -> np.ndarray:
        """Full-length id sequence with [MASK] at masked positions."""
        ids = np.empty(self.length, dtype=np.int64)
        ids[self.visible_positions] = self.visible_tokens
        ids[self.masked_positions] = MASK_ID
        return ids


def _check_ratio(name: str, value: float) -> None:
    if not (0.0 <= value < 1.0):
        raise ValueError(f"{name} must lie in [0, 1), got {value}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def num_masked(total: int, ratio: float) -> int:
    _check_ratio("ratio", ratio)
    # guard against 0.75*196 = 146.99999... style representation error
    return round_half_up(round(ratio * total, 9))


def record_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    """Independent stream for one record in one epoch.

    Depends only on the triple, so masks do not change with batch order or
    with how data preparation is parallelized.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def mask_image_patches(low_res_patches: np.ndarray, high_res_patches: np.ndarray,
                       ratio: float, rng: np.random.Generator) -> MaskedImageView:
    low = np.asarray(low_res_patches)
    high = np.asarray(high_res_patches)
    if low.ndim != 2 or high.ndim != 2 or low.shape[0] != high.shape[0]:
        raise ValueError(f"patch lists must share one grid: {low.shape} vs {high.shape}")
    total = low.shape[0]
    h = num_masked(total, ratio)
    order = rng.permutation(total)
    masked = np.sort(order[:h])
    visible = np.sort(order[h:])
    return MaskedImageView(low[visible], visible, masked, high[masked])


def mask_report_tokens(token_ids: Sequence[int], probability: float,
                       rng: np.random.Generator) -> MaskedReportView:
    """Mask each token independently with the given probability."""
    _check_ratio("probability", probability)
    ids = np.asarray(token_ids, dtype=np.int64)
    if np.any(ids == MASK_ID):
        raise ValueError("token sequence already contains [MASK]")
    hit = rng.random(ids.shape[0]) < probability
    masked = np.flatnonzero(hit)
    visible = np.flatnonzero(~hit)
    return MaskedReportView(ids[visible], visible, masked, ids[masked])
