"""Multi-bin encoding of continuous action parameters.

A range [low, high] is covered by n + 1 overlapping bins whose centers sit at
low + i * (high - low) / n and whose width is twice that spacing. A value is
supervised through every bin covering it: a classification target over the
covering set and a residual from each covering center.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .config import PolicyConfig
from .errors import BinError
from .models import BinSpec, ParamKind, ToolSpec

logger = logging.getLogger(__name__)

COVER_TOLERANCE = 1e-12


@dataclass
class EncodedTarget:
    """Supervision of one value: covering mask, residuals and clamp flag."""
    mask: np.ndarray  # (count,) bool
    deltas: np.ndarray  # (count,) value - center, zero outside the mask
    clamped: bool = False

    @property
    def covering(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.mask)]

    @property
    def probabilities(self) -> np.ndarray:
        """Uniform classification target over the covering bins."""
        return self.mask / self.mask.sum()


def make_bins(low: float, high: float, n: int) -> BinSpec:
    """Bin layout for [low, high] with n + 1 bins.

    Raises:
        BinError: BAD_RANGE unless high > low (both finite) and n >= 1
    """
    if not (np.isfinite(low) and np.isfinite(high)) or high <= low:
        raise BinError(f"degenerate range [{low}, {high}]", code="BAD_RANGE")
    if n < 1:
        raise BinError(f"bin count must be >= 1, got {n}", code="BAD_RANGE")
    return BinSpec(float(low), float(high), int(n))


def bins_for_tool(spec: ToolSpec, cfg: Optional[PolicyConfig] = None) -> List[BinSpec]:
    """One layout per action parameter; counts default per parameter kind."""
    cfg = cfg or PolicyConfig()
    per_kind = {
        ParamKind.TRANSLATION: cfg.translation_bins,
        ParamKind.ROTATION: cfg.rotation_bins,
        ParamKind.APERTURE: cfg.aperture_bins,
    }
    return [make_bins(p.low, p.high, p.bins or per_kind[p.kind]) for p in spec.params]


def encode_target(value: float, bins: BinSpec) -> EncodedTarget:
    """Covering bins of value and the residual from each of their centers.

    Out-of-range values are clamped into the range and flagged.
    """
    clamped = not (bins.low <= value <= bins.high)
    if clamped:
        logger.warning("target %.6g outside [%.6g, %.6g]; clamped", value, bins.low, bins.high)
        value = float(np.clip(value, bins.low, bins.high))
    offsets = value - bins.centers
    mask = np.abs(offsets) <= bins.width / 2.0 + COVER_TOLERANCE
    return EncodedTarget(mask=mask, deltas=np.where(mask, offsets, 0.0), clamped=clamped)


def decode(conf: np.ndarray, deltas: np.ndarray, bins: BinSpec) -> float:
    """Center plus residual of the most confident bin, clamped to the range.

    ``np.argmax`` returns the first maximum, so ties go to the lower index.
    """
    conf = np.asarray(conf).reshape(-1)
    deltas = np.asarray(deltas).reshape(-1)
    if len(conf) != bins.count or len(deltas) != bins.count:
        raise BinError(f"expected {bins.count} bins, got {len(conf)} confidences and {len(deltas)} deltas", code="SHAPE")
    best = int(np.argmax(conf))
    return float(np.clip(bins.centers[best] + deltas[best], bins.low, bins.high))
