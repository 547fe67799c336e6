"""
Binary parameter masks: exact global top-k selection, IoU, the EarlyBird
stability tracker, random baselines and mask algebra.

A mask is a boolean vector over the flat parameter layout. Bit 1 marks a
coordinate inside the private subspace (trainable), bit 0 a frozen one.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.autodiff import FlatParamLayout
from core.errors import ArgumentError, DimensionError, NumericError, StateError
from core.quantgeom import SeededStream, permutation
from core.utils import get_logger

logger = get_logger("PMP.mask")


def check_rho(rho: float) -> float:
    """0 < rho <= 1; rho == 1 is the degenerate full mask."""
    rho = float(rho)
    if not (0.0 < rho <= 1.0) or math.isnan(rho):
        raise ArgumentError(f"rho must be in (0, 1], got {rho}")
    return rho


def mask_size(d: int, rho: float) -> int:
    """floor(rho * d) computed on the decimal value of rho (0.7 * 10 == 7)."""
    rho = check_rho(rho)
    if d < 1:
        raise ArgumentError(f"mask_size: d must be >= 1, got {d}")
    return int(math.floor(Fraction(repr(rho)) * int(d)))


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    rho: float
    layout_hash: int = 0

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=bool)
        if bits.ndim != 1:
            raise DimensionError(f"mask bits must be 1-D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def d(self) -> int:
        return int(self.bits.shape[0])

    @property
    def k(self) -> int:
        return int(np.count_nonzero(self.bits))

    def complement(self) -> "BinaryMask":
        return BinaryMask(~self.bits, 1.0 - self.rho, self.layout_hash)

    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    def with_layout(self, layout_hash: int) -> "BinaryMask":
        return BinaryMask(self.bits, self.rho, layout_hash)

    def to_bytes(self) -> bytes:
        """Bitset, LSB-first within each byte, ceil(d/8) bytes."""
        return np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, d: int, rho: float, layout_hash: int = 0) -> "BinaryMask":
        need = (d + 7) // 8
        if len(data) != need:
            raise DimensionError(f"mask bitset needs {need} bytes for d={d}, got {len(data)}")
        bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=d, bitorder="little")
        return cls(bits.astype(bool), rho, layout_hash)

    @classmethod
    def full(cls, d: int, layout_hash: int = 0) -> "BinaryMask":
        return cls(np.ones(d, dtype=bool), 1.0, layout_hash)

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.layout_hash == other.layout_hash and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.layout_hash, self.bits.tobytes()))


MaskLike = Union[BinaryMask, np.ndarray]


def as_bits(mask: MaskLike) -> np.ndarray:
    return mask.bits if isinstance(mask, BinaryMask) else np.asarray(mask, dtype=bool)


# ---------------------------------------------------------------------------
# Selection
# ---------------------------------------------------------------------------

def _topk_bits(g: np.ndarray, k: int) -> np.ndarray:
    d = g.shape[0]
    thr = np.partition(g, d - k)[d - k]
    bits = g > thr
    missing = k - int(np.count_nonzero(bits))
    bits[np.flatnonzero(g == thr)[:missing]] = True
    return bits


def topk_mask(g, k: int, rho: Optional[float] = None) -> BinaryMask:
    """
    Exactly k largest entries of g; ties at the threshold go to lower indices.
    g must be non-negative (callers pass |grad|).
    """
    g = np.asarray(g, dtype=np.float64).ravel()
    d = g.shape[0]
    if not (1 <= k <= d):
        raise ArgumentError(f"topk_mask: k must be in [1, {d}], got {k}")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"topk_mask: scores contain non-finite values at index {int(np.flatnonzero(~np.isfinite(g))[0])}")
    if np.any(g < 0):
        raise ArgumentError("topk_mask: scores must be non-negative (pass absolute values)")
    return BinaryMask(_topk_bits(g, k), rho if rho is not None else k / d)


def eligibility(layout: FlatParamLayout, exclude: Sequence[str] = ()) -> np.ndarray:
    """
    Coordinates that may be selected. Tensors whose name contains any of the
    *exclude* substrings are ineligible; they are always trainable and do not
    count toward k.
    """
    eligible = np.ones(layout.d, dtype=bool)
    patterns = [p for p in exclude if p]
    for e in layout.entries:
        if any(p in e.name for p in patterns):
            eligible[e.offset:e.offset + e.size] = False
    if patterns and not eligible.any():
        raise ArgumentError(f"exclusion list {patterns} leaves no eligible parameters")
    return eligible


def select_mask(scores, rho: float, eligible: Optional[np.ndarray] = None, layout_hash: int = 0) -> BinaryMask:
    """Global top-k over eligible coordinates with k = floor(rho * n_eligible)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if eligible is None:
        m = topk_mask(scores, mask_size(scores.shape[0], rho), rho)
        return m.with_layout(layout_hash)
    if eligible.shape != scores.shape:
        raise DimensionError(f"eligibility length {eligible.shape[0]} != score length {scores.shape[0]}")
    idx = np.flatnonzero(eligible)
    sub = topk_mask(scores[idx], mask_size(idx.shape[0], rho), rho)
    bits = ~eligible
    bits[idx[sub.bits]] = True
    return BinaryMask(bits, rho, layout_hash)


def random_mask(d: int, rho: float, seed: int, eligible: Optional[np.ndarray] = None,
                layout_hash: int = 0) -> BinaryMask:
    """Uniformly random k-subset, deterministic per seed."""
    if eligible is None:
        eligible = np.ones(d, dtype=bool)
    if eligible.shape != (d,):
        raise DimensionError(f"eligibility length {eligible.shape[0]} != d {d}")
    idx = np.flatnonzero(eligible)
    k = mask_size(idx.shape[0], rho)
    chosen = idx[permutation(SeededStream(seed), idx.shape[0])[:k]]
    bits = ~eligible
    bits[chosen] = True
    return BinaryMask(bits, rho, layout_hash)


# ---------------------------------------------------------------------------
# Algebra
# ---------------------------------------------------------------------------

def iou(m1: MaskLike, m2: MaskLike) -> float:
    a, b = as_bits(m1), as_bits(m2)
    if a.shape != b.shape:
        raise ArgumentError(f"iou: mask lengths differ ({a.shape[0]} vs {b.shape[0]})")
    union = int(np.count_nonzero(a | b))
    if union == 0:
        raise ArgumentError("iou: both masks are empty")
    return int(np.count_nonzero(a & b)) / union


def project(v, mask: MaskLike) -> np.ndarray:
    """v with entries outside the mask set to zero."""
    v = np.asarray(v)
    bits = as_bits(mask)
    if v.shape != bits.shape:
        raise ArgumentError(f"project: vector length {v.shape} != mask length {bits.shape}")
    return np.where(bits, v, np.zeros((), dtype=v.dtype))


def complement(mask: BinaryMask) -> BinaryMask:
    return mask.complement()


# ---------------------------------------------------------------------------
# EarlyBird
# ---------------------------------------------------------------------------

@dataclass
class EarlyBirdTracker:
    """
    Compares each step's top-k candidate with the previous one. Converges once
    `required_streak` consecutive comparisons reach `iou_threshold`.

    With `ema_beta` set, candidates come from an exponential moving average of
    |g| instead of the single-step magnitudes.
    """
    iou_threshold: float = 0.99
    required_streak: int = 5
    ema_beta: Optional[float] = None
    eligible: Optional[np.ndarray] = None
    layout_hash: int = 0
    rho: Optional[float] = None
    last_mask: Optional[BinaryMask] = None
    consecutive_stable: int = 0
    history: List[Tuple[int, float]] = field(default_factory=list)
    converged_mask: Optional[BinaryMask] = None
    calls: int = 0
    adopted: bool = False
    _ema: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not (0.0 < self.iou_threshold <= 1.0):
            raise ArgumentError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.required_streak < 1:
            raise ArgumentError(f"required_streak must be >= 1, got {self.required_streak}")
        if self.ema_beta is not None and not (0.0 <= self.ema_beta < 1.0):
            raise ArgumentError(f"ema_beta must be in [0, 1), got {self.ema_beta}")
        if self.rho is not None:
            self.rho = check_rho(self.rho)

    @property
    def converged(self) -> bool:
        return self.converged_mask is not None

    def candidate(self, g_abs: np.ndarray, k: int) -> BinaryMask:
        scores = np.asarray(g_abs, dtype=np.float64).ravel()
        if self.ema_beta is not None:
            if self._ema is None:
                self._ema = scores.copy()
            else:
                self._ema = self.ema_beta * self._ema + (1.0 - self.ema_beta) * scores
            scores = self._ema
        if self.eligible is None:
            return topk_mask(scores, k, self.rho).with_layout(self.layout_hash)
        idx = np.flatnonzero(self.eligible)
        sub = topk_mask(scores[idx], k, self.rho)
        bits = ~self.eligible
        bits[idx[sub.bits]] = True
        return BinaryMask(bits, sub.rho, self.layout_hash)

    def step(self, g_abs: np.ndarray, k: int) -> Optional[BinaryMask]:
        """Feed one gradient magnitude vector; returns the mask on convergence, else None."""
        if self.converged:
            raise StateError("EarlyBird tracker already converged; the mask is frozen")
        self.calls += 1
        cand = self.candidate(g_abs, k)
        if self.last_mask is not None:
            score = iou(cand, self.last_mask)
            self.history.append((self.calls - 1, score))
            if score >= self.iou_threshold:
                self.consecutive_stable += 1
            else:
                self.consecutive_stable = 0
            logger.debug(f"EARLYBIRD_STEP: call={self.calls} iou={score:.6f} streak={self.consecutive_stable}")
        self.last_mask = cand
        if self.consecutive_stable >= self.required_streak:
            self.converged_mask = cand
            logger.info(f"EARLYBIRD_CONVERGED: call={self.calls} streak={self.consecutive_stable} k={cand.k}")
            return cand
        return None

    def adopt_last(self) -> BinaryMask:
        """Freeze the most recent candidate without convergence (t_EB cap reached)."""
        if self.last_mask is None:
            raise StateError("EarlyBird tracker has no candidate yet")
        if not self.converged:
            logger.warning(
                f"EARLYBIRD_NOT_CONVERGED: adopting candidate after {self.calls} calls "
                f"(streak {self.consecutive_stable}/{self.required_streak})"
            )
            self.converged_mask = self.last_mask
            self.adopted = True
        return self.converged_mask


def earlybird_step(tracker: EarlyBirdTracker, g_abs, k: int) -> Optional[BinaryMask]:
    return tracker.step(np.asarray(g_abs), k)
