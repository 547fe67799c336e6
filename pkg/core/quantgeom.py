"""
Small vector utilities shared by the mask, trainer and analysis modules:
counter-based random streams, norms, CRC32 and log-spaced histograms.
"""

import math
import zlib
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from core.errors import ArgumentError

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# Counter-based random streams
# ---------------------------------------------------------------------------

@dataclass
class SeededStream:
    """
    A (seed, counter) pair over the Philox counter-based generator.

    Every draw is a pure function of the stream state: the seed becomes the
    Philox key and the logical counter occupies its own word of the Philox
    counter, so draws at different counters never share generator blocks.
    """
    seed: int
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.counter = int(self.counter) & _MASK64

    def _generator(self) -> np.random.Generator:
        # word 0 is the generator's running block index, word 1 the logical counter
        bitgen = np.random.Philox(key=self.seed, counter=self.counter << 64)
        return np.random.Generator(bitgen)

    def split(self, index: int) -> "SeededStream":
        """Independent child stream; the same (seed, index) always gives the same child."""
        state = np.random.SeedSequence([self.seed, int(index) & _MASK64]).generate_state(1, np.uint64)
        return SeededStream(int(state[0]), 0)

    def take(self, n: int) -> np.random.Generator:
        """Generator positioned at the current counter; advances the counter by n."""
        gen = self._generator()
        self.counter = (self.counter + int(n)) & _MASK64
        return gen


def gaussian(stream: SeededStream, n: int) -> np.ndarray:
    """n standard normal draws (float64)."""
    if n < 1:
        raise ArgumentError(f"gaussian: n must be >= 1, got {n}")
    return stream.take(n).standard_normal(int(n))


def permutation(stream: SeededStream, n: int) -> np.ndarray:
    if n < 1:
        raise ArgumentError(f"permutation: n must be >= 1, got {n}")
    return stream.take(n).permutation(int(n))


# ---------------------------------------------------------------------------
# Norms, checksums, histograms
# ---------------------------------------------------------------------------

def l2norm(v) -> float:
    x = np.asarray(v, dtype=np.float64).ravel()
    return float(math.sqrt(float(np.dot(x, x))))


def crc32(data: bytes) -> int:
    """Reflected CRC-32 (polynomial 0xEDB88320), as used by zip and PNG."""
    return zlib.crc32(data) & 0xFFFFFFFF


def log_bin_edges(n_bins: int, lo: float, hi: float) -> np.ndarray:
    if n_bins < 1:
        raise ArgumentError(f"log_histogram: n_bins must be >= 1, got {n_bins}")
    if not (lo > 0):
        raise ArgumentError(f"log_histogram: lo must be positive, got {lo}")
    if lo >= hi:
        raise ArgumentError(f"log_histogram: lo ({lo}) must be < hi ({hi})")
    return np.geomspace(lo, hi, n_bins + 1)


def log_histogram(values, n_bins: int, lo: float, hi: float) -> np.ndarray:
    """
    Counts over geometric bins between lo and hi. Values outside the range
    (including zeros) are clamped into the first or last bin.
    """
    edges = log_bin_edges(n_bins, lo, hi)
    x = np.asarray(values, dtype=np.float64).ravel()
    idx = np.searchsorted(edges, x, side="right") - 1
    idx = np.clip(idx, 0, n_bins - 1)
    return np.bincount(idx, minlength=n_bins).astype(np.int64)


# ---------------------------------------------------------------------------
# AdamW closed form
# ---------------------------------------------------------------------------

def adamw_first_step(param: float, grad: float, lr: float, betas: Tuple[float, float],
                     eps: float, weight_decay: float) -> float:
    """Parameter value after one bias-corrected AdamW update from zero moments."""
    b1, b2 = betas
    m_hat = ((1.0 - b1) * grad) / (1.0 - b1)
    v_hat = ((1.0 - b2) * grad * grad) / (1.0 - b2)
    return param - lr * (m_hat / (math.sqrt(v_hat) + eps) + weight_decay * param)
