"""
Probes for the optimization-mismatch theory.

  probe_landscape      1D loss interpolation along mask-confined vs full directions
  grad_distribution    |grad| histograms of masked vs frozen coordinates
  verify_prop1         Monte Carlo check of the destabilization bound on a quadratic
  masked_step_contrast authorized vs unauthorized one-step loss change on a quadratic
  stationarity_ratio   share of the gradient norm that lies inside the mask
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core import autodiff as ad
from core.autodiff import Tape
from core.errors import AnalysisError, ArgumentError, CompatibilityError, ModelError
from core.mask import BinaryMask, project
from core.model import Model, lm_loss
from core.quantgeom import SeededStream, gaussian, l2norm, log_bin_edges, log_histogram
from core.trainer import Checkpoint
from core.utils import get_logger

logger = get_logger("PMP.analysis")

DEFAULT_ALPHAS = tuple(np.round(np.linspace(-0.5, 0.5, 21), 10).tolist())
DEFAULT_DIRECTIONS = 10
COUNT_CUTOFF = 1e-12
PLOT_CUTOFF = 1e-8
MC_CHUNK = 8192
PASS_SLACK = 0.95


def _check_pair(checkpoint: Checkpoint, mask: BinaryMask):
    if mask.d != checkpoint.d or mask.layout_hash != checkpoint.layout_hash:
        raise CompatibilityError(
            f"mask layout {mask.layout_hash:#018x} (d={mask.d}) does not match checkpoint layout "
            f"{checkpoint.layout_hash:#018x} (d={checkpoint.d})"
        )


def _flat_gradient(model: Model, batch: np.ndarray) -> Tuple[float, np.ndarray]:
    params = model.base_params()
    with Tape() as tape:
        loss = lm_loss(model, batch)
    tape.backward(loss, params)
    return loss.item(), ad.flatten_grads(params, model.layout).astype(np.float64)


# ---------------------------------------------------------------------------
# Loss landscape
# ---------------------------------------------------------------------------

@dataclass
class LandscapeProbe:
    alphas: np.ndarray
    losses_masked_dir: np.ndarray
    losses_full_dir: np.ndarray
    direction_seeds: List[int]
    base_loss: float

    def increase_at(self, alpha: float) -> Tuple[float, float]:
        """Mean loss increase (masked, full) over the grid points at +alpha and -alpha."""
        idx = [i for i, a in enumerate(self.alphas) if math.isclose(abs(a), alpha, rel_tol=0, abs_tol=1e-9)]
        if not idx:
            raise AnalysisError(f"alpha +/-{alpha} is not on the probe grid")
        return (float(np.mean(self.losses_masked_dir[idx]) - self.base_loss),
                float(np.mean(self.losses_full_dir[idx]) - self.base_loss))

    def rows(self) -> List[Tuple[float, float, float]]:
        return [(float(a), float(m), float(f))
                for a, m, f in zip(self.alphas, self.losses_masked_dir, self.losses_full_dir)]


def _unit(v: np.ndarray) -> np.ndarray:
    n = l2norm(v)
    if n == 0.0:
        raise AnalysisError("direction has zero norm (empty mask?)")
    return v / n


def _filter_normalize(direction: np.ndarray, theta: np.ndarray, model: Model) -> np.ndarray:
    """Rescale every tensor block of the direction to the norm of the matching weights."""
    out = direction.copy()
    for e in model.layout.entries:
        s = slice(e.offset, e.offset + e.size)
        dn = l2norm(out[s])
        if dn > 0:
            out[s] *= l2norm(theta[s]) / dn
    return out


def probe_landscape(checkpoint: Checkpoint, mask: BinaryMask, eval_batch: np.ndarray,
                    alphas: Sequence[float] = DEFAULT_ALPHAS, n_directions: int = DEFAULT_DIRECTIONS,
                    seed: int = 0, filter_norm: bool = False) -> LandscapeProbe:
    """
    L(theta* + alpha * delta) for unit directions drawn once per seed: delta_full
    is a normalised gaussian, delta_M the same gaussian projected onto the mask
    and normalised. Forward passes only; the model is restored afterwards.
    """
    _check_pair(checkpoint, mask)
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size < 3 or not np.any(alphas == 0.0):
        raise ArgumentError(f"alpha grid needs at least 3 points including 0, got {alphas.tolist()}")
    if n_directions < 1:
        raise ArgumentError(f"n_directions must be >= 1, got {n_directions}")

    model = checkpoint.to_model()
    theta = model.flat().copy()
    theta64 = theta.astype(np.float64)
    base = lm_loss(model, eval_batch).item()
    masked = np.zeros(alphas.size)
    full = np.zeros(alphas.size)
    seeds = []
    try:
        for j in range(n_directions):
            seeds.append(j)
            z = gaussian(SeededStream(seed).split(j), model.d)
            d_full, d_mask = _unit(z), _unit(project(z, mask))
            if filter_norm:
                d_full = _filter_normalize(d_full, theta64, model)
                d_mask = _filter_normalize(d_mask, theta64, model)
            for i, a in enumerate(alphas):
                if a == 0.0:
                    masked[i] += base
                    full[i] += base
                    continue
                for direction, acc in ((d_mask, masked), (d_full, full)):
                    model.load_flat((theta64 + a * direction).astype(theta.dtype))
                    acc[i] += lm_loss(model, eval_batch).item()
            logger.debug(f"LANDSCAPE_DIRECTION: {j + 1}/{n_directions}")
    finally:
        model.load_flat(theta)
    masked /= n_directions
    full /= n_directions
    masked[alphas == 0.0] = base
    full[alphas == 0.0] = base
    if not (np.all(np.isfinite(masked)) and np.all(np.isfinite(full))):
        raise AnalysisError("landscape probe produced non-finite losses")
    probe = LandscapeProbe(alphas, masked, full, seeds, base)
    logger.info(f"LANDSCAPE_DONE: base={base:.4f} directions={n_directions} points={alphas.size}")
    return probe


# ---------------------------------------------------------------------------
# Gradient distributions
# ---------------------------------------------------------------------------

@dataclass
class GradDistribution:
    edges: np.ndarray
    hist_masked: np.ndarray
    hist_unmasked: np.ndarray
    overlap: float
    cutoff: float
    loss: float

    @property
    def n_masked(self) -> int:
        return int(self.hist_masked.sum())

    @property
    def n_unmasked(self) -> int:
        return int(self.hist_unmasked.sum())

    def to_dict(self) -> Dict[str, object]:
        return {
            "cutoff": self.cutoff,
            "edges": self.edges.tolist(),
            "hist_masked": self.hist_masked.tolist(),
            "hist_unmasked": self.hist_unmasked.tolist(),
            "n_masked": self.n_masked,
            "n_unmasked": self.n_unmasked,
            "overlap": self.overlap,
            "loss": self.loss,
        }


def overlap_coefficient(h1: np.ndarray, h2: np.ndarray) -> float:
    """Sum of per-bin minima of the two normalised histograms; 0 if either is empty."""
    s1, s2 = float(h1.sum()), float(h2.sum())
    if s1 == 0 or s2 == 0:
        return 0.0
    return float(np.minimum(h1 / s1, h2 / s2).sum())


def magnitude_histograms(g_abs: np.ndarray, bits: np.ndarray, cutoff: float = COUNT_CUTOFF,
                         n_bins: int = 50) -> Tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    if cutoff < 0:
        raise ArgumentError(f"cutoff must be >= 0, got {cutoff}")
    keep = g_abs >= cutoff
    if not keep.any():
        raise AnalysisError(f"all {g_abs.size} gradient magnitudes fall below cutoff {cutoff}")
    kept = g_abs[keep]
    positive = kept[kept > 0]
    lo = cutoff if cutoff > 0 else (float(positive.min()) if positive.size else 1e-30)
    hi = float(kept.max())
    if hi <= lo:
        hi = lo * 10.0
    edges = log_bin_edges(n_bins, lo, hi)
    masked_vals = g_abs[bits & keep]
    unmasked_vals = g_abs[~bits & keep]
    hm = log_histogram(masked_vals, n_bins, lo, hi) if masked_vals.size else np.zeros(n_bins, dtype=np.int64)
    hu = log_histogram(unmasked_vals, n_bins, lo, hi) if unmasked_vals.size else np.zeros(n_bins, dtype=np.int64)
    return edges, hm, hu, overlap_coefficient(hm, hu)


def grad_distribution(checkpoint: Checkpoint, mask: BinaryMask, held_out_batch: np.ndarray,
                      near_zero_cutoff: float = COUNT_CUTOFF, n_bins: int = 50) -> GradDistribution:
    """Histograms of |grad| on a held-out batch, split into masked and frozen coordinates."""
    _check_pair(checkpoint, mask)
    model = checkpoint.to_model()
    loss, g = _flat_gradient(model, held_out_batch)
    edges, hm, hu, overlap = magnitude_histograms(np.abs(g), mask.bits, near_zero_cutoff, n_bins)
    logger.info(f"GRAD_DIST: masked={int(hm.sum())} unmasked={int(hu.sum())} overlap={overlap:.4f}")
    return GradDistribution(edges, hm, hu, overlap, near_zero_cutoff, loss)


def stationarity_ratio(model: Model, batch: np.ndarray, mask: BinaryMask) -> float:
    """||project(grad, M)|| / ||grad|| on one batch."""
    _, g = _flat_gradient(model, batch)
    total = l2norm(g)
    if total == 0.0:
        raise AnalysisError("gradient vanishes on this batch; ratio undefined")
    return l2norm(project(g, mask)) / total


# ---------------------------------------------------------------------------
# Quadratic model
# ---------------------------------------------------------------------------

@dataclass
class QuadraticModel:
    """
    L(theta) = 1/2 (theta - theta*)^T H (theta - theta*) with
    H = diag(eps_flat on the first d_M coordinates, lambda_curv on the rest).
    Fine-tuning gradients are g = bias_b + noise_sigma * xi.
    """
    d_M: int
    d_Mbar: int
    eps_flat: float = 0.0
    lambda_curv: float = 1.0
    noise_sigma: float = 1.0
    bias_b: Optional[np.ndarray] = None
    theta_star: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.d_M + self.d_Mbar
        self.bias_b = np.zeros(d) if self.bias_b is None else np.asarray(self.bias_b, dtype=np.float64)
        self.theta_star = np.zeros(d) if self.theta_star is None else np.asarray(self.theta_star, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.d_M + self.d_Mbar

    def validate(self) -> "QuadraticModel":
        if self.lambda_curv <= 0:
            raise ModelError(f"lambda_curv must be > 0 (complement must be curved), got {self.lambda_curv}")
        if self.eps_flat < 0:
            raise ModelError(f"eps_flat must be >= 0, got {self.eps_flat}")
        if self.d_M < 0 or self.d_Mbar < 0 or self.d < 1:
            raise ModelError(f"invalid block sizes d_M={self.d_M}, d_Mbar={self.d_Mbar}")
        if self.noise_sigma < 0:
            raise ModelError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        for name in ("bias_b", "theta_star"):
            if getattr(self, name).shape != (self.d,):
                raise ModelError(f"{name} must have length {self.d}, got shape {getattr(self, name).shape}")
        return self

    @property
    def mask_bits(self) -> np.ndarray:
        return np.arange(self.d) < self.d_M

    def hessian_diag(self) -> np.ndarray:
        return np.where(self.mask_bits, self.eps_flat, self.lambda_curv)

    def loss(self, theta: np.ndarray) -> np.ndarray:
        """Loss of one point (d,) or of a batch of points (n, d)."""
        diff = np.asarray(theta, dtype=np.float64) - self.theta_star
        return 0.5 * np.sum(self.hessian_diag() * diff * diff, axis=-1)

    def expected_sq_norm(self, block: str) -> float:
        """E||g_block||^2 = ||b_block||^2 + sigma^2 * dim(block)."""
        bits = self.mask_bits if block == "M" else ~self.mask_bits
        b = self.bias_b[bits]
        return float(b @ b) + self.noise_sigma ** 2 * int(bits.sum())

    def sample_gradients(self, stream: SeededStream, n: int) -> np.ndarray:
        if self.noise_sigma == 0.0:
            return np.broadcast_to(self.bias_b, (n, self.d)).copy()
        return self.bias_b + self.noise_sigma * gaussian(stream, n * self.d).reshape(n, self.d)


def _monte_carlo(model: QuadraticModel, n_samples: int, seed: int, workers: int,
                 per_chunk: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """
    Per-sample statistics over fixed-size chunks, chunk i drawn from its own
    stream, so results do not depend on the number of workers.
    """
    if n_samples < 1:
        raise ArgumentError(f"n_samples must be >= 1, got {n_samples}")
    root = SeededStream(seed)
    bounds = [(i, min(MC_CHUNK, n_samples - start)) for i, start in enumerate(range(0, n_samples, MC_CHUNK))]

    def run(job):
        index, size = job
        return per_chunk(model.sample_gradients(root.split(index), size))

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(job) for job in bounds]
    return np.concatenate(parts, axis=0)


def _mean_se(x: np.ndarray) -> Tuple[float, float]:
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1) / math.sqrt(x.shape[0])) if x.shape[0] > 1 else 0.0
    return mean, se


@dataclass
class Prop1Report:
    empirical_mean_increase: float
    standard_error: float
    predicted_lower_bound: float
    analytic_expectation: float
    c: float
    eta: float
    n_samples: int
    passed: bool

    def to_dict(self) -> Dict[str, object]:
        return {
            "empirical_mean_increase": self.empirical_mean_increase,
            "standard_error": self.standard_error,
            "predicted_lower_bound": self.predicted_lower_bound,
            "analytic_expectation": self.analytic_expectation,
            "c": self.c,
            "eta": self.eta,
            "n_samples": self.n_samples,
            "pass": self.passed,
        }


def verify_prop1(model: QuadraticModel, eta: float, n_samples: int, seed: int = 0,
                 workers: int = 1) -> Prop1Report:
    """
    One full-space step theta* - eta*g from the conditional optimum. The mean
    loss increase must reach 0.95 * c * eta^2, c = 1/2 lambda E||g_Mbar||^2.
    """
    model.validate()
    if not (eta > 0):
        raise ArgumentError(f"eta must be positive, got {eta}")
    start = model.theta_star

    def increases(g):
        return model.loss(start - eta * g) - model.loss(start)

    inc = _monte_carlo(model, n_samples, seed, workers, increases)
    mean, se = _mean_se(inc)
    c = 0.5 * model.lambda_curv * model.expected_sq_norm("Mbar")
    bound = c * eta * eta
    expected = 0.5 * eta * eta * (model.eps_flat * model.expected_sq_norm("M") + 2.0 * c)
    report = Prop1Report(mean, se, bound, expected, c, eta, n_samples, bool(mean >= PASS_SLACK * bound))
    logger.info(f"PROP1: mean={mean:.6g} se={se:.3g} bound={bound:.6g} pass={report.passed}")
    return report


@dataclass
class ContrastReport:
    unauthorized_mean: float
    unauthorized_se: float
    authorized_mean: float
    authorized_se: float
    projected_mean: float
    difference_mean: float
    difference_se: float
    predicted_difference: float
    eta: float
    n_samples: int

    def to_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def masked_step_contrast(model: QuadraticModel, eta: float, n_samples: int, seed: int = 0,
                         workers: int = 1) -> ContrastReport:
    """
    Unauthorized step uses the full gradient. The authorized step keeps only
    the masked block, rescaled to the full gradient norm; the plain projected
    step is reported as projected_mean.
    """
    model.validate()
    if not (eta > 0):
        raise ArgumentError(f"eta must be positive, got {eta}")
    start = model.theta_star
    bits = model.mask_bits
    base = model.loss(start)

    def per_chunk(g):
        g_m = np.where(bits, g, 0.0)
        full_norm = np.sqrt(np.sum(g * g, axis=1))
        m_norm = np.sqrt(np.sum(g_m * g_m, axis=1))
        ratio = np.divide(full_norm, m_norm, out=np.zeros_like(m_norm), where=m_norm > 0)
        g_auth = g_m * ratio[:, None]
        unauth = model.loss(start - eta * g) - base
        auth = model.loss(start - eta * g_auth) - base
        proj = model.loss(start - eta * g_m) - base
        return np.stack([unauth, auth, proj], axis=1)

    stats = _monte_carlo(model, n_samples, seed, workers, per_chunk)
    u_mean, u_se = _mean_se(stats[:, 0])
    a_mean, a_se = _mean_se(stats[:, 1])
    d_mean, d_se = _mean_se(stats[:, 0] - stats[:, 1])
    predicted = 0.5 * eta * eta * (model.lambda_curv - model.eps_flat) * model.expected_sq_norm("Mbar")
    report = ContrastReport(u_mean, u_se, a_mean, a_se, float(np.mean(stats[:, 2])),
                            d_mean, d_se, predicted, eta, n_samples)
    logger.info(f"STEP_CONTRAST: unauthorized={u_mean:.6g} authorized={a_mean:.6g} diff={d_mean:.6g}")
    return report
