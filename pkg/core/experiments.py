"""
Multi-seed studies built from the pre-training and fine-tuning pipelines:

  compare_pipelines     no-PMP vs PMP (EarlyBird) vs PMP (random mask), with
                        unauthorized, authorized and head-only fine-tuning
  mask_ratio_sweep      unauthorized gain as a function of rho (1.0 = no PMP)
  finetune_lr_sweep     PMP vs no-PMP unauthorized gain across fine-tuning lrs
  finetune_epoch_sweep  the same across fine-tuning durations
  geometry_study        landscape asymmetry and gradient overlap on the PMP model
"""

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.analysis import DEFAULT_DIRECTIONS, grad_distribution, probe_landscape
from core.config import RunConfig
from core.data import BlockSource, SyntheticData, SyntheticTask, gen_synthetic
from core.errors import ConfigError
from core.mask import random_mask
from core.model import build_model
from core.trainer import Checkpoint, FinetuneMode, PMPMode, PretrainResult, StandardMode, finetune, pretrain
from core.utils import get_logger

logger = get_logger("PMP.experiments")

STUDIES = ("pipeline", "mask-ratio", "ft-lr", "ft-epochs", "geometry")
DEFAULT_SEEDS = (0, 1, 2)
MAX_CLS_LENGTH = 64

ProgressCb = Optional[Callable[[int], None]]


@dataclass
class Study:
    """Shared inputs of one study; pre-trained checkpoints are cached per (seed, variant)."""
    run: RunConfig
    lm_kind: str = "markov-lm"
    cls_kind: str = "keyword-cls"
    _cache: Dict[Tuple[int, str, float], PretrainResult] = field(default_factory=dict)

    def _train_config(self, seed: int):
        return replace(self.run.train, seed=seed)

    def eval_blocks(self, seed: int) -> List[np.ndarray]:
        task = SyntheticTask(self.lm_kind, seed=seed, length=self.run.block_len)
        return BlockSource.from_task(task, self.run.block_len, split_index=1).take(self.run.eval_blocks)

    def cls_data(self, seed: int) -> SyntheticData:
        length = min(MAX_CLS_LENGTH, self.run.model.max_seq_len)
        return gen_synthetic(SyntheticTask(self.cls_kind, seed=seed, n_train=self.run.n_train,
                                           n_eval=self.run.n_eval, length=length))

    def pretrained(self, seed: int, variant: str, rho: float = 1.0) -> PretrainResult:
        """variant: 'standard', 'earlybird' or 'random'."""
        key = (seed, variant, rho)
        if key in self._cache:
            return self._cache[key]
        task = SyntheticTask(self.lm_kind, seed=seed, length=self.run.block_len)
        source = BlockSource.from_task(task, self.run.block_len, shuffle_buffer=self.run.shuffle_buffer, seed=seed)
        model = build_model(self.run.model, seed)
        if variant == "standard":
            mode = StandardMode()
        elif variant in ("earlybird", "random"):
            mode = PMPMode(rho=rho, t_eb=self.run.t_eb, iou_threshold=self.run.iou_threshold,
                           required_streak=self.run.required_streak, mask_source=variant)
        else:
            raise ConfigError(f"unknown pre-training variant {variant!r}")
        logger.info(f"STUDY_PRETRAIN: seed={seed} variant={variant} rho={rho}")
        result = pretrain(model, source, self._train_config(seed), mode, eval_blocks=self.eval_blocks(seed))
        self._cache[key] = result
        return result

    def gain(self, seed: int, result: PretrainResult, mode: FinetuneMode, **ft_overrides) -> float:
        ft = replace(self.run.finetune, seed=seed, **ft_overrides)
        return finetune(result.checkpoint, self.cls_data(seed), ft, mode).gain


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if values else float("nan")


def _tick(progress_cb: ProgressCb, done: int, total: int):
    if progress_cb:
        progress_cb(int(100 * done / max(total, 1)))


def compare_pipelines(run: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, rho: float = 0.7,
                      progress_cb: ProgressCb = None) -> Dict[str, object]:
    study = Study(run)
    rows = []
    for i, seed in enumerate(seeds):
        base = study.pretrained(seed, "standard")
        pmp = study.pretrained(seed, "earlybird", rho)
        rnd = study.pretrained(seed, "random", rho)
        rows.append({
            "seed": seed,
            "lm_loss_nopmp": base.final_eval_loss,
            "lm_loss_pmp": pmp.final_eval_loss,
            "earlybird_converged": pmp.earlybird_converged,
            "gain_unauth_nopmp": study.gain(seed, base, FinetuneMode.unauthorized_full()),
            "gain_unauth_pmp": study.gain(seed, pmp, FinetuneMode.unauthorized_full()),
            "gain_auth_pmp": study.gain(seed, pmp, FinetuneMode.authorized_masked(pmp.mask)),
            "gain_unauth_random": study.gain(seed, rnd, FinetuneMode.unauthorized_full()),
        })
        _tick(progress_cb, i + 1, len(seeds))

    summary = {key: _mean([r[key] for r in rows]) for key in rows[0] if key not in ("seed", "earlybird_converged")}
    rel_lm = abs(summary["lm_loss_pmp"] - summary["lm_loss_nopmp"]) / summary["lm_loss_nopmp"]
    checks = {
        "pmp_resists_unauthorized": summary["gain_unauth_pmp"] < summary["gain_unauth_nopmp"],
        "capability_preserved": rel_lm < 0.15,
        "authorized_at_least_unauthorized": summary["gain_auth_pmp"] >= summary["gain_unauth_pmp"],
        "earlybird_not_above_random": summary["gain_unauth_pmp"] <= summary["gain_unauth_random"],
    }
    logger.info(f"STUDY_PIPELINE: {checks}")
    return {"study": "pipeline", "rho": rho, "seeds": list(seeds), "runs": rows,
            "mean": summary, "lm_loss_relative_difference": rel_lm, "checks": checks}


def mask_ratio_sweep(run: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS,
                     ratios: Sequence[float] = (0.5, 0.7, 0.9, 1.0),
                     progress_cb: ProgressCb = None) -> Dict[str, object]:
    study = Study(run)
    gains: Dict[str, List[float]] = {}
    total, done = len(seeds) * len(ratios), 0
    for rho in ratios:
        per_seed = []
        for seed in seeds:
            result = study.pretrained(seed, "standard") if rho >= 1.0 else study.pretrained(seed, "earlybird", rho)
            per_seed.append(study.gain(seed, result, FinetuneMode.unauthorized_full()))
            done += 1
            _tick(progress_cb, done, total)
        gains[repr(float(rho))] = per_seed
    means = {k: _mean(v) for k, v in gains.items()}
    ordered = [means[repr(float(r))] for r in sorted(ratios)]
    checks = {"gain_non_decreasing_in_rho": all(a <= b for a, b in zip(ordered, ordered[1:]))}
    return {"study": "mask-ratio", "seeds": list(seeds), "gains": gains, "mean": means, "checks": checks}


def _sweep(run: RunConfig, seeds: Sequence[int], rho: float, name: str, knob: str, values: Sequence,
           progress_cb: ProgressCb) -> Dict[str, object]:
    study = Study(run)
    table: Dict[str, Dict[str, float]] = {}
    total, done = len(seeds) * len(values), 0
    for value in values:
        nopmp, pmp = [], []
        for seed in seeds:
            nopmp.append(study.gain(seed, study.pretrained(seed, "standard"),
                                    FinetuneMode.unauthorized_full(), **{knob: value}))
            pmp.append(study.gain(seed, study.pretrained(seed, "earlybird", rho),
                                  FinetuneMode.unauthorized_full(), **{knob: value}))
            done += 1
            _tick(progress_cb, done, total)
        table[repr(value)] = {"gain_nopmp": _mean(nopmp), "gain_pmp": _mean(pmp)}
    checks = {"pmp_below_nopmp_everywhere": all(r["gain_pmp"] < r["gain_nopmp"] for r in table.values())}
    return {"study": name, "rho": rho, "seeds": list(seeds), knob: table, "checks": checks}


def finetune_lr_sweep(run: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, rho: float = 0.7,
                      lrs: Sequence[float] = (3e-4, 1e-3, 3e-3), progress_cb: ProgressCb = None) -> Dict[str, object]:
    return _sweep(run, seeds, rho, "ft-lr", "lr", lrs, progress_cb)


def finetune_epoch_sweep(run: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, rho: float = 0.7,
                         epochs: Sequence[int] = (1, 2, 4), progress_cb: ProgressCb = None) -> Dict[str, object]:
    return _sweep(run, seeds, rho, "ft-epochs", "epochs", epochs, progress_cb)


def geometry_study(run: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, rho: float = 0.7,
                   alpha: float = 0.1, n_directions: int = DEFAULT_DIRECTIONS,
                   progress_cb: ProgressCb = None) -> Dict[str, object]:
    """
    Loss-landscape asymmetry and gradient-magnitude overlap on the PMP
    checkpoint. The overlap reference is a fresh initialisation split by a
    random mask of the same rho.
    """
    study = Study(run)
    alphas = (-alpha, 0.0, alpha)
    rows = []
    for i, seed in enumerate(seeds):
        pmp = study.pretrained(seed, "earlybird", rho)
        batch = np.stack(study.eval_blocks(seed))
        probe = probe_landscape(pmp.checkpoint, pmp.mask, batch, alphas, n_directions, seed)
        masked_inc, full_inc = probe.increase_at(alpha)
        fresh = Checkpoint.from_model(build_model(run.model, seed))
        reference = random_mask(fresh.d, rho, seed, layout_hash=fresh.layout_hash)
        rows.append({
            "seed": seed,
            "increase_masked": masked_inc,
            "increase_full": full_inc,
            "origin_exact": bool(probe.losses_masked_dir[1] == probe.losses_full_dir[1] == probe.base_loss),
            "overlap_pmp": grad_distribution(pmp.checkpoint, pmp.mask, batch).overlap,
            "overlap_fresh": grad_distribution(fresh, reference, batch).overlap,
        })
        _tick(progress_cb, i + 1, len(seeds))

    summary = {key: _mean([r[key] for r in rows])
               for key in ("increase_masked", "increase_full", "overlap_pmp", "overlap_fresh")}
    checks = {
        "full_directions_steeper": summary["increase_full"] > summary["increase_masked"],
        "curves_meet_at_origin": all(r["origin_exact"] for r in rows),
        "overlap_below_fresh": summary["overlap_pmp"] < summary["overlap_fresh"],
        "overlap_substantial": summary["overlap_pmp"] > 0.2,
    }
    logger.info(f"STUDY_GEOMETRY: {checks}")
    return {"study": "geometry", "rho": rho, "alpha": alpha, "seeds": list(seeds), "runs": rows,
            "mean": summary, "checks": checks}


def run_study(name: str, run: RunConfig, seeds: Sequence[int] = DEFAULT_SEEDS, rho: float = 0.7,
              progress_cb: ProgressCb = None) -> Dict[str, object]:
    if name == "pipeline":
        return compare_pipelines(run, seeds, rho, progress_cb)
    if name == "mask-ratio":
        return mask_ratio_sweep(run, seeds, progress_cb=progress_cb)
    if name == "ft-lr":
        return finetune_lr_sweep(run, seeds, rho, progress_cb=progress_cb)
    if name == "ft-epochs":
        return finetune_epoch_sweep(run, seeds, rho, progress_cb=progress_cb)
    if name == "geometry":
        return geometry_study(run, seeds, rho, progress_cb=progress_cb)
    raise ConfigError(f"unknown study {name!r}; expected one of {STUDIES}")
