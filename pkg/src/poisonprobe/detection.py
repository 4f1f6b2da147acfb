"""Infected-label detection by steering random probes into regions the suspect
model assigns to a label while healthy reference models reject them.

For each label the detector

1. estimates a reference-loss threshold (gamma) as a fraction of the largest
   loss the reference can be driven to,
2. balances the suspect and reference terms with a weight lambda,
3. crafts probes that first leave the label's region under the suspect, then
   descend ``L_T - sum_i lambda_i * L_ref_i``,

and flags the label when enough probes end with a low suspect loss and a
reference loss above gamma for every reference.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, input_loss_and_grad

log = logging.getLogger(__name__)


class DegenerateReferenceError(RuntimeError):
    """The reference's loss cannot be pushed above the detection bound."""


@dataclass(frozen=True)
class DetectionConfig:
    alpha: float = 0.01
    beta: float = 0.2
    gamma_fraction: float = 0.5
    phase1_floor: float = 3.0
    phase1_max_iters: int = 500
    max_iters: int = 2000
    num_samples: int = 100
    prob_threshold: float = 0.5
    lambda_iters: int = 1000
    lambda_rounds: int = 5
    lambda_tolerance: float = 0.05
    gamma_starts: int = 8
    gamma_iters: int = 500
    init_mean: float = 0.5
    init_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0.0 < self.gamma_fraction < 1.0:
            raise ValueError("gamma_fraction must lie in (0, 1)")
        if not 0.0 < self.prob_threshold <= 1.0:
            raise ValueError("prob_threshold must lie in (0, 1]")
        if self.num_samples < 1:
            raise ValueError("num_samples must be at least 1")
        if min(self.max_iters, self.phase1_max_iters, self.lambda_iters, self.gamma_iters) < 0:
            raise ValueError("iteration caps must be non-negative")
        if self.lambda_rounds < 1 or self.gamma_starts < 1:
            raise ValueError("need at least one lambda round and one gamma start")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CraftOutcome:
    x: np.ndarray
    reached: bool
    escaped: bool  # phase 1 left the label's region
    loss_suspect: float
    loss_refs: tuple[float, ...]
    trace_suspect: np.ndarray  # suspect loss after every phase-2 step (index 0 = start)
    trace_refs: np.ndarray  # shape (steps + 1, k)

    def reached_under(self, beta: float, gammas: Sequence[float]) -> bool:
        """Whether any recorded phase-2 iterate meets the criteria for other thresholds."""
        if not self.escaped or len(self.trace_suspect) == 0:
            return False
        ok = (self.trace_suspect <= beta) & np.all(self.trace_refs >= np.asarray(gammas)[None, :], axis=1)
        return bool(ok.any())


@dataclass
class LabelVerdict:
    label: int
    prob: float
    infected: bool
    lambdas: tuple[float, ...]
    gammas: tuple[float, ...]
    reached: int
    samples: int
    outcomes: list[CraftOutcome] = field(default_factory=list, repr=False)

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "prob": self.prob,
            "infected": self.infected,
            "lambdas": list(self.lambdas),
            "gammas": list(self.gammas),
            "reached": self.reached,
            "samples": self.samples,
        }


@dataclass
class DetectionReport:
    verdicts: list[LabelVerdict]
    config: DetectionConfig
    wall_time: float = 0.0
    ground_truth: tuple[int, ...] | None = None

    @property
    def infected(self) -> bool:
        return any(v.infected for v in self.verdicts)

    @property
    def flagged(self) -> list[int]:
        return [v.label for v in self.verdicts if v.infected]

    def verdict(self, label: int) -> LabelVerdict:
        for v in self.verdicts:
            if v.label == label:
                return v
        raise KeyError(f"label {label} was not analysed")

    def prob(self, label: int) -> float:
        return self.verdict(label).prob

    @property
    def false_positive_rate(self) -> float | None:
        if self.ground_truth is None:
            return None
        healthy = [v for v in self.verdicts if v.label not in self.ground_truth]
        if not healthy:
            return 0.0
        return sum(v.infected for v in healthy) / len(healthy)

    @property
    def true_positives(self) -> dict[int, bool] | None:
        if self.ground_truth is None:
            return None
        return {t: self.verdict(t).infected for t in self.ground_truth}

    def as_dict(self, include_wall_time: bool = True) -> dict:
        out = {
            "config": self.config.as_dict(),
            "labels": [v.as_dict() for v in self.verdicts],
            "model_infected": self.infected,
            "flagged": self.flagged,
        }
        if self.ground_truth is not None:
            out["ground_truth"] = list(self.ground_truth)
            out["false_positive_rate"] = self.false_positive_rate
            out["true_positives"] = {str(k): v for k, v in self.true_positives.items()}
        if include_wall_time:
            out["wall_time"] = self.wall_time
        return out


def _as_list(references) -> list:
    if isinstance(references, (list, tuple)):
        refs = list(references)
    else:
        refs = [references]
    if not refs:
        raise ValueError("at least one reference model is required")
    return refs


def gaussian_start(rng: np.random.Generator, shape, cfg: DetectionConfig) -> np.ndarray:
    return np.clip(cfg.init_mean + cfg.init_std * rng.standard_normal(shape), 0.0, 1.0)


def _check(loss: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(loss)):
        raise NonFiniteError(f"non-finite {what} loss during crafting")
    return loss


# -- gamma ----------------------------------------------------------------------------

def max_reachable_loss(model, label: int, cfg: DetectionConfig, rng: np.random.Generator) -> tuple[float, float]:
    """(largest loss seen, largest starting loss) over seeded gradient-ascent runs."""
    x = gaussian_start(rng, (cfg.gamma_starts,) + model.spec.input_shape, cfg)
    loss, grad = input_loss_and_grad(model, x, label, escape=True)
    start = float(_check(loss, "reference").max())
    best = start
    for _ in range(cfg.gamma_iters):
        x = np.clip(x + cfg.alpha * grad, 0.0, 1.0)
        loss, grad = input_loss_and_grad(model, x, label, escape=True)
        best = max(best, float(_check(loss, "reference").max()))
    return best, start


def estimate_gamma(references, label: int, cfg: DetectionConfig) -> list[float]:
    gammas = []
    for i, ref in enumerate(_as_list(references)):
        rng = np.random.default_rng([cfg.seed, label, i, 0x6A])
        best, start = max_reachable_loss(ref, label, cfg, rng)
        if best <= cfg.beta:
            raise DegenerateReferenceError(
                f"reference {i} loss on label {label} never exceeds beta={cfg.beta} (max {best:.4g})")
        if cfg.gamma_iters > 0 and best - start <= 1e-12:
            raise DegenerateReferenceError(
                f"reference {i} loss on label {label} does not move under ascent (stuck at {best:.4g})")
        gammas.append(cfg.gamma_fraction * best)
    return gammas


# -- lambda ---------------------------------------------------------------------------

def lambda_update(loss_suspect: float, loss_ref: float, lam: float, tolerance: float) -> tuple[bool, float]:
    """One fixed-point step: (converged, next lambda)."""
    if abs(loss_suspect - lam * loss_ref) <= tolerance * max(loss_suspect, lam * loss_ref):
        return True, lam
    if loss_ref <= 1e-9:
        raise ZeroDivisionError(f"reference loss {loss_ref:.3g} too small to rescale lambda")
    return False, loss_suspect / loss_ref


def tune_lambda(suspect, reference, label: int, cfg: DetectionConfig, ref_index: int = 0) -> float:
    """Pick lambda so that L_T and lambda * L_ref grow together under joint ascent."""
    if suspect.spec.input_shape != reference.spec.input_shape:
        raise ValueError("suspect and reference disagree on input shape")
    rng = np.random.default_rng([cfg.seed, label, ref_index, 0x1A])
    lam = 1.0
    for _ in range(cfg.lambda_rounds):
        z = gaussian_start(rng, (1,) + suspect.spec.input_shape, cfg)
        for _ in range(cfg.lambda_iters):
            _, gs = input_loss_and_grad(suspect, z, label, escape=True)
            _, gr = input_loss_and_grad(reference, z, label, escape=True)
            z = np.clip(z + cfg.alpha * (gs + lam * gr), 0.0, 1.0)
        ls, _ = input_loss_and_grad(suspect, z, label)
        lr, _ = input_loss_and_grad(reference, z, label)
        done, lam = lambda_update(float(_check(ls, "suspect")[0]), float(_check(lr, "reference")[0]),
                                  lam, cfg.lambda_tolerance)
        if done:
            break
    return lam


# -- crafting -------------------------------------------------------------------------

def sample_rng(cfg: DetectionConfig, label: int, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, label, index])


def craft_batch(suspect, references, label: int, lambdas: Sequence[float], gammas: Sequence[float],
                cfg: DetectionConfig, starts: np.ndarray) -> list[CraftOutcome]:
    """Run the three-phase probe search on a batch of starting images.

    Every row is independent: it stops as soon as its own criteria hold, and a
    row that cannot escape the label's region within the phase-1 cap is
    reported as not reached.
    """
    refs = _as_list(references)
    if len(lambdas) != len(refs) or len(gammas) != len(refs):
        raise ValueError("lambdas and gammas must align with the references")
    lam = np.asarray(lambdas, dtype=np.float64)
    gam = np.asarray(gammas, dtype=np.float64)
    x = np.array(starts, dtype=np.float64, copy=True)
    n = len(x)

    # phase 1: climb the suspect loss above the floor
    escaped = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for it in range(cfg.phase1_max_iters + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        ls, gs = input_loss_and_grad(suspect, x[idx], label, escape=True)
        _check(ls, "suspect")
        out = ls > cfg.phase1_floor
        escaped[idx[out]] = True
        active[idx[out]] = False
        if it == cfg.phase1_max_iters:
            break
        move = idx[~out]
        x[move] = np.clip(x[move] + cfg.alpha * gs[~out], 0.0, 1.0)

    # phase 2: descend L_T - sum(lambda_i * L_ref_i)
    k = len(refs)
    tr_s = np.full((n, cfg.max_iters + 1), np.nan)
    tr_r = np.full((n, cfg.max_iters + 1, k), np.nan)
    steps = np.zeros(n, dtype=np.int64)
    final_s = np.full(n, np.nan)
    final_r = np.full((n, k), np.nan)
    reached = np.zeros(n, dtype=bool)
    active = escaped.copy()
    for it in range(cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        xs = x[idx]
        ls, grad = input_loss_and_grad(suspect, xs, label)
        _check(ls, "suspect")
        lr = np.empty((len(idx), k))
        for j, ref in enumerate(refs):
            lj, gj = input_loss_and_grad(ref, xs, label)
            lr[:, j] = _check(lj, "reference")
            grad -= lam[j] * gj
        tr_s[idx, it] = ls
        tr_r[idx, it] = lr
        final_s[idx] = ls
        final_r[idx] = lr
        steps[idx] = it
        hit = (ls <= cfg.beta) & np.all(lr >= gam[None, :], axis=1)
        reached[idx[hit]] = True
        active[idx[hit]] = False
        if it == cfg.max_iters:
            break
        move = ~hit
        x[idx[move]] = np.clip(xs[move] - cfg.alpha * grad[move], 0.0, 1.0)

    if not escaped.all():
        # probes stuck in phase 1 still report where they ended
        idx = np.flatnonzero(~escaped)
        final_s[idx] = input_loss_and_grad(suspect, x[idx], label)[0]
        for j, ref in enumerate(refs):
            final_r[idx, j] = input_loss_and_grad(ref, x[idx], label)[0]

    outcomes = []
    for i in range(n):
        m = steps[i] + 1 if escaped[i] else 0
        outcomes.append(CraftOutcome(
            x=x[i].copy(), reached=bool(reached[i]), escaped=bool(escaped[i]),
            loss_suspect=float(final_s[i]), loss_refs=tuple(float(v) for v in final_r[i]),
            trace_suspect=tr_s[i, :m].copy(), trace_refs=tr_r[i, :m].copy()))
    return outcomes


def craft_sample(suspect, references, label: int, lambdas, gammas, cfg: DetectionConfig,
                 sample_seed: int) -> CraftOutcome:
    rng = np.random.default_rng(sample_seed)
    start = gaussian_start(rng, (1,) + suspect.spec.input_shape, cfg)
    return craft_batch(suspect, references, label, lambdas, gammas, cfg, start)[0]


def probe_starts(suspect, label: int, cfg: DetectionConfig) -> np.ndarray:
    shape = suspect.spec.input_shape
    return np.stack([gaussian_start(sample_rng(cfg, label, i), shape, cfg)
                     for i in range(cfg.num_samples)])


def detect_label(suspect, references, label: int, cfg: DetectionConfig, *,
                 keep_outcomes: bool = False) -> LabelVerdict:
    refs = _as_list(references)
    gammas = estimate_gamma(refs, label, cfg)
    lambdas = [tune_lambda(suspect, ref, label, cfg, ref_index=i) for i, ref in enumerate(refs)]
    outcomes = craft_batch(suspect, refs, label, lambdas, gammas, cfg, probe_starts(suspect, label, cfg))
    hits = sum(o.reached for o in outcomes)
    prob = hits / cfg.num_samples
    log.info("label %d: prob %.2f lambdas %s gammas %s", label, prob,
             np.round(lambdas, 3).tolist(), np.round(gammas, 2).tolist())
    return LabelVerdict(label, prob, prob >= cfg.prob_threshold, tuple(lambdas), tuple(gammas),
                        hits, cfg.num_samples, outcomes if keep_outcomes else [])


def detect_model(suspect, references, cfg: DetectionConfig, ground_truth: Sequence[int] | None = None,
                 labels: Sequence[int] | None = None, keep_outcomes: bool = False) -> DetectionReport:
    """Verdicts for every class (or the given subset) of the suspect model."""
    refs = _as_list(references)
    for ref in refs:
        if ref.spec.input_shape != suspect.spec.input_shape or ref.spec.classes != suspect.spec.classes:
            raise ValueError("references must share the suspect's input shape and class count")
    t0 = time.perf_counter()
    todo = range(suspect.spec.classes) if labels is None else labels
    verdicts = [detect_label(suspect, refs, int(y), cfg, keep_outcomes=keep_outcomes) for y in todo]
    gt = None if ground_truth is None else tuple(sorted(int(t) for t in ground_truth))
    return DetectionReport(verdicts, cfg, time.perf_counter() - t0, gt)


def same_architecture(a, b) -> bool:
    """Layer stack and input shape agree; names are ignored."""
    return a.spec.input_shape == b.spec.input_shape and a.spec.layers == b.spec.layers


def ensemble_excluding(pool: Sequence, suspect, k: int | None = None) -> list:
    """Pool members whose architecture differs from the suspect's (first ``k`` kept)."""
    members = [m for m in pool if not same_architecture(m, suspect)]
    if k is not None:
        members = members[:k]
    if not members:
        raise ValueError("no pool member left after excluding the suspect's architecture")
    return members
