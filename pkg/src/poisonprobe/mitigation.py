"""Unlearning a detected poisoned region.

Crafted inputs that the suspect assigns to the infected label while the
references assign them to a healthy label are added, with the healthy label,
to a small slice of clean data; retraining on that mix collapses the region.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import input_loss_and_grad
from .data import Dataset, concat, stratified_sample
from .detection import DetectionConfig, DetectionReport, _as_list, _check, detect_model, gaussian_start
from .models import ModelHandle
from .training import TrainConfig, train

log = logging.getLogger(__name__)

WEIGHT_CAP = 1e4
ADJUST_EVERY = 100
ADJUST_FACTOR = 1.5


class NoUnlearningSamplesError(RuntimeError):
    """Every crafting attempt failed, so there is nothing to unlearn with."""


@dataclass(frozen=True)
class MitigationConfig:
    c: float = 1.0
    d: float = 1.0
    loss_target: float = 0.01
    samples_per_pair: int = 5
    clean_fraction: float = 0.10
    adversarial_fraction: float = 0.20
    retrain_epochs: int = 5
    alpha: float = 0.01
    max_iters: int = 2000
    init_mean: float = 0.5
    init_std: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.clean_fraction < 1.0 or not 0.0 < self.adversarial_fraction < 1.0:
            raise ValueError("clean and adversarial fractions must lie in (0, 1)")
        if self.loss_target <= 0:
            raise ValueError("loss_target must be positive")
        if self.c <= 0 or self.d <= 0 or self.alpha <= 0:
            raise ValueError("c, d and alpha must be positive")
        if self.samples_per_pair < 1 or self.max_iters < 0 or self.retrain_epochs < 0:
            raise ValueError("samples_per_pair must be >= 1; iteration and epoch counts non-negative")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class UnlearningOutcome:
    x: np.ndarray
    healthy_label: int
    success: bool
    loss_suspect: float  # suspect loss on the infected label
    loss_refs: tuple[float, ...]  # reference losses on the healthy label
    c: float
    d: float
    iterations: int


def _start_shape(cfg: MitigationConfig) -> DetectionConfig:
    # reuse the detector's start distribution
    return DetectionConfig(init_mean=cfg.init_mean, init_std=cfg.init_std)


def craft_unlearning_batch(suspect: ModelHandle, references, infected: int, healthy: Sequence[int],
                           cfg: MitigationConfig, starts: np.ndarray) -> list[UnlearningOutcome]:
    """Minimise L_T(x, y_t) + c * sum L_ref(x, y_o) - d * sum L_ref(x, y_t) row by row.

    Every ``ADJUST_EVERY`` iterations a row whose suspect loss is still at or
    above the target has its d scaled up, and one whose reference loss on y_o
    is has its c scaled up, both capped at ``WEIGHT_CAP``. A row stops once the
    suspect loss and every reference loss on y_o are below the target.
    """
    refs = _as_list(references)
    yo = np.asarray(healthy, dtype=np.int64)
    if np.any(yo == infected):
        raise ValueError("healthy label must differ from the infected label")
    x = np.array(starts, dtype=np.float64, copy=True)
    n = len(x)
    if len(yo) != n:
        raise ValueError("one healthy label per start is required")
    c = np.full(n, float(cfg.c))
    d = np.full(n, float(cfg.d))
    ls = np.zeros(n)
    lo = np.zeros((n, len(refs)))
    iters = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for it in range(cfg.max_iters + 1):
        idx = np.flatnonzero(active)
        if len(idx) == 0:
            break
        xs = x[idx]
        l_s, grad = input_loss_and_grad(suspect, xs, infected)
        ls[idx] = _check(l_s, "suspect")
        grad = grad.copy()
        for j, ref in enumerate(refs):
            l_o, g_o = input_loss_and_grad(ref, xs, yo[idx])
            _, g_t = input_loss_and_grad(ref, xs, infected)
            lo[idx, j] = _check(l_o, "reference")
            grad += c[idx, None, None, None] * g_o - d[idx, None, None, None] * g_t
        iters[idx] = it
        done = (ls[idx] < cfg.loss_target) & np.all(lo[idx] < cfg.loss_target, axis=1)
        success[idx[done]] = True
        active[idx[done]] = False
        if it == cfg.max_iters:
            break
        move = ~done
        x[idx[move]] = np.clip(xs[move] - cfg.alpha * grad[move], 0.0, 1.0)
        if (it + 1) % ADJUST_EVERY == 0:
            rows = idx[move]
            d[rows] = np.where(ls[rows] >= cfg.loss_target, np.minimum(d[rows] * ADJUST_FACTOR, WEIGHT_CAP), d[rows])
            bad_o = np.any(lo[rows] >= cfg.loss_target, axis=1)
            c[rows] = np.where(bad_o, np.minimum(c[rows] * ADJUST_FACTOR, WEIGHT_CAP), c[rows])
    return [UnlearningOutcome(x[i].copy(), int(yo[i]), bool(success[i]), float(ls[i]),
                              tuple(float(v) for v in lo[i]), float(c[i]), float(d[i]), int(iters[i]))
            for i in range(n)]


def craft_rng(cfg: MitigationConfig, infected: int, healthy: int, index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, infected, healthy, index, 0x5E])


def craft_unlearning_sample(suspect: ModelHandle, references, infected: int, healthy: int,
                            cfg: MitigationConfig, seed: int) -> UnlearningOutcome:
    start = gaussian_start(np.random.default_rng(seed), (1,) + suspect.spec.input_shape, _start_shape(cfg))
    return craft_unlearning_batch(suspect, references, infected, [healthy], cfg, start)[0]


def craft_for_label(suspect: ModelHandle, references, infected: int, cfg: MitigationConfig) -> list[UnlearningOutcome]:
    """``samples_per_pair`` attempts for every healthy label, in (y_o, index) order."""
    shape = suspect.spec.input_shape
    pairs = [(yo, i) for yo in range(suspect.spec.classes) if yo != infected
             for i in range(cfg.samples_per_pair)]
    starts = np.stack([gaussian_start(craft_rng(cfg, infected, yo, i), shape, _start_shape(cfg))
                       for yo, i in pairs])
    outcomes = craft_unlearning_batch(suspect, references, infected, [yo for yo, _ in pairs], cfg, starts)
    log.info("label %d: %d/%d unlearning samples crafted", infected,
             sum(o.success for o in outcomes), len(outcomes))
    return outcomes


def unlearning_counts(n_clean_pool: int, cfg: MitigationConfig) -> tuple[int, int]:
    """(clean, crafted) entry counts of the mixed set for a clean pool of the given size."""
    n_clean = int(round(cfg.clean_fraction * n_clean_pool))
    return n_clean, int(round(cfg.adversarial_fraction * n_clean))


def build_unlearning_set(clean: Dataset, crafted: Sequence[tuple[np.ndarray, int]], cfg: MitigationConfig,
                         seed: int) -> Dataset:
    """Stratified clean slice plus crafted inputs (cycled to the target count), shuffled."""
    if len(clean) == 0:
        raise ValueError("clean dataset is empty")
    if not crafted:
        raise NoUnlearningSamplesError("no successful unlearning samples to mix in")
    n_clean, n_adv = unlearning_counts(len(clean), cfg)
    rng = np.random.default_rng([seed, 0x0C1])
    part = stratified_sample(clean, n_clean, int(rng.integers(2**31)))
    picks = [crafted[i % len(crafted)] for i in range(n_adv)]
    parts = [part]
    if picks:
        parts.append(Dataset(np.stack([x for x, _ in picks]), np.array([y for _, y in picks]), clean.classes))
    mixed = concat(parts)
    return mixed.take(rng.permutation(len(mixed)), name=f"{clean.name}+unlearn")


def control_set(clean: Dataset, cfg: MitigationConfig, seed: int) -> Dataset:
    """The clean slice of :func:`build_unlearning_set` alone (no crafted inputs)."""
    n_clean, _ = unlearning_counts(len(clean), cfg)
    rng = np.random.default_rng([seed, 0x0C1])
    return stratified_sample(clean, n_clean, int(rng.integers(2**31)))


def unlearn(model: ModelHandle, mixed: Dataset, cfg: MitigationConfig,
            train_cfg: TrainConfig | None = None) -> ModelHandle:
    base = train_cfg or TrainConfig()
    tc = TrainConfig(base.learning_rate, base.momentum, base.dropout, base.batch_size,
                     cfg.retrain_epochs, cfg.seed)
    return train(model, mixed, tc, provenance="patched")


def mitigate_labels(model: ModelHandle, references, labels: Sequence[int], clean: Dataset,
                    cfg: MitigationConfig, train_cfg: TrainConfig | None = None,
                    round_index: int = 0) -> tuple[ModelHandle, dict]:
    """One unlearning pass covering every label in ``labels`` with a single retrain."""
    crafted: list[tuple[np.ndarray, int]] = []
    stats = {}
    for y in labels:
        outs = craft_for_label(model, references, int(y), cfg)
        ok = [(o.x, o.healthy_label) for o in outs if o.success]
        stats[str(int(y))] = {"attempted": len(outs), "succeeded": len(ok)}
        crafted.extend(ok)
    mixed = build_unlearning_set(clean, crafted, cfg, cfg.seed + round_index)
    return unlearn(model, mixed, cfg, train_cfg), stats


@dataclass
class MitigationResult:
    model: ModelHandle
    rounds: int
    resolved: bool
    reports: list[DetectionReport] = field(default_factory=list)
    crafting: list[dict] = field(default_factory=list)


def iterate_until_clean(model: ModelHandle, references, detect_cfg: DetectionConfig, mit_cfg: MitigationConfig,
                        clean: Dataset, max_rounds: int = 4, train_cfg: TrainConfig | None = None,
                        ground_truth: Sequence[int] | None = None) -> MitigationResult:
    """Detect, unlearn every flagged label, and repeat until nothing is flagged.

    ``rounds`` counts unlearning passes; the result is unresolved when labels
    are still flagged after ``max_rounds`` passes.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be at least 1")
    refs = _as_list(references)
    reports: list[DetectionReport] = []
    crafting: list[dict] = []
    current = model
    for rnd in range(max_rounds + 1):
        report = detect_model(current, refs, detect_cfg, ground_truth=ground_truth)
        reports.append(report)
        if not report.infected:
            return MitigationResult(current, rnd, True, reports, crafting)
        if rnd == max_rounds:
            break
        log.info("round %d: unlearning labels %s", rnd + 1, report.flagged)
        try:
            current, stats = mitigate_labels(current, refs, report.flagged, clean, mit_cfg, train_cfg, rnd)
        except NoUnlearningSamplesError:
            log.warning("round %d: no unlearning sample could be crafted; stopping", rnd + 1)
            return MitigationResult(current, rnd, False, reports, crafting)
        crafting.append(stats)
    return MitigationResult(current, max_rounds, False, reports, crafting)
