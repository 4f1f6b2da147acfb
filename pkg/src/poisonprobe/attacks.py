"""Poisoning campaigns: mislabelling, patch and blend backdoors, and the
ensemble-aware adaptive attack that crafts poisons the references already accept."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import NonFiniteError, batch_losses, input_loss_and_grad
from .data import Dataset, balanced_counts, concat

TECHNIQUES = ("mislabel", "badnets", "chen", "adaptive")


@dataclass(frozen=True)
class TriggerSpec:
    kind: str = "patch"  # "patch" or "blend"
    height: int = 4
    width: int = 4
    row: int | None = None  # anchor; None means flush with the bottom-right corner
    col: int | None = None
    value: float = 1.0
    noise_seed: int = 0
    transparency: float = 0.1

    def __post_init__(self):
        if self.kind not in ("patch", "blend"):
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        if self.kind == "patch" and (self.height < 1 or self.width < 1):
            raise ValueError("patch needs positive size")
        if not 0.0 <= self.transparency <= 1.0:
            raise ValueError("transparency must lie in [0, 1]")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError("patch value must lie in [0, 1]")

    def window(self, image_shape) -> tuple[slice, slice]:
        h, w = image_shape[:2]
        r = h - self.height if self.row is None else self.row
        c = w - self.width if self.col is None else self.col
        if r < 0 or c < 0 or r + self.height > h or c + self.width > w:
            raise ValueError(f"{self.height}x{self.width} patch at ({r},{c}) does not fit {h}x{w}")
        return slice(r, r + self.height), slice(c, c + self.width)

    def as_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class AttackSpec:
    technique: str
    target_labels: tuple[int, ...]
    proportion: float = 0.06
    source_classes: tuple[int, ...] = ()  # mislabel: one source per target label
    triggers: tuple[TriggerSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "target_labels", tuple(int(t) for t in self.target_labels))
        object.__setattr__(self, "source_classes", tuple(int(s) for s in self.source_classes))
        object.__setattr__(self, "triggers", tuple(self.triggers))
        if self.technique not in TECHNIQUES:
            raise ValueError(f"technique must be one of {TECHNIQUES}")
        if not self.target_labels:
            raise ValueError("at least one target label is required")
        if not 0.0 < self.proportion < 0.5:
            raise ValueError("poison proportion must lie in (0, 0.5)")
        if self.technique == "mislabel":
            if len(self.source_classes) != len(self.target_labels):
                raise ValueError("mislabel needs one source class per target label")
            if set(self.source_classes) & set(self.target_labels):
                raise ValueError("source class may not also be a target label")
        if self.technique in ("badnets", "chen"):
            if not self.triggers:
                default = TriggerSpec("patch") if self.technique == "badnets" else TriggerSpec("blend")
                object.__setattr__(self, "triggers", (default,))

    @property
    def source_class(self) -> int:
        return self.source_classes[0]

    def as_dict(self) -> dict:
        return {
            "technique": self.technique,
            "target_labels": list(self.target_labels),
            "proportion": self.proportion,
            "source_classes": list(self.source_classes),
            "triggers": [t.as_dict() for t in self.triggers],
        }


def patch_grid(image_shape, count: int, size: int = 4, value: float = 1.0) -> tuple[TriggerSpec, ...]:
    """``count`` non-overlapping square patches spread over the image, row-major."""
    h, w = image_shape[:2]
    per_row = w // size
    slots = [(r * size, c * size) for r in range(h // size) for c in range(per_row)]
    if count > len(slots):
        raise ValueError(f"only {len(slots)} {size}x{size} slots fit a {h}x{w} image")
    picks = np.linspace(len(slots) - 1, 0, count).round().astype(int)
    return tuple(TriggerSpec("patch", size, size, slots[i][0], slots[i][1], value) for i in picks)


def blend_noise(image_shape, noise_seed: int) -> np.ndarray:
    return np.random.default_rng([noise_seed, 0xB1E]).random(tuple(image_shape))


def apply_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Stamp one image (HWC) or a batch (NHWC); returns a new array."""
    img = np.array(image, dtype=np.float64, copy=True)
    shape = img.shape[-3:]
    if trigger.kind == "patch":
        rs, cs = trigger.window(shape)
        img[..., rs, cs, :] = trigger.value
        return img
    rho = trigger.transparency
    return np.clip((1.0 - rho) * img + rho * blend_noise(shape, trigger.noise_seed), 0.0, 1.0)


def mislabel_poison(ds: Dataset, spec: AttackSpec, seed: int) -> tuple[Dataset, list[int]]:
    """Relabel floor(p*N) uniformly chosen source-class samples to the target, per target."""
    if spec.technique != "mislabel":
        raise ValueError("mislabel_poison needs a mislabel AttackSpec")
    rng = np.random.default_rng([seed, 0x315])
    k = int(np.floor(spec.proportion * len(ds)))
    labels = ds.labels.copy()
    poisoned: list[int] = []
    for src, tgt in zip(spec.source_classes, spec.target_labels):
        idx = np.flatnonzero(ds.labels == src)
        if len(idx) == 0:
            raise ValueError(f"source class {src} absent from dataset")
        if len(idx) < k:
            raise ValueError(f"source class {src} has {len(idx)} samples, {k} needed")
        chosen = np.sort(rng.choice(idx, size=k, replace=False))
        labels[chosen] = tgt
        poisoned.extend(int(i) for i in chosen)
    return Dataset(ds.images, labels, ds.classes, f"{ds.name}+mislabel"), sorted(poisoned)


def backdoor_poison(ds: Dataset, spec: AttackSpec, seed: int) -> tuple[Dataset, list[int]]:
    """Append triggered, relabelled clones of floor(p*N) clean samples per (label, trigger).

    Clones are drawn from samples not already of the target label and never
    reused across pairs. Returned indices point at the appended rows.
    """
    if spec.technique not in ("badnets", "chen"):
        raise ValueError("backdoor_poison needs a badnets or chen AttackSpec")
    rng = np.random.default_rng([seed, 0xBAD])
    k = int(np.floor(spec.proportion * len(ds)))
    used = np.zeros(len(ds), dtype=bool)
    new_images, new_labels = [], []
    for tgt in spec.target_labels:
        for trig in spec.triggers:
            pool = np.flatnonzero((ds.labels != tgt) & ~used)
            if len(pool) < k:
                raise ValueError("not enough clean samples left for disjoint clones")
            chosen = np.sort(rng.choice(pool, size=k, replace=False))
            used[chosen] = True
            new_images.append(apply_trigger(ds.images[chosen], trig))
            new_labels.append(np.full(k, tgt, dtype=np.int64))
    if not new_images or k == 0:
        return ds, []
    injected = Dataset(np.concatenate(new_images), np.concatenate(new_labels), ds.classes)
    out = concat([ds, injected], name=f"{ds.name}+{spec.technique}")
    return out, list(range(len(ds), len(out)))


def make_adversarial_testset(ds: Dataset, spec: AttackSpec, seed: int = 0, *,
                             target: int | None = None, trigger_index: int | None = None) -> Dataset:
    """Inputs the attack means to flip, carrying their true labels.

    Backdoor: triggered copies of test images whose true label is not the target.
    Mislabel: the untouched source-class test images. ``target`` and
    ``trigger_index`` narrow a multi-label / multi-trigger campaign to one pair;
    otherwise all pairs are concatenated.
    """
    targets = spec.target_labels if target is None else (target,)
    parts = []
    if spec.technique == "mislabel":
        for src, tgt in zip(spec.source_classes, spec.target_labels):
            if tgt in targets:
                parts.append(ds.take(np.flatnonzero(ds.labels == src)))
    elif spec.technique in ("badnets", "chen"):
        trigs = spec.triggers if trigger_index is None else (spec.triggers[trigger_index],)
        for tgt in targets:
            keep = np.flatnonzero(ds.labels != tgt)
            for trig in trigs:
                parts.append(Dataset(apply_trigger(ds.images[keep], trig), ds.labels[keep], ds.classes))
    else:
        raise ValueError("adaptive test sets come from adaptive_poison on test images")
    parts = [p for p in parts if len(p)]
    if not parts:
        raise ValueError("adversarial test set would be empty")
    return concat(parts, name=f"{ds.name}:adv")


def attacked_population_mask(ds: Dataset, spec: AttackSpec) -> np.ndarray:
    """Rows of a clean test set the campaign deliberately flips (mislabel sources)."""
    if spec.technique == "mislabel":
        return np.isin(ds.labels, spec.source_classes)
    return np.zeros(len(ds), dtype=bool)


def clean_reference_testset(ds: Dataset, spec: AttackSpec | None) -> Dataset:
    """Clean test set minus the population the attack targets on purpose."""
    if spec is None:
        return ds
    return ds.take(np.flatnonzero(~attacked_population_mask(ds, spec)))


def adaptive_poison(ensemble: Sequence, targets: Sequence[tuple[np.ndarray, int]], step: float = 0.01,
                    iters: int = 500) -> list[np.ndarray]:
    """Descend the summed ensemble cross-entropy toward each target label.

    Each image is updated independently; a step that raises the summed loss is
    rejected and that image's step size halved. Pixels are clamped to [0, 1].
    Stops per image once the summed loss falls to 0.01 per ensemble member.
    """
    if not ensemble:
        raise ValueError("ensemble must not be empty")
    if not targets:
        return []
    x = np.stack([np.asarray(img, dtype=np.float64) for img, _ in targets])
    labels = np.array([int(y) for _, y in targets])
    k = len(ensemble)
    stop = 0.01 * k
    rates = np.full(len(x), float(step))

    def summed(z):
        loss = np.zeros(len(z))
        grad = np.zeros_like(z)
        for member in ensemble:
            li, gi = input_loss_and_grad(member, z, labels)
            loss += li
            grad += gi
        if not np.all(np.isfinite(loss)):
            raise NonFiniteError("non-finite adaptive-attack loss")
        return loss, grad

    loss, grad = summed(x)
    active = loss > stop
    for _ in range(iters):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        cand = np.clip(x[idx] - rates[idx, None, None, None] * grad[idx], 0.0, 1.0)
        closs = np.zeros(len(idx))
        for member in ensemble:
            closs += batch_losses(member, cand, labels[idx])
        ok = closs <= loss[idx]
        acc = idx[ok]
        rates[idx[~ok]] *= 0.5
        if len(acc):
            x[acc] = cand[ok]
            loss[acc], grad[acc] = summed(x[acc])
        active = (loss > stop) & (rates > 1e-12)
    return [img for img in x]


def adaptive_poison_dataset(ds: Dataset, spec: AttackSpec, ensemble: Sequence, seed: int,
                            step: float = 0.01, iters: int = 500) -> tuple[Dataset, list[int]]:
    """Append floor(p*N) ensemble-crafted poisons per target label (adaptive technique)."""
    if spec.technique != "adaptive":
        raise ValueError("adaptive_poison_dataset needs an adaptive AttackSpec")
    rng = np.random.default_rng([seed, 0xADA])
    k = int(np.floor(spec.proportion * len(ds)))
    imgs, labs = [], []
    for tgt in spec.target_labels:
        pool = np.flatnonzero(ds.labels != tgt)
        chosen = np.sort(rng.choice(pool, size=k, replace=False))
        crafted = adaptive_poison(ensemble, [(ds.images[i], tgt) for i in chosen], step, iters)
        imgs.append(np.stack(crafted))
        labs.append(np.full(k, tgt))
    injected = Dataset(np.concatenate(imgs), np.concatenate(labs), ds.classes)
    out = concat([ds, injected], name=f"{ds.name}+adaptive")
    return out, list(range(len(ds), len(out)))


def mislabel_class_counts(total: int, classes: int, spec: AttackSpec) -> list[int]:
    """Class sizes for a synthetic training set in which each mislabel source
    class holds exactly floor(p * total) samples, so the campaign relabels the
    whole class; the other classes share the remaining samples evenly."""
    if spec.technique != "mislabel":
        raise ValueError("mislabel_class_counts needs a mislabel AttackSpec")
    k = int(np.floor(spec.proportion * total))
    return balanced_counts(total, classes, {s: k for s in spec.source_classes})
