"""Building blocks shared by the command-line stages: datasets, campaigns,
models and references resolved from one :class:`ExperimentConfig`."""

from __future__ import annotations

from .attacks import (AttackSpec, TriggerSpec, adaptive_poison_dataset, backdoor_poison, clean_reference_testset,
                      make_adversarial_testset, mislabel_class_counts, mislabel_poison, patch_grid)
from .config import ConfigError, ExperimentConfig
from .data import Dataset, balanced_counts, load_idx, subsample, synth_generate, synth_generate_counts
from .detection import ensemble_excluding
from .models import ModelHandle, architecture, build_model, load_model
from .training import attack_success_rate, evaluate_accuracy, per_class_accuracy, train


def attack_spec(cfg: ExperimentConfig) -> AttackSpec | None:
    technique = cfg["attack.technique"]
    if technique == "none":
        return None
    triggers: tuple[TriggerSpec, ...] = ()
    if technique in ("badnets", "chen"):
        kind = cfg["attack.trigger"] or ("patch" if technique == "badnets" else "blend")
        size = cfg["attack.patch_size"]
        if kind == "patch" and cfg["attack.triggers"] > 1:
            triggers = patch_grid((16, 16), cfg["attack.triggers"], size)
        elif kind == "patch":
            triggers = (TriggerSpec("patch", size, size),)
        elif kind == "blend":
            triggers = tuple(TriggerSpec("blend", noise_seed=cfg["attack.noise_seed"] + i,
                                         transparency=cfg["attack.transparency"])
                             for i in range(cfg["attack.triggers"]))
        else:
            raise ConfigError(f"unknown attack.trigger {kind!r}")
    try:
        return AttackSpec(technique, cfg.targets, cfg["attack.proportion"], cfg.sources, triggers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """(clean training set, test set)."""
    if cfg["data.source"] == "idx":
        classes = cfg["data.classes"]
        train_ds = load_idx(cfg["data.train_images"], cfg["data.train_labels"], classes, "train")
        test_ds = load_idx(cfg["data.test_images"], cfg["data.test_labels"], classes, "test")
        return train_ds, test_ds
    classes, n, g = cfg["data.classes"], cfg["data.train_size"], cfg["data.geometry_seed"]
    spec = attack_spec(cfg)
    if spec is not None and spec.technique == "mislabel":
        counts = mislabel_class_counts(n, classes, spec)
    else:
        counts = balanced_counts(n, classes)
    train_ds = synth_generate_counts(counts, g, cfg["data.noise"], noise_seed=2 * g + 1, name="train")
    test_ds = synth_generate(classes, cfg["data.test_per_class"], g, cfg["data.noise"],
                             noise_seed=2 * g + 2, name="test")
    return train_ds, test_ds


def poisoned_training_set(cfg: ExperimentConfig, clean: Dataset) -> tuple[Dataset, list[int]]:
    spec = attack_spec(cfg)
    if spec is None:
        return clean, []
    if spec.technique == "mislabel":
        return mislabel_poison(clean, spec, cfg.seed)
    if spec.technique == "adaptive":
        ensemble = [load_model(p) for p in cfg.ensemble_paths]
        return adaptive_poison_dataset(clean, spec, ensemble, cfg.seed)
    return backdoor_poison(clean, spec, cfg.seed)


def fresh_model(cfg: ExperimentConfig, arch: str | None = None, seed: int | None = None) -> ModelHandle:
    ds_classes = cfg["data.classes"]
    name = arch or cfg["model.architecture"]
    try:
        spec = architecture(name, classes=ds_classes)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    return build_model(spec, cfg.seed if seed is None else seed, name=name)


def train_suspect(cfg: ExperimentConfig, ds: Dataset, provenance: str) -> ModelHandle:
    return train(fresh_model(cfg), ds, cfg.train_config(), provenance=provenance)


def self_trained_reference(cfg: ExperimentConfig, clean: Dataset) -> ModelHandle:
    """A clean model trained on a stratified slice of the defender's clean data."""
    s = cfg["reference.seed"]
    part = subsample(clean, cfg["reference.fraction"], s)
    model = fresh_model(cfg, cfg["reference.architecture"], s)
    return train(model, part, cfg.train_config(seed=s, epochs=cfg["reference.epochs"]))


def references_for(cfg: ExperimentConfig, suspect: ModelHandle, clean: Dataset) -> list[ModelHandle]:
    """Pool models (suspect's architecture excluded) when paths are given, else a self-trained one."""
    if cfg.reference_paths:
        pool = [load_model(p) for p in cfg.reference_paths]
        try:
            return ensemble_excluding(pool, suspect, cfg["reference.k"] or None)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return [self_trained_reference(cfg, clean)]


def adversarial_sets(test: Dataset, spec: AttackSpec | None) -> dict[str, tuple[int, Dataset]]:
    """name -> (target label, adversarial inputs), one entry per (target, trigger) pair."""
    if spec is None or spec.technique == "adaptive":
        return {}
    out = {}
    for t in spec.target_labels:
        if spec.technique == "mislabel":
            out[f"target{t}"] = (t, make_adversarial_testset(test, spec, target=t))
        else:
            for i in range(len(spec.triggers)):
                out[f"target{t}_trigger{i}"] = (t, make_adversarial_testset(test, spec, target=t, trigger_index=i))
    return out


def metrics(model: ModelHandle, test: Dataset, spec: AttackSpec | None) -> dict:
    clean = clean_reference_testset(test, spec)
    out = {
        "clean_accuracy": evaluate_accuracy(model, clean),
        "per_class_accuracy": [None if a != a else a for a in per_class_accuracy(model, test)],
    }
    asr = {name: attack_success_rate(model, adv, t) for name, (t, adv) in adversarial_sets(test, spec).items()}
    if asr:
        out["attack_success_rate"] = asr
    return out
