"""Command-line driver: train | poison | detect | mitigate | report.

Every stage rebuilds its datasets from the configuration, reads models
written by earlier stages from the output directory, and writes a canonical
JSON report next to them. Exit codes: 0 success, 2 invalid input, 3
infection still present after the last mitigation round.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from ._runtime import keep_heap_warm
from .config import ConfigError, ExperimentConfig, load_text, resolve
from .data import DataFormatError, save_idx
from .detection import DegenerateReferenceError, detect_model
from .mitigation import iterate_until_clean
from .models import ModelFormatError, load_model, save_model
from .pipeline import (adversarial_sets, attack_spec, load_datasets, metrics, poisoned_training_set,
                       references_for, train_suspect)
from .report import ReportError, merge_reports, read_report, stage_report, summary_markdown, write_report

log = logging.getLogger("poisonprobe")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNRESOLVED = 3

CLEAN_MODEL = "clean_model.phyg"
INFECTED_MODEL = "infected_model.phyg"
PATCHED_MODEL = "patched_model.phyg"


def _suspect_path(cfg: ExperimentConfig, out: Path) -> Path:
    if cfg["detect.model"]:
        return Path(cfg["detect.model"])
    name = CLEAN_MODEL if cfg["attack.technique"] == "none" else INFECTED_MODEL
    return out / name


def _load_suspect(cfg: ExperimentConfig, out: Path):
    path = _suspect_path(cfg, out)
    if not path.exists():
        stage = "train" if path.name == CLEAN_MODEL else "poison"
        raise ConfigError(f"suspect model {path} not found; run the {stage} stage first")
    return load_model(path)


def _save_references(refs, out: Path) -> list[str]:
    names = []
    for i, ref in enumerate(refs):
        name = f"reference_{i}.phyg"
        save_model(ref, out / name)
        names.append(name)
    return names


def cmd_train(cfg: ExperimentConfig, out: Path) -> int:
    train_ds, test_ds = load_datasets(cfg)
    model = train_suspect(cfg, train_ds, "clean")
    save_model(model, out / CLEAN_MODEL)
    body = {"model": CLEAN_MODEL, "train_size": len(train_ds),
            "metrics": metrics(model, test_ds, attack_spec(cfg))}
    write_report(out / "train.json", stage_report("train", cfg, body))
    return EXIT_OK


def cmd_poison(cfg: ExperimentConfig, out: Path) -> int:
    spec = attack_spec(cfg)
    if spec is None:
        raise ConfigError("poison stage needs attack.technique")
    train_ds, test_ds = load_datasets(cfg)
    poisoned, indices = poisoned_training_set(cfg, train_ds)
    save_idx(poisoned, out / "poisoned_train-images.idx", out / "poisoned_train-labels.idx")
    for name, (_, adv) in sorted(adversarial_sets(test_ds, spec).items()):
        save_idx(adv, out / f"adversarial_{name}-images.idx", out / f"adversarial_{name}-labels.idx")
    model = train_suspect(cfg, poisoned, "infected")
    save_model(model, out / INFECTED_MODEL)
    body = {"model": INFECTED_MODEL, "attack": spec.as_dict(), "poisoned_count": len(indices),
            "poisoned_indices": indices, "infected_metrics": metrics(model, test_ds, spec)}
    write_report(out / "poison.json", stage_report("poison", cfg, body))
    return EXIT_OK


def cmd_detect(cfg: ExperimentConfig, out: Path) -> int:
    train_ds, _ = load_datasets(cfg)
    suspect = _load_suspect(cfg, out)
    refs = references_for(cfg, suspect, train_ds)
    ref_names = _save_references(refs, out) if not cfg.reference_paths else list(cfg.reference_paths)
    spec = attack_spec(cfg)
    truth = list(spec.target_labels) if spec is not None else None
    report = detect_model(suspect, refs, cfg.detection_config(), ground_truth=truth)
    body = {"suspect": str(_suspect_path(cfg, out).name), "references": ref_names,
            "detection": report.as_dict(include_wall_time=False)}
    write_report(out / "detect.json", stage_report("detect", cfg, body), report.wall_time)
    return EXIT_OK


def cmd_mitigate(cfg: ExperimentConfig, out: Path) -> int:
    train_ds, test_ds = load_datasets(cfg)
    suspect = _load_suspect(cfg, out)
    refs = references_for(cfg, suspect, train_ds)
    spec = attack_spec(cfg)
    truth = list(spec.target_labels) if spec is not None else None
    t0 = time.perf_counter()
    result = iterate_until_clean(suspect, refs, cfg.detection_config(), cfg.mitigation_config(), train_ds,
                                 cfg["mitigate.max_rounds"], cfg.train_config(), ground_truth=truth)
    save_model(result.model.with_params(result.model.params, provenance="patched"), out / PATCHED_MODEL)
    body = {
        "model": PATCHED_MODEL,
        "rounds": result.rounds,
        "resolved": result.resolved,
        "before": metrics(suspect, test_ds, spec),
        "after": metrics(result.model, test_ds, spec),
        "flagged_per_round": [r.flagged for r in result.reports],
        "crafting": result.crafting,
        "detection": result.reports[-1].as_dict(include_wall_time=False),
    }
    write_report(out / "mitigate.json", stage_report("mitigate", cfg, body), time.perf_counter() - t0)
    if not result.resolved:
        log.warning("infection unresolved after %d rounds", result.rounds)
        return EXIT_UNRESOLVED
    return EXIT_OK


def cmd_report(paths: list[str], out: Path) -> int:
    summary = merge_reports([read_report(p) for p in paths])
    write_report(out / "summary.json", summary)
    (out / "summary.md").write_text(summary_markdown(summary), encoding="utf-8")
    return EXIT_OK


COMMANDS = {"train": cmd_train, "poison": cmd_poison, "detect": cmd_detect, "mitigate": cmd_mitigate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="poisonprobe", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="flat key=value experiment file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--fast", action="store_true", help="craft 10 probes per label instead of 100")
    p = sub.add_parser("report")
    p.add_argument("reports", nargs="+", help="stage report JSON files")
    p.add_argument("--out", default="out")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    keep_heap_warm()
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "report":
            return cmd_report(args.reports, out)
        cfg = resolve(load_text(args.config), seed=args.seed, fast=args.fast)
        return COMMANDS[args.command](cfg, out)
    except (ConfigError, ReportError, DataFormatError, ModelFormatError, DegenerateReferenceError,
            OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
