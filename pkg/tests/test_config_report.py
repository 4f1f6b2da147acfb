import json

import pytest

from poisonprobe import __version__
from poisonprobe.config import KEYS, ConfigError, parse_text, resolve
from poisonprobe.report import ReportError, canonical_json, merge_reports, stage_report, summary_markdown


def test_parse_skips_comments_and_blanks():
    raw = parse_text("# heading\n\nseed = 4  # trailing\nattack.targets=1,2\n")
    assert raw == {"seed": "4", "attack.targets": "1,2"}


@pytest.mark.parametrize("text", ["bogus.key=1", "seed=1\nseed=2", "seed"])
def test_parse_rejects(text):
    with pytest.raises(ConfigError):
        parse_text(text)


def test_resolve_defaults_and_overrides():
    cfg = resolve(parse_text("seed=5\ntrain.epochs=7"), seed=9, fast=True)
    assert cfg.seed == 9
    assert cfg["detect.num_samples"] == 10
    assert cfg["data.geometry_seed"] == 9 and cfg["reference.seed"] == 1009
    assert cfg["reference.epochs"] == 7
    assert cfg.train_config().epochs == 7 and cfg.train_config().seed == 9
    assert cfg.detection_config().seed == 9 and cfg.mitigation_config().seed == 9
    assert set(cfg.echo()) == set(KEYS)


@pytest.mark.parametrize("text", [
    "attack.technique=badnets",
    "attack.technique=laser\nattack.targets=1",
    "data.source=idx",
    "data.train_images=a.idx",
    "reference.fraction=0",
    "train.epochs=ten",
    "detect.beta=-1",
    "mitigate.max_rounds=0",
    "attack.technique=adaptive\nattack.targets=1",
])
def test_resolve_rejects(text):
    with pytest.raises(ConfigError):
        resolve(parse_text(text))


def test_hash_tracks_content():
    a = resolve(parse_text("seed=1"))
    assert a.hash == resolve(parse_text("seed = 1 # same")).hash
    assert a.hash != resolve(parse_text("seed=2")).hash
    assert len(a.hash) == 64


def test_canonical_json_is_sorted_and_rejects_nan():
    assert canonical_json({"b": 1, "a": [1.5]}) == '{\n  "a": [\n    1.5\n  ],\n  "b": 1\n}\n'
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def _reports(seed=0):
    cfg = resolve(parse_text(f"seed={seed}"))
    return [stage_report(s, cfg, {"metrics": {"clean_accuracy": 0.9}}) for s in ("train", "poison", "detect")]


def test_merge_has_one_entry_per_stage():
    reps = _reports()
    summary = merge_reports(reps)
    assert sorted(summary["stages"]) == ["detect", "poison", "train"]
    assert summary["version"] == __version__
    again = merge_reports([summary])
    assert canonical_json(again) == canonical_json(summary)
    assert canonical_json(merge_reports([summary] + reps)) == canonical_json(summary)
    assert "| train | metrics.clean_accuracy | 0.9000 |" in summary_markdown(summary)


def test_merge_rejects_mismatch():
    reps = _reports()
    old = json.loads(json.dumps(reps[0]))
    old["version"] = "0.0.1"
    with pytest.raises(ReportError):
        merge_reports([old, reps[1]])
    with pytest.raises(ReportError):
        merge_reports([reps[0], _reports(seed=1)[1]])
    with pytest.raises(ReportError):
        merge_reports([])
