"""Canonical JSON stage reports and their merged summary.

Reports are written with sorted keys and a fixed layout so two runs under
one configuration compare byte for byte. Wall-clock times go to a sidecar
``*.timing.json`` file and never into the report itself.
"""

from __future__ import annotations

import json
from pathlib import Path

from . import __version__


class ReportError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def stage_report(stage: str, cfg, body: dict) -> dict:
    return {"stage": stage, "version": __version__, "config_hash": cfg.hash, "config": cfg.echo(), **body}


def write_report(path, report: dict, wall_time: float | None = None) -> Path:
    path = Path(path)
    path.write_text(canonical_json(report), encoding="utf-8")
    if wall_time is not None:
        timing = path.with_name(path.stem + ".timing.json")
        timing.write_text(canonical_json({"stage": report.get("stage"), "wall_time": wall_time}), encoding="utf-8")
    return path


def read_report(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"cannot read report {path}: {exc}") from exc
    if not isinstance(data, dict) or "version" not in data or "config_hash" not in data:
        raise ReportError(f"{path} is not a stage report")
    return data


def merge_reports(reports: list[dict]) -> dict:
    """One summary keyed by stage; a summary may itself be merged again."""
    if not reports:
        raise ReportError("nothing to merge")
    stages: dict[str, dict] = {}
    for rep in reports:
        if rep["version"] != __version__:
            raise ReportError(f"report version {rep['version']} does not match {__version__}")
        parts = rep["stages"].values() if "stages" in rep else [rep]
        for part in parts:
            stages[part["stage"]] = part
    hashes = {rep["config_hash"] for rep in reports}
    if len(hashes) != 1:
        raise ReportError("reports come from different configurations: " + ", ".join(sorted(hashes)))
    return {"version": __version__, "config_hash": hashes.pop(), "stages": stages}


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def summary_rows(summary: dict) -> list[tuple[str, str, str]]:
    rows = []
    for stage in sorted(summary["stages"]):
        rep = summary["stages"][stage]
        for key in ("metrics", "infected_metrics", "before", "after"):
            block = rep.get(key)
            if not isinstance(block, dict):
                continue
            if "clean_accuracy" in block:
                rows.append((stage, f"{key}.clean_accuracy", _fmt(block["clean_accuracy"])))
            for name, val in sorted(block.get("attack_success_rate", {}).items()):
                rows.append((stage, f"{key}.asr.{name}", _fmt(val)))
        det = rep.get("detection")
        if isinstance(det, dict):
            rows.append((stage, "flagged", ",".join(map(str, det["flagged"])) or "-"))
            for v in det["labels"]:
                rows.append((stage, f"prob[{v['label']}]", _fmt(v["prob"])))
            if "false_positive_rate" in det:
                rows.append((stage, "false_positive_rate", _fmt(det["false_positive_rate"])))
        for key in ("rounds", "resolved", "poisoned_count"):
            if key in rep:
                rows.append((stage, key, _fmt(rep[key])))
    return rows


def summary_markdown(summary: dict) -> str:
    lines = ["# Run summary", "", f"version {summary['version']}, config `{summary['config_hash'][:16]}`", "",
             "| stage | quantity | value |", "|---|---|---|"]
    lines += [f"| {s} | {q} | {v} |" for s, q, v in summary_rows(summary)]
    return "\n".join(lines) + "\n"
