"""Versioned output formats and the checker behind ``validate-logs``.

Every JSON object we emit carries a ``"schema": "<name>/<version>"`` tag.
CSV files are identified by name and checked for their required columns.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

JSON_SCHEMAS: dict[str, set[str]] = {
    "config/1": {"env", "ppo", "train"},
    "metrics/1": {"iteration", "mean_step_reward", "mean_episode_return", "episodes_finished"},
    "returns/1": {"seeds", "expert_mean_return", "zero_action_mean_return", "beats_baseline"},
    "eval-summary/1": {"profile", "episodes", "planner_not_worse_seeds", "command_adapted_episodes", "num_seeds"},
    "planner-step/1": {"seed", "t", "iteration_best", "feasible_fraction", "command", "first_action", "best_dream"},
    "bench/1": {"steps", "median_ms", "p95_ms", "hz_at_median", "config"},
    "ablation/1": {"noise_levels", "variants", "seeds", "returns", "table"},
    "plots/1": {"panels", "images"},
    "checkpoint/1": {"format", "version", "meta", "hyperparams", "nets"},
    "manifest/1": {"command", "files"},
}

EPISODE_COLUMNS = ["mode", "seed", "t", "roll", "pitch", "reward", "joint_exceed",
                   "target_vx", "target_vy", "target_wz", "command_vx", "command_vy", "command_wz"]
CSV_SCHEMAS = {"episodes.csv": "episodes/1"}
CSV_COLUMNS = {"episodes/1": EPISODE_COLUMNS}


class SchemaError(ValueError):
    pass


def tag(schema: str, payload: dict) -> dict:
    if schema not in JSON_SCHEMAS:
        raise KeyError(f"unknown schema {schema}")
    return {"schema": schema, **payload}


def check_object(obj: dict, where: str) -> str:
    schema = obj.get("schema") if isinstance(obj, dict) else None
    if schema not in JSON_SCHEMAS:
        raise SchemaError(f"{where}: missing or unknown schema tag {schema!r}")
    missing = JSON_SCHEMAS[schema] - obj.keys()
    if missing:
        raise SchemaError(f"{where}: {schema} lacks {sorted(missing)}")
    return schema


def check_csv(path: Path) -> str:
    schema = CSV_SCHEMAS[path.name]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty CSV")
        missing = set(CSV_COLUMNS[schema]) - set(header)
        if missing:
            raise SchemaError(f"{path}: missing columns {sorted(missing)}")
        if next(reader, None) is None:
            raise SchemaError(f"{path}: no data rows")
    return schema


def validate_dir(root) -> dict[str, str]:
    """Check every recognised file under ``root``; returns {relative path: schema}."""
    root = Path(root)
    if not root.is_dir():
        raise SchemaError(f"{root} is not a directory")
    seen = {}
    for path in sorted(root.rglob("*")):
        rel = str(path.relative_to(root))
        if path.suffix == ".json":
            seen[rel] = check_object(json.loads(path.read_text()), rel)
        elif path.suffix == ".jsonl":
            schemas = {check_object(json.loads(line), f"{rel}:{i + 1}")
                       for i, line in enumerate(path.read_text().splitlines()) if line.strip()}
            if len(schemas) > 1:
                raise SchemaError(f"{rel}: mixed schemas {sorted(schemas)}")
            seen[rel] = schemas.pop() if schemas else "empty"
        elif path.name in CSV_SCHEMAS:
            seen[rel] = check_csv(path)
    manifest = root / "manifest.json"
    if manifest.exists():
        for name in json.loads(manifest.read_text())["files"]:
            if not (root / name).exists():
                raise SchemaError(f"manifest lists missing file {name}")
    if not seen:
        raise SchemaError(f"{root}: no recognised output files")
    return seen
