import csv
import json
import logging
import math
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .models import ExperimentConfig, RunResult

logger = logging.getLogger(__name__)

VERSIONED_PACKAGES = ("numpy", "scipy", "pydantic", "python-dotenv", "jinja2")


def clean(value: Any) -> Any:
	"""JSON-safe copy: numpy scalars unwrapped, non-finite floats spelled out."""
	if isinstance(value, dict):
		return {str(k): clean(v) for k, v in value.items()}
	if isinstance(value, (list, tuple)):
		return [clean(v) for v in value]
	if isinstance(value, np.ndarray):
		return clean(value.tolist())
	if isinstance(value, np.generic):
		value = value.item()
	if isinstance(value, complex):
		return {"real": clean(value.real), "imag": clean(value.imag)}
	if isinstance(value, float) and not math.isfinite(value):
		return "nan" if math.isnan(value) else ("inf" if value > 0 else "-inf")
	return value


def dumps(data: Any) -> str:
	return json.dumps(clean(data), sort_keys=True, indent=2) + "\n"


def write_report(result: RunResult, out_dir: Path) -> Path:
	path = out_dir / "report.json"
	document = {
		"experiment": result.experiment,
		"violations": result.violations,
		"report": result.report,
	}
	path.write_text(dumps(document))
	return path


def _columns(rows: list[dict[str, Any]]) -> list[str]:
	columns: list[str] = []
	for row in rows:
		for key in row:
			if key not in columns:
				columns.append(key)
	return columns


def _cell(value: Any) -> Any:
	value = clean(value)
	if value is None:
		return ""
	if isinstance(value, (dict, list)):
		return json.dumps(value, sort_keys=True)
	if isinstance(value, float):
		return repr(value)
	return value


def write_tables(result: RunResult, out_dir: Path) -> list[Path]:
	table_dir = out_dir / "tables"
	table_dir.mkdir(parents=True, exist_ok=True)
	paths = []
	for name in sorted(result.tables):
		rows = result.tables[name]
		path = table_dir / f"{name}.csv"
		with path.open("w", newline="") as handle:
			writer = csv.DictWriter(handle, fieldnames=_columns(rows), lineterminator="\n")
			writer.writeheader()
			for row in rows:
				writer.writerow({key: _cell(value) for key, value in row.items()})
		paths.append(path)
	return paths


def package_versions() -> dict[str, Optional[str]]:
	versions = {}
	for package in VERSIONED_PACKAGES:
		try:
			versions[package] = metadata.version(package)
		except metadata.PackageNotFoundError:
			versions[package] = None
	return versions


def write_manifest(config: ExperimentConfig, out_dir: Path) -> Path:
	from . import __version__

	path = out_dir / "manifest.json"
	manifest = {
		"config": config.model_dump(mode="json"),
		"seed": config.seed,
		"paralab": __version__,
		"versions": package_versions(),
		"created_at": datetime.now(timezone.utc).isoformat(),
	}
	path.write_text(dumps(manifest))
	return path


def write_run(config: ExperimentConfig, result: RunResult, out_dir: Path) -> list[Path]:
	"""Write report.json, manifest.json and, when enabled, the CSV tables and summary."""
	out_dir.mkdir(parents=True, exist_ok=True)
	written = [write_report(result, out_dir), write_manifest(config, out_dir)]
	if config.output.tables:
		written.extend(write_tables(result, out_dir))
	if config.output.summary:
		from .summary import write_summary

		written.append(write_summary(config, result, out_dir))
	logger.info("wrote %d files to %s", len(written), out_dir)
	return written


def write_replay(experiment: str, row_id: int, row: dict[str, Any], out_dir: Path) -> Path:
	replay_dir = out_dir / "replay"
	replay_dir.mkdir(parents=True, exist_ok=True)
	path = replay_dir / f"{experiment}-{row_id}.json"
	path.write_text(dumps({"experiment": experiment, "row_id": row_id, "row": row}))
	return path


def load_report(out_dir: Path) -> dict[str, Any]:
	return json.loads((out_dir / "report.json").read_text())


def load_table(out_dir: Path, name: str) -> list[dict[str, str]]:
	with (out_dir / "tables" / f"{name}.csv").open(newline="") as handle:
		return list(csv.DictReader(handle))
