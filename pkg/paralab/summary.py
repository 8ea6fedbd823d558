from pathlib import Path
from typing import Any

from jinja2 import Template

from .models import ExperimentConfig, RunResult

# Markdown digest written next to report.json
SUMMARY_TEMPLATE = """\
# {{ config.name }}

- experiment: `{{ result.experiment }}`
- seed: {{ config.seed }}
- space: {{ info.space.kind }} with {{ info.space.n }} points (h = {{ "%.3g"|format(info.space.scale_h) }})
- operator: {{ info.operator }} ({{ info.calculus_path }} calculus)
- order D = {{ info.D }}, nu = {{ "%.3f"|format(info.nu) }}
- quadrature: {{ info.grid.nodes }} nodes on [{{ "%.3g"|format(info.grid.t_min) }}, {{ "%.3g"|format(info.grid.t_max) }}]
{% if result.violations %}
**{{ result.violations }} assumption violation(s)**
{% endif %}
{% for table in tables %}
## {{ table.name }}

{% if table.header %}
| {{ table.header|join(" | ") }} |
|{% for _ in table.header %} --- |{% endfor %}

{% for cells in table.cells %}
| {{ cells|join(" | ") }} |
{% endfor %}
{% if table.hidden %}
_{{ table.hidden }} more row(s) in tables/{{ table.name }}.csv_
{% endif %}
{% else %}
_no rows_
{% endif %}

{% endfor %}
"""

MAX_ROWS = 40


def _cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return f"{value:.4g}"
    return str(value)


def _table(name: str, rows: list[dict[str, Any]], max_rows: int) -> dict[str, Any]:
    header: list[str] = []
    for row in rows:
        header.extend(key for key in row if key not in header)
    cells = [[_cell(row.get(key)) for key in header] for row in rows[:max_rows]]
    return {"name": name, "header": header, "cells": cells, "hidden": max(len(rows) - max_rows, 0)}


def render_summary(config: ExperimentConfig, result: RunResult, max_rows: int = MAX_ROWS) -> str:
    template = Template(SUMMARY_TEMPLATE, trim_blocks=True, lstrip_blocks=True)
    return template.render(
        config=config,
        result=result,
        info=result.report,
        tables=[_table(name, rows, max_rows) for name, rows in sorted(result.tables.items())],
    )


def write_summary(config: ExperimentConfig, result: RunResult, out_dir: Path) -> Path:
    path = out_dir / "summary.md"
    path.write_text(render_summary(config, result))
    return path
