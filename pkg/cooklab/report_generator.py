"""Metric reports: JSON for tools, HTML for people."""

import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from jinja2 import Template


class ReportGenerator:
    """Writes metric reports of evaluations and planning runs."""

    TEMPLATE = """
<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <title>{{ title }}</title>
    <style>
        body { font-family: sans-serif; max-width: 960px; margin: 2em auto; color: #222; }
        dl { display: grid; grid-template-columns: max-content auto; gap: 4px 16px; }
        dt { color: #666; }
        dd { margin: 0; font-family: monospace; }
        table { border-collapse: collapse; margin: 1em 0; }
        th, td { text-align: right; padding: 3px 12px; border-bottom: 1px solid #ddd; font-family: monospace; }
        th:first-child, td:first-child { text-align: left; }
        .success { color: #1a7f37; }
        .warning { color: #b35900; }
        .error { color: #c0392b; }
    </style>
</head>
<body>
    <h1>{{ title }}</h1>
    <dl>
        <dt>status</dt><dd class="{{ status_class }}"><b>{{ status_text }}</b></dd>
        <dt>generated</dt><dd>{{ timestamp }}</dd>
        <dt>config hash</dt><dd>{{ config_hash }}</dd>
        <dt>seed</dt><dd>{{ seed }}</dd>
        {% for label, value in stats.items() %}
        <dt>{{ label }}</dt><dd>{{ value }}</dd>
        {% endfor %}
    </dl>

    {% for name, table in metrics.items() %}
    <h2>Metrics: {{ name }}</h2>
    <table>
        <tr><th>metric</th><th>sum</th><th>per point</th></tr>
        {% for metric, values in table.items() %}
        <tr><td>{{ metric }}</td><td>{{ "%.6g"|format(values.sum) }}</td><td>{{ "%.6g"|format(values.mean) }}</td></tr>
        {% endfor %}
    </table>
    {% endfor %}

    {% if records %}
    <h2>Actions</h2>
    <table>
        <tr><th>#</th><th>stage</th><th>tool</th><th>params</th><th>loss before</th><th>loss after</th><th>predicted</th><th>time (s)</th></tr>
        {% for r in records %}
        <tr>
            <td>{{ loop.index }}</td><td>{{ r.stage }}</td><td>{{ r.tool }}</td>
            <td>{% for k, v in r.params.items() %}{{ k }}={{ "%.4f"|format(v) }} {% endfor %}</td>
            <td>{{ "%.4f"|format(r.pre_loss) }}</td><td>{{ "%.4f"|format(r.post_loss) }}</td>
            <td>{{ "%.4f"|format(r.predicted_loss) }}</td><td>{{ "%.2f"|format(r.wall_time) }}</td>
        </tr>
        {% endfor %}
    </table>
    {% endif %}

    <p><small>cooklab, exit code {{ exit_code }}</small></p>
</body>
</html>
"""

    def build_report(
        self,
        metrics: Dict[str, Dict[str, Dict[str, float]]],
        config_hash: str,
        seed: int,
        statistics: Optional[Dict[str, Any]] = None,
        records: Optional[List[Dict[str, Any]]] = None,
        exit_code: int = 0,
    ) -> Dict[str, Any]:
        """Report dictionary; ``metrics`` maps a label to a metric report."""
        return {
            "config_hash": config_hash,
            "seed": seed,
            "generated": datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            "exit_code": exit_code,
            "metrics": metrics,
            "statistics": statistics or {},
            "records": records or [],
        }

    def write_json(self, report: Dict[str, Any], output_path: str) -> str:
        path = Path(output_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(report, indent=2, sort_keys=True), encoding="utf-8")
        return str(path)

    def generate_report(self, report: Dict[str, Any], output_path: str, title: str = "cooklab report") -> str:
        """Render a report dictionary to HTML.

        Args:
            report: Output of ``build_report``
            output_path: Path to save the HTML file
            title: Page heading

        Returns:
            Path to generated report
        """
        exit_code = report.get("exit_code", 0)
        if exit_code == 0:
            status_text, status_class = "SUCCESS", "success"
        elif exit_code == 4:
            status_text, status_class = "INCOMPLETE", "warning"
        else:
            status_text, status_class = f"FAILED (Exit code: {exit_code})", "error"

        stats = {}
        for key, value in report.get("statistics", {}).items():
            stats[key] = f"{value:.4g}" if isinstance(value, float) else value

        html = Template(self.TEMPLATE).render(
            title=title,
            timestamp=report.get("generated", ""),
            config_hash=report.get("config_hash", ""),
            seed=report.get("seed", ""),
            status_text=status_text,
            status_class=status_class,
            stats=stats,
            metrics=report.get("metrics", {}),
            records=report.get("records", []),
            exit_code=exit_code,
        )

        report_path = Path(output_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        with open(report_path, "w", encoding="utf-8") as f:
            f.write(html)
        return str(report_path)
