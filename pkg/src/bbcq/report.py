"""Deterministic JSON run reports.

A report byte-reproduces across runs of the same command except for the
``wall_clock_seconds`` field; every other value is a pure function of the
inputs. The schema ships with the package (``bbcq/schema/report.schema.json``).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources

from . import __version__
from .calibration import CalibResult

SCHEMA_VERSION = 1


def report_schema() -> dict:
    """The published report schema as a dict."""
    ref = resources.files("bbcq").joinpath("schema/report.schema.json")
    return json.loads(ref.read_text(encoding="utf-8"))


@dataclass
class Report:
    command: str
    config: dict
    fp_loss: float | None = None
    fp_block_inputs: bool | None = None
    softmax_max: list[float] | None = None
    sites: list[dict] | None = None
    metrics: list[dict] | None = None
    wall_clock_seconds: float = 0.0
    tool_version: str = field(default=__version__)

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_version": self.tool_version,
            "command": self.command,
            "config": self.config,
            "fp_loss": self.fp_loss,
            "fp_block_inputs": self.fp_block_inputs,
            "softmax_max": self.softmax_max,
            "sites": self.sites,
            "metrics": self.metrics,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"


def write_report(report: Report, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(report.dumps())


def site_summaries(result: CalibResult) -> list[dict]:
    """Per-site rows for a calibration report: params plus a trace digest."""
    rows = []
    for site in result.sites():
        params = result.params[site]
        trace = result.traces.get(site, [])
        chosen = result.chosen_index.get(site)
        if trace:
            digest = hashlib.sha256(
                json.dumps(trace, sort_keys=True).encode("utf-8")).hexdigest()
            trace_digest = {"rounds": len(trace), "candidates": len(trace[-1]),
                            "sha256": digest}
            chosen_metric = trace[-1][chosen]
        else:
            trace_digest = None
            chosen_metric = None
        rows.append({
            "site_id": site.site_id,
            "scheme": params.scheme,
            "bits": params.bits,
            "scale": params.scale,
            "zero_point": params.zero_point,
            "calibrated_max": params.calibrated_max,
            "threshold": params.threshold,
            "searched": bool(trace),
            "chosen_index": chosen,
            "chosen_metric": chosen_metric,
            "trace_digest": trace_digest,
        })
    return rows
