"""Independent re-checking of a scenario report's embedded assertions."""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import ValidationError

HE_EQUIVALENCE_TOLERANCE = 1e-6


def _recompute(kind: str, observed, threshold) -> bool:
    if kind == "le":
        return observed <= threshold
    if kind == "lt":
        return observed < threshold
    if kind == "ge":
        return observed >= threshold
    if kind == "gt":
        return observed > threshold
    if kind == "eq":
        return observed == threshold
    if kind == "is_true":
        return bool(observed)
    raise ValidationError(f"unknown assertion kind {kind!r}")


def verify_report(report_path: str | Path) -> list[str]:
    """Re-check every embedded assertion; returns a list of failures (empty = pass)."""
    try:
        report = json.loads(Path(report_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot parse report {report_path}: {exc}") from exc

    failures: list[str] = []

    for event in report.get("events", []):
        initiator = event.get("initiator", "")
        if not initiator.startswith("edge:"):
            failures.append(
                f"direction: event seq={event.get('seq')} initiated by {initiator!r}, "
                f"not an edge")

    for name, delta in report.get("he", {}).get("parameter_deltas", {}).items():
        if delta > HE_EQUIVALENCE_TOLERANCE:
            failures.append(f"he-equivalence: parameter delta {delta:g} for {name!r} "
                            f"exceeds {HE_EQUIVALENCE_TOLERANCE:g}")
    for name, delta in report.get("he", {}).get("prediction_deltas", {}).items():
        if delta > HE_EQUIVALENCE_TOLERANCE:
            failures.append(f"he-equivalence: prediction delta {delta:g} for {name!r} "
                            f"exceeds {HE_EQUIVALENCE_TOLERANCE:g}")

    for item in report.get("assertions", []):
        name = item.get("name", "<unnamed>")
        try:
            passed = _recompute(item["kind"], item["observed"], item.get("threshold"))
        except (KeyError, TypeError) as exc:
            failures.append(f"assertion {name}: malformed ({exc!r})")
            continue
        if not passed:
            failures.append(f"assertion {name}: observed {item['observed']!r} fails "
                            f"{item['kind']} {item.get('threshold')!r}")
        elif not item.get("passed", False):
            failures.append(f"assertion {name}: recorded as failed in the report")

    for leak in report.get("privacy_scan", {}).get("leaks", []):
        failures.append(f"privacy: raw id {leak.get('needle')!r} found in payload "
                        f"seq={leak.get('seq')}")

    if report.get("passed") and failures:
        failures.append("report claims passed=true but re-checking found failures")
    if not report.get("passed") and not failures:
        failures.append("report claims passed=false but every assertion re-checks green")
    return failures
