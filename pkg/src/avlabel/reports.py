"""Normalized scan-report data model and streaming reader.

Input files are UTF-8 line-delimited records, one scan report per line:

    {"sha256": "<hex>", "scans": {"<av>": {"detected": true, "result": "..."}}}

The reader never holds more than one report in memory.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterator, Optional

from .errors import CorpusError, MalformedRecordError

_HASH_RE = re.compile(r"^[0-9a-f]{64}$")

# The malformed-ratio abort only kicks in past this many lines, so a tiny
# hand-written file with one bad line still yields its good records.
_RATIO_CHECK_MIN_LINES = 20
_MAX_MALFORMED_RATIO = 0.10


@dataclass(frozen=True)
class AVResult:
    """One AV product's outcome for one file."""

    detected: bool
    detection: Optional[str] = None


@dataclass(frozen=True)
class ScanReport:
    """One file's hash plus per-AV detection outcomes."""

    file_hash: str
    scans: dict  # av_name -> AVResult, insertion-ordered
    num_detected: int
    num_scanned: int


def normalize_report(raw, vt_format: bool = False) -> ScanReport:
    """Turn a generic key-value record into a ScanReport.

    Detection strings are stripped of surrounding whitespace; labels attached
    to detected=false entries are dropped. With vt_format=True the reader also
    accepts records that nest results under data.attributes (v3-style) or use
    a "result"-only per-AV object.
    """
    if not isinstance(raw, dict):
        raise MalformedRecordError("record is not an object")

    if vt_format and "data" in raw:
        attrs = raw.get("data", {}).get("attributes", {})
        file_hash = attrs.get("sha256")
        scans_raw = attrs.get("last_analysis_results")
    else:
        file_hash = raw.get("sha256")
        scans_raw = raw.get("scans")

    if not isinstance(file_hash, str):
        raise MalformedRecordError("missing sha256 hash")
    file_hash = file_hash.strip().lower()
    if not _HASH_RE.match(file_hash):
        raise MalformedRecordError(f"invalid sha256 hash: {file_hash!r}")
    if not isinstance(scans_raw, dict):
        raise MalformedRecordError("missing per-AV results map")

    scans = {}
    num_detected = 0
    for av_name, entry in scans_raw.items():
        if not isinstance(entry, dict):
            raise MalformedRecordError(f"result for AV {av_name!r} is not an object")
        label = entry.get("result")
        if "detected" in entry:
            detected = bool(entry["detected"])
        else:
            # v3-style records carry no boolean; a non-null result means detected
            detected = label is not None
        if detected:
            num_detected += 1
        if not detected:
            label = None
        if isinstance(label, str):
            label = label.strip() or None
        elif label is not None:
            raise MalformedRecordError(f"label for AV {av_name!r} is not a string")
        scans[str(av_name)] = AVResult(detected=detected, detection=label)

    return ScanReport(
        file_hash=file_hash,
        scans=scans,
        num_detected=num_detected,
        num_scanned=len(scans),
    )


def report_to_record(report: ScanReport) -> dict:
    """Serialize a ScanReport back to the line-delimited input schema."""
    return {
        "sha256": report.file_hash,
        "scans": {
            av: {"detected": res.detected, "result": res.detection}
            for av, res in report.scans.items()
        },
    }


class ReportReader:
    """Iterates ScanReports from a line-delimited file in constant memory.

    Malformed lines are skipped and counted; if more than 10% of a
    non-trivial file is malformed the iterator raises CorpusError once the
    stream ends. Blank lines are ignored.
    """

    def __init__(self, path, vt_format: bool = False):
        self.path = path
        self.vt_format = vt_format
        self.yielded = 0
        self.skipped = 0
        self.total = 0

    def __iter__(self) -> Iterator[ScanReport]:
        try:
            fd = open(self.path, "r", encoding="utf-8", errors="replace")
        except OSError as exc:
            raise CorpusError(f"cannot read {self.path}: {exc}") from exc
        with fd:
            for line in fd:
                line = line.strip()
                if not line:
                    continue
                self.total += 1
                try:
                    raw = json.loads(line)
                    report = normalize_report(raw, vt_format=self.vt_format)
                except (ValueError, MalformedRecordError):
                    self.skipped += 1
                    continue
                self.yielded += 1
                yield report
        if (
            self.total >= _RATIO_CHECK_MIN_LINES
            and self.skipped > _MAX_MALFORMED_RATIO * self.total
        ):
            raise CorpusError(
                f"{self.skipped} of {self.total} lines malformed "
                f"(>{_MAX_MALFORMED_RATIO:.0%}) in {self.path}"
            )


def load_reports(path, vt_format: bool = False) -> ReportReader:
    """Lazy sequence of ScanReports from `path`, in file order."""
    return ReportReader(path, vt_format=vt_format)
