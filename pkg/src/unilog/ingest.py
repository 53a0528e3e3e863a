"""Loading raw log datasets and labels, windowing streams into fixed-length
sequences, and the seeded synthetic corpus generator used for desk-scale runs.
"""

from __future__ import annotations

import csv
import random
import re
import warnings
from dataclasses import dataclass, field

BLOCK_ID_PATTERN = re.compile(r"blk_-?[0-9]+")

NORMAL_LABELS = {"normal", "no_failure", "-", "0", "false"}
ANOMALOUS_LABELS = {"anomaly", "anomalous", "failure", "abnormal", "1", "true"}


class DataError(ValueError):
    """Malformed input data (labels, CSV rows, window parameters)."""


@dataclass(frozen=True)
class LogRecord:
    line_index: int
    raw_text: str
    source_id: str


@dataclass
class LabeledWindow:
    records: list[LogRecord]
    label: object = None

    def __post_init__(self):
        if not self.records:
            raise DataError("a window must contain at least one record")


def load_log_lines(path, source_id: str) -> list[LogRecord]:
    """One LogRecord per non-empty line, in file order; empty lines skipped.

    Non-decodable bytes are replaced with U+FFFD and reported as a warning.
    """
    with open(path, "rb") as f:
        data = f.read()
    records = []
    bad = 0
    for i, raw in enumerate(data.split(b"\n")):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError:
            text = raw.decode("utf-8", errors="replace")
            bad += 1
        if text.strip():
            records.append(LogRecord(line_index=i, raw_text=text, source_id=source_id))
    if bad:
        warnings.warn(f"{path}: replaced undecodable bytes on {bad} line(s)")
    return records


def window_logs(records: list[LogRecord], window: int = 20, stride: int = 20) -> list[LabeledWindow]:
    """Fixed windows starting at 0, stride, 2*stride, ...; a non-empty partial
    final window is kept."""
    if window < 1 or stride < 1:
        raise DataError("window and stride must be >= 1")
    out = []
    for start in range(0, len(records), stride):
        chunk = records[start:start + window]
        if chunk:
            out.append(LabeledWindow(records=chunk))
        if start + window >= len(records):
            break
    return out


def load_labels(path, scheme: str = "per_line") -> dict[str, str]:
    """Two-column CSV key,label -> {key: 'normal'|'anomalous'}; header optional."""
    if scheme not in ("per_line", "per_block"):
        raise DataError(f"unknown label scheme {scheme!r}")
    labels: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row_no, row in enumerate(csv.reader(f)):
            if not row or not any(cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{row_no + 1}: expected key,label got {row!r}")
            key, raw = row[0].strip(), row[1].strip().lower()
            if row_no == 0 and raw in ("label", "labels"):
                continue  # header row
            if raw in NORMAL_LABELS:
                label = "normal"
            elif raw in ANOMALOUS_LABELS:
                label = "anomalous"
            else:
                raise DataError(f"{path}:{row_no + 1}: unknown label {row[1]!r}")
            if key in labels:
                raise DataError(f"{path}:{row_no + 1}: duplicate key {key!r}")
            labels[key] = label
    return labels


def extract_block_id(text: str) -> str | None:
    m = BLOCK_ID_PATTERN.search(text)
    return m.group(0) if m else None


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    n_templates: int = 10
    n_lines: int = 1000
    anomaly_rate: float = 0.05
    rng_seed: int = 42

    def __post_init__(self):
        if self.n_templates < 1 or self.n_lines < 1:
            raise DataError("n_templates and n_lines must be positive")
        if not 0.0 <= self.anomaly_rate <= 1.0:
            raise DataError("anomaly_rate must lie in [0, 1]")


# Normal templates: {n} is a small integer field, {x} a hex id field.
# Each template carries its fixed keyword-triple summary.
_NORMAL_TEMPLATES = [
    ("interface eth{n} status changed to up", ("interface", "status", "up")),
    ("link on port {n} is up at speed {n} mbps", ("link", "port", "speed")),
    ("dfs block blk_{n} served to client {x}", ("block", "served", "client")),
    ("session {x} opened for user node{n}", ("session", "opened", "user")),
    ("heartbeat from node{n} received in {n} ms", ("heartbeat", "node", "received")),
    ("vlan {n} configuration applied on switch {n}", ("vlan", "configuration", "switch")),
    ("packet queue depth {n} reported on eth{n}", ("packet", "queue", "depth")),
    ("kernel scheduler tick {n} completed", ("kernel", "scheduler", "completed")),
    ("temperature sensor {n} reads {n} degrees", ("temperature", "sensor", "reads")),
    ("backup job {n} finished with {n} files", ("backup", "job", "finished")),
    ("cache flush of {n} blocks finished on node{n}", ("cache", "flush", "blocks")),
    ("replica {n} of blk_{n} verified by node{n}", ("replica", "block", "verified")),
    ("router route table updated with {n} entries", ("router", "route", "updated")),
    ("storage volume {n} mounted on host {x}", ("storage", "volume", "mounted")),
    ("client {x} authenticated for service {n}", ("client", "authenticated", "service")),
]

_ANOMALY_TEMPLATES = [
    ("LocalFaultAlarm_clear raised on interface eth{n}", ("fault", "alarm", "interface")),
    ("disk failure imminent on node{n} sector {x}", ("disk", "failure", "sector")),
    ("watchdog timeout expired for process {n}", ("watchdog", "timeout", "expired")),
    ("fatal checksum mismatch detected in blk_{n}", ("fatal", "checksum", "mismatch")),
    ("unauthorized access denied for client {x}", ("unauthorized", "access", "denied")),
]


def _fill(template: str, rng: random.Random) -> str:
    out = []
    i = 0
    while i < len(template):
        if template.startswith("{n}", i):
            out.append(str(rng.randrange(1, 10000)))
            i += 3
        elif template.startswith("{x}", i):
            out.append(f"{rng.getrandbits(32):08x}")
            i += 3
        else:
            out.append(template[i])
            i += 1
    return "".join(out)


def generate_synthetic_corpus(spec: SyntheticCorpusSpec):
    """Deterministic synthetic log corpus.

    Returns (records, labels, summaries): labels maps str(line_index) to
    normal/anomalous, summaries maps str(line_index) to that line's template
    keyword triple. Normal and anomalous lines use disjoint template sets.
    """
    if spec.n_templates > len(_NORMAL_TEMPLATES):
        raise DataError(f"at most {len(_NORMAL_TEMPLATES)} normal templates available")
    rng = random.Random(spec.rng_seed)
    normal = _NORMAL_TEMPLATES[:spec.n_templates]
    records, labels, summaries = [], {}, {}
    for i in range(spec.n_lines):
        if rng.random() < spec.anomaly_rate:
            tpl, summary = _ANOMALY_TEMPLATES[rng.randrange(len(_ANOMALY_TEMPLATES))]
            label = "anomalous"
        else:
            tpl, summary = normal[rng.randrange(len(normal))]
            label = "normal"
        records.append(LogRecord(line_index=i, raw_text=_fill(tpl, rng), source_id="synthetic"))
        labels[str(i)] = label
        summaries[str(i)] = list(summary)
    return records, labels, summaries
