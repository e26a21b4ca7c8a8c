"""File formats: TSPH v1 datasets, JSON-lines metrics, atomic writes."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from hardtsp.errors import FormatError
from hardtsp.tsp import TspInstance

TSPH_MAGIC = "TSPH 1"
METRICS_VERSION = 1


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def format_instance(instance: TspInstance) -> str:
    lines = [TSPH_MAGIC, f"n {instance.n}"]
    lines += [f"{_fmt(x)} {_fmt(y)}" for x, y in instance.coords]
    return "\n".join(lines) + "\n"


def format_dataset(instances, header: dict | None = None) -> str:
    out = []
    for key, value in (header or {}).items():
        out.append(f"# {key} = {value}\n")
    out.append("\n".join(format_instance(inst) for inst in instances))
    return "".join(out)


def write_dataset(path, instances, header: dict | None = None) -> None:
    atomic_write(path, format_dataset(instances, header))


def parse_dataset(text: str, projected: bool | None = None):
    """Parse TSPH v1 text into ``(instances, header)``.

    ``projected=None`` marks an instance projected when all of its
    coordinates already lie in [0, 1].
    """
    header = {}
    instances = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                header[key.strip()] = value.strip()
            i += 1
            continue
        if line != TSPH_MAGIC:
            raise FormatError(f"line {i + 1}: expected '{TSPH_MAGIC}', got {line!r}")
        try:
            tag, count = lines[i + 1].split()
            if tag != "n":
                raise ValueError
            n = int(count)
            rows = [lines[i + 2 + k].split() for k in range(n)]
            coords = np.array([[float(a), float(b)] for a, b in rows], dtype=np.float64)
        except (IndexError, ValueError) as exc:
            raise FormatError(f"malformed instance record starting at line {i + 1}") from exc
        flag = bool(np.all((coords >= 0) & (coords <= 1))) if projected is None else projected
        instances.append(TspInstance(coords, projected=flag))
        i += 2 + n
    return instances, header


def read_dataset(path, projected: bool | None = None):
    return parse_dataset(Path(path).read_text(encoding="utf-8"), projected)


def metrics_line(record: dict) -> str:
    return json.dumps({"v": METRICS_VERSION, **record}, sort_keys=False) + "\n"


def read_metrics(path) -> list[dict]:
    records = []
    for k, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}:{k + 1}: invalid JSON") from exc
        if rec.get("v") != METRICS_VERSION:
            raise FormatError(f"{path}:{k + 1}: unsupported metrics version {rec.get('v')!r}")
        records.append(rec)
    return records
