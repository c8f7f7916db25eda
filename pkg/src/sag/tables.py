"""CSV outputs with embedded provenance, and their fixed schemas.

Each file opens with ``# key = value`` comment lines (the resolved plan and
the code version), followed by an ordinary CSV header and rows. Floats are
written with ``repr`` so that reading a file back gives the exact values.
Nothing time-dependent goes in here; see the ``run.log`` sidecar instead.
"""

from __future__ import annotations

import csv
import hashlib
import io
from functools import lru_cache
from pathlib import Path

from sag import __version__

SCHEMAS = {
    "loss": ("stage", "step", "loss"),
    "samples": ("chain", "x0", "x1", "style_label"),
    "summary": ("subject", "style", "w", "r", "T", "mode", "flavor", "subject_alignment",
                "content_alignment", "centroid_x", "centroid_y", "centroid_distance",
                "style_fractions", "n", "seed", "model_calls"),
    "trace": ("step", "k", "k_next", "t_norm", "alpha_bar", "alpha_bar_next", "w_t", "chain",
              "x_before_0", "x_before_1", "eps_c_0", "eps_c_1", "eps_c0_0", "eps_c0_1",
              "eps_null_0", "eps_null_1", "eps_tilde_0", "eps_tilde_1", "noise_0", "noise_1",
              "x_after_0", "x_after_1"),
    "ablation": ("sweep", "flavor", "w", "r", "T", "mode", "subject_alignment", "content_alignment",
                 "n", "seed"),
}


class SchemaError(ValueError):
    pass


@lru_cache(maxsize=None)
def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode() + b"\0" + f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    if hasattr(v, "item"):
        return _cell(v.item())
    return str(v)


def render_csv(kind: str, rows, meta: list[str]) -> str:
    cols = SCHEMAS[kind]
    buf = io.StringIO()
    buf.write(f"# schema = {kind}\n# code_version = {code_version()}\n")
    for line in meta:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in rows:
        missing = set(cols) - set(row)
        if missing:
            raise SchemaError(f"{kind} row lacks {sorted(missing)}")
        w.writerow([_cell(row[c]) for c in cols])
    return buf.getvalue()


def write_csv(path, kind: str, rows, meta: list[str]) -> None:
    Path(path).write_text(render_csv(kind, rows, meta))


def read_csv(path) -> tuple[dict, list[str], list[dict]]:
    """Return ``(meta, columns, rows)``; values stay strings."""
    meta, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
        elif line:
            body.append(line)
    if not body:
        raise SchemaError(f"{path}: no header row")
    reader = csv.reader(body)
    cols = next(reader)
    rows = []
    for i, r in enumerate(reader):
        if len(r) != len(cols):
            raise SchemaError(f"{path}: row {i} has {len(r)} fields, expected {len(cols)}")
        rows.append(dict(zip(cols, r)))
    return meta, cols, rows


def validate(path) -> str:
    """Check a CSV against the schema it declares; returns the schema name."""
    meta, cols, _ = read_csv(path)
    kind = meta.get("schema")
    if kind not in SCHEMAS:
        raise SchemaError(f"{path}: unknown schema {kind!r}")
    if tuple(cols) != SCHEMAS[kind]:
        raise SchemaError(f"{path}: columns {cols} do not match schema {kind!r}")
    if "code_version" not in meta:
        raise SchemaError(f"{path}: missing code_version")
    return kind


def floats(row: dict, *names) -> list[float]:
    return [float(row[n]) for n in names]
