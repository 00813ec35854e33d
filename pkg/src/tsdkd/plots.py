"""SVG figures with CSV twins for metrics streams, entropy profiles and mode fits."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import InvalidInputError  # noqa: E402

LOSS_COMPONENTS = ("loss_indirect", "loss_direct", "loss_em", "loss_total")
PLOT_KINDS = ("metrics", "profile", "mode")

# fixed salt and no timestamp so repeated renders are byte-identical
plt.rcParams["svg.hashsalt"] = "tsdkd"
_SVG_META = {"Date": None, "Creator": None}


class NoDataError(InvalidInputError):
    pass


def read_metrics(path) -> list[dict]:
    records = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{lineno}: malformed metrics line ({exc.msg})") from None
            if not isinstance(rec, dict) or "step" not in rec:
                raise InvalidInputError(f"{path}:{lineno}: metrics record lacks a step field")
            records.append(rec)
    if not records:
        raise NoDataError(f"{path}: no data")
    return records


def read_csv(path, columns: tuple[str, ...]) -> list[list[float]]:
    rows = []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise NoDataError(f"{path}: no data")
        if tuple(h.strip() for h in header) != columns:
            raise InvalidInputError(f"{path}:1: expected header {','.join(columns)}")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                if len(row) != len(columns):
                    raise ValueError
                rows.append([float(x) for x in row])
            except ValueError:
                raise InvalidInputError(f"{path}:{lineno}: malformed row {row!r}") from None
    if not rows:
        raise NoDataError(f"{path}: no data")
    return rows


def _write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def plot_metrics(records: list[dict], out_dir: Path) -> list[Path]:
    """One loss curve per recorded component plus the total."""
    written = []
    for comp in LOSS_COMPONENTS:
        pts = [(r["step"], r.get(comp)) for r in records]
        pts = [(s, v) for s, v in pts if v is not None and math.isfinite(v)]
        if not pts:
            continue
        stem = out_dir / comp
        written.append(_write_csv(stem.parent / (stem.name + ".csv"), ["step", comp], pts))
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.plot([p[0] for p in pts], [p[1] for p in pts], lw=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(comp)
        fig.tight_layout()
        written.append(_save(fig, stem.parent / (stem.name + ".svg")))
    return written


def plot_profile(rows: list[list[float]], out_dir: Path) -> list[Path]:
    stem = out_dir / "entropy_profile"
    csv_path = _write_csv(stem.parent / (stem.name + ".csv"), ["position", "mean_entropy", "count"],
                          [[int(r[0]), r[1], int(r[2])] for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot([r[0] for r in rows], [r[1] for r in rows], marker=".", lw=1.2)
    ax.set_xlabel("response position")
    ax.set_ylabel("mean entropy (nats)")
    ax.set_xlim(-0.5, len(rows) - 0.5)
    fig.tight_layout()
    return [csv_path, _save(fig, stem.parent / (stem.name + ".svg"))]


def plot_mode(rows: list[list[float]], out_dir: Path, stem_name: str = "mode_demo") -> list[Path]:
    stem = out_dir / stem_name
    csv_path = _write_csv(stem.parent / (stem.name + ".csv"), ["bin", "teacher_mass", "student_mass"],
                          [[int(r[0]), r[1], r[2]] for r in rows])
    x = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(x, [r[1] for r in rows], width=0.9, alpha=0.5, label="teacher")
    ax.bar(x, [r[2] for r in rows], width=0.5, alpha=0.8, label="student")
    ax.set_xlabel("bin")
    ax.set_ylabel("mass")
    ax.legend(frameon=False)
    fig.tight_layout()
    return [csv_path, _save(fig, stem.parent / (stem.name + ".svg"))]


def emit_plots(path, kind: str, out_dir=None) -> list[Path]:
    """Render ``path`` as ``kind`` into ``out_dir`` (default: ``plots/`` beside the input).

    Output names are fixed per kind; the input file is only read.
    """
    if kind not in PLOT_KINDS:
        raise InvalidInputError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    path = Path(path)
    out = Path(out_dir) if out_dir else path.parent / "plots"
    if kind == "metrics":
        data = read_metrics(path)
        names = [c + ext for c in LOSS_COMPONENTS for ext in (".csv", ".svg")]
    elif kind == "profile":
        data = read_csv(path, ("position", "mean_entropy", "count"))
        names = ["entropy_profile.csv", "entropy_profile.svg"]
    else:
        data = read_csv(path, ("bin", "teacher_mass", "student_mass"))
        names = ["mode_demo.csv", "mode_demo.svg"]
    if any((out / n).resolve() == path.resolve() for n in names):
        raise InvalidInputError(f"{path}: output would overwrite the input; choose another --out")
    out.mkdir(parents=True, exist_ok=True)
    if kind == "metrics":
        return plot_metrics(data, out)
    if kind == "profile":
        return plot_profile(data, out)
    return plot_mode(data, out)
