"""Report bundles, ASR curves and their CSV / JSON / plot export."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

STATUS_OK = "ok"
STATUS_FAILED = "failed"


class ReportError(ValueError):
    pass


@dataclass(frozen=True)
class ASRCurve:
    """ASR of one attack against one model and space over an epsilon grid."""

    model_id: str
    algorithm: str
    space: str
    norm: str
    eps: tuple[float, ...]
    asr: tuple[float, ...]
    n: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.eps) == len(self.asr) == len(self.n)):
            raise ReportError("eps, asr and n must have equal lengths")
        if any(b <= a for a, b in zip(self.eps, self.eps[1:])):
            raise ReportError(f"eps grid must be strictly increasing, got {self.eps}")
        if any(not (0.0 <= v <= 1.0) for v in self.asr):
            raise ReportError(f"ASR values must lie in [0, 1], got {self.asr}")


@dataclass
class PlotSpec:
    """``kind`` "line": y against x per series; "bar": grouped bars of y per x."""

    name: str
    kind: str
    x: str
    y: str
    series: tuple[str, ...]
    title: str = ""
    ylabel: str = ""
    where: dict = field(default_factory=dict)


@dataclass
class ReportBundle:
    """Rows of one experiment plus the manifest needed to reproduce it.

    Every row carries ``status`` ("ok" or "failed") and ``diagnostics``;
    failed cells keep their key columns and leave values empty.
    """

    template: str
    columns: list[str]
    rows: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    plots: list[PlotSpec] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return all(r.get("status") == STATUS_OK for r in self.rows)

    @property
    def failed(self) -> list[dict]:
        return [r for r in self.rows if r.get("status") != STATUS_OK]

    def ok_rows(self) -> list[dict]:
        return [r for r in self.rows if r.get("status") == STATUS_OK]


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return format(value, ".10g")
    return str(value)


def csv_text(bundle: ReportBundle) -> str:
    if not bundle.rows:
        raise ReportError(f"bundle {bundle.template!r} has no rows")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(bundle.columns)
    for row in bundle.rows:
        writer.writerow([_cell(row.get(c)) for c in bundle.columns])
    return buf.getvalue()


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def manifest_json(manifest: dict) -> str:
    return json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n"


def export_results(bundle: ReportBundle, out_dir, fmt: str = "csv") -> list[Path]:
    """Write ``<template>.csv`` or ``<template>.json`` and ``manifest.json``."""
    if fmt not in ("csv", "json"):
        raise ReportError(f"unknown export format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "csv":
        path = out / f"{bundle.template}.csv"
        path.write_text(csv_text(bundle))
    else:
        if not bundle.rows:
            raise ReportError(f"bundle {bundle.template!r} has no rows")
        path = out / f"{bundle.template}.json"
        rows = [{c: _jsonable(r.get(c)) for c in bundle.columns} for r in bundle.rows]
        path.write_text(json.dumps({"template": bundle.template, "columns": bundle.columns, "rows": rows}, indent=2) + "\n")
    manifest = out / "manifest.json"
    manifest.write_text(manifest_json({**bundle.manifest, "template": bundle.template, "complete": bundle.complete, "failed_cells": len(bundle.failed)}))
    return [path, manifest]


def _series_label(row: dict, series) -> str:
    return " / ".join(str(row[s]) for s in series)


def emit_plots(bundle: ReportBundle, out_dir) -> list[Path]:
    """Render every plot spec of the bundle to PNG (failed cells are skipped)."""
    if not bundle.rows:
        raise ReportError(f"bundle {bundle.template!r} has no rows")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    rows = bundle.ok_rows()
    for spec in bundle.plots:
        groups: dict[str, list[dict]] = {}
        for r in rows:
            if r.get(spec.y) is None or any(r.get(k) != v for k, v in spec.where.items()):
                continue
            groups.setdefault(_series_label(r, spec.series), []).append(r)
        fig, ax = plt.subplots(figsize=(6, 4))
        if spec.kind == "line":
            for label, rs in groups.items():
                rs = sorted(rs, key=lambda r: r[spec.x])
                ax.plot([r[spec.x] for r in rs], [r[spec.y] for r in rs], marker="o", label=label)
            ax.set_xlabel(spec.x)
        elif spec.kind == "bar":
            xs = sorted({str(r[spec.x]) for rs in groups.values() for r in rs})
            width = 0.8 / max(1, len(groups))
            for k, (label, rs) in enumerate(groups.items()):
                values = {str(r[spec.x]): r[spec.y] for r in rs}
                ax.bar([i + k * width for i in range(len(xs))], [values.get(x, 0.0) for x in xs], width, label=label)
            ax.set_xticks([i + 0.4 - width / 2 for i in range(len(xs))])
            ax.set_xticklabels(xs, rotation=30)
        else:
            plt.close(fig)
            raise ReportError(f"unknown plot kind {spec.kind!r}")
        ax.set_ylabel(spec.ylabel or spec.y)
        ax.set_title(spec.title or spec.name)
        if groups:
            ax.legend(fontsize="small")
        fig.tight_layout()
        path = out / f"{spec.name}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths


def curves_from_rows(rows: list[dict], model_id: str, value: str = "asr") -> list[ASRCurve]:
    """Group ``ok`` rows with algo / space / norm / eps / n columns into curves."""
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        if r.get("status", STATUS_OK) == STATUS_OK and r.get(value) is not None:
            groups.setdefault((r["algo"], r["space"], r["norm"]), []).append(r)
    curves = []
    for (algo, space, norm), rs in sorted(groups.items()):
        rs = sorted(rs, key=lambda r: r["eps"])
        curves.append(ASRCurve(model_id, algo, space, norm, tuple(r["eps"] for r in rs), tuple(r[value] for r in rs), tuple(r["n"] for r in rs)))
    return curves


def bundle_dict(bundle: ReportBundle) -> dict:
    return {"template": bundle.template, "columns": bundle.columns, "rows": bundle.rows, "manifest": bundle.manifest, "plots": [asdict(p) for p in bundle.plots]}
