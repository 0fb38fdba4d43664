"""Write evaluation reports as CSV tables, a text summary and SVG plots.

Every float goes through ``repr`` so that files round-trip exactly and two
runs with identical results produce identical bytes.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from . import metrics, plots
from .errormap import ErrorMap
from .models import HeadId
from .pipeline import EvalReport, EvalRow, QICorrelation, Source, correlate_qi
from .volume import save_grid

METRIC_COLUMNS = ["MaskType", "DSC", "Acc", "Prec", "Recl", "SegDSC", "SegAcc",
                  "ScanId", "Source", "HeadCode", "QI"]
TABLE_COLUMNS = ["MaskType", "DSC", "Acc", "Prec", "Recl", "SegDSC", "SegAcc", "NumMasks"]
SCATTER_COLUMNS = ["ScanId", "Source", "HeadCode", "QI", "SegAcc", "SegDSC"]
HIST_EDGES = [i / 10 for i in range(11)]


def fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def write_metrics_csv(report: EvalReport, path) -> None:
    """One row per mask: error-map scores first, then provenance and QI."""
    rows = []
    for r in report.rows:
        p = r.prediction
        rows.append([r.mask_type, fmt(p.dsc), fmt(p.acc), fmt(p.prec), fmt(p.recl),
                     fmt(r.seg_dsc), fmt(r.seg_acc), r.scan_id, r.source.value, int(r.head), fmt(r.qi)])
    _write_csv(Path(path), METRIC_COLUMNS, rows)


def read_metrics_csv(path) -> EvalReport:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRIC_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = [
            EvalRow(
                scan_id=rec["ScanId"],
                source=Source(rec["Source"]),
                head=HeadId(int(rec["HeadCode"])),
                prediction=metrics.MetricReport(
                    float(rec["DSC"]), float(rec["Acc"]), float(rec["Prec"]), float(rec["Recl"])),
                seg_dsc=float(rec["SegDSC"]),
                seg_acc=float(rec["SegAcc"]),
                qi=float(rec["QI"]),
            )
            for rec in reader
        ]
    return EvalReport(rows)


def write_table_csv(report: EvalReport, path) -> None:
    """Macro-averaged rows per mask type plus the aggregate rows."""
    rows = [[g.mask_type, fmt(g.dsc), fmt(g.acc), fmt(g.prec), fmt(g.recl),
             fmt(g.seg_dsc), fmt(g.seg_acc), g.count] for g in report.groups()]
    _write_csv(Path(path), TABLE_COLUMNS, rows)


def write_scatter_csv(corr: QICorrelation, path) -> None:
    rows = [[s.scan_id, s.source, s.head_code, fmt(s.qi), fmt(s.acc), fmt(s.dsc)] for s in corr.scatter]
    _write_csv(Path(path), SCATTER_COLUMNS, rows)


def summary_text(report: EvalReport, corr: QICorrelation | None) -> str:
    lines = [f"NumMasks: {len(report.rows)}",
             f"NumScans: {len({r.scan_id for r in report.rows})}"]
    if corr is None:
        lines.append("PCC_QI_Acc: nan")
        lines.append("PCC_QI_DSC: nan")
        mae = metrics.mae(report.qi, report.seg_acc) if report.rows else float("nan")
        lines.append(f"MAE_QI_Acc: {fmt(mae)}")
    else:
        lines.append(f"PCC_QI_Acc: {fmt(corr.pcc_qi_acc)}")
        lines.append(f"PCC_QI_DSC: {fmt(corr.pcc_qi_dsc)}")
        lines.append(f"MAE_QI_Acc: {fmt(corr.mae_qi_acc)}")
    lines.append("")
    lines.append("Group means are macro-averages over masks.")
    lines.append(f"{'MaskType':<14}{'DSC':>8}{'Acc':>8}{'Prec':>8}{'Recl':>8}{'SegDSC':>8}{'SegAcc':>8}{'N':>6}")
    for g in report.groups():
        lines.append(f"{g.mask_type:<14}{g.dsc:8.4f}{g.acc:8.4f}{g.prec:8.4f}{g.recl:8.4f}"
                     f"{g.seg_dsc:8.4f}{g.seg_acc:8.4f}{g.count:6d}")
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        key, sep, value = line.partition(":")
        if sep and key in ("PCC_QI_Acc", "PCC_QI_DSC", "MAE_QI_Acc", "NumMasks", "NumScans"):
            out[key] = float(value)
    return out


def write_report(report: EvalReport, out_dir) -> QICorrelation | None:
    """Write the full set of report files into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        corr = correlate_qi(report)
    except ValueError:
        corr = None
    write_metrics_csv(report, out / "metrics.csv")
    write_table_csv(report, out / "table.csv")
    (out / "summary.txt").write_text(summary_text(report, corr))
    if corr is not None:
        write_scatter_csv(corr, out / "scatter.csv")
        groups = [s.head_code for s in corr.scatter]
        (out / "scatter_qi_acc.svg").write_text(plots.scatter_svg(
            [s.qi for s in corr.scatter], [s.acc for s in corr.scatter], groups,
            f"QI vs segmentation accuracy (r={corr.pcc_qi_acc:.3f})", "QI", "Acc"))
        (out / "scatter_qi_dsc.svg").write_text(plots.scatter_svg(
            [s.qi for s in corr.scatter], [s.dsc for s in corr.scatter], groups,
            f"QI vs segmentation DSC (r={corr.pcc_qi_dsc:.3f})", "QI", "DSC"))
    dsc = [r.prediction.dsc for r in report.rows]
    if dsc:
        counts = metrics.histogram(dsc, HIST_EDGES)
        (out / "hist_dsc.svg").write_text(
            plots.histogram_svg(counts, HIST_EDGES, "Error-map prediction DSC", "DSC"))
    return corr


def write_error_map(bits: ErrorMap, spacing, stem, reverse: bool = False) -> None:
    """Save an error map as a u8 volume plus an SVG preview of its middle slice.

    Storage always marks errors with 1; ``reverse`` only affects the preview.
    """
    stem = Path(stem)
    save_grid(bits.to_mask(spacing), stem.with_suffix(".vvol"))
    middle = bits.bits[bits.bits.shape[0] // 2]
    stem.with_suffix(".svg").write_text(plots.slice_svg(np.asarray(middle), reverse=reverse))
