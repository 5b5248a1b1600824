"""Writes the experiment report, ROC point files, LOS ROC plots and predictions."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from . import nn

PLOT_SIZE = 360
PLOT_MARGIN = 50
CURVE_COLOURS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True, default=_jsonable, allow_nan=False) + "\n"


def write_roc_csv(curve, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["fpr", "tpr"])
        for x, y in zip(curve.fpr, curve.tpr):
            w.writerow([repr(float(x)), repr(float(y))])


def roc_svg(curves: dict, title: str) -> str:
    """Render ROC curves as a standalone SVG: one ``<path>`` per curve.

    Axes, the chance diagonal and legend swatches use ``<line>``/``<rect>``
    so the path count equals the curve count.
    """
    s, m = PLOT_SIZE, PLOT_MARGIN
    width, height = s + 2 * m + 170, s + 2 * m

    def pt(x, y):
        return f"{m + x * s:.2f},{m + (1.0 - y) * s:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
        f'<title>{title}</title>',
        f'<rect x="{m}" y="{m}" width="{s}" height="{s}" fill="white" stroke="black"/>',
        f'<line x1="{m}" y1="{m + s}" x2="{m + s}" y2="{m}" stroke="#999" '
        f'stroke-dasharray="4 4"/>',
        f'<text x="{m + s / 2}" y="{height - 12}" text-anchor="middle">False positive rate</text>',
        f'<text x="14" y="{m + s / 2}" text-anchor="middle" '
        f'transform="rotate(-90 14 {m + s / 2})">True positive rate</text>',
        f'<text x="{m + s / 2}" y="{m - 16}" text-anchor="middle">{title}</text>',
    ]
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{m + tick * s:.1f}" y="{m + s + 16}" '
                     f'text-anchor="middle">{tick:.1f}</text>')
        parts.append(f'<text x="{m - 6}" y="{m + (1 - tick) * s + 4:.1f}" '
                     f'text-anchor="end">{tick:.1f}</text>')
    for k, (name, curve) in enumerate(curves.items()):
        colour = CURVE_COLOURS[k % len(CURVE_COLOURS)]
        dash = ' stroke-dasharray="6 3"' if name in ("micro", "macro") else ""
        d = "M" + " L".join(pt(x, y) for x, y in zip(curve.fpr, curve.tpr))
        parts.append(f'<path d="{d}" fill="none" stroke="{colour}" stroke-width="2"{dash}>'
                     f'<title>{name}</title></path>')
        ly = m + 14 + 18 * k
        parts.append(f'<rect x="{m + s + 14}" y="{ly - 9}" width="14" height="4" '
                     f'fill="{colour}"/>')
        parts.append(f'<text x="{m + s + 34}" y="{ly - 3}">{name} (AUC {curve.auc:.3f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_predictions(preds, f) -> None:
    """Write StagePredictions as CSV to an open text stream."""
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["stay_id", "mortality_probability", "mortality_decision", "los_class",
                "los_p0", "los_p1", "los_p2", "los_p3"])
    for p in preds:
        probs = p.los_probabilities or ("", "", "", "")
        w.writerow([p.stay_id, repr(p.mortality_probability), p.mortality_decision,
                    "" if p.los_class is None else p.los_class,
                    *[x if x == "" else repr(x) for x in probs]])


def emit_report(result, out_dir) -> dict:
    """Write every artifact of ``result`` under ``out_dir``; returns name -> path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise OSError(f"output directory {out} is not writable: {e}") from e

    written = {}
    path = out / "report.json"
    path.write_text(dumps_report(result.report), encoding="utf-8")
    written["report"] = path

    for (model, frame), curve in sorted(result.binary_rocs.items()):
        path = out / f"roc_{model}_{frame}.csv"
        write_roc_csv(curve, path)
        written[path.stem] = path

    for frame, curves in sorted(result.multiclass_rocs.items()):
        path = out / f"roc_multiclass_{frame}.svg"
        path.write_text(roc_svg(curves, f"LOS classes, {frame}-hour frame"), encoding="utf-8")
        written[path.stem] = path

    for frame, preds in sorted(result.predictions.items()):
        path = out / f"predictions_{frame}.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            write_predictions(preds, f)
        written[path.stem] = path

    path = out / "folds_manifest.csv"
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["stay_id", "fold", "role"])
        w.writerows(result.fold_manifest)
    written["folds_manifest"] = path

    if result.models:
        model_dir = out / "models"
        model_dir.mkdir(exist_ok=True)
        for (stage, frame), model in sorted(result.models.items()):
            path = model_dir / f"{stage}_{frame}.json"
            nn.save_model(model, path)
            written[f"model_{stage}_{frame}"] = path
    return written
