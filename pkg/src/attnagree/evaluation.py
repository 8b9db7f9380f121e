"""Classification metrics, correlation sections, uncertainty-ordered curves,
stratified AUC, and the final report artifacts (JSON, CSV, SVG).

Zero-denominator metrics report 0 and carry a flag instead of raising;
single-class subgroups report a null AUC the same way. All file output uses
stable ordering and fixed float formatting so a re-run is byte-identical.
"""

from __future__ import annotations

import json
from typing import Optional, Sequence

import numpy as np

from .stats import pearson, roc_auc

STRATIFY_FRACTIONS = (0.2, 0.4, 0.6, 0.8, 1.0)
REPORT_SCHEMA_VERSION = 1

REPORT_REQUIRED_KEYS = (
    "schema_version", "config_hash", "seeds", "split_metrics",
    "correlations", "cumulative", "stratified",
)


def classification_metrics(predictions: Sequence[int],
                           labels: Sequence[int]) -> dict:
    """Accuracy, precision, recall, F1; zero-denominator metrics come back
    as 0 with their names in the flags list."""
    preds = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(labels, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise ValueError(f"aligned 1D inputs required, "
                         f"got {preds.shape} vs {truth.shape}")
    if preds.size == 0:
        raise ValueError("no predictions to score")
    tp = int(np.sum((preds == 1) & (truth == 1)))
    fp = int(np.sum((preds == 1) & (truth == 0)))
    fn = int(np.sum((preds == 0) & (truth == 1)))
    flags = []

    def guarded(num: float, den: float, name: str) -> float:
        if den == 0:
            flags.append(name)
            return 0.0
        return num / den

    precision = guarded(tp, tp + fp, "precision")
    recall = guarded(tp, tp + fn, "recall")
    f1 = guarded(2.0 * precision * recall, precision + recall, "f1")
    return {
        "accuracy": float(np.mean(preds == truth)),
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "flags": sorted(flags),
    }


def _auc_or_none(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    try:
        return roc_auc(list(labels), list(scores))
    except ValueError:
        return None


def _pearson_or_none(x: Sequence[float], y: Sequence[float]) -> dict:
    try:
        r, p = pearson(list(x), list(y))
        return {"r": r, "p": p, "degenerate": False}
    except ValueError:
        return {"r": None, "p": None, "degenerate": True}


def _sorted_by_uncertainty(results, scores: dict) -> list:
    missing = [r.case_id for r in results if r.case_id not in scores]
    if missing:
        raise ValueError(f"no uncertainty score for cases {missing}")
    return sorted(results, key=lambda r: (scores[r.case_id], r.case_id))


def random_baseline(labels: Sequence[int]) -> dict:
    """Expected metrics of uniform random predictions: accuracy 1/2 and
    F1 = prevalence / (prevalence + 1/2), from precision = prevalence and
    recall = 1/2."""
    prevalence = float(np.mean(np.asarray(labels, dtype=np.float64)))
    return {"accuracy": 0.5, "f1": prevalence / (prevalence + 0.5)}


def cumulative_curves(results, scores: dict) -> dict:
    """Prefix accuracy and F1 over cases sorted by ascending uncertainty
    (ties by case_id), plus the constant analytic random baseline."""
    ordered = _sorted_by_uncertainty(results, scores)
    rows = []
    for n in range(1, len(ordered) + 1):
        prefix = ordered[:n]
        metrics = classification_metrics([r.predicted for r in prefix],
                                         [r.label for r in prefix])
        rows.append({"n": n, "accuracy": metrics["accuracy"],
                     "f1": metrics["f1"]})
    base = random_baseline([r.label for r in ordered])
    random_rows = [{"n": n, "accuracy": base["accuracy"], "f1": base["f1"]}
                   for n in range(1, len(ordered) + 1)]
    return {"curve": rows, "random": random_rows}


def stratified_auc(results, scores: dict,
                   fractions: Sequence[float] = STRATIFY_FRACTIONS) -> list:
    """Classifier AUC over the lowest-uncertainty fraction of cases; a
    single-class (or empty) stratum reports a null AUC with a flag."""
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fractions must lie in (0, 1], got {f}")
    ordered = _sorted_by_uncertainty(results, scores)
    rows = []
    for f in fractions:
        kept = ordered[:int(f * len(ordered))]
        auc = _auc_or_none([r.max_prob for r in kept],
                           [r.label for r in kept]) if kept else None
        rows.append({"fraction": f, "auc": auc, "n_cases": len(kept),
                     "degenerate": auc is None})
    return rows


def compare_estimators(results, scores_by_kind: dict) -> dict:
    """Pearson correlation of each estimator's uncertainty scores against
    correctness over the same cases."""
    correctness = [r.correctness for r in results]
    section = {}
    for kind in sorted(scores_by_kind):
        scores = scores_by_kind[kind]
        values = [scores[r.case_id] for r in results]
        section[kind] = _pearson_or_none(values, correctness)
    return section


def split_metrics(results) -> dict:
    metrics = classification_metrics([r.predicted for r in results],
                                     [r.label for r in results])
    auc = _auc_or_none([r.max_prob for r in results],
                       [r.label for r in results])
    metrics["auc"] = auc
    metrics["n_cases"] = len(results)
    return metrics


def agreement_correlations(results, agreements: dict) -> dict:
    """Pearson of alpha_image and alpha_table against correctness."""
    rows = [(agreements[r.case_id], r.correctness) for r in results
            if r.case_id in agreements]
    if not rows:
        raise ValueError("no agreement records for these cases")
    correctness = [c for _, c in rows]
    return {
        "alpha_image": _pearson_or_none(
            [rec.alpha_image for rec, _ in rows], correctness),
        "alpha_table": _pearson_or_none(
            [rec.alpha_table for rec, _ in rows], correctness),
    }


def build_report(results_by_split: dict, agreements: dict,
                 uncertainty_by_kind: dict, config_hash: str,
                 seeds: dict, fractions=STRATIFY_FRACTIONS) -> dict:
    """Assemble the full evaluation structure over test-split results.

    uncertainty_by_kind: {kind: {case_id: score}} on the test split.
    """
    test = results_by_split["test"]
    correlations = dict(agreement_correlations(test, agreements))
    for kind, section in compare_estimators(test, uncertainty_by_kind).items():
        correlations[f"u_{kind}"] = section
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config_hash": config_hash,
        "seeds": dict(seeds),
        "split_metrics": {split: split_metrics(rows)
                          for split, rows in sorted(results_by_split.items())},
        "correlations": correlations,
        "cumulative": {kind: cumulative_curves(test, scores)
                       for kind, scores in sorted(uncertainty_by_kind.items())},
        "stratified": {kind: stratified_auc(test, scores, fractions)
                       for kind, scores in sorted(uncertainty_by_kind.items())},
    }


def validate_report(report: dict) -> None:
    missing = [k for k in REPORT_REQUIRED_KEYS if k not in report]
    if missing:
        raise ValueError(f"report missing keys: {missing}")
    if report["schema_version"] != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema "
                         f"{report['schema_version']!r}")
    n_test = report["split_metrics"]["test"]["n_cases"]
    for kind, curves in report["cumulative"].items():
        if len(curves["curve"]) != n_test or len(curves["random"]) != n_test:
            raise ValueError(f"{kind} curve length != test-split size")
    for split, metrics in report["split_metrics"].items():
        for key in ("accuracy", "precision", "recall", "f1"):
            if not 0.0 <= metrics[key] <= 1.0:
                raise ValueError(f"{split} {key} outside [0, 1]")


# ---- file artifacts ----

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_curve_csv(rows: Sequence[dict], path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("n,accuracy,f1\n")
        for row in rows:
            fh.write(f"{row['n']},{_fmt(row['accuracy'])},{_fmt(row['f1'])}\n")


def write_stratified_csv(rows: Sequence[dict], path,
                         config_hash: str = "") -> None:
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash={config_hash}\n")
        fh.write("fraction,auc,n_cases,degenerate\n")
        for row in rows:
            fh.write(f"{_fmt(row['fraction'])},{_fmt(row['auc'])},"
                     f"{row['n_cases']},{_fmt(row['degenerate'])}\n")


SVG_COLORS = ("#1965b0", "#dc050c", "#4eb265", "#f7ee55", "#882e72")


def svg_line_chart(series: Sequence[tuple], title: str, x_label: str,
                   y_label: str, width: int = 640, height: int = 400) -> str:
    """series: (name, [(x, y), ...]) pairs; y=None points are skipped."""
    pad_l, pad_r, pad_t, pad_b = 56, 16, 32, 44
    points = [(x, y) for _, pts in series for x, y in pts if y is not None]
    if not points:
        raise ValueError("no points to plot")
    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    if y_hi <= y_lo:
        y_hi = y_lo + 1.0
    span_x = x_hi - x_lo
    span_y = y_hi - y_lo
    plot_w = width - pad_l - pad_r
    plot_h = height - pad_t - pad_b

    def sx(x: float) -> float:
        return pad_l + (x - x_lo) / span_x * plot_w

    def sy(y: float) -> float:
        return pad_t + plot_h - (y - y_lo) / span_y * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    # axes with four ticks per side
    parts.append(f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" '
                 f'y2="{pad_t + plot_h}" stroke="black"/>')
    parts.append(f'<line x1="{pad_l}" y1="{pad_t + plot_h}" '
                 f'x2="{pad_l + plot_w}" y2="{pad_t + plot_h}" stroke="black"/>')
    for i in range(5):
        frac = i / 4.0
        tx = x_lo + frac * span_x
        ty = y_lo + frac * span_y
        parts.append(f'<text x="{sx(tx):.1f}" y="{pad_t + plot_h + 18}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{tx:.2f}</text>')
        parts.append(f'<text x="{pad_l - 6}" y="{sy(ty) + 4:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{ty:.2f}</text>')
    parts.append(f'<text x="{pad_l + plot_w / 2:.1f}" y="{height - 8}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12">{x_label}</text>')
    parts.append(f'<text x="14" y="{pad_t + plot_h / 2:.1f}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="12" transform="rotate(-90 14 '
                 f'{pad_t + plot_h / 2:.1f})">{y_label}</text>')
    for idx, (name, pts) in enumerate(series):
        color = SVG_COLORS[idx % len(SVG_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts
                          if y is not None)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        legend_y = pad_t + 14 + 16 * idx
        parts.append(f'<line x1="{pad_l + plot_w - 110}" y1="{legend_y - 4}" '
                     f'x2="{pad_l + plot_w - 90}" y2="{legend_y - 4}" '
                     f'stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{pad_l + plot_w - 84}" y="{legend_y}" '
                     f'font-family="sans-serif" font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(report: dict, out_dir) -> list:
    """report.json plus curve/stratified CSVs and SVG charts; returns the
    written paths."""
    validate_report(report)
    config_hash = report["config_hash"]
    paths = []

    def emit(name: str, text: str):
        path = out_dir / name
        with open(path, "w") as fh:
            fh.write(text)
        paths.append(path)

    emit("report.json",
         json.dumps(report, indent=2, sort_keys=True) + "\n")

    for kind, curves in sorted(report["cumulative"].items()):
        write_curve_csv(curves["curve"], out_dir / f"cumulative_{kind}.csv",
                        config_hash)
        paths.append(out_dir / f"cumulative_{kind}.csv")
    any_kind = next(iter(sorted(report["cumulative"])))
    write_curve_csv(report["cumulative"][any_kind]["random"],
                    out_dir / "cumulative_random.csv", config_hash)
    paths.append(out_dir / "cumulative_random.csv")

    for kind, rows in sorted(report["stratified"].items()):
        write_stratified_csv(rows, out_dir / f"stratified_{kind}.csv",
                             config_hash)
        paths.append(out_dir / f"stratified_{kind}.csv")

    for metric in ("accuracy", "f1"):
        series = [(kind, [(row["n"], row[metric]) for row in curves["curve"]])
                  for kind, curves in sorted(report["cumulative"].items())]
        series.append(("random",
                       [(row["n"], row[metric])
                        for row in report["cumulative"][any_kind]["random"]]))
        emit(f"cumulative_{metric}.svg",
             svg_line_chart(series, f"Cumulative {metric} by retained cases",
                            "retained cases", metric))
    series = [(kind, [(row["fraction"], row["auc"]) for row in rows])
              for kind, rows in sorted(report["stratified"].items())]
    emit("stratified_auc.svg",
         svg_line_chart(series, "AUC by retained fraction",
                        "retained fraction", "AUC"))
    return paths
