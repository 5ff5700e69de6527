"""report.csv plus dependency-free SVG charts (ROC, precision-recall, PCA scatter)."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


CSV_COLUMNS = ("model", "accuracy", "f1", "mcc", "recall", "precision", "auc")
WIDTH, HEIGHT = 640, 480
MARGIN = dict(left=60, right=20, top=30, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")
CLASS_COLORS = {0: "#1f77b4", 1: "#d62728"}
CLASS_NAMES = {0: "benign", 1: "malware"}


def _num(v: float) -> str:
    return f"{v:.4f}"


def metrics_csv(rows: dict) -> str:
    """``rows`` maps model name -> MetricsRecord, written in insertion order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for name, m in rows.items():
        w.writerow([name] + [_num(getattr(m, c)) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def read_metrics_csv(text: str) -> dict:
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        out[row["model"]] = {c: float(row[c]) for c in CSV_COLUMNS[1:]}
    return out


# --------------------------------------------------------------------------
# SVG


class _Frame:
    """Maps data coordinates onto the plot area of a 640x480 canvas."""

    def __init__(self, xlim, ylim, left=None, width=None):
        self.x0 = MARGIN["left"] if left is None else left
        self.w = (WIDTH - MARGIN["left"] - MARGIN["right"]) if width is None else width
        self.y0 = MARGIN["top"]
        self.h = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
        self.xlim, self.ylim = xlim, ylim

    def px(self, x):
        lo, hi = self.xlim
        return self.x0 + (np.asarray(x, dtype=np.float64) - lo) / ((hi - lo) or 1.0) * self.w

    def py(self, y):
        lo, hi = self.ylim
        return self.y0 + self.h - (np.asarray(y, dtype=np.float64) - lo) / ((hi - lo) or 1.0) * self.h

    def axes(self, xlabel, ylabel, gridlines=5) -> list:
        out = [f'<rect x="{self.x0}" y="{self.y0}" width="{self.w}" height="{self.h}" fill="none" stroke="#000"/>']
        for i in range(gridlines + 1):
            fx = self.x0 + self.w * i / gridlines
            fy = self.y0 + self.h * i / gridlines
            vx = self.xlim[0] + (self.xlim[1] - self.xlim[0]) * i / gridlines
            vy = self.ylim[1] - (self.ylim[1] - self.ylim[0]) * i / gridlines
            if i > 0:
                out.append(f'<line class="grid" x1="{fx:.2f}" y1="{self.y0}" x2="{fx:.2f}" '
                           f'y2="{self.y0 + self.h}" stroke="#ddd"/>')
                out.append(f'<line class="grid" x1="{self.x0}" y1="{fy:.2f}" x2="{self.x0 + self.w}" '
                           f'y2="{fy:.2f}" stroke="#ddd"/>')
            out.append(f'<text x="{fx:.2f}" y="{self.y0 + self.h + 16}" font-size="11" '
                       f'text-anchor="middle">{vx:.2g}</text>')
            out.append(f'<text x="{self.x0 - 6}" y="{fy + 4:.2f}" font-size="11" '
                       f'text-anchor="end">{vy:.2g}</text>')
        out.append(f'<text x="{self.x0 + self.w / 2:.2f}" y="{HEIGHT - 12}" font-size="13" '
                   f'text-anchor="middle">{escape(xlabel)}</text>')
        out.append(f'<text x="{self.x0 - 44}" y="{self.y0 + self.h / 2:.2f}" font-size="13" text-anchor="middle" '
                   f'transform="rotate(-90 {self.x0 - 44} {self.y0 + self.h / 2:.2f})">{escape(ylabel)}</text>')
        return out


def _document(title: str, body: list) -> str:
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#fff"/>\n'
            f'<text x="{WIDTH / 2}" y="20" font-size="15" text-anchor="middle">{escape(title)}</text>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _legend(entries: list, x: float, y: float) -> list:
    out = []
    for i, (label, color) in enumerate(entries):
        yy = y + 18 * i
        out.append(f'<line x1="{x}" y1="{yy}" x2="{x + 20}" y2="{yy}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text class="legend" x="{x + 26}" y="{yy + 4}" font-size="12">{escape(label)}</text>')
    return out


def curve_svg(title: str, curves: dict, xlabel: str, ylabel: str, aucs: dict = None, diagonal=False) -> str:
    """One polyline per entry of ``curves`` (name -> Curve) on 0-1 axes."""
    frame = _Frame((0.0, 1.0), (0.0, 1.0))
    body = frame.axes(xlabel, ylabel)
    if diagonal:
        body.append(f'<line x1="{frame.px(0):.2f}" y1="{frame.py(0):.2f}" x2="{frame.px(1):.2f}" '
                    f'y2="{frame.py(1):.2f}" stroke="#999" stroke-dasharray="4 4"/>')
    legend = []
    for i, (name, c) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(frame.px(c.x), frame.py(c.y)))
        body.append(f'<polyline data-name="{escape(name)}" points="{pts}" fill="none" '
                    f'stroke="{color}" stroke-width="2"/>')
        label = name if aucs is None or name not in aucs else f"{name} (AUC={aucs[name]:.4f})"
        legend.append((label, color))
    body += _legend(legend, frame.x0 + frame.w - 230, frame.y0 + frame.h - 18 * len(legend) - 4)
    return _document(title, body)


def roc_svg(curves: dict, aucs: dict) -> str:
    return curve_svg("ROC", curves, "False positive rate", "True positive rate", aucs, diagonal=True)


def pr_svg(curves: dict, aucs: dict = None) -> str:
    return curve_svg("Precision-recall", curves, "Recall", "Precision", aucs)


def _limits(v):
    lo, hi = float(np.min(v)), float(np.max(v))
    pad = 0.05 * ((hi - lo) or 1.0)
    return lo - pad, hi + pad


def pca_svg(proj, labels) -> str:
    """Two side-by-side scatter panels, PC1-PC2 and PC1-PC3, colored by class."""
    proj = np.asarray(proj, dtype=np.float64)
    labels = np.asarray(labels)
    if proj.shape[1] < 3:
        proj = np.hstack([proj, np.zeros((len(proj), 3 - proj.shape[1]))])
    panel_w = (WIDTH - 2 * MARGIN["left"] - MARGIN["right"]) / 2
    body = []
    for k, comp in enumerate((1, 2)):
        frame = _Frame(_limits(proj[:, 0]), _limits(proj[:, comp]),
                       left=MARGIN["left"] + k * (panel_w + MARGIN["left"]), width=panel_w)
        body += frame.axes("PC1", f"PC{comp + 1}")
        xs, ys = frame.px(proj[:, 0]), frame.py(proj[:, comp])
        for x, y, l in zip(xs, ys, labels):
            body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" fill="{CLASS_COLORS[int(l)]}" '
                        f'fill-opacity="0.7"/>')
    legend = [(CLASS_NAMES[c], CLASS_COLORS[c]) for c in (0, 1)]
    body += _legend(legend, WIDTH - 110, MARGIN["top"] + 12)
    return _document("PCA of deep features", body)


def emit_report(metrics: dict, roc: dict, pr: dict, out_dir, pca=None) -> dict:
    """Write report.csv, roc.svg, pr.svg and (if ``pca=(proj, labels)``) pca.svg.

    ``metrics`` maps model -> MetricsRecord; ``roc``/``pr`` map model -> Curve.
    Returns name -> path of the files written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aucs = {k: m.auc for k, m in metrics.items()}
    files = {"report.csv": metrics_csv(metrics), "roc.svg": roc_svg(roc, aucs), "pr.svg": pr_svg(pr)}
    if pca is not None:
        files["pca.svg"] = pca_svg(*pca)
    paths = {}
    for name, text in files.items():
        (out / name).write_text(text)
        paths[name] = out / name
    return paths
