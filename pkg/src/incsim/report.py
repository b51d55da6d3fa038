"""CSV tables and SVG line charts for finished (or failed) runs."""

from __future__ import annotations

import csv
import io
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence
from xml.sax.saxutils import escape

from .evaluation import SessionLog

CSV_COLUMNS = ("strategy", "loss", "dataset", "seed", "session", "classes_seen",
               "alpha_base", "alpha_new", "alpha_all")


@dataclass
class CsvRow:
    strategy: str
    loss: str
    dataset: str
    seed: int
    session: int
    classes_seen: int
    alpha_base: float
    alpha_new: float
    alpha_all: float

    def values(self) -> List[str]:
        # repr keeps every float bit, so the CSV round-trips exactly
        return [self.strategy, self.loss, self.dataset, str(self.seed), str(self.session),
                str(self.classes_seen), repr(self.alpha_base), repr(self.alpha_new),
                repr(self.alpha_all)]


def rows_from_log(log: SessionLog, strategy: str, loss: str, dataset: str, seed: int) -> List[CsvRow]:
    """One row per session; ``session`` counts from 0 for the base model."""
    return [CsvRow(strategy, loss, dataset, seed, r.session - 1, r.classes_seen,
                   r.alpha_base, r.alpha_new, r.alpha_all) for r in log.records]


def format_csv(rows: Iterable[CsvRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for row in rows:
        writer.writerow(row.values())
    return buf.getvalue()


def _write(path: str, text: str) -> None:
    try:
        parent = os.path.dirname(path)
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def write_csv(path: str, rows: Iterable[CsvRow]) -> None:
    _write(path, format_csv(rows))


def read_csv(path: str) -> List[CsvRow]:
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != CSV_COLUMNS:
                raise ValueError(f"{path}: unexpected header {header}")
            return [CsvRow(r[0], r[1], r[2], int(r[3]), int(r[4]), int(r[5]),
                           float(r[6]), float(r[7]), float(r[8])) for r in reader]
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc


# -- SVG -------------------------------------------------------------------------------

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def base_curves(rows: Sequence[CsvRow]) -> Dict[str, List[tuple]]:
    """Per strategy, (classes_seen, mean base-test mAP@R over seeds) sorted by classes seen."""
    acc: Dict[str, Dict[int, List[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        acc[r.strategy][r.classes_seen].append(r.alpha_base)
    return {s: sorted((x, sum(v) / len(v)) for x, v in pts.items()) for s, pts in sorted(acc.items())}


def render_svg(rows: Sequence[CsvRow], title: str = "base-test mAP@R",
               width: int = 640, height: int = 400) -> str:
    """Line chart of base-test mAP@R against classes trained, one polyline per strategy."""
    curves = base_curves(rows)
    left, right, top, bottom = 60, 130, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    xs = [x for pts in curves.values() for x, _ in pts] or [0, 1]
    x_lo, x_hi = min(xs), max(xs)
    x_span = (x_hi - x_lo) or 1

    def px(x):
        return left + plot_w * (x - x_lo) / x_span

    def py(y):
        return top + plot_h * (1.0 - y)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" y2="{top + plot_h}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>']
    for tick in range(6):
        y = tick / 5
        out.append(f'<text x="{left - 8}" y="{py(y) + 4:.1f}" text-anchor="end" font-size="11">{y:.1f}</text>')
    for x in sorted(set(xs)):
        out.append(f'<text x="{px(x):.1f}" y="{top + plot_h + 18}" text-anchor="middle" font-size="11">{x}</text>')
    out.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle" '
               f'font-size="12">classes trained</text>')
    for i, (strategy, pts) in enumerate(curves.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        points = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in pts)
        out.append(f'<polyline data-strategy="{escape(strategy)}" fill="none" stroke="{colour}" '
                   f'stroke-width="2" points="{points}"/>')
        ly = top + 16 * i + 8
        out.append(f'<line x1="{left + plot_w + 12}" y1="{ly}" x2="{left + plot_w + 32}" y2="{ly}" '
                   f'stroke="{colour}" stroke-width="2"/>')
        out.append(f'<text x="{left + plot_w + 36}" y="{ly + 4}" font-size="11">{escape(strategy)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path: str, rows: Sequence[CsvRow], title: str = "base-test mAP@R") -> None:
    _write(path, render_svg(rows, title))
