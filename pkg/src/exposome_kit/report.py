"""Markdown/CSV tables and static SVG figures.

Human-readable tables round estimates to 2 decimals and p to 3; CSV keeps
full precision.  SVGs are self-contained and byte-stable for equal inputs.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .stats.correlation import Correlation
from .stats.lmm import LmmFit
from .stats.screening import ScreeningSummary

SIGMA2, TAU00 = "σ²", "τ00"


def fmt2(x: float) -> str:
    if x is None or not math.isfinite(x):
        return "NA"
    s = f"{x:.2f}"
    return "0.00" if s == "-0.00" else s


def fmt_p(p: float) -> str:
    if p is None or not math.isfinite(p):
        return "NA"
    return "<0.001" if p < 0.001 else f"{p:.3f}"


def _full(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else "NA"
    return str(x)


def csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_full(v) for v in r])
    return buf.getvalue()


def md_table(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


# -- model tables ------------------------------------------------------------------


@dataclass(frozen=True)
class ModelBlock:
    indicator: str
    predictor_set: str
    fit: LmmFit


def model_block_markdown(b: ModelBlock) -> str:
    f = b.fit
    rows = [
        [name, fmt2(f.beta[i]), f"{fmt2(f.ci95[i, 0])} – {fmt2(f.ci95[i, 1])}", fmt_p(f.p[i])]
        for i, name in enumerate(f.names)
    ]
    rows += [
        ["**Random effects**", "", "", ""],
        [SIGMA2, fmt2(f.sigma2), "", ""],
        [f"{TAU00} participant", fmt2(f.tau00), "", ""],
        ["ICC", fmt2(f.icc), "", ""],
        ["N", f"{f.n_groups} participant", "", ""],
        ["Observations", str(f.n_obs), "", ""],
        ["Marginal R² / Conditional R²", f"{f.r2_marginal:.3f} / {f.r2_conditional:.3f}", "", ""],
    ]
    title = f"### {b.indicator} ~ {b.predictor_set}\n\n"
    return title + md_table(["Predictors", "Estimates", "CI", "p"], rows)


def models_markdown(blocks: Sequence[ModelBlock]) -> str:
    return "# Mixed-model results\n\n" + "\n".join(model_block_markdown(b) for b in blocks)


MODEL_CSV_HEADER = ("indicator", "predictor_set", "term", "estimate", "se", "df", "t", "p",
                    "ci_low", "ci_high", "sigma2", "tau00", "icc", "n_groups", "n_obs",
                    "r2_marginal", "r2_conditional", "boundary")


def models_csv(blocks: Sequence[ModelBlock]) -> str:
    rows = []
    for b in blocks:
        f = b.fit
        for i, name in enumerate(f.names):
            rows.append((b.indicator, b.predictor_set, name, f.beta[i], f.se[i], f.df[i], f.t[i],
                         f.p[i], f.ci95[i, 0], f.ci95[i, 1], f.sigma2, f.tau00, f.icc,
                         f.n_groups, f.n_obs, f.r2_marginal, f.r2_conditional, f.boundary))
    return csv_text(MODEL_CSV_HEADER, rows)


def correlations_markdown(title: str, rows: Sequence[tuple[str, Correlation]]) -> str:
    body = [[name, fmt2(c.r) if c.defined else "NA", fmt_p(c.p) if c.defined else c.reason,
             str(c.n)] for name, c in rows]
    return f"### {title}\n\n" + md_table(["Indicator", "r", "p", "n"], body)


def correlations_csv(rows: Sequence[tuple[str, Correlation]]) -> str:
    return csv_text(("indicator", "r", "p", "n", "defined", "reason"),
                    [(name, c.r, c.p, c.n, c.defined, c.reason) for name, c in rows])


# -- screening -------------------------------------------------------------------


SCREENING_HEADER = ("feature", "outcome", "level", "expected_direction", "estimate", "p",
                    "significant", "matched", "hit", "exact_fit")


def screening_csv(summary: ScreeningSummary) -> str:
    return csv_text(SCREENING_HEADER, [
        (r.feature, r.outcome, r.level, r.expected_direction, r.estimate, r.p, r.significant,
         r.matched, r.hit, r.exact_fit) for r in summary.rows])


def screening_markdown(summary: ScreeningSummary, catalog_counts: Sequence[tuple[str, int, int]]) -> str:
    """``catalog_counts`` holds (outcome, n increase effects, n decrease effects)."""
    out = ["# Feature screening\n"]
    out.append(md_table(["Outcome", "Increase effects", "Decrease effects"],
                        [[o, str(i), str(d)] for o, i, d in catalog_counts]))
    rows = [[c.outcome, c.direction, c.level, str(c.n_tested), str(c.n_hit), str(c.n_significant),
             f"{100 * c.hit_rate:.1f}%", fmt_p(c.exceedance_p)] for c in summary.cells()]
    out.append("\n" + md_table(["Outcome", "Direction", "Level", "Tested", "Hits", "Significant",
                                "Hit rate", "p (vs 5%)"], rows))
    if summary.excluded:
        out.append("\nExcluded features:\n\n" + "".join(
            f"- {name}: {why}\n" for name, why in sorted(summary.excluded.items())))
    return "\n".join(out)


# -- SVG --------------------------------------------------------------------------

W, H = 640, 400
M_LEFT, M_RIGHT, M_TOP, M_BOTTOM = 64, 24, 40, 110


def _n(x: float) -> str:
    return f"{x:.2f}"


def _svg(body: list[str], title: str) -> str:
    head = (f'<?xml version="1.0" encoding="UTF-8"?>\n<svg xmlns="http://www.w3.org/2000/svg" '
            f'width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" '
            f'font-size="11">\n<title>{escape(title)}</title>\n'
            f'<rect width="{W}" height="{H}" fill="white"/>\n'
            f'<text x="{W / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _nice_range(lo: float, hi: float) -> tuple[float, float, list[float]]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        lo, hi = 0.0, 1.0
    if hi == lo:
        lo, hi = lo - 1, hi + 1
    raw = (hi - lo) / 5
    mag = 10 ** math.floor(math.log10(raw))
    step = min((s * mag for s in (1, 2, 2.5, 5, 10) if s * mag >= raw), default=10 * mag)
    start = math.floor(lo / step) * step
    stop = math.ceil(hi / step) * step
    n = int(round((stop - start) / step))
    return start, stop, [start + i * step for i in range(n + 1)]


class _Axes:
    def __init__(self, xlo, xhi, ylo, yhi):
        self.xlo, self.xhi, self.ylo, self.yhi = xlo, xhi, ylo, yhi
        self.x0, self.x1 = M_LEFT, W - M_RIGHT
        self.y0, self.y1 = H - M_BOTTOM, M_TOP

    def x(self, v: float) -> float:
        return self.x0 + (v - self.xlo) / (self.xhi - self.xlo) * (self.x1 - self.x0)

    def y(self, v: float) -> float:
        return self.y0 + (v - self.ylo) / (self.yhi - self.ylo) * (self.y1 - self.y0)

    def yaxis(self, ticks: Sequence[float], label: str) -> list[str]:
        out = [f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>']
        for t in ticks:
            out.append(f'<line x1="{self.x0 - 4}" y1="{_n(self.y(t))}" x2="{self.x0}" '
                       f'y2="{_n(self.y(t))}" stroke="black"/>')
            out.append(f'<text x="{self.x0 - 6}" y="{_n(self.y(t) + 4)}" '
                       f'text-anchor="end">{escape(_tick(t))}</text>')
        mid = (self.y0 + self.y1) / 2
        out.append(f'<text x="16" y="{_n(mid)}" text-anchor="middle" '
                   f'transform="rotate(-90 16 {_n(mid)})">{escape(label)}</text>')
        return out

    def xaxis(self, ticks: Sequence[float], label: str) -> list[str]:
        out = [f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>']
        for t in ticks:
            out.append(f'<line x1="{_n(self.x(t))}" y1="{self.y0}" x2="{_n(self.x(t))}" '
                       f'y2="{self.y0 + 4}" stroke="black"/>')
            out.append(f'<text x="{_n(self.x(t))}" y="{self.y0 + 16}" '
                       f'text-anchor="middle">{escape(_tick(t))}</text>')
        out.append(f'<text x="{_n((self.x0 + self.x1) / 2)}" y="{H - 16}" '
                   f'text-anchor="middle">{escape(label)}</text>')
        return out


def _tick(t: float) -> str:
    s = f"{t:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _rotated_label(x: float, y: float, text: str) -> str:
    return (f'<text x="{_n(x)}" y="{_n(y)}" text-anchor="end" '
            f'transform="rotate(-40 {_n(x)} {_n(y)})">{escape(text)}</text>')


def bar_chart(labels: Sequence[str], values: Sequence[float], title: str, ylabel: str,
              color: str = "#3b6fb6", marks: Sequence[str] | None = None) -> str:
    """Vertical bars from zero; ``marks`` (e.g. significance stars) go above each bar."""
    vals = [v if math.isfinite(v) else 0.0 for v in values]
    lo, hi, ticks = _nice_range(min(0.0, *vals) if vals else 0.0, max(0.0, *vals) if vals else 1.0)
    ax = _Axes(0, max(len(vals), 1), lo, hi)
    body = ax.yaxis(ticks, ylabel)
    body.append(f'<line x1="{ax.x0}" y1="{_n(ax.y(0))}" x2="{ax.x1}" y2="{_n(ax.y(0))}" '
                f'stroke="black"/>')
    for i, (lab, v) in enumerate(zip(labels, vals)):
        left, right = ax.x(i + 0.15), ax.x(i + 0.85)
        top, bottom = sorted((ax.y(v), ax.y(0)))
        body.append(f'<rect x="{_n(left)}" y="{_n(top)}" width="{_n(right - left)}" '
                    f'height="{_n(bottom - top)}" fill="{escape(color)}"/>')
        body.append(_rotated_label(ax.x(i + 0.5), ax.y0 + 14, lab))
        if marks and marks[i]:
            y = (top - 4) if v >= 0 else (bottom + 12)
            body.append(f'<text x="{_n(ax.x(i + 0.5))}" y="{_n(y)}" '
                        f'text-anchor="middle">{escape(marks[i])}</text>')
    return _svg(body, title)


def scatter(x: Sequence[float], y: Sequence[float], title: str, xlabel: str, ylabel: str,
            color: str = "#3b6fb6") -> str:
    """Points with the least-squares line."""
    xs, ys = np.asarray(x, float), np.asarray(y, float)
    ok = np.isfinite(xs) & np.isfinite(ys)
    xs, ys = xs[ok], ys[ok]
    xlo, xhi, xt = _nice_range(float(xs.min()) if xs.size else 0, float(xs.max()) if xs.size else 1)
    ylo, yhi, yt = _nice_range(float(ys.min()) if ys.size else 0, float(ys.max()) if ys.size else 1)
    ax = _Axes(xlo, xhi, ylo, yhi)
    body = ax.yaxis(yt, ylabel) + ax.xaxis(xt, xlabel)
    for a, b in zip(xs, ys):
        body.append(f'<circle cx="{_n(ax.x(a))}" cy="{_n(ax.y(b))}" r="2.5" '
                    f'fill="{escape(color)}" fill-opacity="0.6"/>')
    if xs.size >= 2 and np.ptp(xs) > 0:
        slope, icept = np.polyfit(xs, ys, 1)
        y_a, y_b = icept + slope * xlo, icept + slope * xhi
        body.append(f'<line x1="{_n(ax.x(xlo))}" y1="{_n(ax.y(y_a))}" x2="{_n(ax.x(xhi))}" '
                    f'y2="{_n(ax.y(y_b))}" stroke="black" stroke-width="1.5"/>')
    return _svg(body, title)


def stacked_bars(groups: Sequence[str], stacks: Sequence[tuple[str, str, Sequence[float]]],
                 title: str, ylabel: str) -> str:
    """``stacks`` holds (name, colour, per-group values), drawn bottom to top."""
    totals = [sum(s[2][i] for s in stacks) for i in range(len(groups))]
    lo, hi, ticks = _nice_range(0.0, max(totals, default=1.0) or 1.0)
    ax = _Axes(0, max(len(groups), 1), lo, hi)
    body = ax.yaxis(ticks, ylabel)
    for i, g in enumerate(groups):
        base = 0.0
        for name, color, vals in stacks:
            v = vals[i]
            if v > 0:
                left, right = ax.x(i + 0.15), ax.x(i + 0.85)
                body.append(f'<rect x="{_n(left)}" y="{_n(ax.y(base + v))}" '
                            f'width="{_n(right - left)}" height="{_n(ax.y(base) - ax.y(base + v))}" '
                            f'fill="{escape(color)}"><title>{escape(name)}: {_tick(v)}</title></rect>')
            base += v
        body.append(_rotated_label(ax.x(i + 0.5), ax.y0 + 14, g))
    for j, (name, color, _) in enumerate(stacks):
        y = M_TOP + 4 + 16 * j
        body.append(f'<rect x="{W - M_RIGHT - 120}" y="{y}" width="10" height="10" '
                    f'fill="{escape(color)}"/>')
        body.append(f'<text x="{W - M_RIGHT - 104}" y="{y + 9}">{escape(name)}</text>')
    return _svg(body, title)
