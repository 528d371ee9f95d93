"""Report tables (CSV) and minimal hand-written SVG figures.

Every plotted mark carries ``data-*`` attributes holding the exact CSV values,
so a figure can be parsed back and checked against its table.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from xml.sax.saxutils import escape

from ..dataset import FAMILIES
from ..equivariance import FitReport

PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#000000")
FIG_W, FIG_H = 720, 420
MARGIN = {"left": 70, "right": 180, "top": 40, "bottom": 60}


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _attr(value) -> str:
    return escape(str(value), {'"': "&quot;"})


class Svg:
    def __init__(self, title: str, width: int = FIG_W, height: int = FIG_H):
        self.width, self.height = width, height
        self.parts = [f'<text x="{width / 2:.1f}" y="22" text-anchor="middle" font-size="15">{escape(title)}</text>']

    def add(self, element: str) -> None:
        self.parts.append(element)

    def text(self, x: float, y: float, s: str, anchor: str = "middle", size: int = 11, rotate: float | None = None) -> None:
        tf = f' transform="rotate({rotate} {x:.1f} {y:.1f})"' if rotate is not None else ""
        self.add(f'<text x="{x:.1f}" y="{y:.1f}" text-anchor="{anchor}" font-size="{size}"{tf}>{escape(s)}</text>')

    def line(self, x1, y1, x2, y2, color: str = "#000000", width: float = 1.0) -> None:
        self.add(f'<line x1="{x1:.1f}" y1="{y1:.1f}" x2="{x2:.1f}" y2="{y2:.1f}" stroke="{color}" stroke-width="{width}"/>')

    def render(self) -> str:
        body = "\n  ".join(self.parts)
        return (f'<?xml version="1.0" encoding="UTF-8"?>\n'
                f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif">\n'
                f'  <rect x="0" y="0" width="{self.width}" height="{self.height}" fill="#ffffff"/>\n  {body}\n</svg>\n')


def _axes(svg: Svg, lo: float, hi: float, label: str, ticks: int = 5) -> tuple[float, float, float, float]:
    x0, x1 = MARGIN["left"], svg.width - MARGIN["right"]
    y0, y1 = svg.height - MARGIN["bottom"], MARGIN["top"]
    svg.line(x0, y0, x1, y0)
    svg.line(x0, y0, x0, y1)
    for i in range(ticks + 1):
        v = lo + (hi - lo) * i / ticks
        y = y0 - (y0 - y1) * i / ticks
        svg.line(x0 - 4, y, x0, y)
        svg.text(x0 - 7, y + 4, f"{v:.3g}", anchor="end", size=10)
    svg.text(18, (y0 + y1) / 2, label, rotate=-90)
    return x0, x1, y0, y1


def _legend(svg: Svg, names: list[str]) -> None:
    x = svg.width - MARGIN["right"] + 12
    for i, name in enumerate(names):
        y = MARGIN["top"] + 16 * i
        svg.add(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{PALETTE[i % len(PALETTE)]}"/>')
        svg.text(x + 15, y + 9, name, anchor="start", size=10)


def bar_chart(title: str, groups: list[str], series: list[str], values: dict[tuple[str, str], float],
              y_label: str = "mean best F1") -> str:
    """Grouped bars; ``values[(group, series)]``. Missing pairs are skipped."""
    svg = Svg(title)
    x0, x1, y0, y1 = _axes(svg, 0.0, 1.0, y_label)
    slot = (x1 - x0) / max(len(groups), 1)
    bar_w = slot * 0.8 / max(len(series), 1)
    for gi, group in enumerate(groups):
        gx = x0 + gi * slot + slot * 0.1
        svg.text(x0 + (gi + 0.5) * slot, y0 + 18, group)
        for si, name in enumerate(series):
            if (group, name) not in values:
                continue
            v = values[(group, name)]
            h = (y0 - y1) * max(0.0, min(1.0, v))
            svg.add(f'<rect class="bar" x="{gx + si * bar_w:.1f}" y="{y0 - h:.1f}" width="{bar_w:.1f}" height="{h:.1f}" '
                    f'fill="{PALETTE[si % len(PALETTE)]}" data-group="{_attr(group)}" data-series="{_attr(name)}" '
                    f'data-value="{_attr(v)}"/>')
    _legend(svg, series)
    return svg.render()


def scatter(title: str, points: list[tuple[str, str, float, float]], x_label: str, y_label: str) -> str:
    """``points`` are (series, label, x, y)."""
    svg = Svg(title)
    xs = [p[2] for p in points] or [0.0, 1.0]
    ys = [p[3] for p in points] or [0.0, 1.0]

    def span(v):
        lo, hi = min(v), max(v)
        pad = (hi - lo) * 0.08 or abs(hi) * 0.1 or 1.0
        return lo - pad, hi + pad

    (xlo, xhi), (ylo, yhi) = span(xs), span(ys)
    x0, x1, y0, y1 = _axes(svg, ylo, yhi, y_label)
    for i in range(6):
        v = xlo + (xhi - xlo) * i / 5
        x = x0 + (x1 - x0) * i / 5
        svg.line(x, y0, x, y0 + 4)
        svg.text(x, y0 + 16, f"{v:.3g}", size=10)
    svg.text((x0 + x1) / 2, svg.height - 18, x_label)
    names = list(dict.fromkeys(p[0] for p in points))
    for name, label, xv, yv in points:
        cx = x0 + (x1 - x0) * (xv - xlo) / (xhi - xlo)
        cy = y0 - (y0 - y1) * (yv - ylo) / (yhi - ylo)
        color = PALETTE[names.index(name) % len(PALETTE)]
        svg.add(f'<circle class="point" cx="{cx:.1f}" cy="{cy:.1f}" r="5" fill="{color}" data-series="{_attr(name)}" '
                f'data-label="{_attr(label)}" data-x="{_attr(xv)}" data-y="{_attr(yv)}"/>')
        svg.text(cx + 7, cy - 6, label, anchor="start", size=9)
    _legend(svg, names)
    return svg.render()


def histogram(title: str, edges: list[float], counts: list[int], x_label: str) -> str:
    svg = Svg(title)
    top = max(counts) if counts and max(counts) > 0 else 1
    x0, x1, y0, y1 = _axes(svg, 0.0, float(top), "count")
    n = len(counts)
    w = (x1 - x0) / max(n, 1)
    for i, c in enumerate(counts):
        h = (y0 - y1) * c / top
        svg.add(f'<rect class="bin" x="{x0 + i * w:.1f}" y="{y0 - h:.1f}" width="{w * 0.95:.1f}" height="{h:.1f}" '
                f'fill="{PALETTE[0]}" data-lo="{_attr(edges[i])}" data-hi="{_attr(edges[i + 1])}" data-value="{c}"/>')
    for i in (0, n // 2, n):
        svg.text(x0 + i * w, y0 + 16, f"{edges[i]:.2g}", size=10)
    svg.text((x0 + x1) / 2, svg.height - 18, x_label)
    return svg.render()


# -- report assembly -----------------------------------------------------------------------------


def _series_name(rep: str, variant: str) -> str:
    if rep == "activations":
        return "activations"
    if rep == "reconstruction_truncated" and variant == "invariant":
        return "reconstruction:equivariant"
    short = "latents" if rep == "latents_truncated" else "reconstruction"
    return f"{short}:{variant}"


def write_report(root: Path, cfg: dict) -> None:
    out = root / "report"
    out.mkdir(parents=True, exist_ok=True)

    # (a) family x representation bars, one figure per (K, L)
    agg = read_csv(root / "probe" / "aggregate.csv")
    act = {r["task_family"]: float(r["mean_best_f1"]) for r in agg if r["representation"] == "activations"}
    combos = sorted({(int(r["K"]), int(r["trunc_len"])) for r in agg if r["K"]})
    groups = list(FAMILIES) + ["ALL"]
    for k, L in combos:
        rows, values, series = [], {}, ["activations"]
        for fam in groups:
            values[(fam, "activations")] = act[fam]
            rows.append([fam, "activations", f"{act[fam]:.6f}"])
        for r in agg:
            if r["K"] and int(r["K"]) == k and int(r["trunc_len"]) == L:
                name = _series_name(r["representation"], r["sae_variant"])
                if name not in series:
                    series.append(name)
                values[(r["task_family"], name)] = float(r["mean_best_f1"])
                rows.append([r["task_family"], name, r["mean_best_f1"]])
        stem = f"fig3_k{k}_L{L}"
        _write_rows(out / f"{stem}.csv", ["task_family", "series", "mean_best_f1"], rows)
        (out / f"{stem}.svg").write_text(bar_chart(f"Probing F1 by task family (K={k}, L={L})", groups, series, values))

    # (b) splice loss vs latent L1, one point per variant x K (plus the equivariant path)
    metrics = read_csv(root / "probe" / "sae_metrics.csv")
    points = []
    for r in metrics:
        points.append((r["sae_variant"], f"K={r['K']}", float(r["splice_loss"]), float(r["latent_l1"])))
        if r["splice_loss_equivariant"]:
            points.append(("equivariant", f"K={r['K']}", float(r["splice_loss_equivariant"]), float(r["latent_l1"])))
    _write_rows(out / "fig4.csv", ["series", "K", "splice_loss", "latent_l1"],
                [[s, label[2:], f"{x:.6f}", f"{y:.6f}"] for s, label, x, y in points])
    (out / "fig4.svg").write_text(scatter("Sparsity vs splice reconstruction", points, "splice loss (pixel MSE)",
                                          "mean latent L1"))

    # (c) M fit table: learned M and identity baseline per base model
    rows = []
    for kind in cfg["base_kinds"]:
        rep = FitReport(**json.loads((root / "m" / kind / "fit_report.json").read_text()))
        rows.append([kind, "learned_M", *[f"{v:.6f}" for v in rep.r2_per_power], f"{rep.r2_mean:.6f}",
                     f"{rep.r2_std:.6f}", f"{rep.r2_closure:.6f}", rep.epochs])
        rows.append([kind, "identity", *[f"{v:.6f}" for v in rep.identity_r2_per_power],
                     f"{rep.identity_baseline_r2:.6f}", f"{rep.identity_baseline_std:.6f}", "", 0])
    _write_rows(out / "result1.csv", ["base_kind", "method", "r2_p1", "r2_p2", "r2_p3", "r2_mean", "r2_std",
                                      "r2_closure", "epochs"], rows)

    # (d) dictionary feature similarity histogram, one per SAE of the invariant variant
    hist = read_csv(root / "probe" / "feature_similarity.csv")
    for k in sorted({int(r["K"]) for r in hist if r["sae_variant"] == "invariant"}):
        sel = [r for r in hist if r["sae_variant"] == "invariant" and int(r["K"]) == k]
        edges = [float(r["bin_lo"]) for r in sel] + [float(sel[-1]["bin_hi"])]
        counts = [int(r["count"]) for r in sel]
        stem = f"features_invariant_k{k}"
        _write_rows(out / f"{stem}.csv", ["bin_lo", "bin_hi", "count"],
                    [[r["bin_lo"], r["bin_hi"], r["count"]] for r in sel])
        (out / f"{stem}.svg").write_text(histogram(f"cos(D_i, M D_i), invariant SAE K={k}", edges, counts,
                                                   "cosine similarity"))
