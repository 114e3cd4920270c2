"""Static SVG plots with their data as CSV.

Everything is written by hand (no plotting library) so output bytes are
fully determined by the inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .losses import UPLConfig, WeightingVariant, up_weight
from .openset_eval.metrics import average_precision, precision_recall

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

WIDTH, HEIGHT, PAD = 480, 360, 48


@dataclass
class Plot:
    svg: str
    csv: str


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


class _Canvas:
    def __init__(self, xlim, ylim, title, xlabel, ylabel):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x0, self.x1 = self.x0 - 1, self.x1 + 1
        if self.y1 == self.y0:
            self.y0, self.y1 = self.y0 - 1, self.y1 + 1
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<line x1="{PAD}" y1="{HEIGHT - PAD}" x2="{WIDTH - PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
            f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{HEIGHT - PAD}" stroke="black"/>',
            f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
            f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        ]
        for v, anchor in ((self.x0, "start"), (self.x1, "end")):
            self.parts.append(f'<text x="{_fmt(self.px(v))}" y="{HEIGHT - PAD + 14}" '
                              f'text-anchor="{anchor}" font-size="10">{_fmt(v)}</text>')
        for v in (self.y0, self.y1):
            self.parts.append(f'<text x="{PAD - 4}" y="{_fmt(self.py(v) + 4)}" '
                              f'text-anchor="end" font-size="10">{_fmt(v)}</text>')

    def px(self, x):
        return PAD + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * PAD)

    def py(self, y):
        return HEIGHT - PAD - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2 * PAD)

    def polyline(self, xs, ys, color, label=None, index=0):
        pts = " ".join(f"{_fmt(self.px(x))},{_fmt(self.py(y))}" for x, y in zip(xs, ys))
        self.parts.append(f'<polyline class="series" fill="none" stroke="{color}" '
                          f'stroke-width="1.5" points="{pts}"/>')
        if label:
            self._legend(label, color, index)

    def marker(self, x, y, color, shape="circle"):
        cx, cy = _fmt(self.px(x)), _fmt(self.py(y))
        if shape == "circle":
            self.parts.append(f'<circle class="marker" cx="{cx}" cy="{cy}" r="3" fill="{color}"/>')
        else:
            self.parts.append(f'<path class="marker" d="M{cx} {cy} m-4 -4 l8 8 m0 -8 l-8 8" '
                              f'stroke="{color}" stroke-width="1.5"/>')

    def _legend(self, label, color, index):
        y = PAD + 14 * index
        self.parts.append(f'<line x1="{WIDTH - PAD - 110}" y1="{y}" x2="{WIDTH - PAD - 96}" y2="{y}" '
                          f'stroke="{color}" stroke-width="2"/>')
        self.parts.append(f'<text x="{WIDTH - PAD - 92}" y="{y + 4}" font-size="10">{escape(label)}</text>')

    def legend_marker(self, label, color, index, shape="circle"):
        x, y = WIDTH - PAD - 100, PAD + 14 * index
        if shape == "circle":
            self.parts.append(f'<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>')
        else:
            self.parts.append(f'<path d="M{x} {y} m-4 -4 l8 8 m0 -8 l-8 8" stroke="{color}"/>')
        self.parts.append(f'<text x="{x + 8}" y="{y + 4}" font-size="10">{escape(label)}</text>')

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


# ---------------------------------------------------------------- w(p) curves

def _probs_for(p: float, num_classes: int) -> np.ndarray:
    # gt class holds p, the rest is spread evenly over the other classes
    out = np.full(num_classes, (1.0 - p) / (num_classes - 1))
    out[0] = p
    return out


def weighting_curves(alphas=(0.5, 1.0, 2.0, 3.0), variants=None, num_known: int = 5,
                     points: int = 101) -> Plot:
    """w(p) for every weighting variant; the polynomial ones once per alpha.

    Variants that look at the full probability vector see the gt
    probability ``p`` with the remainder spread evenly over the other classes.
    """
    if not alphas:
        raise ValueError("need at least one alpha")
    variants = list(WeightingVariant) if variants is None else [WeightingVariant(v) for v in variants]
    grid = np.linspace(0.0, 1.0, points)
    C = num_known + 2
    series = []
    for v in variants:
        for a in (alphas if v in (WeightingVariant.POLYNOMIAL, WeightingVariant.POLYNOMIAL_MAXPROB) else [None]):
            cfg = UPLConfig(alpha=1.0 if a is None else float(a), weighting_variant=v)
            ys = [up_weight(float(p), cfg, _probs_for(float(p), C)) for p in grid]
            series.append((v.value, a, np.array(ys)))

    rows = ["variant,alpha,p,w"]
    for name, a, ys in series:
        rows += [f"{name},{'' if a is None else repr(float(a))},{float(p)!r},{float(w)!r}"
                 for p, w in zip(grid, ys)]
    ymax = max(float(ys.max()) for _, _, ys in series)
    cv = _Canvas((0.0, 1.0), (0.0, max(ymax, 1e-12)), "weighting functions w(p)", "p", "w(p)")
    for i, (name, a, ys) in enumerate(series):
        label = name if a is None else f"{name} a={_fmt(a)}"
        cv.polyline(grid, ys, PALETTE[i % len(PALETTE)], label, i)
    return Plot(cv.render(), "\n".join(rows) + "\n")


# ---------------------------------------------------------------- latent scatter

def power_iteration_pca(x, components: int = 2, tol: float = 1e-8, max_iter: int = 10000,
                        seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Leading principal directions by power iteration with deflation.

    Returns ``(projected, directions)``. Directions are sign-fixed so the
    largest-magnitude entry is positive.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("need a non-empty (n, d) array")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x), 1)
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(min(components, x.shape[1])):
        v = rng.standard_normal(x.shape[1])
        v /= np.linalg.norm(v)
        for _ in range(max_iter):
            w = cov @ v
            for u in dirs:
                w -= (w @ u) * u
            n = np.linalg.norm(w)
            if n < 1e-300:
                # flat remaining spectrum: any orthogonal direction will do
                w = rng.standard_normal(x.shape[1])
                for u in dirs:
                    w -= (w @ u) * u
                n = np.linalg.norm(w)
                v = w / n
                break
            w /= n
            done = np.linalg.norm(w - v) < tol
            v = w
            if done:
                break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        dirs.append(v)
    d = np.array(dirs)
    proj = xc @ d.T
    if proj.shape[1] < 2:
        proj = np.hstack([proj, np.zeros((len(proj), 2 - proj.shape[1]))])
    return proj, d


def latent_scatter(embeddings, labels, unknown_label: int | None = None) -> Plot:
    """2-D PCA scatter: known classes as colored dots, unknowns as crosses."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if len(embeddings) == 0:
        raise ValueError("no embeddings to plot")
    if len(labels) != len(embeddings):
        raise ValueError("labels and embeddings differ in length")
    proj, _ = power_iteration_pca(embeddings)
    rows = ["index,label,pc1,pc2"]
    rows += [f"{i},{int(c)},{float(a)!r},{float(b)!r}" for i, (c, (a, b)) in enumerate(zip(labels, proj))]
    lo, hi = proj.min(axis=0), proj.max(axis=0)
    cv = _Canvas((lo[0], hi[0]), (lo[1], hi[1]), "latent space (PCA)", "pc1", "pc2")
    classes = sorted(set(int(c) for c in labels))
    for i, c in enumerate(classes):
        unk = unknown_label is not None and c == unknown_label
        shape = "cross" if unk else "circle"
        color = "black" if unk else PALETTE[i % len(PALETTE)]
        cv.legend_marker("unknown" if unk else f"class {c}", color, i, shape)
        for a, b in proj[labels == c]:
            cv.marker(a, b, color, shape)
    return Plot(cv.render(), "\n".join(rows) + "\n")


# ---------------------------------------------------------------- PR curve

def pr_curve(tp_labels, scores, num_gt: int) -> Plot:
    """Precision/recall points behind an AP value plus the interpolated envelope.

    The CSV lists the step envelope; summing ``(r_i - r_{i-1}) * p_i`` over
    its rows gives back the AP.
    """
    if len(tp_labels) == 0:
        raise ValueError("no detections to plot")
    if num_gt <= 0:
        raise ValueError("num_gt must be positive")
    precision, recall = precision_recall(tp_labels, scores, num_gt)
    ap, _ = average_precision(tp_labels, scores, num_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    rows = ["kind,recall,precision"]
    rows += [f"point,{float(r)!r},{float(p)!r}" for r, p in zip(recall, precision)]
    rows += [f"envelope,{float(mrec[i + 1])!r},{float(mpre[i + 1])!r}" for i in steps]
    cv = _Canvas((0.0, 1.0), (0.0, 1.0), f"PR curve (AP = {ap:.4f})", "recall", "precision")
    xs, ys = [0.0], [float(mpre[steps[0] + 1])] if len(steps) else [0.0]
    for i in steps:
        xs += [float(mrec[i + 1]), float(mrec[i + 1])]
        ys += [float(mpre[i + 1]), float(mpre[i + 2]) if i + 2 < len(mpre) else 0.0]
    cv.polyline(xs, ys, PALETTE[0], "interpolated", 0)
    for r, p in zip(recall, precision):
        cv.marker(r, p, PALETTE[1])
    return Plot(cv.render(), "\n".join(rows) + "\n")


def envelope_area(csv_text: str) -> float:
    """Integrate the envelope rows of a ``pr_curve`` CSV."""
    area, prev = 0.0, 0.0
    for line in csv_text.splitlines()[1:]:
        kind, r, p = line.split(",")
        if kind == "envelope":
            area += (float(r) - prev) * float(p)
            prev = float(r)
    return area
