"""Evaluation metrics and analyses: AUROC for OOD detection, ECE/AdaECE,
temperature scaling, the Fisher cluster criterion, and entropy profiles over
pairwise interpolation paths.

AUROC uses the rank-statistic (Mann-Whitney) form with half-weight ties,
which is exactly the area under the ROC curve and trivial to cross-check by
pair counting.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .datagen import Dataset
from .tensor import RngState, as_matrix
from .uncertainty import UncertaintyScores, entropy_of


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks, ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(values.size)
    i = 0
    while i < values.size:
        j = i
        while j < values.size and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average of ranks i+1 .. j
        i = j
    return ranks


def auroc(in_scores: UncertaintyScores, out_scores: UncertaintyScores) -> float:
    """P(random OOD sample scores above a random in-distribution one), ties half."""
    if in_scores.measure != out_scores.measure:
        raise ValueError(
            f"measure mismatch: {in_scores.measure} vs {out_scores.measure}"
        )
    n_in, n_out = len(in_scores), len(out_scores)
    if n_in == 0 or n_out == 0:
        raise ValueError("both score sets must be non-empty")
    combined = np.concatenate([in_scores.values, out_scores.values])
    ranks = _average_ranks(combined)
    u = ranks[n_in:].sum() - n_out * (n_out + 1) / 2.0
    return float(u / (n_in * n_out))


@dataclass(frozen=True)
class BinningSpec:
    mode: str = "equal_width"  # equal_width | equal_mass
    n_bins: int = 15

    def __post_init__(self):
        if self.mode not in ("equal_width", "equal_mass"):
            raise ValueError(f"unknown binning mode {self.mode!r}")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")


def _confidence_correct(probs, labels):
    p = as_matrix(probs)
    labels = np.asarray(labels)
    conf = p.max(axis=1)
    correct = (p.argmax(axis=1) == labels).astype(np.float64)
    return conf, correct


def _ece_equal_width(conf, correct, n_bins) -> float:
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    total = conf.size
    err = 0.0
    for b in range(n_bins):
        mask = idx == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        err += (n_b / total) * abs(correct[mask].mean() - conf[mask].mean())
    return err


def _equal_mass_slices(conf_sorted, n_bins):
    n = conf_sorted.size
    bounds = [int(round(i * n / n_bins)) for i in range(n_bins + 1)]
    # A boundary never splits a run of tied confidences: the whole run stays
    # in the left bin.
    for i in range(1, n_bins):
        b = bounds[i]
        while 0 < b < n and conf_sorted[b - 1] == conf_sorted[b]:
            b += 1
        bounds[i] = max(b, bounds[i - 1])
    bounds[n_bins] = n
    return [(bounds[i], bounds[i + 1]) for i in range(n_bins)]


def _ece_equal_mass(conf, correct, n_bins) -> float:
    order = np.argsort(conf, kind="mergesort")
    conf_s = conf[order]
    correct_s = correct[order]
    total = conf.size
    err = 0.0
    for lo, hi in _equal_mass_slices(conf_s, n_bins):
        if hi <= lo:
            continue
        n_b = hi - lo
        err += (n_b / total) * abs(
            correct_s[lo:hi].mean() - conf_s[lo:hi].mean()
        )
    return err


def ece(probs, labels, spec: BinningSpec = BinningSpec()) -> float:
    """Expected calibration error over equal-width confidence bins."""
    if spec.mode != "equal_width":
        raise ValueError("ece requires an equal_width BinningSpec")
    conf, correct = _confidence_correct(probs, labels)
    return float(_ece_equal_width(conf, correct, spec.n_bins))


def adaece(probs, labels, spec: BinningSpec = BinningSpec("equal_mass")) -> float:
    """Adaptive ECE over equal-mass bins of sorted confidence."""
    if spec.mode != "equal_mass":
        raise ValueError("adaece requires an equal_mass BinningSpec")
    conf, correct = _confidence_correct(probs, labels)
    if spec.n_bins > conf.size:
        raise ValueError("equal_mass binning needs n_bins <= n_samples")
    return float(_ece_equal_mass(conf, correct, spec.n_bins))


@dataclass(frozen=True)
class Temperature:
    T: float

    def __post_init__(self):
        if not 0.1 <= self.T <= 10.0:
            raise ValueError("temperature must lie in [0.1, 10]")


TEMPERATURE_GRID = np.arange(100, 10001) / 1000.0  # 0.100 .. 10.000 step 0.001


def apply_temperature(logits, temp: Temperature) -> np.ndarray:
    return nn.softmax(as_matrix(logits) / temp.T)


def fit_temperature(
    logits_val, labels_val, spec: BinningSpec = BinningSpec()
) -> Temperature:
    """Grid-search the softmax temperature minimizing validation ECE.

    The grid runs 0.100..10.000 in steps of 0.001; ties go to the smaller T.
    Scaling by a positive temperature never changes the argmax, so accuracy
    is untouched by construction.
    """
    s = as_matrix(logits_val)
    labels = np.asarray(labels_val)
    correct = (s.argmax(axis=1) == labels).astype(np.float64)
    shifted = s - s.max(axis=1, keepdims=True)
    best_t, best_ece = None, math.inf
    chunk = 512
    for start in range(0, TEMPERATURE_GRID.size, chunk):
        ts = TEMPERATURE_GRID[start : start + chunk]
        # max-softmax confidence for every T at once: 1 / sum exp(D / T)
        conf = 1.0 / np.exp(shifted[None, :, :] / ts[:, None, None]).sum(axis=2)
        for ti, t in enumerate(ts):
            if spec.mode == "equal_width":
                e = _ece_equal_width(conf[ti], correct, spec.n_bins)
            else:
                e = _ece_equal_mass(conf[ti], correct, spec.n_bins)
            if e < best_ece:
                best_ece, best_t = e, float(t)
    return Temperature(best_t)


def fisher_criterion(features, labels, epsilon: float = 0.0) -> float:
    """trace((S_W + eps I)^-1 S_B): cluster separation over compactness.

    S_W sums per-class scatter matrices; S_B weights squared class-mean
    offsets from the global mean by class size.  Larger is better.
    """
    phi = as_matrix(features)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("fisher criterion needs >= 2 classes")
    d = phi.shape[1]
    mu = phi.mean(axis=0)
    s_w = np.zeros((d, d))
    s_b = np.zeros((d, d))
    for c in classes:
        members = phi[labels == c]
        if members.shape[0] < 2:
            raise ValueError(f"class {c} needs >= 2 samples")
        mu_c = members.mean(axis=0)
        centered = members - mu_c
        s_w += centered.T @ centered
        offset = mu_c - mu
        s_b += members.shape[0] * np.outer(offset, offset)
    return float(np.trace(np.linalg.solve(s_w + epsilon * np.eye(d), s_b)))


@dataclass
class EntropyProfile:
    """Predictive entropies along interpolation paths between class pairs."""

    lambda_grid: np.ndarray   # (L,) equally spaced in [0, 1]
    entropies: np.ndarray     # (n_pairs, L)
    histogram: np.ndarray     # (L, h_bins) counts over (lambda, H) cells
    h_edges: np.ndarray       # (h_bins + 1,) entropy bin edges


def entropy_profile(
    net: nn.Network,
    ds: Dataset,
    n_pairs: int = 1000,
    rng: RngState | None = None,
    lambda_points: int = 20,
    h_bins: int = 30,
) -> EntropyProfile:
    """Interpolate random different-label pairs and record entropy vs lambda.

    Pairs are drawn with replacement and redrawn until their labels differ;
    each pair is evaluated at `lambda_points` equally spaced mixing factors,
    with x_bar = lambda * x_i + (1 - lambda) * x_j.
    """
    if np.unique(ds.labels).size < 2:
        raise ValueError("entropy profile needs at least two classes")
    i_idx = np.asarray(rng.integers(0, ds.n, size=n_pairs))
    j_idx = np.asarray(rng.integers(0, ds.n, size=n_pairs))
    while True:
        same = ds.labels[i_idx] == ds.labels[j_idx]
        if not same.any():
            break
        j_idx[same] = rng.integers(0, ds.n, size=int(same.sum()))
    grid = np.linspace(0.0, 1.0, lambda_points)
    xi = ds.x[i_idx]
    xj = ds.x[j_idx]
    entropies = np.empty((n_pairs, lambda_points))
    for li, lam in enumerate(grid):
        logits, _, _ = nn.forward(net, lam * xi + (1.0 - lam) * xj)
        entropies[:, li] = entropy_of(nn.softmax(logits))
    h_max = math.log(ds.k)
    h_edges = np.linspace(0.0, h_max, h_bins + 1)
    hist = np.empty((lambda_points, h_bins), dtype=np.int64)
    for li in range(lambda_points):
        cell = np.minimum(
            np.searchsorted(h_edges, entropies[:, li], side="right") - 1,
            h_bins - 1,
        )
        cell = np.maximum(cell, 0)
        hist[li] = np.bincount(cell, minlength=h_bins)
    return EntropyProfile(grid, entropies, hist, h_edges)


def barrier_statistic(profile: EntropyProfile) -> float:
    """Mean entropy at mid-path lambdas over mean entropy at the endpoints."""
    lam = profile.lambda_grid
    mid = (lam >= 0.4) & (lam <= 0.6)
    ends = (lam <= 0.05) | (lam >= 0.95)
    if profile.entropies.size == 0 or not mid.any() or not ends.any():
        raise ValueError("profile too coarse for the barrier statistic")
    numerator = profile.entropies[:, mid].mean()
    denominator = max(profile.entropies[:, ends].mean(), nn.EPS_LOG)
    return float(numerator / denominator)


def _svg_color(frac: float) -> str:
    # white -> deep blue ramp
    r = int(round(255 * (1.0 - 0.95 * frac)))
    g = int(round(255 * (1.0 - 0.80 * frac)))
    b = int(round(255 * (1.0 - 0.35 * frac)))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(profile: EntropyProfile, path=None) -> str:
    """Render the (lambda, entropy) count histogram as a standalone SVG."""
    margin, cell_w, cell_h = 40, 18, 9
    n_lam, n_h = profile.histogram.shape
    width = margin * 2 + n_lam * cell_w
    height = margin * 2 + n_h * cell_h
    peak = max(int(profile.histogram.max()), 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for li in range(n_lam):
        for hi in range(n_h):
            count = int(profile.histogram[li, hi])
            x = margin + li * cell_w
            y = margin + (n_h - 1 - hi) * cell_h
            parts.append(
                f'<rect x="{x}" y="{y}" width="{cell_w}" height="{cell_h}" '
                f'fill="{_svg_color(count / peak)}"/>'
            )
    parts.append(
        f'<text x="{width // 2}" y="{height - 8}" font-size="12" '
        f'text-anchor="middle">interpolation factor</text>'
    )
    parts.append(
        f'<text x="12" y="{height // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 12 {height // 2})">predictive entropy</text>'
    )
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w", encoding="ascii") as f:
            f.write(svg)
    return svg


def reliability_svg(probs, labels, spec: BinningSpec = BinningSpec(), path=None) -> str:
    """Reliability diagram: per-bin accuracy bars against the diagonal."""
    conf, correct = _confidence_correct(probs, labels)
    n_bins = spec.n_bins
    idx = np.minimum((conf * n_bins).astype(int), n_bins - 1)
    size = 320
    margin = 40
    plot = size - 2 * margin
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{margin}" y1="{size - margin}" x2="{size - margin}" '
        f'y2="{margin}" stroke="#999" stroke-dasharray="4 3"/>',
    ]
    bar_w = plot / n_bins
    for b in range(n_bins):
        mask = idx == b
        if not mask.any():
            continue
        acc = float(correct[mask].mean())
        x = margin + b * bar_w
        bar_h = acc * plot
        parts.append(
            f'<rect x="{x:.2f}" y="{size - margin - bar_h:.2f}" '
            f'width="{bar_w:.2f}" height="{bar_h:.2f}" fill="#4477aa" '
            f'stroke="white"/>'
        )
    parts.append(
        f'<text x="{size // 2}" y="{size - 10}" font-size="12" '
        f'text-anchor="middle">confidence</text>'
    )
    parts.append(
        f'<text x="12" y="{size // 2}" font-size="12" text-anchor="middle" '
        f'transform="rotate(-90 12 {size // 2})">accuracy</text>'
    )
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w", encoding="ascii") as f:
            f.write(svg)
    return svg
