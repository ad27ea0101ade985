"""ROC analysis for progression scores.

Mann-Whitney AUC with a De Long structural-components variance and paired
test, a Youden operating point, eye-level bootstrap intervals for
sensitivity and specificity at that point, and report/CSV/SVG writers.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

Z_975 = 1.959964
REPORT_SCHEMA = "longiprog.eval/1"


class DomainError(ValueError):
    pass


class InputError(ValueError):
    pass


def _check(scores, labels, min_each: int = 1):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise InputError(f"{s.size} scores but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise InputError("scores must be finite")
    m = int(np.sum(y == 1))
    n = int(y.size - m)
    if m < min_each or n < min_each:
        raise DomainError(f"need at least {min_each} positive and {min_each} negative eyes, got {m} and {n}")
    return s, y.astype(np.int64), m, n


# -- ROC and AUC ------------------------------------------------------------------


def roc_curve(scores, labels):
    """(thresholds, fpr, tpr), sweeping every distinct score from high to low.

    The point at threshold ``t`` counts ``score >= t`` as positive; the first
    point uses ``+inf`` and is always (0, 0).
    """
    s, y, m, n = _check(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s_sorted, y_sorted = s[order], y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    last = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    thresholds = np.r_[np.inf, s_sorted[last]]
    fpr = np.r_[0.0, fp[last] / n]
    tpr = np.r_[0.0, tp[last] / m]
    return thresholds, fpr, tpr


def _midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = x.size
    starts = np.r_[0, np.flatnonzero(np.diff(xs) != 0) + 1]
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties counting half."""
    s, y, m, n = _check(scores, labels)
    r = _midranks(s)
    return float((r[y == 1].sum() - m * (m + 1) / 2.0) / (m * n))


# -- operating point --------------------------------------------------------------


def confusion(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    """(TP, FP, TN, FN) with ``score > threshold`` called positive."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    pred = s > threshold
    tp = int(np.sum(pred & (y == 1)))
    fp = int(np.sum(pred & (y == 0)))
    return tp, fp, int(np.sum(~pred & (y == 0))), int(np.sum(~pred & (y == 1)))


def youden_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    return np.r_[-np.inf, (u[:-1] + u[1:]) / 2.0, np.inf]


def youden(scores, labels) -> tuple[float, float, float]:
    """(threshold, sensitivity, specificity) maximising sens + spec - 1.

    Candidates are midpoints between adjacent distinct scores plus +-inf.
    Ties go to higher sensitivity, then to the lower threshold.
    """
    s, y, m, n = _check(scores, labels)
    cands = youden_candidates(s)
    pos = np.sort(s[y == 1])
    neg = np.sort(s[y == 0])
    tp = m - np.searchsorted(pos, cands, side="right")
    fp = n - np.searchsorted(neg, cands, side="right")
    # J * m * n in exact integer arithmetic so ties are real ties
    j = tp * n - fp * m
    best = np.flatnonzero(j == j.max())
    best = best[tp[best] == tp[best].max()]
    k = int(best[0])  # candidates ascend, so the first is the lowest threshold
    return float(cands[k]), float(tp[k] / m), float((n - fp[k]) / n)


# -- De Long -----------------------------------------------------------------------


def structural_components(scores, labels):
    """(V10 over positives, V01 over negatives) of the pairwise kernel."""
    s, y, m, n = _check(scores, labels)
    r_all = _midranks(s)
    pos, neg = y == 1, y == 0
    r_pos = _midranks(s[pos])
    r_neg = _midranks(s[neg])
    v10 = (r_all[pos] - r_pos) / n
    v01 = 1.0 - (r_all[neg] - r_neg) / m
    return v10, v01


def delong_variance(scores, labels) -> tuple[float, float]:
    """(AUC, standard error) by the structural-components method."""
    _check(scores, labels, min_each=2)
    v10, v01 = structural_components(scores, labels)
    var = v10.var(ddof=1) / v10.size + v01.var(ddof=1) / v01.size
    return float(v10.mean()), float(math.sqrt(max(var, 0.0)))


def delong_ci(auc_value: float, se: float, level: float = 0.95) -> tuple[float, float]:
    if se < 0:
        raise InputError(f"standard error must be non-negative, got {se}")
    if level != 0.95:
        raise InputError("only 95% intervals are supported")
    half = Z_975 * se
    return max(0.0, auc_value - half), min(1.0, auc_value + half)


def normal_two_sided_p(z: float) -> float:
    return math.erfc(abs(z) / math.sqrt(2.0))


def delong_test(scores_a, scores_b, labels) -> tuple[float, float, float]:
    """Paired comparison of two score sets on the same eyes: (AUC_a - AUC_b, z, p)."""
    a = np.asarray(scores_a, dtype=np.float64).reshape(-1)
    b = np.asarray(scores_b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise InputError(f"paired test needs equal-length score sets, got {a.size} and {b.size}")
    _check(a, labels, min_each=2)
    va10, va01 = structural_components(a, labels)
    vb10, vb01 = structural_components(b, labels)
    delta = float(va10.mean() - vb10.mean())
    s10 = np.cov(np.vstack([va10, vb10]))
    s01 = np.cov(np.vstack([va01, vb01]))
    var = (s10[0, 0] + s10[1, 1] - 2 * s10[0, 1]) / va10.size + (s01[0, 0] + s01[1, 1] - 2 * s01[0, 1]) / va01.size
    if var < 1e-12:
        if delta == 0.0:
            return 0.0, 0.0, 1.0
        return delta, math.copysign(math.inf, delta), 0.0
    z = delta / math.sqrt(var)
    return delta, z, normal_two_sided_p(z)


# -- bootstrap -----------------------------------------------------------------------


def replicate_indices(labels, seed: int, replicate: int) -> tuple[np.ndarray, int]:
    """Eye indices for one bootstrap replicate and how many draws were rejected.

    Each replicate owns the stream ``(seed, replicate)``; draws lacking
    either class are redrawn from that same stream.
    """
    y = np.asarray(labels).reshape(-1)
    rng = np.random.default_rng([seed, replicate])
    redrawn = 0
    while True:
        idx = rng.integers(0, y.size, y.size)
        yy = y[idx]
        if yy.any() and not yy.all():
            return idx, redrawn
        redrawn += 1


@dataclass
class BootstrapResult:
    sensitivity_ci: tuple[float, float]
    specificity_ci: tuple[float, float]
    replicates: int
    redrawn: int
    seed: int
    band_fpr: list[float] = field(default_factory=list)
    band_lo: list[float] = field(default_factory=list)
    band_hi: list[float] = field(default_factory=list)


def _tpr_at(fpr_grid, scores, labels):
    _, fpr, tpr = roc_curve(scores, labels)
    # step curve: highest TPR reachable without exceeding each FPR
    k = np.searchsorted(fpr, fpr_grid, side="right") - 1
    return tpr[k]


def bootstrap_ci(scores, labels, threshold: float, B: int = 2000, seed: int = 0, band_points: int = 0):
    """Percentile 95% intervals for sensitivity and specificity at a fixed threshold.

    With ``band_points > 0`` a pointwise TPR band on an even FPR grid is
    collected from the same replicates.
    """
    s, y, _, _ = _check(scores, labels)
    if B < 100:
        raise InputError(f"need at least 100 bootstrap replicates, got {B}")
    sens = np.empty(B)
    spec = np.empty(B)
    grid = np.linspace(0.0, 1.0, band_points) if band_points else None
    band = np.empty((B, band_points)) if band_points else None
    redrawn = 0
    for r in range(B):
        idx, extra = replicate_indices(y, seed, r)
        redrawn += extra
        tp, fp, tn, fn = confusion(s[idx], y[idx], threshold)
        sens[r] = tp / (tp + fn)
        spec[r] = tn / (tn + fp)
        if band is not None:
            band[r] = _tpr_at(grid, s[idx], y[idx])
    out = BootstrapResult(
        (float(np.percentile(sens, 2.5)), float(np.percentile(sens, 97.5))),
        (float(np.percentile(spec, 2.5)), float(np.percentile(spec, 97.5))),
        B,
        redrawn,
        seed,
    )
    if band is not None:
        out.band_fpr = grid.tolist()
        out.band_lo = np.percentile(band, 2.5, axis=0).tolist()
        out.band_hi = np.percentile(band, 97.5, axis=0).tolist()
    return out


# -- report ----------------------------------------------------------------------------


def _num(x: float):
    # JSON has no infinities; write them as strings
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _unnum(x):
    return float(x) if isinstance(x, str) else x


@dataclass
class EvalReport:
    eye_ids: list[str]
    scores: list[float]
    labels: list[int]
    auc: float
    auc_se: float
    auc_ci: tuple[float, float]
    threshold: float
    sensitivity: float
    specificity: float
    sensitivity_ci: tuple[float, float]
    specificity_ci: tuple[float, float]
    confusion: dict
    roc: list[tuple[float, float, float]]
    bootstrap: dict
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["threshold"] = _num(self.threshold)
        d["roc"] = [[_num(t), f, p] for t, f, p in self.roc]
        d["auc_ci"] = list(self.auc_ci)
        d["sensitivity_ci"] = list(self.sensitivity_ci)
        d["specificity_ci"] = list(self.specificity_ci)
        d = {"schema": REPORT_SCHEMA, **d}
        return json.dumps(d, indent=2, sort_keys=False, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        if d.pop("schema", None) != REPORT_SCHEMA:
            raise InputError("not an evaluation report (schema tag missing or unknown)")
        d["threshold"] = _unnum(d["threshold"])
        d["roc"] = [(_unnum(t), f, p) for t, f, p in d["roc"]]
        for k in ("auc_ci", "sensitivity_ci", "specificity_ci"):
            d[k] = tuple(d[k])
        return cls(**d)

    def save(self, path: str | os.PathLike):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "EvalReport":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


def evaluate(eye_ids, scores, labels, B: int = 2000, seed: int = 0, config: dict | None = None) -> tuple[EvalReport, BootstrapResult]:
    s, y, _, _ = _check(scores, labels, min_each=2)
    a, se = delong_variance(s, y)
    thr, sens, spec = youden(s, y)
    boot = bootstrap_ci(s, y, thr, B=B, seed=seed, band_points=51)
    th, fpr, tpr = roc_curve(s, y)
    tp, fp, tn, fn = confusion(s, y, thr)
    report = EvalReport(
        eye_ids=list(eye_ids),
        scores=[float(v) for v in s],
        labels=[int(v) for v in y],
        auc=a,
        auc_se=se,
        auc_ci=delong_ci(a, se),
        threshold=thr,
        sensitivity=sens,
        specificity=spec,
        sensitivity_ci=boot.sensitivity_ci,
        specificity_ci=boot.specificity_ci,
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
        roc=[(float(t), float(f), float(p)) for t, f, p in zip(th, fpr, tpr)],
        bootstrap={"replicates": boot.replicates, "seed": seed, "redrawn": boot.redrawn},
        config=dict(config or {}),
    )
    return report, boot


def compare_reports(a: EvalReport, b: EvalReport) -> dict:
    """Paired De Long comparison of two stored reports over the same eyes."""
    if sorted(a.eye_ids) != sorted(b.eye_ids) or len(set(a.eye_ids)) != len(a.eye_ids):
        raise InputError("reports do not cover the same set of eyes")
    pos_b = {e: i for i, e in enumerate(b.eye_ids)}
    order = [pos_b[e] for e in a.eye_ids]
    sb = np.asarray(b.scores)[order]
    yb = np.asarray(b.labels)[order]
    if not np.array_equal(yb, np.asarray(a.labels)):
        raise InputError("reports disagree on labels for the same eyes")
    delta, z, p = delong_test(a.scores, sb, a.labels)
    return {
        "n_eyes": len(a.eye_ids),
        "auc_a": a.auc,
        "auc_b": b.auc,
        "delta_auc": delta,
        "z": _num(z),
        "p": p,
    }


def write_roc_csv(path, report: EvalReport):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("threshold,fpr,tpr\n")
        for t, f, p in report.roc:
            fh.write(f"{t!r},{f!r},{p!r}\n")


def roc_svg(report: EvalReport, boot: BootstrapResult | None = None, size: int = 400) -> str:
    """A self-contained SVG ROC plot; the shaded band is the pointwise bootstrap interval."""
    pad = 40
    span = size - 2 * pad

    def xy(fpr, tpr):
        return f"{pad + fpr * span:.2f},{size - pad - tpr * span:.2f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="white" stroke="black"/>',
        f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#999" stroke-dasharray="4 4"/>',
    ]
    if boot is not None and boot.band_fpr:
        upper = [xy(f, h) for f, h in zip(boot.band_fpr, boot.band_hi)]
        lower = [xy(f, lo) for f, lo in zip(reversed(boot.band_fpr), reversed(boot.band_lo))]
        parts.append(f'<polygon points="{" ".join(upper + lower)}" fill="#1f77b4" fill-opacity="0.2" stroke="none"/>')
    # straight segments between ROC points: the area under them is the AUC
    pts = [xy(f, p) for _, f, p in report.roc]
    parts.append(f'<polyline points="{" ".join(pts)}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
    parts.append(
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>'
    )
    parts.append(
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 12 {size / 2})">True positive rate</text>'
    )
    lo, hi = report.auc_ci
    parts.append(
        f'<text x="{size - pad - 4}" y="{size - pad - 8}" text-anchor="end" font-size="12">'
        f"AUC {report.auc:.3f} ({lo:.3f}, {hi:.3f})</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_roc_svg(path, report: EvalReport, boot: BootstrapResult | None = None):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(roc_svg(report, boot))
