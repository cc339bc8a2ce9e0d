"""Fidelity checks for synthetic records.

* PCA of pooled real and synthetic feature vectors, projected to 2-D and
  rendered as a green/blue scatter.
* A logistic-regression discriminator reporting how often each class is
  identified as synthetic.
* Marginal statistics and their differences.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import EvaluationError, NumericError, SchemaError, ShapeError
from .numeric import Activation, AdamState, AffineLayer, RandomSource, adam_step, affine_forward
from .records import GENDERS, MONTHS, DataSchema, PatientRecord

REAL_COLOR = "#2e7d32"
SYNTHETIC_COLOR = "#1565c0"


# -- PCA ----------------------------------------------------------------------------


@dataclass
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (k, D), rows orthonormal
    eigenvalues: np.ndarray  # (k,), non-increasing
    total_variance: float = 0.0
    iterations: list[int] = field(default_factory=list)

    @property
    def explained_variance_ratio(self) -> np.ndarray:
        if self.total_variance <= 0:
            return np.zeros_like(self.eigenvalues)
        return self.eigenvalues / self.total_variance


def _fix_sign(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return -v if v[i] < 0 else v


def _orthogonalize(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    for u in basis:
        v = v - (u @ v) * u
    return v


def _completion_vector(dim: int, basis: list[np.ndarray]) -> np.ndarray:
    """First standard basis vector (in index order) not in span(basis), orthonormalized."""
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        v = _orthogonalize(_orthogonalize(e, basis), basis)
        norm = np.linalg.norm(v)
        if norm > 1e-6:
            return v / norm
    raise NumericError("could not complete an orthonormal basis")


def pca_fit(data, k: int, tol: float = 1e-9, max_iter: int = 10_000) -> PcaModel:
    """Top-``k`` principal components by power iteration with deflation.

    Each component starts from the all-ones vector, is re-orthogonalized
    against the components already found on every iteration, and has
    converged once successive unit iterates differ by less than ``tol`` in
    norm. Components whose eigenvalue is numerically zero get a deterministic
    completion vector and eigenvalue 0.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"data must be a 2-D matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise EvaluationError(f"PCA needs at least 2 rows, got {n}")
    if not (1 <= k <= min(n, d)):
        raise EvaluationError(f"need 1 <= k <= min(n, D) = {min(n, d)}, got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (n - 1)
    total = float(np.trace(cov))
    zero_level = 1e-12 * max(total, 1e-300)

    components: list[np.ndarray] = []
    eigenvalues: list[float] = []
    iterations: list[int] = []
    deflated = cov.copy()
    for _ in range(k):
        v = _orthogonalize(np.ones(d), components)
        norm = np.linalg.norm(v)
        v = v / norm if norm > 1e-12 else _completion_vector(d, components)
        lam = 0.0
        for it in range(1, max_iter + 1):
            w = _orthogonalize(deflated @ v, components)
            lam = float(np.linalg.norm(w))
            if lam <= zero_level:
                lam = 0.0
                break
            w /= lam
            if np.linalg.norm(w - v) < tol:
                v = w
                break
            v = w
        else:
            raise NumericError(f"power iteration did not converge in {max_iter} iterations")
        if lam == 0.0:
            v = _completion_vector(d, components)
        else:
            lam = float(v @ cov @ v)
        v = _fix_sign(v)
        iterations.append(it)
        components.append(v)
        eigenvalues.append(max(lam, 0.0))
        deflated = deflated - lam * np.outer(v, v)
    return PcaModel(mean, np.array(components), np.array(eigenvalues), total, iterations)


def pca_project(model: PcaModel, data) -> np.ndarray:
    x = np.atleast_2d(np.asarray(data, dtype=np.float64))
    if x.shape[1] != model.mean.shape[0]:
        raise ShapeError(f"data has {x.shape[1]} columns, PCA model expects {model.mean.shape[0]}")
    return (x - model.mean) @ model.components.T


# -- scatter datasets -----------------------------------------------------------


@dataclass(frozen=True)
class ScatterPoint:
    pc1: float
    pc2: float
    source: str  # "real" | "synthetic"


@dataclass
class ScatterDataset:
    points: list[ScatterPoint]
    explained_variance_ratio: tuple[float, float] = (0.0, 0.0)

    def coords(self, source: str | None = None) -> np.ndarray:
        pts = [(p.pc1, p.pc2) for p in self.points if source is None or p.source == source]
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pc1", "pc2", "source"])
        for p in self.points:
            w.writerow([repr(p.pc1), repr(p.pc2), p.source])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ScatterDataset":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["pc1", "pc2", "source"]:
            raise EvaluationError("scatter CSV must start with header pc1,pc2,source")
        return cls([ScatterPoint(float(a), float(b), s) for a, b, s in rows[1:]])


def pca_scatter(real, synthetic) -> ScatterDataset:
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    synthetic = np.atleast_2d(np.asarray(synthetic, dtype=np.float64))
    if real.size == 0 or synthetic.size == 0:
        raise EvaluationError("both real and synthetic sets must be nonempty")
    pooled = np.vstack([real, synthetic])
    pca = pca_fit(pooled, 2)
    proj = pca_project(pca, pooled)
    labels = ["real"] * len(real) + ["synthetic"] * len(synthetic)
    points = [ScatterPoint(float(a), float(b), s) for (a, b), s in zip(proj, labels)]
    ratio = pca.explained_variance_ratio
    return ScatterDataset(points, (float(ratio[0]), float(ratio[1])))


def cloud_separation(dataset: ScatterDataset) -> tuple[float, float]:
    """Distance between the real and synthetic centroids, and the pooled scale.

    The scale is the root-mean of the two per-axis variances of all points.
    """
    real, synth = dataset.coords("real"), dataset.coords("synthetic")
    allp = dataset.coords()
    dist = float(np.linalg.norm(real.mean(axis=0) - synth.mean(axis=0)))
    scale = float(np.sqrt(np.mean(allp.var(axis=0, ddof=1))))
    return dist, scale


def render_scatter_svg(dataset: ScatterDataset, width: int = 640, height: int = 480) -> str:
    margin = 40
    pts = dataset.coords()
    if len(pts):
        lo, hi = pts.min(axis=0), pts.max(axis=0)
    else:
        lo, hi = np.array([-1.0, -1.0]), np.array([1.0, 1.0])
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    lo, hi = lo - 0.05 * span, hi + 0.05 * span
    span = hi - lo
    plot_w, plot_h = width - 2 * margin, height - 2 * margin

    def sx(v):
        return margin + (v - lo[0]) / span[0] * plot_w

    def sy(v):
        return height - margin - (v - lo[1]) / span[1] * plot_h

    ev1, ev2 = dataset.explained_variance_ratio
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line class="axis" x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line class="axis" x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" font-size="12">'
        f"PC1 ({100 * ev1:.1f}%)</text>",
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {height / 2:.1f})">PC2 ({100 * ev2:.1f}%)</text>',
    ]
    for p in dataset.points:
        color = REAL_COLOR if p.source == "real" else SYNTHETIC_COLOR
        out.append(
            f'<circle cx="{sx(p.pc1):.3f}" cy="{sy(p.pc2):.3f}" r="3" fill="{color}" '
            f'fill-opacity="0.6" class="{p.source}"/>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


# -- discriminator -----------------------------------------------------------


TABLE_ROWS = (
    ("Synthetic identified as synthetic", "synthetic_as_synthetic_pct"),
    ("Real identified as synthetic", "real_as_synthetic_pct"),
    ("Synthetic identified as real", "synthetic_as_real_pct"),
)


@dataclass
class DiscriminatorReport:
    synthetic_as_synthetic_pct: float
    real_as_synthetic_pct: float
    synthetic_as_real_pct: float
    real_as_real_pct: float
    accuracy: float
    auc: float
    test_synthetic: int
    test_real: int

    @classmethod
    def from_counts(
        cls,
        synthetic_flagged: int,
        synthetic_total: int,
        real_flagged: int,
        real_total: int,
        auc: float = float("nan"),
    ) -> "DiscriminatorReport":
        """Build a report from confusion counts ("flagged" = predicted synthetic)."""
        ss = 100.0 * synthetic_flagged / synthetic_total
        rs = 100.0 * real_flagged / real_total
        correct = synthetic_flagged + (real_total - real_flagged)
        return cls(ss, rs, 100.0 - ss, 100.0 - rs, correct / (synthetic_total + real_total), auc,
                   synthetic_total, real_total)

    def render_table(self) -> str:
        return "\n".join(f"{label} {getattr(self, attr):.1f}%" for label, attr in TABLE_ROWS) + "\n"

    def to_json(self) -> dict:
        out = asdict(self)
        out["table"] = self.render_table().splitlines()
        return out


def roc_auc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve; tied scores form one diagonal step.

    ``labels`` are 1 for the positive (synthetic) class.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError("AUC needs both classes")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    # Thresholds at distinct scores, highest first.
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tps = np.cumsum(y)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def _stratified_split(n: int, rng: RandomSource, test_fraction: float):
    perm = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    return perm[n_test:], perm[:n_test]


def fit_discriminator(
    real,
    synthetic,
    rng: RandomSource,
    epochs: int = 200,
    learning_rate: float = 0.05,
    test_fraction: float = 0.3,
    min_per_class: int = 10,
) -> DiscriminatorReport:
    """Logistic regression telling synthetic (label 1) from real (label 0).

    Each class is split 70/30 separately; the model is trained full-batch with
    Adam on mean cross-entropy and evaluated on the held-out rows.
    """
    real = np.atleast_2d(np.asarray(real, dtype=np.float64))
    synthetic = np.atleast_2d(np.asarray(synthetic, dtype=np.float64))
    if len(real) < min_per_class or len(synthetic) < min_per_class:
        raise EvaluationError(
            f"each class needs >= {min_per_class} examples, got {len(real)} real and {len(synthetic)} synthetic"
        )
    if real.shape[1] != synthetic.shape[1]:
        raise ShapeError(f"real has {real.shape[1]} features, synthetic has {synthetic.shape[1]}")
    r_train, r_test = _stratified_split(len(real), rng, test_fraction)
    s_train, s_test = _stratified_split(len(synthetic), rng, test_fraction)
    x_train = np.vstack([real[r_train], synthetic[s_train]])
    y_train = np.r_[np.zeros(len(r_train)), np.ones(len(s_train))]

    layer = AffineLayer(np.zeros((1, real.shape[1])), np.zeros(1), Activation.SIGMOID)
    params = [layer.weights, layer.bias]
    state = AdamState.zeros_like(params, learning_rate=learning_rate)
    n = len(y_train)
    for _ in range(epochs):
        _, p = affine_forward(layer, x_train)
        delta = (p[:, 0] - y_train) / n
        grads = [delta[None, :] @ x_train, np.array([delta.sum()])]
        params, state = adam_step(params, grads, state)
        layer = AffineLayer(params[0], params[1], Activation.SIGMOID)

    _, p_real = affine_forward(layer, real[r_test])
    _, p_synth = affine_forward(layer, synthetic[s_test])
    p_real, p_synth = p_real[:, 0], p_synth[:, 0]
    auc = roc_auc(np.r_[p_real, p_synth], np.r_[np.zeros(len(p_real)), np.ones(len(p_synth))])
    return DiscriminatorReport.from_counts(
        int(np.sum(p_synth >= 0.5)), len(p_synth), int(np.sum(p_real >= 0.5)), len(p_real), auc
    )


# -- marginals ----------------------------------------------------------------


@dataclass
class MarginalReport:
    symptom_frequency: dict[str, float]
    gender_frequency: dict[str, float]
    month_histogram: dict[str, int]
    age_mean: float
    age_std: float
    count: int

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class MarginalDivergence:
    max_symptom_diff: float
    age_mean_diff: float
    month_l1: float
    gender_diff: float
    symptom_diffs: dict[str, float]

    def to_json(self) -> dict:
        return asdict(self)


def marginal_report(records: Sequence[PatientRecord], schema: DataSchema) -> MarginalReport:
    if not records:
        raise EvaluationError("marginal report needs at least one record")
    n = len(records)
    symptoms = {s: sum(s in r.symptoms for r in records) / n for s in schema.symptom_vocab}
    genders = {g: sum(r.gender == g for r in records) / n for g in GENDERS}
    months = {m: sum(r.month == m for r in records) for m in MONTHS}
    ages = np.array([r.age_years for r in records])
    std = float(ages.std(ddof=1)) if n > 1 else 0.0
    return MarginalReport(symptoms, genders, months, float(ages.mean()), std, n)


def compare_marginals(a: MarginalReport, b: MarginalReport) -> MarginalDivergence:
    if list(a.symptom_frequency) != list(b.symptom_frequency):
        raise SchemaError("marginal reports were built against different schemas")
    diffs = {s: abs(a.symptom_frequency[s] - b.symptom_frequency[s]) for s in a.symptom_frequency}
    month_l1 = sum(abs(a.month_histogram[m] / a.count - b.month_histogram[m] / b.count) for m in MONTHS)
    return MarginalDivergence(
        max(diffs.values(), default=0.0),
        abs(a.age_mean - b.age_mean),
        float(month_l1),
        abs(a.gender_frequency[GENDERS[0]] - b.gender_frequency[GENDERS[0]]),
        diffs,
    )
