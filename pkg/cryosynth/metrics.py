"""Evaluation metrics: Fourier shell correlation, pick precision/recall and pose errors."""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import fft
from scipy.spatial import cKDTree

from cryosynth.errors import InputError

logger = logging.getLogger("cryosynth")

DEFAULT_LEVELS = 100
ROTATION_TOLERANCE = 1e-6
AXIS = np.array([0.0, 0.0, 1.0])


# --- FSC ---


@dataclass(frozen=True, eq=False)
class FscCurve:
    """Correlation per integer-radius Fourier shell.

    ``frequencies`` are in 1/Angstrom; ``empty`` flags shells where either
    input had no energy (correlation reported as 0).
    """

    frequencies: np.ndarray
    correlations: np.ndarray
    counts: np.ndarray
    empty: np.ndarray

    def __len__(self):
        return len(self.frequencies)

    @property
    def nyquist(self):
        return float(self.frequencies[-1])

    def as_dict(self):
        return {
            "frequency": self.frequencies.tolist(),
            "fsc": self.correlations.tolist(),
            "count": self.counts.tolist(),
            "empty": self.empty.tolist(),
        }


def _grid(v):
    grid = getattr(v, "grid", v)
    return np.asarray(grid, dtype=np.float64), float(getattr(v, "voxel_size", 1.0))


def fsc(v1, v2):
    """Fourier shell correlation of two cubic volumes (shells 0 .. n/2)."""
    a, spacing = _grid(v1)
    b, _ = _grid(v2)
    if a.shape != b.shape:
        raise InputError(f"volume shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 3 or len(set(a.shape)) != 1:
        raise InputError(f"FSC needs cubic volumes (got {a.shape})")
    n = a.shape[0]
    fa, fb = fft.fftn(a), fft.fftn(b)

    k = fft.fftfreq(n) * n
    kz, ky, kx = np.meshgrid(k, k, k, indexing="ij")
    shell = np.rint(np.sqrt(kx**2 + ky**2 + kz**2)).astype(int).ravel()
    n_shells = n // 2 + 1
    keep = shell < n_shells
    shell = shell[keep]

    cross = (fa.real * fb.real + fa.imag * fb.imag).ravel()[keep]
    energy_a = (fa.real**2 + fa.imag**2).ravel()[keep]
    energy_b = (fb.real**2 + fb.imag**2).ravel()[keep]
    num = np.bincount(shell, cross, n_shells)
    ea = np.bincount(shell, energy_a, n_shells)
    eb = np.bincount(shell, energy_b, n_shells)
    counts = np.bincount(shell, minlength=n_shells)

    empty = (ea <= 0) | (eb <= 0)
    correlations = np.zeros(n_shells)
    denom = np.sqrt(ea[~empty] * eb[~empty])
    correlations[~empty] = np.clip(num[~empty] / denom, -1.0, 1.0)
    frequencies = np.arange(n_shells) / (n * spacing)
    if np.any(empty):
        logger.debug(f"FSC: {int(empty.sum())} zero-energy shells")
    return FscCurve(frequencies, correlations, counts, empty)


@dataclass(frozen=True)
class Resolution:
    frequency: float
    crossed: bool

    @property
    def angstrom(self):
        return 1.0 / self.frequency if self.frequency > 0 else math.inf


def resolution_at(curve, threshold):
    """First frequency where the curve drops below ``threshold``, linearly
    interpolated; Nyquist with ``crossed=False`` if it never does."""
    if len(curve) == 0:
        raise InputError("empty FSC curve")
    f, c = curve.frequencies, curve.correlations
    if c[0] < threshold:
        return Resolution(float(f[0]), True)
    for k in range(len(c) - 1):
        if c[k] >= threshold > c[k + 1]:
            t = (c[k] - threshold) / (c[k] - c[k + 1])
            return Resolution(float(f[k] + t * (f[k + 1] - f[k])), True)
    return Resolution(curve.nyquist, False)


# --- Picking ---


@dataclass(frozen=True)
class LabeledPick:
    x: float
    y: float
    confidence: float
    true_positive: bool


@dataclass(frozen=True)
class MatchResult:
    picks: tuple
    false_negatives: int
    n_ground_truth: int

    @property
    def true_positives(self):
        return sum(p.true_positive for p in self.picks)


def _xyc(pick):
    if hasattr(pick, "x"):
        return float(pick.x), float(pick.y), float(getattr(pick, "confidence", 1.0))
    x, y, c = pick
    return float(x), float(y), float(c)


def match_picks(picks, gt, d_match):
    """Greedy matching in descending confidence.

    A pick is a true positive when an unmatched ground-truth center lies
    within ``d_match`` pixels; the nearest such center is consumed.
    """
    if not d_match > 0:
        raise InputError(f"d_match must be > 0 (got {d_match})")
    rows = [_xyc(p) for p in picks]
    centers = np.asarray([(g[0], g[1]) for g in gt], dtype=np.float64).reshape(-1, 2)
    tree = cKDTree(centers) if len(centers) else None
    matched = np.zeros(len(centers), dtype=bool)

    order = sorted(range(len(rows)), key=lambda i: -rows[i][2])
    labeled = []
    for i in order:
        x, y, c = rows[i]
        hit = False
        if tree is not None:
            near = tree.query_ball_point((x, y), d_match)
            free = [j for j in near if not matched[j]]
            if free:
                dist = np.hypot(centers[free, 0] - x, centers[free, 1] - y)
                matched[free[int(np.argmin(dist))]] = True
                hit = True
        labeled.append(LabeledPick(x, y, c, hit))
    fn = int(len(centers) - matched.sum())
    return MatchResult(tuple(labeled), fn, len(centers))


@dataclass(frozen=True, eq=False)
class PrCurve:
    """Precision and recall at thresholds running from 1 down to 0."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_positive: int

    @property
    def no_positives(self):
        return self.n_positive == 0

    def rows(self):
        return list(
            zip(
                self.thresholds.tolist(),
                self.precision.tolist(),
                self.recall.tolist(),
                self.tp.tolist(),
                self.fp.tolist(),
                self.fn.tolist(),
            )
        )


def _ranked(matches, top_n):
    picks = sorted(matches.picks, key=lambda p: -p.confidence)
    if top_n is not None:
        picks = picks[:top_n]
    conf = np.array([p.confidence for p in picks], dtype=np.float64)
    tp = np.array([p.true_positive for p in picks], dtype=bool)
    return conf, tp


def pr_curve(matches, n_levels=DEFAULT_LEVELS, top_n=None):
    """Precision/recall at ``n_levels + 1`` evenly spaced thresholds from 1 to 0.

    Only the ``top_n`` most confident picks count when given. Precision is
    1 at levels where nothing is predicted.
    """
    if n_levels < 1:
        raise InputError(f"n_levels must be >= 1 (got {n_levels})")
    conf, is_tp = _ranked(matches, top_n)
    thresholds = np.linspace(1.0, 0.0, n_levels + 1)
    predicted = conf[None, :] >= thresholds[:, None]
    tp = np.sum(predicted & is_tp[None, :], axis=1)
    fp = np.sum(predicted & ~is_tp[None, :], axis=1)
    n_positive = matches.n_ground_truth
    fn = n_positive - tp
    total = tp + fp
    precision = np.where(total > 0, tp / np.maximum(total, 1), 1.0)
    recall = tp / n_positive if n_positive else np.zeros(len(thresholds))
    return PrCurve(thresholds, precision, recall, tp, fp, fn, n_positive)


def auprc(curve):
    """Sum of ``Pr(k) * (Re(k) - Re(k-1))``; 0 when there are no positives."""
    if curve.no_positives:
        logger.warning("AUPRC undefined without ground-truth positives, reporting 0")
        return 0.0
    steps = np.diff(curve.recall, prepend=0.0)
    return float(np.sum(curve.precision * steps))


def precision_at(matches, threshold):
    """``TP / (TP + FP)`` over picks with confidence >= ``threshold`` (1 if none)."""
    conf, is_tp = _ranked(matches, None)
    chosen = conf >= threshold
    tp = int(np.sum(is_tp & chosen))
    fp = int(np.sum(~is_tp & chosen))
    return tp / (tp + fp) if tp + fp else 1.0


# --- Poses ---


@dataclass(frozen=True, eq=False)
class PoseBatch:
    """Ground-truth and predicted rotations ``(B, 3, 3)`` and 2D shifts ``(B, 2)`` in pixels."""

    r_gt: np.ndarray
    r_pred: np.ndarray
    t_gt: np.ndarray
    t_pred: np.ndarray

    def __post_init__(self):
        for name in ("r_gt", "r_pred", "t_gt", "t_pred"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.r_gt)
        if n == 0:
            raise InputError("empty pose batch")
        if self.r_gt.shape != (n, 3, 3) or self.r_pred.shape != (n, 3, 3):
            raise InputError("rotations must be (B, 3, 3) with matching B")
        if self.t_gt.shape != (n, 2) or self.t_pred.shape != (n, 2):
            raise InputError("translations must be (B, 2) with matching B")
        for name in ("r_gt", "r_pred"):
            r = getattr(self, name)
            gram = np.einsum("bji,bjk->bik", r, r)
            if np.abs(gram - np.eye(3)).max() > ROTATION_TOLERANCE or np.any(
                np.abs(np.linalg.det(r) - 1.0) > ROTATION_TOLERANCE
            ):
                raise InputError(f"{name} holds a matrix that is not a proper rotation")

    def __len__(self):
        return len(self.r_gt)


@dataclass(frozen=True)
class AngularError:
    radians: float
    literal: float


def angular_error(batch):
    """Mean angle between ``R_gt v`` and ``R_pred v`` for ``v = (0, 0, 1)``.

    ``literal`` is the mean angle scaled by 180/pi, ``radians`` the plain
    mean angle.
    """
    a = batch.r_gt @ AXIS
    b = batch.r_pred @ AXIS
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    cross = np.linalg.norm(np.cross(a, b), axis=1)
    angles = np.arctan2(cross, np.einsum("ij,ij->i", a, b))
    mean = float(angles.mean())
    return AngularError(mean, 180.0 / math.pi * mean)


def pose_loss(batch):
    """Batch mean of ``|R_gt - R_pred|_F^2 / 9 + |T_gt - T_pred|_1 / 2``."""
    rotation = np.sum((batch.r_gt - batch.r_pred) ** 2, axis=(1, 2)) / 9.0
    translation = np.sum(np.abs(batch.t_gt - batch.t_pred), axis=1) / 2.0
    return float(np.mean(rotation + translation))
