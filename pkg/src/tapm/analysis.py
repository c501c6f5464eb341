"""Diagnostics for the geometry of transfer perturbations.

Two probes: mean pairwise cosine similarity between perturbations, grouped by
the training procedure of their source model, and per-sample PCA curves
showing how few directions carry most of the perturbation variance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class AnalysisError(ValueError):
    pass


def perturbations(attacks, clean, keys):
    """Stack flattened x_adv - x for ``keys`` into (samples, len(keys), d)."""
    deltas = [np.asarray(attacks[k]).reshape(len(clean), -1) - clean.reshape(len(clean), -1)
              for k in keys]
    return np.stack(deltas, axis=1)


@dataclass
class GroupCosine:
    matrix: np.ndarray
    groups: tuple
    excluded: int  # zero-norm perturbations dropped


def cosine_group_matrix(deltas, groups):
    """Mean cosine similarity between perturbation pairs, per pair of source groups.

    ``deltas`` is (samples, P, d); ``groups`` tags each of the P perturbations.
    Within-group means skip self-pairs.  Each sample contributes its own mean for
    a group pair, and the entry averages those over samples.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.ndim == 2:
        deltas = deltas[None]
    groups = list(groups)
    if deltas.shape[1] != len(groups):
        raise AnalysisError("one group tag per perturbation is required")
    names = tuple(dict.fromkeys(groups))
    tag = np.array([names.index(g) for g in groups])
    for k, g in enumerate(names):
        if np.sum(tag == k) < 2:
            raise AnalysisError(f"group {g!r} needs at least two perturbations")
    G = len(names)
    sums = np.zeros((G, G))
    counts = np.zeros((G, G))
    excluded = 0
    for sample in deltas:
        norms = np.linalg.norm(sample, axis=1)
        ok = norms > 0
        excluded += int(np.sum(~ok))
        u = sample[ok] / norms[ok, None]
        t = tag[ok]
        C = u @ u.T
        for a in range(G):
            ia = np.flatnonzero(t == a)
            for b in range(a, G):
                ib = np.flatnonzero(t == b)
                block = C[np.ix_(ia, ib)]
                if a == b:
                    n = len(ia) * (len(ia) - 1)
                    if n == 0:
                        continue
                    m = (block.sum() - np.trace(block)) / n
                else:
                    if block.size == 0:
                        continue
                    m = block.mean()
                sums[a, b] += m
                counts[a, b] += 1
    with np.errstate(invalid="ignore"):
        M = sums / counts
    M = np.triu(M) + np.triu(M, 1).T
    return GroupCosine(np.clip(M, -1.0, 1.0), names, excluded)


# --- PCA -----------------------------------------------------------------------------

@dataclass
class ExplainedVarianceCurve:
    fractions: np.ndarray  # cumulative fraction after k+1 components
    eigenvalues: np.ndarray
    total_variance: float
    degenerate: bool = False


def power_eigenvalues(A, tol=1e-13, max_iter=20_000, seed=0):
    """Eigenvalues of a symmetric PSD matrix, largest first, by power iteration with deflation.

    Each iterate is re-orthogonalised against the vectors already found, so the
    iteration runs inside the orthogonal complement of the converged subspace.
    """
    A = np.asarray(A, dtype=np.float64)
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    floor = tol * max(float(np.trace(A)), 0.0)
    V = np.zeros((n, 0))
    vals = []
    for _ in range(n):
        v = rng.normal(size=n)
        v -= V @ (V.T @ v)
        v /= np.linalg.norm(v)
        lam = np.inf
        for _ in range(max_iter):
            w = A @ v
            w -= V @ (V.T @ w)
            lam_new = float(v @ w)
            norm = np.linalg.norm(w)
            if norm <= floor:
                break
            v = w / norm
            if abs(lam_new - lam) <= tol * abs(lam_new):
                break
            lam = lam_new
        lam = max(float(v @ A @ v), 0.0)
        if lam <= floor:
            vals.extend([0.0] * (n - len(vals)))
            break
        vals.append(lam)
        V = np.column_stack([V, v])
    return np.sort(np.array(vals))[::-1]


def pca_explained_variance(rows, method="power"):
    """Cumulative explained-variance curve for the row vectors of ``rows`` (n x d)."""
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise AnalysisError("PCA needs at least two rows")
    X = X - X.mean(axis=0)
    n, d = X.shape
    # the nonzero spectrum of the covariance equals that of the (smaller) Gram matrix
    A = (X @ X.T if n <= d else X.T @ X) / (n - 1)
    total = float(np.trace(A))
    k = min(n - 1, d)
    if total <= 0:
        return ExplainedVarianceCurve(np.zeros(k), np.zeros(k), 0.0, True)
    if method == "power":
        eig = power_eigenvalues(A)
    elif method == "eigh":
        eig = np.clip(np.linalg.eigvalsh(A)[::-1], 0, None)
    else:
        raise AnalysisError(f"unknown PCA method {method!r}")
    eig = eig[:k]
    frac = np.minimum(np.cumsum(eig) / eig.sum(), 1.0)
    frac[-1] = 1.0
    return ExplainedVarianceCurve(frac, eig, total, False)


def per_sample_curves(deltas, method="power", pooled=False):
    """One curve per evaluation sample, or a single curve over all samples when pooled."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if pooled:
        return [pca_explained_variance(deltas.reshape(-1, deltas.shape[-1]), method)]
    return [pca_explained_variance(s, method) for s in deltas]


def dims_for_threshold(curve, threshold):
    if curve.degenerate:
        raise AnalysisError("curve is degenerate (zero total variance)")
    if not 0 < threshold <= 1:
        raise AnalysisError("threshold must lie in (0, 1]")
    return int(np.argmax(curve.fractions >= threshold)) + 1


# --- export ---------------------------------------------------------------------------

def write_group_matrix_csv(path, result):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", *result.groups])
        for g, row in zip(result.groups, result.matrix):
            w.writerow([g, *(f"{v:.6f}" for v in row)])
    return path


def write_curves_csv(path, curves):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = max(len(c.fractions) for c in curves)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "dims90", "dims95", *(f"k{i + 1}" for i in range(width))])
        for i, c in enumerate(curves):
            if c.degenerate:
                w.writerow([i, "degenerate", "degenerate"] + [""] * width)
                continue
            vals = [f"{v:.6f}" for v in c.fractions] + [""] * (width - len(c.fractions))
            w.writerow([i, dims_for_threshold(c, 0.90), dims_for_threshold(c, 0.95), *vals])
    return path
