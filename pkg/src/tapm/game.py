"""Zero-sum defender/attacker game over pure (source, algorithm) strategies.

Rows are defender models, columns are attack strategies, and entries are the
defender's accuracy in percentage points.  The defender maximises, the
attacker minimises.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SIMPLEX_TOL = 1e-9


class GameError(ValueError):
    pass


@dataclass(frozen=True)
class PayoffMatrix:
    values: np.ndarray
    rows: tuple = ()
    cols: tuple = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise GameError("payoff matrix must be a non-empty 2-D array")
        if not np.all(np.isfinite(v)):
            raise GameError("payoff entries must be finite")
        if v.min() < 0 or v.max() > 100:
            raise GameError("payoff entries are accuracies in [0, 100]")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "rows", tuple(self.rows) or tuple(f"d{i}" for i in range(v.shape[0])))
        object.__setattr__(self, "cols", tuple(self.cols) or tuple(f"a{j}" for j in range(v.shape[1])))
        if len(self.rows) != v.shape[0] or len(self.cols) != v.shape[1]:
            raise GameError("row/column ids do not match the matrix shape")

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class Equilibrium:
    defender: np.ndarray
    attacker: np.ndarray
    value: float
    gap: float = 0.0
    method: str = "lp"
    iterations: int = 0

    def check(self, R, tol=1e-7):
        """True iff both guarantee conditions hold within ``tol``."""
        R = _matrix(R)
        return bool((self.defender @ R).min() >= self.value - tol
                    and (R @ self.attacker).max() <= self.value + tol)


def _matrix(R):
    if isinstance(R, PayoffMatrix):
        return R.values
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.size == 0 or not np.all(np.isfinite(R)):
        raise GameError("need a finite, non-empty 2-D matrix")
    return R


def check_simplex(w, tol=SIMPLEX_TOL):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1 or np.any(w < -tol) or abs(w.sum() - 1.0) > tol:
        raise GameError("strategy must be nonnegative and sum to 1")
    return w


def pure_bounds(R):
    """(max over rows of row-min, min over columns of column-max)."""
    R = _matrix(R)
    return float(R.min(axis=1).max()), float(R.max(axis=0).min())


def pure_saddles(R):
    """All (i, j) where R[i, j] is the minimum of its row and the maximum of its column."""
    R = _matrix(R)
    row_min = R.min(axis=1, keepdims=True)
    col_max = R.max(axis=0, keepdims=True)
    return [tuple(map(int, ij)) for ij in np.argwhere((R == row_min) & (R == col_max))]


# --- exact solver ---------------------------------------------------------------

def _simplex_max(A, b, c, tol=1e-12, max_pivots=100_000):
    """max c.x s.t. A x <= b, x >= 0 with b >= 0, by tableau simplex and Bland's rule.

    Returns (x, dual y, objective).  The slack basis is feasible, so no phase one.
    """
    m, n = A.shape
    T = np.zeros((m + 1, n + m + 1))
    T[:m, :n] = A
    T[:m, n:n + m] = np.eye(m)
    T[:m, -1] = b
    T[m, :n] = -c
    basis = list(range(n, n + m))
    for _ in range(max_pivots):
        entering = next((j for j in range(n + m) if T[m, j] < -tol), None)
        if entering is None:
            break
        col = T[:m, entering]
        rows = [i for i in range(m) if col[i] > tol]
        if not rows:
            raise GameError("unbounded linear program")
        ratios = [T[i, -1] / col[i] for i in rows]
        best = min(ratios)
        # Bland: among minimum-ratio rows, leave with the smallest basic variable index
        leave = min((i for i, r in zip(rows, ratios) if r <= best + tol), key=lambda i: basis[i])
        T[leave] /= T[leave, entering]
        for i in range(m + 1):
            if i != leave and T[i, entering] != 0:
                T[i] -= T[i, entering] * T[leave]
        basis[leave] = entering
    else:
        raise GameError("simplex pivot limit reached")
    x = np.zeros(n + m)
    for i, var in enumerate(basis):
        x[var] = T[i, -1]
    return x[:n], T[m, n:n + m].copy(), T[m, -1]


def solve_zero_sum_lp(R):
    """Exact equilibrium of the accuracy game via the standard zero-sum LP."""
    R = _matrix(R)
    shift = 1.0 - R.min()
    P = R + shift  # strictly positive, so the game value is positive
    m, n = P.shape
    q, p, total = _simplex_max(P, np.ones(m), np.ones(n))
    if total <= 0:
        raise GameError("degenerate linear program")
    attacker = np.clip(q / total, 0, None)
    defender = np.clip(p / p.sum(), 0, None)
    attacker /= attacker.sum()
    defender /= defender.sum()
    value = 1.0 / total - shift
    gap = float((R @ attacker).max() - (defender @ R).min())
    return Equilibrium(defender, attacker, float(value), gap, "lp")


# --- iterative cross-check ----------------------------------------------------------

def solve_multiplicative_weights(R, iterations=20_000, learning_rate=None, tol=1e-3,
                                 check_every=250):
    """Optimistic multiplicative weights for both players; returns averaged strategies.

    Payoffs are rescaled to [0, 1] internally.  ``gap`` is the spread between the
    attacker's best response to the averaged defender and the defender's best
    response to the averaged attacker.  Iteration stops early once that spread is at
    most ``tol``; both are in the matrix's own units.
    """
    if iterations < 1:
        raise GameError("iterations must be >= 1")
    R = _matrix(R)
    m, n = R.shape
    lo, hi = R.min(), R.max()
    if hi == lo:
        d, a = np.full(m, 1 / m), np.full(n, 1 / n)
        return Equilibrium(d, a, float(lo), 0.0, "mwu", 1)
    U = (R - lo) / (hi - lo)
    eta = learning_rate if learning_rate is not None else np.sqrt(np.log(max(m, n)) + 1.0) * 0.5
    cum_d, cum_a = np.zeros(m), np.zeros(n)
    last_d, last_a = np.zeros(m), np.zeros(n)
    avg_d, avg_a = np.zeros(m), np.zeros(n)
    tol_scaled = tol / (hi - lo)
    t = 0
    while t < iterations:
        t += 1
        zd = eta * (cum_d + last_d)
        za = -eta * (cum_a + last_a)
        d = np.exp(zd - zd.max())
        a = np.exp(za - za.max())
        d /= d.sum()
        a /= a.sum()
        avg_d += d
        avg_a += a
        last_d, last_a = U @ a, d @ U
        cum_d += last_d
        cum_a += last_a
        if tol > 0 and t % check_every == 0 and \
                (U @ avg_a).max() / t - (avg_d @ U).min() / t <= tol_scaled:
            break
    avg_d /= t
    avg_a /= t
    lower = float((avg_d @ R).min())
    upper = float((R @ avg_a).max())
    return Equilibrium(avg_d, avg_a, float(avg_d @ R @ avg_a), upper - lower, "mwu", t)


def best_response_value(R, defender):
    """Attacker's best pure reply to ``defender``: (column index, guaranteed accuracy)."""
    R = _matrix(R)
    w = check_simplex(defender)
    if len(w) != R.shape[0]:
        raise GameError("strategy length does not match the number of rows")
    payoff = w @ R
    j = int(np.argmin(payoff))  # first minimum -> lowest index on ties
    return j, float(payoff[j])


# --- payoff computation and export --------------------------------------------------

def train_simple_game_defenders(train, cache, config=None, seed=0):
    """One defender per pure strategy, each trained on clean data plus that strategy's cache.

    The cached examples were generated against public sources, never against the
    defender being trained.
    """
    from . import pubdef

    config = config or pubdef.PubDefConfig()
    out = []
    for pair in cache.pairs:
        sub = pubdef.AttackCacheSet([pair], cache.versions, cache.dataset_hash)
        m = pubdef.train_pubdef(train, sub, pubdef.WeightingScheme("all"), config, seed,
                                model_id=f"simple:{pair.id}")
        m.tags["strategy"] = pair.id
        out.append(m)
    return out


def compute_payoff_matrix(defenders, attacks, labels, columns=None):
    """Entry (i, j) = 100 * mean 1{defender_i(x_adv_j) = y}.

    ``attacks`` maps column id -> adversarial images (array or object with
    ``x_adv``).  ``columns`` fixes the column order; a missing id raises.
    """
    labels = np.asarray(labels)
    columns = list(columns) if columns is not None else list(attacks)
    rows = [getattr(d, "id", f"d{i}") for i, d in enumerate(defenders)]
    out = np.zeros((len(defenders), len(columns)))
    for j, col in enumerate(columns):
        for i, d in enumerate(defenders):
            if col not in attacks or attacks[col] is None:
                raise KeyError(f"no cached attack for cell ({i}, {j}): defender {rows[i]!r}, "
                               f"strategy {col!r}")
            xa = getattr(attacks[col], "x_adv", attacks[col])
            out[i, j] = 100.0 * float(np.mean(d.predict(xa) == labels))
    return PayoffMatrix(out, tuple(rows), tuple(columns))


def export_game(path, payoff, equilibria, extra=None):
    """Write the matrix as CSV and the solutions as a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["defender", *payoff.cols])
        for rid, row in zip(payoff.rows, payoff.values):
            w.writerow([rid, *(f"{v:.4f}" for v in row)])
    side = {"rows": list(payoff.rows), "cols": list(payoff.cols), "solutions": {}}
    for name, eq in equilibria.items():
        side["solutions"][name] = {
            "method": eq.method, "value": round(eq.value, 6), "gap": round(eq.gap, 6),
            "defender": [round(float(v), 6) for v in eq.defender],
            "attacker": [round(float(v), 6) for v in eq.attacker],
        }
    if extra:
        side.update(extra)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps(side, indent=1, sort_keys=True))
    return path, sidecar


@dataclass
class GameReport:
    payoff: PayoffMatrix
    equilibrium: Equilibrium
    uniform_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def uniform_worst(self):
        return float(self.uniform_values.min())
