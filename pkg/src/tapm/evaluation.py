"""Clean accuracy, the source x algorithm transfer grid, worst case, and seen/unseen splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attacks import AttackError, AttackSpec, derive_seed, ensemble_generate, generate, \
    is_applicable, with_algorithm

NA = "n/a"


class EvaluationError(ValueError):
    pass


def clean_accuracy(target, data):
    if len(data.labels) == 0:
        raise EvaluationError("empty evaluation set")
    return 100.0 * float(np.mean(target.predict(data.images) == data.labels))


@dataclass
class AccuracyGrid:
    """Accuracy (percent) per (source row, algorithm column); NaN marks an inapplicable cell."""

    values: np.ndarray
    rows: tuple
    cols: tuple
    target: str = ""
    n_eval: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        ok = self.values[~np.isnan(self.values)]
        if ok.size and (ok.min() < 0 or ok.max() > 100):
            raise EvaluationError("grid entries must lie in [0, 100]")

    @property
    def applicable(self):
        return ~np.isnan(self.values)

    def cell(self, source, algorithm):
        return self.values[self.rows.index(source), self.cols.index(algorithm)]


def generate_grid_attacks(sources, algorithms, eval_set, config, seed, ensembles=()):
    """Adversarial eval images for every (source, algorithm); ``None`` marks n/a cells.

    ``ensembles`` is an optional list of (row id, member models) rows attacked
    through the fused ensemble surface.
    """
    out = {}
    batch = (eval_set.images, eval_set.labels)
    for s in sources:
        for alg in algorithms:
            if not is_applicable(alg, s):
                out[(s.id, alg)] = None
                continue
            spec = AttackSpec(s.id, with_algorithm(config, alg))
            out[(s.id, alg)] = generate(spec, s, batch, derive_seed(seed, spec.digest())).x_adv
    for rid, members in ensembles:
        for alg in algorithms:
            if not is_applicable(alg, list(members)):
                out[(rid, alg)] = None
                continue
            cfg = with_algorithm(config, alg)
            out[(rid, alg)] = ensemble_generate(members, cfg, batch,
                                                derive_seed(seed, rid, alg)).x_adv
    return out


def eval_grid(target, attacks, labels, rows=None, cols=None, target_id=None):
    """Target accuracy on every cached (source, algorithm) attack.

    ``attacks`` maps (source id, algorithm) -> images or ``None`` (not applicable).
    """
    labels = np.asarray(labels)
    tid = target_id or getattr(target, "id", "target")
    rows = list(rows) if rows is not None else list(dict.fromkeys(k[0] for k in attacks))
    cols = list(cols) if cols is not None else list(dict.fromkeys(k[1] for k in attacks))
    if tid in rows:
        raise EvaluationError(f"target {tid!r} is among the attack sources")
    vals = np.full((len(rows), len(cols)), np.nan)
    for i, r in enumerate(rows):
        for j, c in enumerate(cols):
            if (r, c) not in attacks:
                raise EvaluationError(f"no attack for cell ({r!r}, {c!r})")
            xa = attacks[(r, c)]
            if xa is None:
                continue
            xa = getattr(xa, "x_adv", xa)
            if len(xa) != len(labels):
                raise EvaluationError("every cell must use the same evaluation subset")
            vals[i, j] = 100.0 * float(np.mean(target.predict(xa) == labels))
    return AccuracyGrid(vals, tuple(rows), tuple(cols), tid, len(labels))


def worst_case(grid):
    """Minimum applicable cell as ((row, col), value); ties go to the lowest indices."""
    vals = grid.values if isinstance(grid, AccuracyGrid) else np.asarray(grid, dtype=float)
    if np.all(np.isnan(vals)):
        raise EvaluationError("no applicable cell in the grid")
    flat = np.where(np.isnan(vals), np.inf, vals).ravel()
    k = int(np.argmin(flat))
    i, j = divmod(k, vals.shape[1])
    return (i, j), float(vals[i, j])


SEEN_CELLS = ("seen_src_seen_algo", "unseen_src_seen_algo", "seen_src_unseen_algo",
              "unseen_src_unseen_algo")


@dataclass
class SeenUnseenReport:
    cells: dict  # name -> (value, (source, algorithm)) or None when the partition is empty
    global_worst: float

    @property
    def gap(self):
        """seen x seen worst case minus the worst unseen cell (None if either is absent)."""
        seen = self.cells["seen_src_seen_algo"]
        unseen = [self.cells[k][0] for k in SEEN_CELLS[1:] if self.cells[k] is not None]
        if seen is None or not unseen:
            return None
        return seen[0] - min(unseen)

    def value(self, name):
        c = self.cells[name]
        return None if c is None else c[0]


def seen_unseen(grid, trained_pairs):
    """Worst case inside each of the four source/algorithm membership partitions."""
    pairs = [tuple(p) for p in trained_pairs]
    for p in pairs:
        if p[0] not in grid.rows or p[1] not in grid.cols:
            raise EvaluationError(f"trained pair {p} is not a grid cell")
    seen_src = {p[0] for p in pairs}
    seen_alg = {p[1] for p in pairs}
    cells = {}
    for name in SEEN_CELLS:
        want_src = name.startswith("seen_src")
        want_alg = "_seen_algo" in name and not name.endswith("unseen_algo")
        best = None
        for i, r in enumerate(grid.rows):
            if (r in seen_src) != want_src:
                continue
            for j, c in enumerate(grid.cols):
                if (c in seen_alg) != want_alg or np.isnan(grid.values[i, j]):
                    continue
                v = float(grid.values[i, j])
                if best is None or v < best[0]:
                    best = (v, (r, c))
        cells[name] = best
    return SeenUnseenReport(cells, worst_case(grid)[1])


# --- export -------------------------------------------------------------------------

def _fmt(v):
    return NA if np.isnan(v) else f"{v:.4f}"


def write_grid_csv(path, grid, manifest_digest=""):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", "source", *grid.cols, "manifest"])
        for r, row in zip(grid.rows, grid.values):
            w.writerow([grid.target, r, *map(_fmt, row), manifest_digest])
    return path


def read_grid_csv(path):
    with Path(path).open() as fh:
        rows = list(csv.reader(fh))
    cols = tuple(rows[0][2:-1])
    vals = [[np.nan if v == NA else float(v) for v in r[2:-1]] for r in rows[1:]]
    return AccuracyGrid(np.array(vals), tuple(r[1] for r in rows[1:]), cols,
                        rows[1][0] if len(rows) > 1 else "")


def write_seen_unseen_csv(path, reports, manifest_digest=""):
    """``reports`` maps target id -> SeenUnseenReport; one row per target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target", *SEEN_CELLS, "global_worst", "gap", "manifest"])
        for tid, rep in reports.items():
            vals = [NA if rep.cells[k] is None else f"{rep.cells[k][0]:.4f}" for k in SEEN_CELLS]
            gap = rep.gap
            w.writerow([tid, *vals, f"{rep.global_worst:.4f}",
                        NA if gap is None else f"{gap:.4f}", manifest_digest])
    return path


def ensure_applicable(attacks):
    if all(v is None for v in attacks.values()):
        raise AttackError("every grid cell is inapplicable")
