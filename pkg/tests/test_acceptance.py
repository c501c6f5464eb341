"""Acceptance criteria on the default mini benchmark.

The pipeline runs once for the whole module (plus a second time, from scratch,
for the determinism check).  Each test carries ``criterion(n)``; conftest prints
one PASS/FAIL line per criterion after the run.
"""

import csv
import time

import numpy as np
import pytest

from tapm import experiments, game
from tapm.analysis import dims_for_threshold, pca_explained_variance
from tapm.attacks import (ALGORITHMS, AttackConfig, AttackSpec, Source, ensemble_generate,
                          generate, run_attack)
from tapm.config import load_config
from tapm.models import build_model
from tapm.tensor_core import finite_diff_check

from op_cases import op_cases

STAGE_ORDER = experiments.PIPELINE


def _run(out, cache):
    ws = experiments.Workspace(out, load_config(), cache_root=cache, log=lambda *a: None)
    timings = {}
    for stage in STAGE_ORDER:
        t0 = time.perf_counter()
        experiments.STAGES[stage](ws)
        timings[stage] = time.perf_counter() - t0
    return ws, timings


@pytest.fixture(scope="module")
def mini(tmp_path_factory):
    root = tmp_path_factory.mktemp("mini")
    ws, timings = _run(root / "run", root / "cache")
    t0 = time.perf_counter()
    experiments.stage_ablate(ws, "leave-one-group-out")
    timings["ablate"] = time.perf_counter() - t0
    return ws, timings


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- 1: gradients -------------------------------------------------------------------------------

@pytest.mark.criterion(1)
def test_c1_finite_differences_every_op():
    t0 = time.perf_counter()
    worst = {}
    for seed in range(10):
        for name, (g, bindings) in op_cases(seed).items():
            rep = finite_diff_check(g, bindings, tol=1e-4, n_coords=100, seed=seed)
            assert rep.passed, f"{name} seed {seed}: {rep.max_rel_error}"
            assert sum(rep.checked.values()) > 0, name
            worst[name] = max(worst.get(name, 0.0), max(rep.max_rel_error.values()))
    assert time.perf_counter() - t0 < 60
    assert max(worst.values()) <= 1e-4


# --- 2: feasibility ------------------------------------------------------------------------------

@pytest.mark.criterion(2)
def test_c2_every_algorithm_and_the_ensemble_is_feasible():
    t0 = time.perf_counter()
    shape = (3, 12, 12)
    models = [build_model(a, shape, 4, seed=i)
              for i, a in enumerate(["cnn-small", "mlp-small", "mixer-lite"])]
    kinds = list(ALGORITHMS) + ["ensemble"]
    rng = np.random.default_rng(2024)
    for draw in range(20):
        kind = kinds[draw % len(kinds)]
        eps = float(rng.uniform(0.005, 0.1))
        seed = int(rng.integers(2**31))
        x = rng.uniform(0, 1, size=(8,) + shape)
        y = rng.integers(0, 4, size=8)
        if kind == "ensemble":
            alg = str(rng.choice(ALGORITHMS))
            xa = ensemble_generate(models, AttackConfig(algorithm=alg, epsilon=eps, steps=5),
                                   (x, y), seed).x_adv
        else:
            cfg = AttackConfig(algorithm=kind, epsilon=eps, steps=5)
            xa = generate(AttackSpec("m", cfg), models[draw % 3], (x, y), seed).x_adv
        assert np.abs(xa - x).max() <= eps + 1e-9, kind
        assert xa.min() >= 0.0 and xa.max() <= 1.0, kind
    assert time.perf_counter() - t0 < 120


# --- 3: white-box floor --------------------------------------------------------------------------

@pytest.mark.criterion(3)
def test_c3_white_box_attacks_break_the_normal_source(mini):
    ws, _ = mini
    source = next(m for m in ws.zoo() if m.group == "normal" and m.arch == "cnn-small")
    test = ws.data()[1].subset(200)
    clean = np.mean(source.predict(test.images) == test.labels)
    t0 = time.perf_counter()
    accs = {}
    for alg in ALGORITHMS:
        cfg = AttackConfig(algorithm=alg, epsilon=0.03, steps=50)
        xa = run_attack(Source(source), test.images, test.labels, cfg, np.random.default_rng(3))
        accs[alg] = float(np.mean(source.predict(xa) == test.labels))
    elapsed = time.perf_counter() - t0
    print(f"clean {clean:.3f} white-box {accs} ({elapsed:.0f}s)")
    bad = {a: v for a, v in accs.items() if v >= 0.1 * clean}
    assert not bad, f"above 10% of clean accuracy {clean:.3f}: {bad}"
    assert elapsed < 180


# --- 4: game solvers -----------------------------------------------------------------------------

def _saddle_matrix(rng):
    m, n = rng.integers(2, 7, size=2)
    R = rng.integers(0, 100, size=(m, n)).astype(float)
    i, j = rng.integers(m), rng.integers(n)
    R[i, :] = np.maximum(R[i, :], R[i, j])
    R[:, j] = np.minimum(R[:, j], R[i, j])
    return R, R[i, j]


@pytest.mark.criterion(4)
def test_c4_lp_matches_saddles_and_multiplicative_weights():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    for _ in range(50):
        R, v = _saddle_matrix(rng)
        assert game.pure_saddles(R)
        eq = game.solve_zero_sum_lp(R)
        assert eq.value == pytest.approx(v, abs=1e-7)
        lo, hi = game.pure_bounds(R)
        assert lo - 1e-9 <= eq.value <= hi + 1e-9
    for _ in range(20):
        m, n = rng.integers(3, 9, size=2)
        R = rng.uniform(0, 1, size=(m, n))
        lp = game.solve_zero_sum_lp(R)
        mwu = game.solve_multiplicative_weights(R)
        assert abs(lp.value - mwu.value) <= 1e-2
        lo, hi = game.pure_bounds(R)
        assert lo - 1e-9 <= lp.value <= hi + 1e-9
        assert lo - 1e-2 <= mwu.value <= hi + 1e-2
    assert time.perf_counter() - t0 < 10


# --- 5, 6, 7: mini benchmark tables ---------------------------------------------------------------

def _end_to_end(timings):
    return sum(timings[s] for s in STAGE_ORDER)


@pytest.mark.criterion(5)
def test_c5_uniform_pubdef_beats_simple_game_value(mini):
    ws, timings = mini
    summary = {r["quantity"]: r for r in _rows(ws.out / "game" / "summary.csv")}
    lp, uniform = float(summary["lp_value"]["value"]), float(summary["uniform_worst_case"]["value"])
    print(f"simple-game LP value {lp:.2f}, uniform PubDef(all) worst case {uniform:.2f}")
    assert uniform >= lp
    assert _end_to_end(timings) < 15 * 60


@pytest.mark.criterion(6)
def test_c6_pubdef_keeps_clean_accuracy_and_gains_robustness(mini):
    ws, timings = mini
    t1 = {r["target"]: r for r in _rows(ws.out / "eval" / "table1.csv")}
    pd, und = t1["pubdef"], t1["undefended"]
    print({k: (v["clean"], v["worst_case"]) for k, v in t1.items()})
    assert float(pd["clean"]) >= float(und["clean"]) - 3.0
    assert float(pd["worst_case"]) >= float(und["worst_case"]) + 15.0
    assert _end_to_end(timings) < 15 * 60


@pytest.mark.criterion(7)
def test_c7_seen_unseen_report(mini):
    ws, _ = mini
    row = next(r for r in _rows(ws.out / "eval" / "table2.csv") if r["target"] == "pubdef")
    cells = ["seen_src_seen_algo", "unseen_src_seen_algo", "seen_src_unseen_algo",
             "unseen_src_unseen_algo"]
    assert all(row[c] != "n/a" for c in cells), row
    assert float(row["seen_src_seen_algo"]) >= float(row["global_worst"])
    assert row["gap"] != "n/a"
    print(f"seen/unseen gap {row['gap']}")


# --- 8: ablation ---------------------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_c8_leaving_out_l2_or_corruption_hurts_more_than_normal(mini):
    ws, _ = mini
    rows = _rows(ws.out / "ablation" / "leave-one-group-out.csv")
    reps = sorted({int(r["replicate"]) for r in rows})
    assert len(reps) == 3
    votes = []
    for rep in reps:
        wc = {r["variant"]: float(r["worst_case"]) for r in rows if int(r["replicate"]) == rep}
        drop = {g: wc["all"] - wc[f"without-{g}"] for g in ("normal", "l2-adv", "corruption")}
        print(f"replicate {rep}: worst-case drop {drop}")
        votes.append(drop["l2-adv"] > drop["normal"] and drop["corruption"] > drop["normal"])
    assert sum(votes) >= 2, votes


# --- 9: subspace diagnostics ---------------------------------------------------------------------

@pytest.mark.criterion(9)
def test_c9_cosine_matrix_and_pca_curves(mini):
    ws, timings = mini
    rows = _rows(ws.out / "analysis" / "cosine.csv")
    groups = [r["group"] for r in rows]
    M = np.array([[float(r[g]) for g in groups] for r in rows])
    np.testing.assert_array_equal(M, M.T)
    for g in ("linf-adv", "l2-adv"):
        i = groups.index(g)
        others = [M[i, j] for j in range(len(groups)) if j != i]
        assert M[i, i] >= max(others), (g, M[i])
    with open(ws.out / "analysis" / "pca_curves.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        for line in reader:
            vals = [float(v) for v in line[3:] if v]
            assert np.all(np.diff(vals) >= 0) and vals[-1] == 1.0, line[0]
    assert len(header) > 3
    rng = np.random.default_rng(9)
    rank1 = np.outer(rng.normal(size=12), rng.normal(size=432))
    assert dims_for_threshold(pca_explained_variance(rank1), 0.95) == 1
    assert timings["analyze"] < 120


# --- 10: determinism -----------------------------------------------------------------------------

@pytest.mark.criterion(10)
def test_c10_second_run_gives_identical_csvs(mini, tmp_path):
    ws, _ = mini
    again, _ = _run(tmp_path / "run", tmp_path / "cache")
    first = sorted(p.relative_to(ws.out) for p in ws.out.rglob("*.csv")
                   if p.parts[len(ws.out.parts)] != "ablation")
    second = sorted(p.relative_to(again.out) for p in again.out.rglob("*.csv"))
    assert first == second and len(first) >= 8
    for rel in first:
        assert (ws.out / rel).read_bytes() == (again.out / rel).read_bytes(), rel
