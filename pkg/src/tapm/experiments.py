"""End-to-end pipeline stages with a digest ledger.

Every stage reads its inputs from the output directory, writes CSV tables and
JSON manifests, and appends a ledger line holding the digests of its stage
config and of every file it wrote.  Re-running a recorded stage is a no-op.
"""

from __future__ import annotations

import csv
import fcntl
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis, evaluation, game, pubdef
from .attacks import AttackCache, AttackSpec, attack_manifest, derive_seed, is_applicable, \
    generate, with_algorithm
from .config import ABLATIONS, ConfigError, attack_config, config_digest, dataset_spec
from .data_zoo import (GROUPS, TrainConfig, ZooRow, build_zoo, load_zoo, make_synthetic_dataset,
                       robustness_scores, save_zoo, train_model)

CACHE_ENV = "TAPM_CACHE_ROOT"


class StageDependencyError(RuntimeError):
    """An upstream stage has not been run (or its outputs are gone)."""


class LedgerError(RuntimeError):
    """Recorded digests disagree with the current config or files."""


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- ledger -------------------------------------------------------------------------------

class RunLedger:
    """Append-only JSON-lines record of completed stages."""

    def __init__(self, path):
        self.path = Path(path)

    def entries(self):
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def last(self, stage):
        hits = [e for e in self.entries() if e["stage"] == stage]
        return hits[-1] if hits else None

    def record(self, stage, config_hash, inputs, outputs, root, extra=None):
        entry = {"stage": stage, "config": config_hash, "inputs": inputs,
                 "outputs": {str(Path(p).relative_to(root)): file_digest(p) for p in outputs},
                 "time": time.strftime("%Y-%m-%dT%H:%M:%S")}
        if extra:
            entry.update(extra)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fcntl.flock(fh, fcntl.LOCK_UN)
        return entry

    def verify(self, entry, root):
        for rel, digest in entry["outputs"].items():
            p = Path(root) / rel
            if not p.exists():
                raise LedgerError(f"{entry['stage']}: recorded output {rel} is missing")
            if file_digest(p) != digest:
                raise LedgerError(f"{entry['stage']}: output {rel} changed since it was recorded")


# --- workspace -------------------------------------------------------------------------------

STAGE_KEYS = {
    "train-zoo": ("dataset", "zoo"),
    "gen-attacks": ("dataset", "zoo", "attacks", "seed"),
    "train-defense": ("dataset", "zoo", "attacks", "defense", "seed"),
    "eval": ("dataset", "zoo", "attacks", "defense", "seed"),
    "solve-game": ("dataset", "zoo", "attacks", "defense", "game", "seed"),
    "analyze": ("dataset", "zoo", "attacks", "analysis", "seed"),
    "ablate": ("dataset", "zoo", "attacks", "defense", "ablation", "seed"),
}
UPSTREAM = {
    "train-zoo": (),
    "gen-attacks": ("train-zoo",),
    "train-defense": ("train-zoo",),
    "eval": ("gen-attacks", "train-defense"),
    "solve-game": ("gen-attacks",),
    "analyze": ("gen-attacks",),
    "ablate": ("gen-attacks", "train-defense"),
}
STAGE_DIRS = {"train-zoo": "zoo", "gen-attacks": "attacks", "train-defense": "defense",
              "eval": "eval", "solve-game": "game", "analyze": "analysis", "ablate": "ablation"}


@dataclass
class Workspace:
    out: Path
    cfg: dict
    cache_root: Path | None = None
    jobs: int = 1
    resume: bool = False
    log: object = print
    _data: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.out = Path(self.out)
        if self.cache_root is None:
            env = os.environ.get(CACHE_ENV)
            self.cache_root = Path(env) if env else self.out / "cache"
        self.cache_root = Path(self.cache_root)
        self.ledger = RunLedger(self.out / "ledger.jsonl")

    @property
    def seed(self):
        return self.cfg["seed"]

    def data(self):
        if self._data is None:
            self._data = make_synthetic_dataset(dataset_spec(self.cfg))
        return self._data

    def eval_set(self):
        test = self.data()[1]
        return test.subset(min(self.cfg["attacks"]["eval_size"], len(test)))

    def stage_hash(self, stage, suffix=""):
        return config_digest(self.cfg, STAGE_KEYS[stage]) + suffix

    def require(self, stage):
        for up in UPSTREAM[stage]:
            entry = self.ledger.last(up)
            if entry is None:
                raise StageDependencyError(f"{stage} needs stage {up!r} to run first")
            if entry["config"] != self.stage_hash(up):
                raise StageDependencyError(f"stage {up!r} was run with a different config; "
                                           f"rerun it in a fresh output directory")
            self.ledger.verify(entry, self.out)

    def begin(self, stage, tag=""):
        """True if the stage must run; False if it is already recorded with this config."""
        key = stage + (f":{tag}" if tag else "")
        self.require(stage)
        entry = self.ledger.last(key)
        if entry is not None:
            if entry["config"] != self.stage_hash(stage):
                raise LedgerError(f"{key}: config differs from the recorded run "
                                  f"({entry['config']} vs {self.stage_hash(stage)})")
            self.ledger.verify(entry, self.out)
            self.log(f"[{key}] up to date")
            return False
        d = self.out / STAGE_DIRS[stage]
        marker = d / (f".{tag}.started" if tag else ".started")
        if marker.exists() and not self.resume:
            raise LedgerError(f"{key}: earlier run did not finish; pass --resume to redo it")
        d.mkdir(parents=True, exist_ok=True)
        marker.write_text("")
        return True

    def finish(self, stage, outputs, tag="", extra=None):
        key = stage + (f":{tag}" if tag else "")
        inputs = {up: self.ledger.last(up)["config"] for up in UPSTREAM[stage]}
        extra = dict(extra or {})
        extra["cache_root"] = str(self.cache_root)
        self.ledger.record(key, self.stage_hash(stage), inputs, outputs, self.out, extra)
        d = self.out / STAGE_DIRS[stage]
        marker = d / (f".{tag}.started" if tag else ".started")
        marker.unlink(missing_ok=True)
        self.log(f"[{key}] wrote {len(outputs)} file(s)")

    # --- shared loaders ---

    def zoo(self):
        return load_zoo(self.out / "zoo")

    def targets(self):
        return load_zoo(self.out / "defense", "targets.json")

    def scores(self):
        return _read_scores(self.out / "zoo" / "robustness.csv")

    def eval_attacks(self):
        index = json.loads((self.out / "attacks" / "index.json").read_text())
        store = AttackCache(self.cache_root)
        out = {}
        for cell in index["cells"]:
            key = (cell["source"], cell["algorithm"])
            if cell["manifest"] is None:
                out[key] = None
                continue
            blob = store.load(cell["manifest"], 0)
            out[key] = blob["x_adv"]
        return out, index

    def selection(self):
        return json.loads((self.out / "defense" / "selection.json").read_text())


def _write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def _f(v):
    return "n/a" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.4f}"


def _read_scores(path):
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    return {r["model"]: {k: float(r[k]) for k in ("clean", "linf", "l2", "corruption")} for r in rows}


# --- stages -----------------------------------------------------------------------------------

def stage_train_zoo(ws):
    if not ws.begin("train-zoo"):
        return
    train, test = ws.data()
    rows = [ZooRow(**r) for r in ws.cfg["zoo"]["models"]]
    tcfg = TrainConfig(**ws.cfg["zoo"]["train"])
    zoo = build_zoo(train, rows, tcfg, test=test, jobs=ws.jobs)
    manifest = save_zoo(zoo, ws.out / "zoo", train.spec_hash)
    score_set = test.subset(ws.cfg["defense"]["selection"]["score_size"])
    table = []
    for m in zoo:
        s = robustness_scores(m, score_set, tcfg, seed=derive_seed(0, m.id))
        table.append([m.id, m.arch, m.group, _f(s["clean"]), _f(s["linf"]), _f(s["l2"]),
                      _f(s["corruption"])])
    scores = _write_csv(ws.out / "zoo" / "robustness.csv",
                        ["model", "arch", "group", "clean", "linf", "l2", "corruption"], table)
    ckpts = sorted((ws.out / "zoo" / "checkpoints").glob("*.tapm"))
    ws.finish("train-zoo", [manifest, scores, *ckpts])


def stage_gen_attacks(ws):
    if not ws.begin("gen-attacks"):
        return
    zoo = ws.zoo()
    ev = ws.eval_set()
    store = AttackCache(ws.cache_root)
    cells = []
    for s in zoo:
        for alg in ws.cfg["attacks"]["algorithms"]:
            if not is_applicable(alg, s):
                cells.append({"source": s.id, "algorithm": alg, "manifest": None, "sha256": None})
                continue
            spec = AttackSpec(s.id, attack_config(ws.cfg, alg))
            seed = derive_seed(ws.seed, spec.digest(), "eval")
            manifest = attack_manifest(ev.spec_hash, spec, seed, 1, "eval")
            manifest["model_sha256"] = s.checkpoint_digest()
            if not store.has(manifest, 0):
                xa = generate(spec, s, (ev.images, ev.labels), seed).x_adv
                store.store(manifest, 0, {"x_adv": xa})
            cells.append({"source": s.id, "algorithm": alg, "manifest": manifest,
                          "sha256": store.blob_digest(manifest, 0)})
            ws.log(f"  attack {spec.id} done")
    index = {"eval_size": len(ev), "dataset": ev.spec_hash, "cells": cells,
             "sources": [m.id for m in zoo], "groups": {m.id: m.group for m in zoo},
             "algorithms": list(ws.cfg["attacks"]["algorithms"])}
    path = ws.out / "attacks" / "index.json"
    path.write_text(json.dumps(index, indent=1, sort_keys=True))
    ws.finish("gen-attacks", [path])


def _random_selection(zoo, mode, rng, count=4):
    if mode == "random-by-model":
        idx = rng.choice(len(zoo), size=min(count, len(zoo)), replace=False)
        return [zoo[i].id for i in sorted(idx)]
    groups = sorted({m.group for m in zoo}, key=list(GROUPS).index)
    chosen = []
    while len(chosen) < min(count, len(zoo)):
        g = groups[int(rng.integers(len(groups)))]
        pool = [m.id for m in zoo if m.group == g and m.id not in chosen]
        if pool:
            chosen.append(pool[int(rng.integers(len(pool)))])
    return chosen


def _defense_configs(ws):
    d = ws.cfg["defense"]
    scheme = pubdef.WeightingScheme.parse(d["scheme"], d["alpha"], d["acc_mode"])
    return scheme, pubdef.PubDefConfig(**d["train"])


def select(ws, zoo, train):
    sel_cfg = ws.cfg["defense"]["selection"]
    mode = sel_cfg["mode"]
    if mode == "fixed":
        ids = {m.id for m in zoo}
        missing = [s for s in sel_cfg["sources"] if s not in ids]
        if missing or not sel_cfg["sources"]:
            raise ConfigError(f"fixed selection needs zoo ids; unknown: {missing}")
        return pubdef.SourceSelection(list(sel_cfg["sources"]), {"mode": "fixed"}, 0,
                                      sel_cfg["tau"])
    if mode.startswith("random"):
        rng = np.random.default_rng(derive_seed(ws.seed, "selection"))
        return pubdef.SourceSelection(_random_selection(zoo, mode, rng), {"mode": mode}, 0,
                                      sel_cfg["tau"])
    _, pcfg = _defense_configs(ws)
    probe_cfg = pubdef.PubDefConfig(**{**ws.cfg["defense"]["train"],
                                       "epochs": sel_cfg["probe_epochs"]})
    test = ws.data()[1]
    probe = pubdef.transfer_probe(zoo, train, test.subset(sel_cfg["score_size"]),
                                  attack_config(ws.cfg, ws.cfg["defense"]["cache_algorithms"][0],
                                                ws.cfg["defense"]["cache_steps"]),
                                  probe_cfg, seed=derive_seed(ws.seed, "probe"))
    return pubdef.select_sources(zoo, ws.scores(), probe, sel_cfg["tau"], sel_cfg["max_rounds"])


def defense_cache(ws, sources, train, algorithms=None, versions=None):
    d = ws.cfg["defense"]
    return pubdef.pregenerate_cache(
        sources, algorithms or d["cache_algorithms"], train,
        attack_config(ws.cfg, "pgd", d["cache_steps"]), versions or d["versions"],
        seed=derive_seed(ws.seed, "cache"), cache_root=ws.cache_root,
        max_shift=d["train"]["max_shift"], jobs=ws.jobs)


def stage_train_defense(ws):
    if not ws.begin("train-defense"):
        return
    train, test = ws.data()
    zoo = ws.zoo()
    by_id = {m.id: m for m in zoo}
    selection = select(ws, zoo, train)
    sel_path = ws.out / "defense" / "selection.json"
    sel_path.write_text(json.dumps(selection.to_dict(), indent=1, sort_keys=True))
    cache = defense_cache(ws, [by_id[i] for i in selection.chosen], train)
    scheme, pcfg = _defense_configs(ws)
    d = ws.cfg["defense"]
    tseed = d["target_seed"]
    tcfg = TrainConfig(**ws.cfg["zoo"]["train"])
    pd = pubdef.train_pubdef(train, cache, scheme, pcfg, seed=derive_seed(ws.seed, "pubdef"),
                             model_id="pubdef")
    und = train_model(pcfg.arch, "normal", train, tcfg, seed=tseed, model_id="undefended")
    targets = [und]
    if d["whitebox_baseline"]:
        targets.append(train_model(pcfg.arch, "linf-adv", train, tcfg, seed=tseed,
                                   model_id="whitebox-at"))
    targets.append(pd)
    for t in targets:
        t.clean_accuracy = evaluation.clean_accuracy(t, test)
    manifest = save_zoo(targets, ws.out / "defense", train.spec_hash, "targets.json")
    run = pubdef.write_run_manifest(ws.out / "defense" / "pubdef_run.json", pd, selection,
                                    {"clean_accuracy": round(pd.clean_accuracy, 4)},
                                    seed=ws.seed)
    ckpts = sorted((ws.out / "defense" / "checkpoints").glob("*.tapm"))
    ws.finish("train-defense", [sel_path, manifest, run, *ckpts])


def _grid_for(ws, target, attacks, index, sources=None):
    ev = ws.eval_set()
    rows = sources or index["sources"]
    return evaluation.eval_grid(target, {k: v for k, v in attacks.items() if k[0] in rows},
                                ev.labels, rows, index["algorithms"], target.id)


def trained_pairs(selection, algorithms, grid):
    return [(s, a) for s in selection for a in algorithms if s in grid.rows and a in grid.cols]


def stage_eval(ws):
    if not ws.begin("eval"):
        return
    attacks, index = ws.eval_attacks()
    targets = ws.targets()
    test = ws.data()[1]
    sel = ws.selection()["chosen"]
    outputs, table1, reports = [], [], {}
    digest = config_digest(ws.cfg)
    for t in targets:
        grid = _grid_for(ws, t, attacks, index)
        outputs.append(evaluation.write_grid_csv(ws.out / "eval" / f"grid_{t.id}.csv", grid, digest))
        (i, j), worst = evaluation.worst_case(grid)
        table1.append([t.id, _f(evaluation.clean_accuracy(t, test)), _f(worst), grid.rows[i],
                       grid.cols[j], grid.n_eval])
        pairs = trained_pairs(sel, ws.cfg["defense"]["cache_algorithms"], grid) \
            if t.id == "pubdef" else []
        reports[t.id] = evaluation.seen_unseen(grid, pairs)
    outputs.append(_write_csv(ws.out / "eval" / "table1.csv",
                              ["target", "clean", "worst_case", "worst_source", "worst_algorithm",
                               "eval_size"], table1))
    outputs.append(evaluation.write_seen_unseen_csv(ws.out / "eval" / "table2.csv", reports, digest))
    ws.finish("eval", outputs)


def game_strategies(ws, zoo):
    g = ws.cfg["game"]
    ids = list(g["sources"])
    if not ids:
        firsts = {}
        for m in zoo:
            firsts.setdefault(m.group, m.id)
        ids = [firsts[g] for g in GROUPS if g in firsts]
    by_id = {m.id: m for m in zoo}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise ConfigError(f"game.sources not in the zoo: {missing}")
    return [by_id[i] for i in ids], list(g["algorithms"])


def stage_solve_game(ws):
    if not ws.begin("solve-game"):
        return
    train, _ = ws.data()
    ev = ws.eval_set()
    zoo = ws.zoo()
    sources, algs = game_strategies(ws, zoo)
    cache = defense_cache(ws, sources, train, algs)
    _, pcfg = _defense_configs(ws)
    seed = derive_seed(ws.seed, "game")
    defenders = game.train_simple_game_defenders(train, cache, pcfg, seed)
    uniform = pubdef.train_pubdef(train, cache, pubdef.WeightingScheme("all"), pcfg, seed,
                                  model_id="pubdef-all")
    attacks, _ = ws.eval_attacks()
    cols = [p.id for p in cache.pairs]
    col_attacks = {}
    for p in cache.pairs:
        key = (p.spec.sources[0], p.spec.config.algorithm)
        xa = attacks.get(key)
        if xa is None:
            spec = AttackSpec(key[0], attack_config(ws.cfg, key[1]))
            src = next(m for m in sources if m.id == key[0])
            xa = generate(spec, src, (ev.images, ev.labels),
                          derive_seed(ws.seed, spec.digest(), "eval")).x_adv
        col_attacks[p.id] = xa
    R = game.compute_payoff_matrix(defenders, col_attacks, ev.labels, cols)
    lp = game.solve_zero_sum_lp(R)
    mwu = game.solve_multiplicative_weights(R, ws.cfg["game"]["iterations"], tol=1e-6)
    uni_row = game.compute_payoff_matrix([uniform], col_attacks, ev.labels, cols).values[0]
    j, uni_worst = int(np.argmin(uni_row)), float(uni_row.min())
    path, side = game.export_game(ws.out / "game" / "payoff.csv", R, {"lp": lp, "mwu": mwu},
                                  {"uniform_best_response": [round(float(v), 4) for v in uni_row]})
    summary = _write_csv(
        ws.out / "game" / "summary.csv", ["quantity", "value", "detail"],
        [["lp_value", _f(lp.value), "simple-game equilibrium"],
         ["mwu_value", _f(mwu.value), f"gap={mwu.gap:.6f}"],
         ["pure_maxmin", _f(game.pure_bounds(R)[0]), ""],
         ["pure_minmax", _f(game.pure_bounds(R)[1]), ""],
         ["uniform_worst_case", _f(uni_worst), cols[j]],
         ["uniform_minus_lp", _f(uni_worst - lp.value), ""]])
    ws.finish("solve-game", [path, side, summary])


def stage_analyze(ws):
    if not ws.begin("analyze"):
        return
    attacks, index = ws.eval_attacks()
    ev = ws.eval_set()
    a = ws.cfg["analysis"]
    n = min(a["samples"], len(ev))
    keys = [k for k, v in attacks.items() if v is not None]
    groups = [index["groups"][k[0]] for k in keys]
    sub = {k: attacks[k][:n] for k in keys}
    deltas = analysis.perturbations(sub, ev.images[:n], keys)
    cos = analysis.cosine_group_matrix(deltas, groups)
    p1 = analysis.write_group_matrix_csv(ws.out / "analysis" / "cosine.csv", cos)
    curves = analysis.per_sample_curves(deltas, a["method"], a["pooled"])
    p2 = analysis.write_curves_csv(ws.out / "analysis" / "pca_curves.csv", curves)
    ok = [c for c in curves if not c.degenerate]
    d90 = [analysis.dims_for_threshold(c, 0.90) for c in ok]
    d95 = [analysis.dims_for_threshold(c, 0.95) for c in ok]
    p3 = _write_csv(ws.out / "analysis" / "pca_summary.csv",
                    ["perturbations", "samples", "degenerate", "mean_dims90", "mean_dims95",
                     "excluded_zero_norm"],
                    [[len(keys), len(curves), len(curves) - len(ok),
                      _f(float(np.mean(d90)) if d90 else None),
                      _f(float(np.mean(d95)) if d95 else None), cos.excluded]])
    ws.finish("analyze", [p1, p2, p3])


# --- ablations -----------------------------------------------------------------------------------

def ablation_variants(ablation, zoo, selection, ab_cfg, seed):
    """(variant name, replicate, source ids) triples for one ablation."""
    by_group = {}
    for m in zoo:
        by_group.setdefault(m.group, []).append(m.id)
    group_of = {m.id: m.group for m in zoo}
    reps = ab_cfg["replicates"]
    out = []
    if ablation == "leave-one-group-out":
        for r in range(reps):
            out.append(("all", r, list(selection)))
            for g in GROUPS:
                kept = [s for s in selection if group_of[s] != g]
                if len(kept) != len(selection):
                    out.append((f"without-{g}", r, kept))
    elif ablation == "add-per-group-count":
        for count in ab_cfg["counts"]:
            ids = []
            for g in GROUPS:
                first = [s for s in selection if group_of[s] == g]
                rest = [i for i in by_group.get(g, []) if i not in first]
                ids += (first + rest)[:count]
            for r in range(reps):
                out.append((f"{count}-per-group", r, ids))
    elif ablation == "single-source":
        for m in zoo:
            for r in range(reps):
                out.append((f"only-{m.id}", r, [m.id]))
    elif ablation == "random-selection":
        for mode in ("random-by-model", "random-by-group"):
            for r in range(ab_cfg["random_replicates"]):
                rng = np.random.default_rng(derive_seed(seed, mode, r))
                out.append((mode, r, _random_selection(zoo, mode, rng)))
    else:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    return out


def stage_ablate(ws, ablation, replicates=None):
    if ablation not in ABLATIONS:
        raise ConfigError(f"unknown ablation {ablation!r}; choose from {ABLATIONS}")
    if replicates is not None:
        if replicates < 1:
            raise ConfigError("replicates must be >= 1")
        ws.cfg["ablation"] = {**ws.cfg["ablation"], "replicates": replicates,
                              "random_replicates": replicates}
    if not ws.begin("ablate", ablation):
        return
    train, test = ws.data()
    zoo = ws.zoo()
    by_id = {m.id: m for m in zoo}
    selection = ws.selection()["chosen"]
    variants = ablation_variants(ablation, zoo, selection, ws.cfg["ablation"], ws.seed)
    needed = sorted({s for _, _, ids in variants for s in ids}, key=[m.id for m in zoo].index)
    cache = defense_cache(ws, [by_id[i] for i in needed], train)
    scheme, pcfg = _defense_configs(ws)
    attacks, index = ws.eval_attacks()
    rows = []
    for name, r, ids in variants:
        sub = cache.subset(ids)
        model = pubdef.train_pubdef(train, sub, scheme, pcfg,
                                    seed=derive_seed(ws.seed, "ablate", r),
                                    model_id=f"{name}-r{r}")
        grid = _grid_for(ws, model, attacks, index)
        (i, j), worst = evaluation.worst_case(grid)
        rows.append([ablation, name, r, "+".join(ids), _f(evaluation.clean_accuracy(model, test)),
                     _f(worst), grid.rows[i], grid.cols[j]])
        ws.log(f"  {name} r{r}: worst {worst:.1f}")
    path = _write_csv(ws.out / "ablation" / f"{ablation}.csv",
                      ["ablation", "variant", "replicate", "sources", "clean", "worst_case",
                       "worst_source", "worst_algorithm"], rows)
    ws.finish("ablate", [path], tag=ablation)


STAGES = {
    "train-zoo": stage_train_zoo,
    "gen-attacks": stage_gen_attacks,
    "train-defense": stage_train_defense,
    "eval": stage_eval,
    "solve-game": stage_solve_game,
    "analyze": stage_analyze,
}
PIPELINE = ("train-zoo", "gen-attacks", "train-defense", "eval", "solve-game", "analyze")


def run_pipeline(ws, stages=PIPELINE):
    for s in stages:
        STAGES[s](ws)
