"""Defense training against transfer attacks from public source models.

The defender pregenerates adversarial copies of its training set from a few
public sources, then minimises clean cross-entropy plus a weighted sum of
cross-entropies on those cached copies.  Cached examples are plain data: no
gradient ever reaches a source model.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import (AttackCache, AttackConfig, AttackSpec, Source, attack_manifest,
                      derive_seed, is_applicable, run_attack, with_algorithm)
from .data_zoo import (GROUPS, SGD, TrainedModel, TrainingDivergedError, patch_mix,
                       shift_crop)
from .models import build_model
from .tensor_core import GraphError, checkpoint_bytes, cross_entropy, cross_entropy_grad

SCHEMES = ("all", "random", "top-k", "dynamic-loss", "dynamic-acc")


class PubDefError(ValueError):
    pass


# --- weighting --------------------------------------------------------------------------

@dataclass(frozen=True)
class WeightingScheme:
    kind: str = "all"
    k: int = 1
    alpha: float = 0.1
    acc_mode: str = "error"  # dynamic-acc: track error rate ("error") or accuracy ("correct")

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise PubDefError(f"unknown weighting scheme {self.kind!r}")
        if self.k < 1:
            raise PubDefError("top-k needs k >= 1")
        if not 0 < self.alpha <= 1:
            raise PubDefError("alpha must lie in (0, 1]")
        if self.acc_mode not in ("error", "correct"):
            raise PubDefError(f"unknown dynamic-acc mode {self.acc_mode!r}")

    @classmethod
    def parse(cls, text, alpha=0.1, acc_mode="error"):
        """Accepts "all", "random", "top-2", "top-k(2)", "dynamic-loss", "dynamic-acc"."""
        m = re.fullmatch(r"top-(?:k\()?(\d+)\)?", text)
        if m:
            return cls("top-k", k=int(m.group(1)), alpha=alpha, acc_mode=acc_mode)
        return cls(text, alpha=alpha, acc_mode=acc_mode)

    @property
    def needs_stats(self):
        return self.kind in ("top-k", "dynamic-loss", "dynamic-acc")

    def label(self):
        return f"top-{self.k}" if self.kind == "top-k" else self.kind


@dataclass
class WeightState:
    mu: np.ndarray
    pi: np.ndarray

    @classmethod
    def initial(cls, n):
        mu = np.full(n, 1.0 / n)
        return cls(mu, mu.copy())


def _normalize(v):
    s = v.sum()
    return v / s if s > 0 else np.full(len(v), 1.0 / len(v))


def compute_weights(scheme, state, losses=None, correct=None, rng=None):
    """Weights over the cached pairs for one batch; updates ``state`` in place."""
    n = len(state.mu)
    kind = scheme.kind
    if kind == "all":
        pi = np.full(n, 1.0 / n)
    elif kind == "random":
        if rng is None:
            raise PubDefError("random scheme needs an rng")
        pi = np.zeros(n)
        pi[int(rng.integers(n))] = 1.0
    elif kind == "top-k":
        if scheme.k > n:
            raise PubDefError(f"top-k with k={scheme.k} exceeds {n} attack pairs")
        losses = _stat(losses, n, "losses")
        order = np.argsort(-losses, kind="stable")  # largest first, lowest index on ties
        pi = np.zeros(n)
        pi[order[:scheme.k]] = 1.0 / scheme.k
    elif kind == "dynamic-loss":
        losses = _stat(losses, n, "losses")
        state.mu = (1 - scheme.alpha) * state.mu + scheme.alpha * losses
        pi = _normalize(state.mu)
    else:
        acc = _stat(correct, n, "correctness")
        target = 1.0 - acc if scheme.acc_mode == "error" else acc
        state.mu = (1 - scheme.alpha) * state.mu + scheme.alpha * target
        pi = _normalize(state.mu)
    state.pi = pi
    return pi


def _stat(v, n, what):
    if v is None or len(v) != n:
        raise PubDefError(f"expected {n} per-attack {what}")
    v = np.asarray(v, dtype=np.float64)
    if np.any(v < 0):
        raise PubDefError(f"per-attack {what} must be nonnegative")
    return v


# --- attack cache -----------------------------------------------------------------------

@dataclass
class CachedPair:
    spec: AttackSpec
    group: str
    x_adv: np.ndarray  # (versions, N, C, H, W)
    shifts: np.ndarray  # (versions, N, 2) cache-time pad-crop offsets
    digests: list

    @property
    def id(self):
        return self.spec.id

    def origins(self, images):
        """Clean images each version was attacked from (shift applied)."""
        return np.stack([shift_crop(images, s) for s in self.shifts])


@dataclass
class AttackCacheSet:
    pairs: list
    versions: int
    dataset_hash: str = ""
    skipped: list = field(default_factory=list)

    @property
    def ids(self):
        return [p.id for p in self.pairs]

    def subset(self, ids):
        keep = set(ids)
        return AttackCacheSet([p for p in self.pairs if p.id in keep or p.spec.sources[0] in keep],
                              self.versions, self.dataset_hash)

    def digest(self):
        h = hashlib.sha256()
        for p in self.pairs:
            for d in p.digests:
                h.update(d.encode())
        return h.hexdigest()[:20]


def _attack_version(source_model, images, labels, cfg, seed, v, max_shift, batch_size):
    shifts = np.random.default_rng([seed, v, 1]).integers(-max_shift, max_shift + 1,
                                                          size=(len(images), 2))
    xs = shift_crop(images, shifts)
    out = np.empty_like(xs)
    src = Source(source_model, cfg.fusion)
    for b, start in enumerate(range(0, len(xs), batch_size)):
        sl = slice(start, start + batch_size)
        rng = np.random.default_rng(derive_seed(seed, v, b))
        out[sl] = run_attack(src, xs[sl], labels[sl], cfg, rng)
    return {"x_adv": out, "shifts": shifts.astype(np.float64)}


def pregenerate_cache(sources, algorithms, train, config=AttackConfig(steps=10), versions=4,
                      seed=0, cache_root=None, max_shift=1, batch_size=256, jobs=1):
    """Adversarial copies of ``train`` for every applicable (source, algorithm) pair.

    Each version attacks independently shifted training images with its own random
    start.  With ``cache_root`` set, blobs are stored content-addressed and reused.
    """
    if versions < 1:
        raise PubDefError("versions must be >= 1")
    store = AttackCache(cache_root) if cache_root else None
    dataset_hash = train.spec_hash
    jobs_list, pairs, skipped = [], [], []
    for s in sources:
        for alg in algorithms:
            if not is_applicable(alg, s):
                skipped.append(f"{s.id}/{alg}")
                continue
            cfg = with_algorithm(config, alg)
            spec = AttackSpec(s.id, cfg)
            pseed = derive_seed(seed, spec.digest())
            manifest = attack_manifest(dataset_hash, spec, seed, versions, train.split)
            manifest["max_shift"] = max_shift
            pairs.append((s, spec, manifest))
            for v in range(versions):
                if store is None or not store.has(manifest, v):
                    jobs_list.append((len(pairs) - 1, v, pseed))
    results = {}
    args = [(pairs[i][0].classifier, train.images, train.labels, pairs[i][1].config, ps, v,
             max_shift, batch_size) for i, v, ps in jobs_list]
    if jobs > 1 and len(args) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            outs = list(ex.map(_attack_star, args))
    else:
        outs = [_attack_version(*a) for a in args]
    for (i, v, _), tensors in zip(jobs_list, outs):
        if store is not None:
            store.store(pairs[i][2], v, tensors)
        results[(i, v)] = tensors
    cached = []
    for i, (s, spec, manifest) in enumerate(pairs):
        blobs = [results.get((i, v)) or store.load(manifest, v) for v in range(versions)]
        digests = [hashlib.sha256(checkpoint_bytes(b)).hexdigest() for b in blobs]
        cached.append(CachedPair(spec, s.group, np.stack([b["x_adv"] for b in blobs]),
                                 np.stack([b["shifts"].astype(int) for b in blobs]), digests))
    return AttackCacheSet(cached, versions, dataset_hash, skipped)


def _attack_star(a):
    return _attack_version(*a)


# --- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class PubDefConfig:
    arch: str = "cnn-small"
    epochs: int = 15
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_shift: int = 0  # train-time pad-crop
    mix_prob: float = 0.5  # chance a batch gets rectangular patch mixing
    mix_frac: float = 0.25


def _soft_labels(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def train_pubdef(train, cache, scheme=WeightingScheme(), config=PubDefConfig(), seed=0,
                 model_id=None):
    """Train a fresh defender on clean data plus the weighted cached attacks."""
    if not cache.pairs:
        raise PubDefError("attack cache is empty")
    n_pairs = len(cache.pairs)
    if scheme.kind == "top-k" and scheme.k > n_pairs:
        raise PubDefError(f"top-k with k={scheme.k} exceeds {n_pairs} attack pairs")
    k = train.num_classes
    clf = build_model(config.arch, train.input_shape, k, seed)
    rng = np.random.default_rng([seed, 3])
    n, bs = len(train), config.batch_size
    steps = max(n // bs, 1)
    opt = SGD(clf.params, config.lr, config.momentum, config.weight_decay, config.epochs * steps)
    state = WeightState.initial(n_pairs)
    adv = [p.x_adv for p in cache.pairs]
    pi_sum = np.zeros(n_pairs)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(steps):
            idx = perm[s * bs:(s + 1) * bs]
            m = len(idx)
            y = train.labels[idx]
            versions = rng.integers(cache.versions, size=(n_pairs, m))
            shifts = rng.integers(-config.max_shift, config.max_shift + 1, size=(m, 2))
            blocks = [train.images[idx]] + [a[versions[i], idx] for i, a in enumerate(adv)]
            blocks = [shift_crop(b, shifts) for b in blocks]
            targets = _soft_labels(y, k)
            if rng.random() < config.mix_prob:
                mixed = []
                top = rng.integers(0, 1 << 30)
                for b in blocks:  # identical box and partner for every block
                    out, area, perm_mix = patch_mix(b, np.random.default_rng(top), config.mix_frac)
                    mixed.append(out)
                blocks = mixed
                targets = (1 - area) * targets + area * targets[perm_mix]
            if scheme.needs_stats:
                use = list(range(n_pairs))
            else:
                pi = compute_weights(scheme, state, rng=rng)
                use = [i for i in range(n_pairs) if pi[i] > 0]
            x = np.concatenate([blocks[0]] + [blocks[1 + i] for i in use])
            try:
                vals = clf.forward(x)
                z = vals[clf.logits_node]
                tgt = np.concatenate([targets] * (1 + len(use)))
                per = cross_entropy(z, tgt)
                if scheme.needs_stats:
                    pair_loss = per[m:].reshape(n_pairs, m).mean(axis=1)
                    pair_acc = (z[m:].argmax(1) == np.tile(y, n_pairs)).reshape(n_pairs, m).mean(1)
                    pi = compute_weights(scheme, state, losses=pair_loss, correct=pair_acc, rng=rng)
                w = np.concatenate([np.full(m, 1.0 / m)] + [np.full(m, pi[i] / m) for i in use])
                loss = float(per @ w)
                grads = clf.param_grads(vals, clf.logits_node, w[:, None] * cross_entropy_grad(z, tgt))
            except (GraphError, FloatingPointError) as err:
                raise TrainingDivergedError(epoch, str(err)) from err
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, "loss is not finite")
            opt.step(grads)
            pi_sum += pi
    mid = model_id or f"pubdef-{scheme.label()}-{config.arch}-s{seed}"
    tags = {"scheme": scheme.label(), "alpha": scheme.alpha, "pairs": cache.ids,
            "cache_digest": cache.digest(), "mean_weights": list(np.round(pi_sum / pi_sum.sum(), 6))}
    return TrainedModel(mid, config.arch, "pubdef", seed, clf, asdict(config), tags=tags)


def write_run_manifest(path, model, selection=None, metrics=None, seed=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"model": model.id, "arch": model.arch, "seed": model.seed if seed is None else seed,
           "config": model.config, "defense": model.tags,
           "checkpoint_sha256": model.checkpoint_digest(),
           "selection": None if selection is None else selection.to_dict(),
           "metrics": metrics or {}}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))
    return path


# --- source selection ---------------------------------------------------------------------

SLOT_CRITERIA = {"linf-adv": "linf", "l2-adv": "l2", "corruption": "corruption", "normal": None}


@dataclass
class SourceSelection:
    chosen: list
    rationale: dict
    rounds: int = 0
    tau: float = 5.0

    def to_dict(self):
        return {"chosen": list(self.chosen), "rationale": self.rationale,
                "rounds": self.rounds, "tau": self.tau}


def initial_picks(zoo, scores, groups=GROUPS):
    """Most robust model of each adversarial group by its own criterion; first normal model."""
    picks = {}
    for g in groups:
        members = [m for m in zoo if m.group == g]
        if not members:
            raise PubDefError(f"zoo has no model in group {g!r}")
        crit = SLOT_CRITERIA.get(g)
        if crit is None:
            picks[g] = members[0].id
        else:
            picks[g] = max(members, key=lambda m: (scores[m.id][crit], -zoo.index(m))).id
    return picks


def select_sources(zoo, scores, probe, tau=5.0, max_rounds=2, groups=GROUPS):
    """Greedy per-group picks refined by within-group swaps.

    ``probe(chosen_ids)`` trains a defense on the chosen sources and returns, for every
    zoo model id, the defense's accuracy under that model's transfer attack.  A chosen
    model is replaced by the weakest same-group alternative when that alternative's
    attack leaves accuracy more than ``tau`` points lower.
    """
    picks = initial_picks(zoo, scores, groups)
    rationale = {g: {"group": g, "initial": picks[g], "swaps": []} for g in groups}
    rounds = 0
    for _ in range(max_rounds):
        if not np.isfinite(tau) and tau > 0:
            break
        acc = probe([picks[g] for g in groups])
        rounds += 1
        swapped = False
        for g in groups:
            current = picks[g]
            others = [m.id for m in zoo if m.group == g and m.id != current]
            if not others:
                continue
            worst = min(others, key=lambda i: (acc[i], others.index(i)))
            if acc[worst] < acc[current] - tau:
                rationale[g]["swaps"].append({"out": current, "in": worst,
                                              "acc_out": round(float(acc[current]), 4),
                                              "acc_in": round(float(acc[worst]), 4)})
                picks[g] = worst
                swapped = True
        if not swapped:
            break
    for g in groups:
        rationale[g]["final"] = picks[g]
    return SourceSelection([picks[g] for g in groups], rationale, rounds, tau)


def transfer_probe(zoo, train, eval_set, attack_config, defense_config, seed=0, versions=1):
    """Build the ``probe`` used by :func:`select_sources`: a short PubDef(all) run."""
    by_id = {m.id: m for m in zoo}

    def probe(chosen):
        cache = pregenerate_cache([by_id[i] for i in chosen], [attack_config.algorithm], train,
                                  attack_config, versions=versions, seed=seed)
        defender = train_pubdef(train, cache, WeightingScheme("all"), defense_config, seed)
        out = {}
        for m in zoo:
            xa = run_attack(Source(m), eval_set.images, eval_set.labels, attack_config,
                            np.random.default_rng(derive_seed(seed, m.id)))
            out[m.id] = 100.0 * float(np.mean(defender.predict(xa) == eval_set.labels))
        return out

    return probe
