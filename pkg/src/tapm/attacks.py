"""Transfer-attack suite: eleven l-inf algorithms plus logit-averaging ensembles.

Every attack is iterative sign-gradient ascent from a random start inside the
epsilon ball, projected back onto the ball and the [0, 1] pixel box after each
step.  Algorithms differ only in how the ascent direction is formed, which is
the job of :func:`gradient_pipeline`.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor_core import (checkpoint_bytes, cross_entropy, cross_entropy_grad, dlr_loss,
                          dlr_loss_grad, parse_checkpoint, softmax)

ALGORITHMS = ("pgd", "m-pgd", "pregradient", "di", "ti", "admix", "na", "ni-si-ti-dim",
              "ni-admix-ti-dim", "autopgd-ce", "autopgd-dlr")

MOMENTUM_ALGOS = {"m-pgd", "pregradient", "ni-si-ti-dim", "ni-admix-ti-dim"}
NESTEROV_ALGOS = {"ni-si-ti-dim", "ni-admix-ti-dim"}
DI_ALGOS = {"di", "ni-si-ti-dim", "ni-admix-ti-dim"}
TI_ALGOS = {"ti", "ni-si-ti-dim", "ni-admix-ti-dim"}
ADMIX_ALGOS = {"admix", "ni-admix-ti-dim"}


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    algorithm: str = "pgd"
    epsilon: float = 0.03
    steps: int = 50
    step_size: float | None = None  # None -> 2.5 * epsilon / steps
    norm: str = "linf"
    random_start: bool = True
    momentum: float = 1.0
    di_prob: float = 0.5
    di_min_scale: float = 0.9
    ti_kernel: int = 3
    admix_scales: int = 3
    admix_mixes: int = 2
    admix_strength: float = 0.2
    si_scales: int = 3
    na_steps: int = 8
    pregradient_radius: float = 2.0
    pregradient_samples: int = 2
    apgd_rho: float = 0.75
    apgd_alpha: float = 0.75
    fusion: str = "logits"

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise AttackError(f"unknown algorithm {self.algorithm!r}")
        if self.norm != "linf":
            raise AttackError("evaluation attacks are l-inf bounded")
        if self.epsilon < 0 or self.steps < 1:
            raise AttackError("need epsilon >= 0 and steps >= 1")
        if self.step_size is not None and self.step_size <= 0:
            raise AttackError("step size must be positive")
        if self.fusion not in ("logits", "probs"):
            raise AttackError(f"unknown fusion {self.fusion!r}")

    @property
    def step(self):
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class AttackSpec:
    """A pure attack strategy: one source (or a tuple of ensemble members) and one config."""

    source: str | tuple
    config: AttackConfig

    @property
    def sources(self):
        return (self.source,) if isinstance(self.source, str) else tuple(self.source)

    @property
    def id(self):
        return "+".join(self.sources) + "/" + self.config.algorithm

    def digest(self):
        blob = json.dumps({"source": list(self.sources), "config": self.config.to_dict()},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class AdversarialBatch:
    x_adv: np.ndarray
    origin_indices: np.ndarray
    spec: AttackSpec
    seed: int

    def max_linf(self, x):
        return float(np.abs(self.x_adv - x).reshape(len(x), -1).max(axis=1).max(initial=0.0))


def derive_seed(*parts):
    """Stable 63-bit seed from arbitrary printable parts (global seed, spec id, batch index...)."""
    h = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def project(x_adv, x, eps):
    return np.clip(np.clip(x_adv, x - eps, x + eps), 0.0, 1.0)


# --- sources -----------------------------------------------------------------

def _classifier(m):
    return getattr(m, "classifier", m)


class Source:
    """One model or a uniform ensemble exposed through a single loss/gradient surface."""

    def __init__(self, models, fusion="logits"):
        models = models if isinstance(models, (list, tuple)) else [models]
        if not models:
            raise AttackError("empty source")
        self.members = [_classifier(m) for m in models]
        classes = {m.num_classes for m in self.members}
        shapes = {m.input_shape for m in self.members}
        if len(classes) != 1:
            raise AttackError(f"ensemble members disagree on class count: {sorted(classes)}")
        if len(shapes) != 1:
            raise AttackError("ensemble members disagree on input shape")
        self.fusion = fusion
        self.num_classes = classes.pop()

    @property
    def feature_tap(self):
        if len(self.members) != 1:
            return None
        return self.members[0].feature_tap

    def _forward(self, x):
        vals = [m.forward(x) for m in self.members]
        zs = [v[m.logits_node] for v, m in zip(vals, self.members)]
        return vals, zs

    def _fused(self, zs):
        if self.fusion == "logits":
            return sum(zs) / len(zs)
        return np.log(sum(softmax(z) for z in zs) / len(zs))

    def logits(self, x):
        return self._fused(self._forward(x)[1])

    def loss_grad(self, x, y, loss="ce"):
        """Per-sample loss and its gradient w.r.t. ``x`` (losses are summed, not averaged)."""
        vals, zs = self._forward(x)
        fused = self._fused(zs)
        if loss == "ce":
            per = cross_entropy(fused, y)
            g_fused = cross_entropy_grad(fused, y)
        elif loss == "dlr":
            per = dlr_loss(fused, y)
            g_fused = dlr_loss_grad(fused, y)
        else:
            raise AttackError(f"unknown loss {loss!r}")
        n = len(self.members)
        grad = np.zeros_like(x)
        for v, m, z in zip(vals, self.members, zs):
            if self.fusion == "logits":
                seed = g_fused / n
            else:
                # fused = log(mean softmax); chain through the log and each softmax
                p = np.exp(fused)
                up = g_fused / p / n
                s = softmax(z)
                seed = s * (up - (s * up).sum(axis=1, keepdims=True))
            grad += m.input_grad(v, m.logits_node, seed)
        return per, grad


# --- input transforms with explicit adjoints ------------------------------------

def _resize_matrix(r, h):
    idx = np.floor(np.arange(r) * h / r).astype(int)
    p = np.zeros((r, h))
    p[np.arange(r), idx] = 1.0
    return p


class DiverseInput:
    """Random nearest-neighbour shrink to r in [min_scale*H, H] then zero-pad back to H."""

    def __init__(self, shape, prob, min_scale, rng):
        _, h, w = shape
        self.active = prob > 0 and rng.random() < prob
        if not self.active:
            return
        lo = min(h, math.ceil(min_scale * h))
        r = int(rng.integers(lo, h + 1))
        self.top = int(rng.integers(0, h - r + 1))
        self.left = int(rng.integers(0, w - r + 1))
        self.r, self.h = r, h
        self.p = _resize_matrix(r, h)

    def __call__(self, x):
        if not self.active:
            return x
        small = np.einsum("ih,nchw,jw->ncij", self.p, x, self.p)
        out = np.zeros_like(x)
        out[:, :, self.top:self.top + self.r, self.left:self.left + self.r] = small
        return out

    def adjoint(self, g):
        if not self.active:
            return g
        gs = g[:, :, self.top:self.top + self.r, self.left:self.left + self.r]
        return np.einsum("ih,ncij,jw->nchw", self.p, gs, self.p)


def tent_kernel(size):
    r = size // 2
    t = 1.0 - np.abs(np.arange(-r, r + 1)) / (r + 1)
    k = np.outer(t, t)
    return k / k.sum()


def smooth_gradient(g, kernel):
    """Depthwise 'same' convolution of each channel with ``kernel`` (zero padding)."""
    k = kernel.shape[0]
    if k == 1:
        return g * kernel[0, 0]
    r = k // 2
    gp = np.pad(g, ((0, 0), (0, 0), (r, r), (r, r)))
    out = np.zeros_like(g)
    h, w = g.shape[-2:]
    for i in range(k):
        for j in range(k):
            out += kernel[i, j] * gp[:, :, i:i + h, j:j + w]
    return out


def contrast_scale(u, gamma):
    """Shrink pixel values toward mid-grey: the [0, 1] analogue of scaling a [-1, 1] image."""
    return 0.5 + gamma * (u - 0.5)


def _l1_normalize(g):
    n = np.abs(g).reshape(len(g), -1).sum(axis=1)
    n = np.where(n > 0, n, 1.0)
    return g / n.reshape((-1,) + (1,) * (g.ndim - 1))


# --- the per-algorithm gradient pipeline ------------------------------------------

@dataclass
class PipelineState:
    momentum: np.ndarray | None = None
    prev_grad: np.ndarray | None = None
    kernel: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def gradient_pipeline(cfg, state, grad_fn, x, step, rng, pool=None):
    """Ascent direction for one step of ``cfg.algorithm``.

    ``grad_fn(u)`` returns the loss gradient at an arbitrary input batch ``u``;
    stages run as look-ahead, input transforms, gradient averaging, smoothing,
    momentum.  ``pool`` supplies the foreign images for admix (defaults to ``x``).
    """
    algo = cfg.algorithm
    if algo not in ALGORITHMS:
        raise AttackError(f"unknown algorithm {algo!r}")
    shape = x.shape[1:]
    point = x
    if algo in NESTEROV_ALGOS and state.momentum is not None:
        point = x + cfg.step * cfg.momentum * state.momentum

    def through_di(u):
        if algo not in DI_ALGOS:
            return grad_fn(u)
        t = DiverseInput(shape, cfg.di_prob, cfg.di_min_scale, rng)
        return t.adjoint(grad_fn(t(u)))

    if algo in ADMIX_ALGOS:
        pool = x if pool is None else pool
        foreign = [np.zeros_like(point)] if cfg.admix_mixes == 0 else \
            [pool[rng.integers(0, len(pool), size=len(point))] for _ in range(cfg.admix_mixes)]
        g = np.zeros_like(point)
        for i in range(max(cfg.admix_scales, 1)):
            gamma = 0.5 ** i
            for xf in foreign:
                mixed = point + cfg.admix_strength * (xf - 0.5)
                g += gamma * through_di(contrast_scale(mixed, gamma))
        g /= max(cfg.admix_scales, 1) * len(foreign)
    elif algo == "ni-si-ti-dim":
        g = np.zeros_like(point)
        for i in range(max(cfg.si_scales, 1)):
            gamma = 0.5 ** i
            g += gamma * through_di(contrast_scale(point, gamma))
        g /= max(cfg.si_scales, 1)
    elif algo == "pregradient":
        if state.prev_grad is None or cfg.pregradient_samples < 1 or cfg.pregradient_radius == 0:
            g = grad_fn(point)
        else:
            offsets = np.linspace(-cfg.pregradient_radius, cfg.pregradient_radius,
                                  cfg.pregradient_samples)
            lead = np.sign(state.prev_grad) * cfg.step
            g = sum(grad_fn(point + c * lead) for c in offsets) / len(offsets)
        state.prev_grad = g
    else:
        g = through_di(point)

    if algo in TI_ALGOS:
        if state.kernel is None:
            state.kernel = tent_kernel(cfg.ti_kernel)
        g = smooth_gradient(g, state.kernel)

    if algo in MOMENTUM_ALGOS:
        step_dir = _l1_normalize(g)
        state.momentum = step_dir if state.momentum is None else cfg.momentum * state.momentum + step_dir
        return state.momentum
    return g


# --- feature-level (NA) loss ---------------------------------------------------------

def attribution_weights(model, x_clean, y, n):
    """Path-averaged gradient of the true-class logit w.r.t. the feature tap.

    The path runs straight from an all-zero baseline to ``x_clean``; ``n``
    evaluation points at fractions k/n, k = 1..n.
    """
    if n < 1:
        raise AttackError("need at least one integration step")
    m = _classifier(model)
    if m.feature_tap is None:
        raise AttackError("model has no feature tap")
    onehot = np.zeros((len(y), m.num_classes))
    onehot[np.arange(len(y)), y] = 1.0
    w = 0.0
    for k in range(1, n + 1):
        vals = m.forward(x_clean * (k / n))
        w = w + m.vjp(vals, m.logits_node, onehot)[m.feature_tap]
    return w / n


def feature_attack_loss(model, x_current, x_clean, y, n=8, weights=None):
    """Per-sample negative attribution-weighted feature deviation and its input gradient."""
    m = _classifier(model)
    if m.feature_tap is None:
        raise AttackError("model has no feature tap")
    if weights is None:
        weights = attribution_weights(m, x_clean, y, n)
    a_clean = m.forward(x_clean)[m.feature_tap]
    vals = m.forward(x_current)
    dev = vals[m.feature_tap] - a_clean
    per = -(weights * dev).reshape(len(dev), -1).sum(axis=1)
    grad = m.vjp(vals, m.feature_tap, -weights)[m.graph.node_id("x")]
    return per, grad


# --- AutoPGD step-size schedule ------------------------------------------------------

def apgd_checkpoints(steps):
    """Iteration indices where the step size may halve (gap shrinks from 22% to >= 6%)."""
    p = [0.0, 0.22]
    while p[-1] < 1:
        p.append(p[-1] + max(p[-1] - p[-2] - 0.03, 0.06))
    marks = sorted({math.ceil(q * steps) for q in p[1:] if math.ceil(q * steps) < steps})
    return [m for m in marks if m > 0]


def autopgd_schedule(steps, loss_history, rho=0.75):
    """Step-size multiplier per iteration given a loss trajectory.

    ``loss_history[k]`` is the loss after iteration k.  At each checkpoint the
    multiplier halves when fewer than ``rho`` of the steps since the previous
    checkpoint improved on their predecessor.
    """
    if steps < 4:
        raise AttackError("autopgd needs at least 4 steps")
    hist = np.asarray(loss_history, dtype=float)
    mult = np.ones(steps)
    cur, last = 1.0, 0
    for c in apgd_checkpoints(steps):
        seg = hist[last:c + 1] if c < len(hist) else hist[last:]
        gap = c - last
        improved = int(np.sum(np.diff(seg) > 0)) if len(seg) > 1 else 0
        if gap > 0 and improved < rho * gap:
            cur *= 0.5
        mult[c:] = cur
        last = c
    return mult


def _apgd(source, x, y, cfg, rng, start):
    loss_name = "dlr" if cfg.algorithm == "autopgd-dlr" else "ce"
    n = len(x)
    bshape = (n,) + (1,) * (x.ndim - 1)
    eta = np.full(n, 2.0 * cfg.epsilon)
    checkpoints = set(apgd_checkpoints(cfg.steps)) if cfg.steps >= 4 else set()
    xk = start
    lk, gk = source.loss_grad(xk, y, loss_name)
    _check_finite(gk, 0)
    best_x, best_l = xk.copy(), lk.copy()
    x_prev = xk
    improved = np.zeros(n)
    last = 0
    for k in range(cfg.steps):
        z = project(xk + eta.reshape(bshape) * np.sign(gk), x, cfg.epsilon)
        if k == 0:
            x_new = z
        else:
            a = cfg.apgd_alpha
            x_new = project(xk + a * (z - xk) + (1 - a) * (xk - x_prev), x, cfg.epsilon)
        l_new, g_new = source.loss_grad(x_new, y, loss_name)
        _check_finite(g_new, k + 1)
        improved += l_new > lk
        better = l_new > best_l
        best_x[better], best_l[better] = x_new[better], l_new[better]
        x_prev, xk, lk, gk = xk, x_new, l_new, g_new
        if k + 1 in checkpoints:
            gap = k + 1 - last
            halve = improved < cfg.apgd_rho * gap
            if halve.any():
                eta[halve] *= 0.5
                xk = xk.copy()
                xk[halve] = best_x[halve]
                x_prev = x_prev.copy()
                x_prev[halve] = best_x[halve]
                lb, gb = source.loss_grad(xk, y, loss_name)
                lk, gk = np.where(halve, best_l, lk), np.where(halve.reshape(bshape), gb, gk)
            improved[:] = 0
            last = k + 1
    return best_x


def _check_finite(g, step):
    if not np.all(np.isfinite(g)):
        raise AttackError(f"non-finite gradient at step {step}")


# --- generation -------------------------------------------------------------------

def _random_start(x, cfg, rng):
    if cfg.random_start and cfg.epsilon > 0:
        return project(x + rng.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape), x, cfg.epsilon)
    return x.copy()


def run_attack(source, x, y, cfg, rng, pool=None):
    """Core loop shared by :func:`generate` and :func:`ensemble_generate`."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y).astype(int)
    if x.size and (x.min() < 0 or x.max() > 1):
        raise AttackError("input pixels must lie in [0, 1]")
    if cfg.epsilon == 0:
        return x.copy()
    start = _random_start(x, cfg, rng)
    if cfg.algorithm in ("autopgd-ce", "autopgd-dlr"):
        return _apgd(source, x, y, cfg, rng, start)
    if cfg.algorithm == "na":
        tap_model = source.members[0] if source.feature_tap is not None else None
        if tap_model is None:
            raise AttackError("NA needs a source with a feature tap")
        weights = attribution_weights(tap_model, x, y, cfg.na_steps)

        def grad_fn(u):
            return feature_attack_loss(tap_model, u, x, y, weights=weights)[1]
    else:
        def grad_fn(u):
            return source.loss_grad(u, y, "ce")[1]

    state = PipelineState()
    xa = start
    for t in range(cfg.steps):
        d = gradient_pipeline(cfg, state, grad_fn, xa, t, rng, pool=pool)
        _check_finite(d, t)
        xa = project(xa + cfg.step * np.sign(d), x, cfg.epsilon)
    return xa


def generate(spec, source, batch, seed, indices=None):
    """Run ``spec`` against ``source`` on ``batch = (x, y)``; deterministic given seed."""
    x, y = batch
    src = source if isinstance(source, Source) else Source(source, spec.config.fusion)
    if spec.config.algorithm == "na" and src.feature_tap is None:
        raise AttackError(f"NA is not applicable to source {spec.id}: no feature tap")
    rng = np.random.default_rng(seed)
    xa = run_attack(src, x, y, spec.config, rng)
    idx = np.arange(len(x)) if indices is None else np.asarray(indices)
    return AdversarialBatch(xa, idx, spec, seed)


def ensemble_generate(models, config, batch, seed, ids=None, indices=None):
    """Attack the uniform average of member logits (or probabilities, per ``config.fusion``)."""
    models = list(models)
    ids = ids or [getattr(m, "id", f"m{i}") for i, m in enumerate(models)]
    spec = AttackSpec(tuple(ids) if len(ids) > 1 else ids[0], config)
    src = Source(models, config.fusion)
    return generate(spec, src, batch, seed, indices)


def is_applicable(algorithm, models):
    models = models if isinstance(models, (list, tuple)) else [models]
    return algorithm != "na" or (len(models) == 1 and _classifier(models[0]).feature_tap is not None)


# --- training-time attacks (l-inf and l2) -------------------------------------------------

def pgd_train_attack(model, x, y, eps, steps, step_size, norm, rng):
    """Plain PGD used inside adversarial training and robustness scoring (l-inf or l2)."""
    src = Source(model)
    if eps == 0:
        return x.copy()
    if norm == "linf":
        xa = project(x + rng.uniform(-eps, eps, size=x.shape), x, eps)
        for _ in range(steps):
            g = src.loss_grad(xa, y)[1]
            xa = project(xa + step_size * np.sign(g), x, eps)
        return xa
    if norm == "l2":
        flat = lambda a: a.reshape(len(a), -1)
        delta = rng.normal(size=x.shape)
        delta *= (eps * rng.random(len(x)) / np.linalg.norm(flat(delta), axis=1)).reshape(
            (-1,) + (1,) * (x.ndim - 1))
        xa = np.clip(x + delta, 0, 1)
        for _ in range(steps):
            g = src.loss_grad(xa, y)[1]
            gn = np.linalg.norm(flat(g), axis=1)
            gn = np.where(gn > 0, gn, 1.0).reshape((-1,) + (1,) * (x.ndim - 1))
            d = xa + step_size * g / gn - x
            dn = np.linalg.norm(flat(d), axis=1).reshape((-1,) + (1,) * (x.ndim - 1))
            d = d * np.minimum(1.0, eps / np.maximum(dn, 1e-12))
            xa = np.clip(x + d, 0, 1)
        return xa
    raise AttackError(f"unknown norm {norm!r}")


# --- on-disk attack cache ------------------------------------------------------------

def manifest_digest(manifest):
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()[:20]


class AttackCache:
    """Content-addressed store: ``root/<digest>/manifest.json`` plus ``v<k>.bin`` blobs."""

    def __init__(self, root):
        self.root = Path(root)

    def entry(self, manifest):
        d = self.root / manifest_digest(manifest)
        mpath = d / "manifest.json"
        if mpath.exists():
            on_disk = json.loads(mpath.read_text())
            if on_disk != json.loads(json.dumps(manifest, sort_keys=True)):
                raise AttackError(f"cache collision at {d}: manifest differs")
        return d

    def has(self, manifest, version):
        return (self.entry(manifest) / f"v{version}.bin").exists()

    def store(self, manifest, version, tensors):
        d = self.entry(manifest)
        d.mkdir(parents=True, exist_ok=True)
        mpath = d / "manifest.json"
        if not mpath.exists():
            mpath.write_text(json.dumps(manifest, sort_keys=True, indent=1))
        blob = d / f"v{version}.bin"
        tmp = blob.with_suffix(".tmp")
        tmp.write_bytes(checkpoint_bytes(tensors))
        tmp.replace(blob)
        return blob

    def load(self, manifest, version):
        blob = self.entry(manifest) / f"v{version}.bin"
        if not blob.exists():
            raise FileNotFoundError(f"missing cache blob {blob}")
        return parse_checkpoint(blob.read_bytes())

    def blob_digest(self, manifest, version):
        blob = self.entry(manifest) / f"v{version}.bin"
        return hashlib.sha256(blob.read_bytes()).hexdigest()


def attack_manifest(dataset_hash, spec, seed, versions, split):
    return {
        "dataset": dataset_hash,
        "split": split,
        "source": list(spec.sources),
        "algorithm": spec.config.algorithm,
        "epsilon": spec.config.epsilon,
        "steps": spec.config.steps,
        "config": spec.config.to_dict(),
        "seed": int(seed),
        "versions": int(versions),
    }


def with_algorithm(cfg, algorithm, **overrides):
    return replace(cfg, algorithm=algorithm, **overrides)
