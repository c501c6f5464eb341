"""Synthetic image classes and a desk-scale zoo of publicly trained models.

Each class mixes two cues: a faint fixed-phase texture (highly predictive but
fragile under small l-inf perturbations) and a bright oriented bar that only
matches the label part of the time (robust but noisy).  Normally trained
models lean on the texture; adversarially trained models fall back on the bar.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .attacks import pgd_train_attack
from .models import ARCHITECTURES, build_model
from .tensor_core import cross_entropy, cross_entropy_grad, GraphError, load_checkpoint, \
    save_checkpoint


class ModelGroup(str, Enum):
    NORMAL = "normal"
    LINF = "linf-adv"
    L2 = "l2-adv"
    CORRUPTION = "corruption"


GROUPS = tuple(g.value for g in ModelGroup)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, detail=""):
        self.epoch = epoch
        super().__init__(f"training diverged at epoch {epoch}" + (f": {detail}" if detail else ""))


# --- datasets ---------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSpec:
    classes: int = 4
    size: int = 12
    channels: int = 3
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    texture_amplitude: float = 0.04
    texture_frequency: float = 0.2
    shape_amplitude: float = 0.35
    shape_reliability: float = 0.4
    noise: float = 0.1
    jitter: int = 1

    def __post_init__(self):
        if self.classes < 3:
            raise ValueError("need at least 3 classes (the DLR loss uses the third-largest logit)")
        if self.size < 8:
            raise ValueError("image size must be at least 8")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("split sizes must be nonnegative")
        if not 0 <= self.shape_reliability <= 1:
            raise ValueError("shape_reliability is a probability")


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str
    spec: DatasetSpec | None = None

    def __len__(self):
        return len(self.labels)

    @property
    def spec_hash(self):
        h = hashlib.sha256()
        h.update(self.split.encode())
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.split, self.spec)

    @property
    def input_shape(self):
        return self.images.shape[1:]

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.spec is None else self.spec.classes


def _class_templates(spec, rng):
    h = spec.size
    yy, xx = np.mgrid[0:h, 0:h].astype(float)
    tex = np.zeros((spec.classes, spec.channels, h, h))
    for k in range(spec.classes):
        theta = np.pi * k / spec.classes + np.pi / 8
        wave = np.cos(2 * np.pi * spec.texture_frequency * (xx * np.cos(theta) + yy * np.sin(theta)))
        tex[k] = rng.choice([-1.0, 1.0], size=(spec.channels, 1, 1)) * wave
    return tex


def _bar_mask(k, classes, h, cy, cx):
    yy, xx = np.mgrid[0:h, 0:h].astype(float)
    ang = np.pi * k / classes
    across = np.abs(-(yy - cy) * np.sin(ang) + (xx - cx) * np.cos(ang))
    along = np.abs((yy - cy) * np.cos(ang) + (xx - cx) * np.sin(ang))
    return (across < 1.0) & (along < h / 3)


def _sample(spec, tex, n, rng):
    k, c, h = spec.classes, spec.channels, spec.size
    labels = np.arange(n) % k
    rng.shuffle(labels)
    x = 0.5 + spec.noise * rng.normal(size=(n, c, h, h)) + spec.texture_amplitude * tex[labels]
    shape_cls = np.where(rng.random(n) < spec.shape_reliability, labels, rng.integers(0, k, n))
    shifts = rng.integers(-spec.jitter, spec.jitter + 1, size=(n, 2))
    gains = rng.uniform(0.7, 1.3, size=n)
    centre = h / 2 - 0.5
    for i in range(n):
        m = _bar_mask(shape_cls[i], k, h, centre + shifts[i, 0], centre + shifts[i, 1])
        x[i][:, m] += spec.shape_amplitude * gains[i]
    return np.clip(x, 0.0, 1.0), labels.astype(np.int64)


def make_synthetic_dataset(spec=DatasetSpec()):
    """Deterministic (train, test) pair for ``spec``; classes are balanced exactly."""
    tex = _class_templates(spec, np.random.default_rng([spec.seed, 0]))
    xtr, ytr = _sample(spec, tex, spec.n_train, np.random.default_rng([spec.seed, 1]))
    xte, yte = _sample(spec, tex, spec.n_test, np.random.default_rng([spec.seed, 2]))
    return Dataset(xtr, ytr, "train", spec), Dataset(xte, yte, "test", spec)


def load_idx(path):
    """Read an IDX array file (optionally gzipped), as used by MNIST-style datasets."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0:
        raise ValueError("not an IDX file")
    dtypes = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    return np.frombuffer(raw, dtype=dtypes[dtype_code], offset=4 + 4 * ndim).reshape(dims)


def dataset_from_idx(images_path, labels_path, split):
    """Images scaled to [0, 1] with a channel axis added when missing."""
    x = load_idx(images_path).astype(np.float64)
    x = x / 255.0 if x.max() > 1 else x
    if x.ndim == 3:
        x = x[:, None]
    return Dataset(x, load_idx(labels_path).astype(np.int64), split)


# --- corruptions -------------------------------------------------------------------

CORRUPTIONS = ("gaussian-noise", "blur", "patch-mix")


def corrupt(x, kind, rng, severity=1.0):
    if kind == "gaussian-noise":
        return np.clip(x + rng.normal(0.0, 0.1 * severity, size=x.shape), 0, 1)
    if kind == "blur":
        p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        h, w = x.shape[-2:]
        out = sum(p[:, :, i:i + h, j:j + w] for i in range(3) for j in range(3)) / 9.0
        return (1 - severity) * x + severity * out if severity < 1 else out
    if kind == "patch-mix":
        return patch_mix(x, rng, frac=0.3 * severity)[0]
    raise ValueError(f"unknown corruption {kind!r}")


def patch_mix(x, rng, frac=0.3):
    """Paste one random square from a shuffled copy of the batch; returns (mixed, area, perm)."""
    n, _, h, w = x.shape
    side = max(1, int(round(np.sqrt(frac) * h)))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    perm = rng.permutation(n)
    out = x.copy()
    out[:, :, top:top + side, left:left + side] = x[perm, :, top:top + side, left:left + side]
    return out, side * side / (h * w), perm


def shift_crop(x, shifts):
    """Pad-and-crop: translate each image by its (dy, dx) with edge padding."""
    n, _, h, w = x.shape
    r = int(np.abs(shifts).max(initial=0))
    if r == 0:
        return x.copy()
    p = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)), mode="edge")
    out = np.empty_like(x)
    for i, (dy, dx) in enumerate(shifts):
        out[i] = p[i, :, r + dy:r + dy + h, r + dx:r + dx + w]
    return out


# --- training ------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64
    epsilon: float = 0.03
    epsilon_l2: float | None = None  # None -> epsilon * sqrt(d) / 4
    attack_steps: int = 7
    step_factor: float = 2.5
    warmup_frac: float = 0.4  # fraction of training over which epsilon ramps up


class SGD:
    """Momentum SGD with decoupled-from-nothing L2 decay and a cosine learning-rate decay."""

    def __init__(self, params, lr, momentum, weight_decay, total_steps):
        self.params = params
        self.lr, self.momentum, self.wd = lr, momentum, weight_decay
        self.total = max(total_steps, 1)
        self.t = 0
        self.vel = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        lr = self.lr * 0.5 * (1 + np.cos(np.pi * self.t / self.total))
        for k, g in grads.items():
            self.vel[k] = self.momentum * self.vel[k] + g + self.wd * self.params[k]
            self.params[k] = self.params[k] - lr * self.vel[k]
        self.t += 1


def weighted_loss_grads(model, x, targets, weights):
    """Sum_i weights_i * CE_i and its parameter gradients."""
    vals = model.forward(x)
    z = vals[model.logits_node]
    per = cross_entropy(z, targets)
    seed = weights[:, None] * cross_entropy_grad(z, targets)
    return float(per @ weights), model.param_grads(vals, model.logits_node, seed)


def l2_radius(cfg, input_shape):
    if cfg.epsilon_l2 is not None:
        return cfg.epsilon_l2
    return cfg.epsilon * np.sqrt(np.prod(input_shape)) / 4


@dataclass
class TrainedModel:
    id: str
    arch: str
    group: str
    seed: int
    classifier: object
    config: dict = field(default_factory=dict)
    clean_accuracy: float | None = None
    tags: dict = field(default_factory=dict)

    @property
    def feature_tap(self):
        return self.classifier.feature_tap

    def predict(self, x):
        return self.classifier.predict(x)

    def accuracy(self, data):
        return 100.0 * float(np.mean(self.predict(data.images) == data.labels))

    def checkpoint_digest(self):
        from .tensor_core import checkpoint_bytes
        return hashlib.sha256(checkpoint_bytes(self.classifier.params)).hexdigest()


def train_model(arch, procedure, dataset, config=TrainConfig(), seed=0, model_id=None):
    """Train ``arch`` from scratch under one of the four zoo procedures."""
    group = ModelGroup(procedure).value
    if arch not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch!r}")
    clf = build_model(arch, dataset.input_shape, dataset.num_classes, seed)
    rng = np.random.default_rng([seed, 7])
    n = len(dataset)
    bs = config.batch_size
    steps_per_epoch = max(n // bs, 1)
    opt = SGD(clf.params, config.lr, config.momentum, config.weight_decay,
              config.epochs * steps_per_epoch)
    eps_full = {"linf-adv": config.epsilon,
                "l2-adv": l2_radius(config, dataset.input_shape)}.get(group, 0.0)
    norm = "l2" if group == "l2-adv" else "linf"
    warm = max(config.warmup_frac * config.epochs * steps_per_epoch, 1.0)
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * bs:(s + 1) * bs]
            xb, yb = dataset.images[idx], dataset.labels[idx]
            if eps_full > 0:
                eps = eps_full * min(1.0, (opt.t + 1) / warm)
                xb = pgd_train_attack(clf, xb, yb, eps, config.attack_steps,
                                      config.step_factor * eps / config.attack_steps, norm, rng)
            elif group == "corruption":
                xb = corrupt(xb, CORRUPTIONS[int(rng.integers(len(CORRUPTIONS)))], rng)
            try:
                loss, grads = weighted_loss_grads(clf, xb, yb, np.full(len(yb), 1.0 / len(yb)))
            except (GraphError, FloatingPointError) as err:
                raise TrainingDivergedError(epoch, str(err)) from err
            if not np.isfinite(loss):
                raise TrainingDivergedError(epoch, "loss is not finite")
            opt.step(grads)
    mid = model_id or f"{group}-{arch}-s{seed}"
    return TrainedModel(mid, arch, group, seed, clf, asdict(config))


# --- zoo ------------------------------------------------------------------------------

@dataclass(frozen=True)
class ZooRow:
    arch: str
    group: str
    seed: int

    @property
    def id(self):
        return f"{self.group}-{self.arch}-s{self.seed}"


REFERENCE_ZOO = (
    ZooRow("cnn-small", "normal", 11),
    ZooRow("cnn-deep", "normal", 12),
    ZooRow("mlp-small", "linf-adv", 21),
    ZooRow("mixer-lite", "linf-adv", 22),
    ZooRow("mlp-wide", "l2-adv", 31),
    ZooRow("cnn-small", "l2-adv", 32),
    ZooRow("mixer-lite", "corruption", 41),
    ZooRow("mlp-small", "corruption", 42),
)


def validate_zoo_spec(rows):
    rows = [r if isinstance(r, ZooRow) else ZooRow(**r) for r in rows]
    seen = set()
    for r in rows:
        ModelGroup(r.group)
        if r.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {r.arch!r}")
        key = (r.arch, r.seed, r.group)
        if key in seen:
            raise ValueError(f"duplicate zoo row {key}")
        seen.add(key)
    return rows


def build_zoo(dataset, rows=REFERENCE_ZOO, config=TrainConfig(), test=None, jobs=1):
    """Train every zoo row; ids are unique and every listed group is represented."""
    rows = validate_zoo_spec(rows)
    args = [(r.arch, r.group, dataset, config, r.seed, r.id) for r in rows]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(jobs) as ex:
            models = list(ex.map(_train_star, args))
    else:
        models = [train_model(*a) for a in args]
    if test is not None:
        for m in models:
            m.clean_accuracy = m.accuracy(test)
    return models


def _train_star(a):
    return train_model(*a)


def save_zoo(models, directory, dataset_hash=None, manifest_name="zoo.json"):
    directory = Path(directory)
    (directory / "checkpoints").mkdir(parents=True, exist_ok=True)
    entries = []
    for m in models:
        ck = directory / "checkpoints" / f"{m.id}.tapm"
        save_checkpoint(ck, m.classifier.params)
        entries.append({
            "id": m.id, "architecture": m.arch, "group": m.group, "seed": m.seed,
            "checkpoint": str(ck.relative_to(directory)),
            "clean_accuracy": None if m.clean_accuracy is None else round(m.clean_accuracy, 4),
            "input_shape": list(m.classifier.input_shape),
            "num_classes": m.classifier.num_classes,
            "checkpoint_sha256": m.checkpoint_digest(),
            "tags": m.tags,
        })
    manifest = {"dataset": dataset_hash, "models": entries}
    (directory / manifest_name).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory / manifest_name


def load_zoo(directory, manifest_name="zoo.json"):
    directory = Path(directory)
    manifest = json.loads((directory / manifest_name).read_text())
    out = []
    for e in manifest["models"]:
        clf = build_model(e["architecture"], tuple(e["input_shape"]), e["num_classes"], e["seed"])
        params = load_checkpoint(directory / e["checkpoint"])
        clf.params.update(params)
        out.append(TrainedModel(e["id"], e["architecture"], e["group"], e["seed"], clf,
                                clean_accuracy=e["clean_accuracy"], tags=e.get("tags", {})))
    return out


def robustness_scores(model, test, config=TrainConfig(), steps=10, seed=0):
    """White-box l-inf / l2 PGD accuracy and mean accuracy over the corruption families."""
    rng = np.random.default_rng(seed)
    x, y = test.images, test.labels
    out = {"clean": model.accuracy(test)}
    for norm, eps in (("linf", config.epsilon), ("l2", l2_radius(config, test.input_shape))):
        xa = pgd_train_attack(model.classifier, x, y, eps, steps, 2.5 * eps / steps, norm, rng)
        out[norm] = 100.0 * float(np.mean(model.predict(xa) == y))
    accs = [100.0 * float(np.mean(model.predict(corrupt(x, k, rng, 2.0)) == y)) for k in CORRUPTIONS]
    out["corruption"] = float(np.mean(accs))
    return out


def with_epochs(config, epochs):
    return replace(config, epochs=epochs)
