"""Static-graph reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is built once (node ids are returned by the builder methods)
and then evaluated any number of times against a bindings dict that maps
input and parameter names to arrays.  Nodes fed by an input carry a leading
batch axis; their declared shape is the per-sample shape.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

Tensor = np.ndarray

CHECKPOINT_MAGIC = b"TAPM"
CHECKPOINT_VERSION = 1


class GraphError(ValueError):
    """Raised for malformed graphs or bindings; names the offending node."""

    def __init__(self, message, node=None, name=None):
        self.node = node
        self.name = name
        where = f"node {node}" + (f" ({name!r})" if name else "") if node is not None else ""
        super().__init__(f"{where}: {message}" if where else message)


class DegenerateLossError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    op: str
    parents: tuple
    shape: tuple
    batched: bool
    name: str | None = None
    attrs: dict = field(default_factory=dict)


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self._names: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _add(self, op, parents, shape, batched, name=None, **attrs):
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"parent {p} does not precede node", len(self.nodes), name)
        if name is not None:
            if name in self._names:
                raise GraphError(f"duplicate name {name!r}", len(self.nodes), name)
            self._names[name] = len(self.nodes)
        self.nodes.append(Node(op, tuple(parents), tuple(shape), batched, name, attrs))
        return len(self.nodes) - 1

    def node_id(self, name):
        return self._names[name]

    def shape(self, i):
        return self.nodes[i].shape

    # --- leaves -----------------------------------------------------------
    def input(self, name, shape, batched=True, labels=False):
        return self._add("input", (), shape, batched, name, labels=labels)

    def param(self, name, shape):
        return self._add("param", (), shape, False, name)

    # --- ops --------------------------------------------------------------
    def matmul(self, a, b, name=None):
        sa, sb = self.shape(a), self.shape(b)
        if self.nodes[b].batched:
            raise GraphError("right operand of matmul must be unbatched", len(self.nodes), name)
        if not sa or len(sb) not in (1, 2) or sa[-1] != sb[0]:
            raise GraphError(f"matmul shape mismatch {sa} @ {sb}", len(self.nodes), name)
        out = sa[:-1] + sb[1:]
        return self._add("matmul", (a, b), out, self.nodes[a].batched, name)

    def conv2d(self, x, w, stride=1, pad=0, name=None):
        sx, sw = self.shape(x), self.shape(w)
        if len(sx) != 3 or len(sw) != 4 or sx[0] != sw[1]:
            raise GraphError(f"conv2d shape mismatch {sx} * {sw}", len(self.nodes), name)
        ho = (sx[1] + 2 * pad - sw[2]) // stride + 1
        wo = (sx[2] + 2 * pad - sw[3]) // stride + 1
        if ho < 1 or wo < 1:
            raise GraphError("conv2d output is empty", len(self.nodes), name)
        return self._add("conv2d", (x, w), (sw[0], ho, wo), self.nodes[x].batched, name,
                         stride=stride, pad=pad)

    def add(self, a, b, axis=None, name=None):
        """Elementwise sum; with ``axis`` set, ``b`` is a 1-D bias along that per-sample axis."""
        sa, sb = self.shape(a), self.shape(b)
        if axis is None:
            if sa != sb or self.nodes[a].batched != self.nodes[b].batched:
                raise GraphError(f"add shape mismatch {sa} + {sb}", len(self.nodes), name)
        else:
            axis = axis % len(sa)
            if len(sb) != 1 or sb[0] != sa[axis] or self.nodes[b].batched:
                raise GraphError(f"bias shape {sb} does not match axis {axis} of {sa}",
                                 len(self.nodes), name)
        return self._add("add", (a, b), sa, self.nodes[a].batched, name, axis=axis)

    def mul(self, a, b, name=None):
        if self.shape(a) != self.shape(b):
            raise GraphError(f"mul shape mismatch {self.shape(a)} * {self.shape(b)}",
                             len(self.nodes), name)
        return self._add("mul", (a, b), self.shape(a),
                         self.nodes[a].batched or self.nodes[b].batched, name)

    def relu(self, a, name=None):
        return self._add("relu", (a,), self.shape(a), self.nodes[a].batched, name)

    def scale(self, a, c, offset=0.0, name=None):
        """Affine map ``c * a + offset`` with constant ``c`` and ``offset``."""
        return self._add("scale", (a,), self.shape(a), self.nodes[a].batched, name, c=float(c),
                         offset=float(offset))

    def mean_pool(self, a, k=None, name=None):
        c, h, w = self.shape(a)
        if k is None:
            return self._add("mean_pool", (a,), (c,), self.nodes[a].batched, name, k=None)
        if h % k or w % k:
            raise GraphError(f"pool size {k} does not divide {h}x{w}", len(self.nodes), name)
        return self._add("mean_pool", (a,), (c, h // k, w // k), self.nodes[a].batched, name, k=k)

    def reshape(self, a, shape, name=None):
        if int(np.prod(shape)) != int(np.prod(self.shape(a))):
            raise GraphError(f"cannot reshape {self.shape(a)} to {shape}", len(self.nodes), name)
        return self._add("reshape", (a,), tuple(shape), self.nodes[a].batched, name)

    def sum(self, a, name=None):
        return self._add("sum", (a,), (), False, name)

    def softmax_cross_entropy(self, logits, labels, name=None):
        self._check_loss_inputs(logits, labels, name)
        return self._add("softmax_ce", (logits, labels), (), False, name)

    def dlr_loss(self, logits, labels, name=None):
        self._check_loss_inputs(logits, labels, name)
        if self.shape(logits)[-1] < 3:
            raise GraphError("DLR loss needs at least 3 classes", len(self.nodes), name)
        return self._add("dlr", (logits, labels), (), False, name)

    def _check_loss_inputs(self, logits, labels, name):
        if len(self.shape(logits)) != 1 or not self.nodes[logits].batched:
            raise GraphError("loss expects batched 1-D logits", len(self.nodes), name)
        if not self.nodes[labels].attrs.get("labels"):
            raise GraphError("loss labels must come from a labels input", len(self.nodes), name)

    def inputs(self):
        return [i for i, n in enumerate(self.nodes) if n.op == "input"]

    def params(self):
        return [i for i, n in enumerate(self.nodes) if n.op == "param"]

    def layer_nodes(self):
        """Ids of the parametric layers (matmul / conv2d) in topological order."""
        return [i for i, n in enumerate(self.nodes) if n.op in ("matmul", "conv2d")]


# --- loss helpers shared by graph nodes and callers working on raw logits ---

def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def cross_entropy(logits, labels):
    """Per-sample cross-entropy; ``labels`` are class indices or soft target rows."""
    lp = log_softmax(logits)
    if labels.ndim == logits.ndim:
        return -(labels * lp).sum(axis=-1)
    return -np.take_along_axis(lp, labels[:, None].astype(int), axis=-1)[:, 0]


def cross_entropy_grad(logits, labels):
    """d/dlogits of the per-sample cross-entropy (one row per sample)."""
    g = softmax(logits)
    if labels.ndim == logits.ndim:
        return g - labels
    g[np.arange(len(labels)), labels.astype(int)] -= 1.0
    return g


def _dlr_parts(logits, labels):
    z = np.atleast_2d(logits)
    y = np.atleast_1d(labels).astype(int)
    if z.shape[-1] < 3:
        raise DegenerateLossError("DLR loss needs at least 3 classes")
    order = np.argsort(-z, axis=-1, kind="stable")
    rows = np.arange(len(z))
    top1, top3 = order[:, 0], order[:, 2]
    denom = z[rows, top1] - z[rows, top3]
    if np.any(denom <= 0):
        raise DegenerateLossError("largest and third-largest logits coincide")
    other = z.copy()
    other[rows, y] = -np.inf
    runner = other.argmax(axis=-1)
    num = z[rows, y] - z[rows, runner]
    return z, y, rows, top1, top3, runner, num, denom


def dlr_loss(logits, label):
    """Difference-of-logits-ratio loss, -(z_y - max_{i!=y} z_i) / (z_(1) - z_(3)).

    Accepts one logit vector with a scalar label, or a batch with a label per row
    (returns per-row losses).
    """
    single = np.ndim(logits) == 1
    z, y, rows, top1, top3, runner, num, denom = _dlr_parts(np.asarray(logits, float), label)
    out = -num / denom
    return float(out[0]) if single else out


def dlr_loss_grad(logits, labels):
    z, y, rows, top1, top3, runner, num, denom = _dlr_parts(logits, labels)
    g = np.zeros_like(z)
    np.add.at(g, (rows, y), -1.0 / denom)
    np.add.at(g, (rows, runner), 1.0 / denom)
    np.add.at(g, (rows, top1), num / denom**2)
    np.add.at(g, (rows, top3), -num / denom**2)
    return g


# --- forward / backward kernels --------------------------------------------

def _im2col(x, kh, kw, stride, pad):
    """Columns (C*kh*kw, N*Ho*Wo) so a convolution is one matrix product."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    n, c, h, w = x.shape
    ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, n * ho * wo), ho, wo


def conv2d_forward(x, w, stride=1, pad=0):
    cols, ho, wo = _im2col(x, w.shape[2], w.shape[3], stride, pad)
    out = (w.reshape(w.shape[0], -1) @ cols).reshape(w.shape[0], len(x), ho, wo)
    return np.ascontiguousarray(out.transpose(1, 0, 2, 3))


def conv2d_backward(x, w, g, stride=1, pad=0):
    o, c, kh, kw = w.shape
    n, _, h, wd = x.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, pad)
    g_rows = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, -1)
    gw = (g_rows @ cols.T).reshape(w.shape)
    dcols = (w.reshape(o, -1).T @ g_rows).reshape(c, kh, kw, n, ho, wo)
    gx = np.zeros((c, n, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx.transpose(1, 0, 2, 3)), gw


def _bias_shape(ndim, axis):
    shape = [1] * ndim
    shape[axis] = -1
    return shape


def _forward(node, args):
    op = node.op
    if op == "matmul":
        return args[0] @ args[1]
    if op == "conv2d":
        return conv2d_forward(args[0], args[1], node.attrs["stride"], node.attrs["pad"])
    if op == "add":
        a, b = args
        axis = node.attrs["axis"]
        if axis is None:
            return a + b
        ax = axis + (1 if node.batched else 0)
        return a + b.reshape(_bias_shape(a.ndim, ax))
    if op == "mul":
        return args[0] * args[1]
    if op == "relu":
        return np.maximum(args[0], 0.0)
    if op == "scale":
        out = args[0] * node.attrs["c"]
        return out + node.attrs["offset"] if node.attrs["offset"] else out
    if op == "mean_pool":
        a = args[0]
        k = node.attrs["k"]
        if k is None:
            return a.mean(axis=(-2, -1))
        n, c, h, w = a.shape
        return a.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))
    if op == "reshape":
        a = args[0]
        lead = a.shape[:1] if node.batched else ()
        return a.reshape(lead + node.shape)
    if op == "sum":
        return np.asarray(args[0].sum())
    if op == "softmax_ce":
        return np.asarray(cross_entropy(args[0], args[1]).mean())
    if op == "dlr":
        try:
            return np.asarray(dlr_loss(args[0], args[1]).mean())
        except DegenerateLossError as err:
            raise GraphError(str(err)) from err
    raise GraphError(f"unknown op {op!r}")


def _backward(node, args, out, g):
    op = node.op
    if op == "matmul":
        a, b = args
        if b.ndim == 1:
            ga = np.multiply.outer(g, b)
            gb = np.tensordot(a, g, axes=(list(range(a.ndim - 1)), list(range(g.ndim))))
        else:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return [ga, gb]
    if op == "conv2d":
        return list(conv2d_backward(args[0], args[1], g, node.attrs["stride"], node.attrs["pad"]))
    if op == "add":
        axis = node.attrs["axis"]
        if axis is None:
            return [g, g]
        ax = axis + (1 if node.batched else 0)
        other = tuple(i for i in range(g.ndim) if i != ax)
        return [g, g.sum(axis=other)]
    if op == "mul":
        return [g * args[1], g * args[0]]
    if op == "relu":
        return [g * (args[0] > 0)]
    if op == "scale":
        return [g * node.attrs["c"]]
    if op == "mean_pool":
        a = args[0]
        k = node.attrs["k"]
        if k is None:
            h, w = a.shape[-2:]
            return [np.broadcast_to(g[..., None, None] / (h * w), a.shape).copy()]
        up = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return [up / (k * k)]
    if op == "reshape":
        return [g.reshape(args[0].shape)]
    if op == "sum":
        return [np.full(args[0].shape, float(g))]
    if op == "softmax_ce":
        logits, labels = args
        return [float(g) * cross_entropy_grad(logits, labels) / len(logits), None]
    if op == "dlr":
        logits, labels = args
        return [float(g) * dlr_loss_grad(logits, labels) / len(logits), None]
    raise GraphError(f"unknown op {op!r}")


def _check_binding(graph, i, value):
    node = graph.nodes[i]
    arr = np.asarray(value)
    if node.attrs.get("labels"):
        expect_ndim = 1 if node.batched else 0
        if arr.ndim != expect_ndim:
            raise GraphError(f"label binding has shape {arr.shape}", i, node.name)
        return arr.astype(np.int64)
    arr = np.asarray(arr, dtype=np.float64)
    got = arr.shape[1:] if node.batched else arr.shape
    if node.batched and arr.ndim == 0:
        got = None
    if got != node.shape:
        raise GraphError(f"binding shape {arr.shape} does not match declared {node.shape}"
                         + (" (plus batch axis)" if node.batched else ""), i, node.name)
    return arr


def evaluate(graph, bindings):
    """Forward values for every node, as a dict node id -> array."""
    values = {}
    batch = None
    for i, node in enumerate(graph.nodes):
        if node.op in ("input", "param"):
            if node.name not in bindings:
                raise GraphError("unbound " + node.op, i, node.name)
            v = _check_binding(graph, i, bindings[node.name])
            if node.batched:
                if batch is not None and len(v) != batch:
                    raise GraphError(f"batch size {len(v)} differs from {batch}", i, node.name)
                batch = len(v)
            values[i] = v
            continue
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            try:
                values[i] = _forward(node, [values[p] for p in node.parents])
            except FloatingPointError as err:
                raise GraphError(f"non-finite value in forward pass: {err}", i, node.name) from err
    return values


def backward(graph, values, loss=None, seed=None):
    """Reverse-mode gradients d(loss)/d(node) for every node reached.

    With ``seed`` given, ``loss`` may be any node and ``seed`` is the upstream
    gradient (a vector-Jacobian product).  Otherwise ``loss`` must be scalar.
    Input and parameter nodes always appear in the result (zeros if unreached).
    """
    if loss is None:
        scalars = [i for i, n in enumerate(graph.nodes) if n.op in ("softmax_ce", "dlr", "sum")]
        if len(scalars) != 1:
            raise GraphError("loss node is ambiguous; pass it explicitly")
        loss = scalars[0]
    if seed is None:
        if values[loss].ndim != 0:
            raise GraphError("backward needs a scalar loss", loss, graph.nodes[loss].name)
        seed = np.asarray(1.0)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != values[loss].shape:
        raise GraphError(f"seed shape {seed.shape} != value shape {values[loss].shape}", loss)
    grads = {loss: seed}
    for i in range(loss, -1, -1):
        if i not in grads:
            continue
        node = graph.nodes[i]
        if not node.parents:
            continue
        parts = _backward(node, [values[p] for p in node.parents], values[i], grads[i])
        for p, gp in zip(node.parents, parts):
            if gp is None:
                continue
            grads[p] = grads[p] + gp if p in grads else gp
    for i in graph.inputs() + graph.params():
        if i not in grads and not graph.nodes[i].attrs.get("labels"):
            grads[i] = np.zeros_like(values[i], dtype=np.float64)
    for i, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GraphError("non-finite gradient", i, graph.nodes[i].name)
    return grads


# --- finite-difference verification ------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: dict
    checked: dict
    skipped: dict
    tol: float

    @property
    def passed(self):
        return all(e < self.tol for e in self.max_rel_error.values())


def _kink_signature(graph, values):
    sig = []
    for i, node in enumerate(graph.nodes):
        if node.op == "relu":
            pre = values[node.parents[0]]
            sig.append((pre > 0).tobytes())
            sig.append((pre == 0).tobytes())
        elif node.op == "dlr":
            z = values[node.parents[0]]
            sig.append(np.argsort(-z, axis=-1, kind="stable").tobytes())
    return sig


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_diff_check(graph, bindings, h=1e-5, tol=1e-4, n_coords=100, seed=0, loss=None,
                      wrt=None):
    """Compare analytic gradients with central differences on random coordinates.

    Coordinates whose ±h perturbation changes any relu activation pattern or
    DLR ordering (including pre-activations sitting exactly at 0) are skipped.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if loss is None:
        loss = [i for i, n in enumerate(graph.nodes) if n.op in ("softmax_ce", "dlr", "sum")][-1]
    base = evaluate(graph, bindings)
    grads = backward(graph, base, loss)
    base_sig = _kink_signature(graph, base)
    rng = np.random.default_rng(seed)
    targets = wrt or [graph.nodes[i].name for i in graph.inputs() + graph.params()
                      if not graph.nodes[i].attrs.get("labels")]
    report = FiniteDiffReport({}, {}, {}, tol)
    for name in targets:
        idx = graph.node_id(name)
        x0 = np.asarray(bindings[name], dtype=np.float64)
        k = min(n_coords, x0.size)
        coords = rng.choice(x0.size, size=k, replace=False)
        worst, checked, skipped = 0.0, 0, 0
        for c in coords:
            vals = []
            sigs = []
            for sgn in (1.0, -1.0):
                xp = x0.copy().reshape(-1)
                xp[c] += sgn * h
                b = dict(bindings)
                b[name] = xp.reshape(x0.shape)
                out = evaluate(graph, b)
                vals.append(float(out[loss]))
                sigs.append(_kink_signature(graph, out))
            if sigs[0] != base_sig or sigs[1] != base_sig:
                skipped += 1
                continue
            numeric = (vals[0] - vals[1]) / (2 * h)
            analytic = float(grads[idx].reshape(-1)[c])
            worst = max(worst, relative_error(analytic, numeric))
            checked += 1
        report.max_rel_error[name] = worst
        report.checked[name] = checked
        report.skipped[name] = skipped
    return report


# --- checkpoint format -------------------------------------------------------

def checkpoint_bytes(params):
    """Serialize named float64 arrays into the TAPM checkpoint layout."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def parse_checkpoint(data):
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a TAPM checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", data, off)
        off += 4 * rank
        size = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(dims)
        off += 8 * size
        out[name] = arr.astype(np.float64)
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return out


def save_checkpoint(path, params):
    Path(path).write_bytes(checkpoint_bytes(params))


def load_checkpoint(path):
    return parse_checkpoint(Path(path).read_bytes())
