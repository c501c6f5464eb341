"""Architecture catalog and the classifier wrapper used by attacks and training."""

from __future__ import annotations

import numpy as np

from .tensor_core import Graph, backward, evaluate

ARCHITECTURES = ("mlp-small", "mlp-wide", "cnn-small", "cnn-deep", "mixer-lite")


class Classifier:
    """A graph, its parameter dict, and the node ids callers need.

    ``feature_tap`` is the activation closest to one-fourth of the network's
    parametric depth, or ``None`` when the model does not expose one.
    """

    def __init__(self, graph, params, logits, feature_tap=None, arch=None):
        self.graph = graph
        self.params = params
        self.logits_node = logits
        self.feature_tap = feature_tap
        self.arch = arch
        self.input_shape = graph.shape(graph.node_id("x"))
        self.num_classes = graph.shape(logits)[-1]

    def bindings(self, x):
        b = dict(self.params)
        b["x"] = x
        return b

    def forward(self, x):
        return evaluate(self.graph, self.bindings(x))

    def logits(self, x, batch_size=1024):
        if len(x) <= batch_size:
            return self.forward(x)[self.logits_node]
        return np.concatenate([self.forward(x[i:i + batch_size])[self.logits_node]
                               for i in range(0, len(x), batch_size)])

    def predict(self, x):
        return self.logits(x).argmax(axis=1)

    def vjp(self, values, node, seed):
        """Gradients of <seed, value(node)> w.r.t. the input and every parameter."""
        return backward(self.graph, values, node, seed)

    def input_grad(self, values, node, seed):
        return self.vjp(values, node, seed)[self.graph.node_id("x")]

    def param_grads(self, values, node, seed):
        g = self.vjp(values, node, seed)
        return {name: g[self.graph.node_id(name)] for name in self.params}


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class _Builder:
    def __init__(self, input_shape, rng):
        self.g = Graph()
        self.rng = rng
        self.params = {}
        self.acts = []  # post-activation node per parametric layer
        x = self.g.input("x", input_shape)
        self.x = self.g.scale(x, 4.0, offset=-2.0)  # [0, 1] pixels -> [-2, 2]
        self._n = 0

    def _p(self, shape, fan_in, bias=False):
        name = f"p{len(self.params)}"
        self.params[name] = np.zeros(shape) if bias else _he(self.rng, shape, fan_in)
        return self.g.param(name, shape)

    def dense(self, h, out, act=True):
        k = self.g.shape(h)[-1]
        w = self._p((k, out), k)
        b = self._p((out,), k, bias=True)
        h = self.g.add(self.g.matmul(h, w), b, axis=-1)
        return self._finish(h, act)

    def conv(self, h, out, k=3, stride=1, pad=1, act=True):
        c = self.g.shape(h)[0]
        w = self._p((out, c, k, k), c * k * k)
        b = self._p((out,), c * k * k, bias=True)
        h = self.g.add(self.g.conv2d(h, w, stride, pad), b, axis=0)
        return self._finish(h, act)

    def _finish(self, h, act):
        if act:
            h = self.g.relu(h)
        self.acts.append(h)
        return h

    def flatten(self, h):
        return self.g.reshape(h, (int(np.prod(self.g.shape(h))),))

    def done(self, logits, arch):
        tap = quarter_depth_tap(self.acts[:-1]) if len(self.acts) > 1 else None
        return Classifier(self.g, self.params, logits, tap, arch)


def quarter_depth_tap(layer_outputs):
    """Output of the layer whose 1-based depth is nearest L/4 (earlier on ties)."""
    depth = len(layer_outputs) + 1  # the classifier head counts as a layer
    target = depth / 4.0
    best = min(range(len(layer_outputs)), key=lambda j: (abs(j + 1 - target), j))
    return layer_outputs[best]


def build_model(arch, input_shape, num_classes, seed):
    """Freshly initialised :class:`Classifier` for one catalog entry."""
    rng = np.random.default_rng(seed)
    b = _Builder(tuple(input_shape), rng)
    c, h, w = input_shape
    x = b.x
    if arch == "mlp-small":
        z = b.dense(b.flatten(x), 32)
        logits = b.dense(z, num_classes, act=False)
    elif arch == "mlp-wide":
        z = b.dense(b.flatten(x), 128)
        z = b.dense(z, 64)
        logits = b.dense(z, num_classes, act=False)
    elif arch == "cnn-small":
        z = b.conv(x, 8)
        z = b.g.mean_pool(z, 2)
        z = b.conv(z, 16)
        z = b.g.mean_pool(z, 2) if (h // 2) % 2 == 0 else z
        logits = b.dense(b.flatten(z), num_classes, act=False)
    elif arch == "cnn-deep":
        z = b.conv(x, 8)
        z = b.conv(z, 8)
        z = b.g.mean_pool(z, 2)
        z = b.conv(z, 16)
        z = b.conv(z, 16)
        z = b.g.mean_pool(z, 2) if (h // 2) % 2 == 0 else z
        logits = b.dense(b.flatten(z), num_classes, act=False)
    elif arch == "mixer-lite":
        p = 3 if h % 3 == 0 and w % 3 == 0 else 2
        d = 16
        z = b.conv(x, d, k=p, stride=p, pad=0)
        th, tw = h // p, w // p
        tokens = b.g.reshape(z, (d, th * tw))
        mixed = b.dense(tokens, th * tw, act=False)  # token mixing along the last axis
        z = b.g.relu(b.g.add(tokens, mixed))
        z = b.g.reshape(z, (d, th, tw))
        z = b.conv(z, d, k=1, pad=0)
        logits = b.dense(b.flatten(z), num_classes, act=False)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    return b.done(logits, arch)
