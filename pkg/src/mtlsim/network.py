"""Gated dense/convolutional network with task-projection gating.

Every gated layer ``i`` computes a gate vector from the task indicator

    c_i = sigmoid(Wt_i @ x_t - beta)

and applies it multiplicatively to the pre-activation before the
non-linearity. Convolutional layers get one gate per feature map, broadcast
over space. Gradients are computed by hand (reverse mode over the fixed
topology), including the paths through the task-projection matrices.

Topology: one chain of layers ("encoder") per stimulus input dimension, and
one dense head per output dimension reading the concatenation of all
flattened encoder outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    pass


class InputError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


class StaleCacheError(RuntimeError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str  # "dense" or "conv"
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]
    activation: str = "relu"
    gated: bool = True
    kernel: int = 3
    stride: int = 1
    padding: int = 1

    @property
    def units(self) -> int:
        """Gate width: output features (dense) or feature maps (conv)."""
        return self.out_shape[0]

    @property
    def out_size(self) -> int:
        return int(np.prod(self.out_shape))


@dataclass
class NetworkConfig:
    encoders: List[List[LayerSpec]]
    heads: List[LayerSpec]
    # (input dimension, output dimension) for each task, in task order
    task_io: List[Tuple[int, int]]
    beta: float = 3.0

    @property
    def n_tasks(self) -> int:
        return len(self.task_io)

    def layers(self) -> List[LayerSpec]:
        return [l for enc in self.encoders for l in enc] + list(self.heads)

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers():
            if l.name == name:
                return l
        raise KeyError(name)

    def layer_tasks(self, name: str) -> List[int]:
        """Indices of the tasks whose processing path runs through a layer."""
        for d, enc in enumerate(self.encoders):
            if any(l.name == name for l in enc):
                return [t for t, (i, _) in enumerate(self.task_io) if i == d]
        for o, head in enumerate(self.heads):
            if head.name == name:
                return [t for t, (_, j) in enumerate(self.task_io) if j == o]
        raise KeyError(name)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        def spec(x):
            x = dict(x)
            x["in_shape"] = tuple(x["in_shape"])
            x["out_shape"] = tuple(x["out_shape"])
            return LayerSpec(**x)

        return cls(
            encoders=[[spec(l) for l in enc] for enc in d["encoders"]],
            heads=[spec(l) for l in d["heads"]],
            task_io=[tuple(p) for p in d["task_io"]],
            beta=float(d["beta"]),
        )


def conv_out_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> Tuple[int, int]:
    return (
        (h + 2 * padding - kernel) // stride + 1,
        (w + 2 * padding - kernel) // stride + 1,
    )


def default_config(
    vector_size: int = 16,
    grid_size: int = 8,
    n_classes: int = 9,
    hidden: int = 32,
    channels: int = 8,
    beta: float = 3.0,
) -> NetworkConfig:
    """Desk-scale version of the two-input, two-output architecture.

    Input 0 (flat vector) goes through one dense layer; input 1 (single
    channel grid) through two convolutions, the second with stride 2.
    """
    h1, w1 = conv_out_hw(grid_size, grid_size, 3, 1, 1)
    h2, w2 = conv_out_hw(h1, w1, 3, 2, 1)
    enc_a = [LayerSpec("a1", "dense", (vector_size,), (hidden,))]
    enc_b = [
        LayerSpec("b1", "conv", (1, grid_size, grid_size), (channels, h1, w1), stride=1),
        LayerSpec("b2", "conv", (channels, h1, w1), (channels, h2, w2), stride=2),
    ]
    feat = hidden + channels * h2 * w2
    heads = [
        LayerSpec("out0", "dense", (feat,), (n_classes,), activation="identity"),
        LayerSpec("out1", "dense", (feat,), (n_classes,), activation="identity"),
    ]
    # tasks 1..4: (vector->out0), (vector->out1), (grid->out0), (grid->out1)
    task_io = [(0, 0), (0, 1), (1, 0), (1, 1)]
    return NetworkConfig([enc_a, enc_b], heads, task_io, beta=beta)


def validate_config(config: NetworkConfig) -> None:
    if not config.beta > 0:
        raise ConfigurationError(f"beta must be positive, got {config.beta}")
    if not config.encoders or not config.heads:
        raise ConfigurationError("need at least one encoder and one head")
    for l in config.layers():
        if l.kind not in ("dense", "conv"):
            raise ConfigurationError(f"{l.name}: unknown layer kind {l.kind!r}")
        if l.activation not in ("relu", "identity"):
            raise ConfigurationError(f"{l.name}: unknown activation {l.activation!r}")
        if l.kind == "dense" and (len(l.in_shape) != 1 or len(l.out_shape) != 1):
            raise ConfigurationError(f"{l.name}: dense layers take flat shapes")
        if l.kind == "conv":
            if len(l.in_shape) != 3 or len(l.out_shape) != 3:
                raise ConfigurationError(f"{l.name}: conv layers take (C, H, W) shapes")
            hw = conv_out_hw(l.in_shape[1], l.in_shape[2], l.kernel, l.stride, l.padding)
            if hw != tuple(l.out_shape[1:]):
                raise ConfigurationError(
                    f"{l.name}: output spatial shape {l.out_shape[1:]} != computed {hw}"
                )
    for enc in config.encoders:
        for prev, nxt in zip(enc, enc[1:]):
            if nxt.kind == "dense" and prev.out_size != nxt.in_shape[0]:
                raise ConfigurationError(f"{prev.name} -> {nxt.name}: shape mismatch")
            if nxt.kind == "conv" and tuple(prev.out_shape) != tuple(nxt.in_shape):
                raise ConfigurationError(f"{prev.name} -> {nxt.name}: shape mismatch")
        if enc[-1].activation != "relu":
            raise ConfigurationError(f"{enc[-1].name}: hidden layers use relu")
    feat = sum(enc[-1].out_size for enc in config.encoders)
    for head in config.heads:
        if head.kind != "dense":
            raise ConfigurationError(f"{head.name}: heads must be dense")
        if head.activation != "identity":
            raise ConfigurationError(f"{head.name}: output layers use identity activation")
        if head.in_shape[0] != feat:
            raise ConfigurationError(
                f"{head.name}: expects {head.in_shape[0]} features, encoders give {feat}"
            )
    for t, (i, o) in enumerate(config.task_io):
        if not (0 <= i < len(config.encoders) and 0 <= o < len(config.heads)):
            raise ConfigurationError(f"task {t + 1}: bad (input, output) pair ({i}, {o})")
    if len(set(config.task_io)) != len(config.task_io):
        raise ConfigurationError("each (input, output) pair may carry only one task")


class Network:
    """Parameter store plus frozen-mask for a gated network.

    ``params`` maps ``"<layer>.W"``, ``"<layer>.b"`` and ``"<layer>.Wt"``
    (task projection, shape ``(units, n_tasks)``) to float64 arrays.
    ``version`` increments on every in-place update so that stale forward
    caches can be detected.
    """

    def __init__(self, config: NetworkConfig, params: Dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.frozen = {k: np.zeros(v.shape, dtype=bool) for k, v in params.items()}
        self.version = 0

    @property
    def beta(self) -> float:
        return self.config.beta

    def copy(self) -> "Network":
        net = Network(self.config, {k: v.copy() for k, v in self.params.items()})
        net.frozen = {k: v.copy() for k, v in self.frozen.items()}
        return net

    def gated_layers(self) -> List[LayerSpec]:
        return [l for l in self.config.layers() if l.gated]

    def freeze(self, name: str, mask: Optional[np.ndarray] = None) -> None:
        self.frozen[name] = np.ones_like(self.frozen[name]) if mask is None else mask.astype(bool)


def _xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_network(config: NetworkConfig, seed: int) -> Network:
    """Xavier-uniform weights, zero biases, zero task projections.

    Task projections are usually overwritten afterwards by one of the
    installation routines in :mod:`mtlsim.regimen`.
    """
    validate_config(config)
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for l in config.layers():
        if l.kind == "dense":
            fan_in, fan_out = l.in_shape[0], l.out_shape[0]
            params[f"{l.name}.W"] = _xavier(rng, (fan_out, fan_in), fan_in, fan_out)
        else:
            cin, cout, k = l.in_shape[0], l.out_shape[0], l.kernel
            fan_in, fan_out = cin * k * k, cout * k * k
            params[f"{l.name}.W"] = _xavier(rng, (cout, cin, k, k), fan_in, fan_out)
        params[f"{l.name}.b"] = np.zeros(l.units)
        if l.gated:
            params[f"{l.name}.Wt"] = np.zeros((l.units, config.n_tasks))
    return Network(config, params)


def sigmoid(x):
    # split by sign so that exp never overflows
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def task_vector(n_tasks: int, tasks: Sequence[int]) -> np.ndarray:
    """Multi-hot indicator over ``n_tasks`` for 0-based task indices."""
    x = np.zeros(n_tasks)
    x[list(tasks)] = 1.0
    return x


def task_projection(net: Network, layer: str, x_t: np.ndarray) -> np.ndarray:
    spec = net.config.layer(layer)
    if not spec.gated:
        raise ConfigurationError(f"{layer} is not gated")
    return sigmoid(net.params[f"{layer}.Wt"] @ x_t - net.beta)


# --- convolution helpers (NHWC internally) --------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    """x: (B, H, W, C) -> (B, Ho, Wo, C*k*k) with channel-major patch order."""
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(x, (k, k), axis=(1, 2))  # (B, H', W', C, k, k)
    win = win[:, ::stride, ::stride]
    b, ho, wo = win.shape[:3]
    return win.reshape(b, ho, wo, -1)


def _col2im(dcols: np.ndarray, in_hw, cin: int, k: int, stride: int, pad: int) -> np.ndarray:
    b, ho, wo, _ = dcols.shape
    h, w = in_hw
    d = dcols.reshape(b, ho, wo, cin, k, k)
    dx = np.zeros((b, h + 2 * pad, w + 2 * pad, cin))
    for i in range(k):
        for j in range(k):
            dx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += d[..., i, j]
    return dx[:, pad : pad + h, pad : pad + w, :]


@dataclass
class LayerCache:
    inp: np.ndarray  # dense: (B, in); conv: im2col columns (B, Ho, Wo, C*k*k)
    pre: np.ndarray  # affine/conv output before gating
    gate: np.ndarray
    z: np.ndarray  # gated pre-activation
    out: np.ndarray  # post-activation (dense (B, U); conv NHWC)
    gate_fixed: bool


@dataclass
class ForwardResult:
    logits: List[np.ndarray]
    layers: Dict[str, LayerCache]
    task_vector: np.ndarray
    version: int
    features: np.ndarray = field(repr=False, default=None)

    def activation(self, name: str) -> np.ndarray:
        """Post-activation values, flattened per item (conv: channel-major)."""
        out = self.layers[name].out
        if out.ndim == 4:
            out = out.transpose(0, 3, 1, 2)
        return out.reshape(out.shape[0], -1)


def _layer_forward(net, spec: LayerSpec, h: np.ndarray, x_t, gate_override) -> LayerCache:
    W = net.params[f"{spec.name}.W"]
    b = net.params[f"{spec.name}.b"]
    if spec.kind == "dense":
        inp = h
        pre = h @ W.T + b
    else:
        inp = _im2col(h, spec.kernel, spec.stride, spec.padding)
        pre = inp @ W.reshape(W.shape[0], -1).T + b
    fixed = False
    if gate_override is not None and spec.name in gate_override:
        gate = np.broadcast_to(np.asarray(gate_override[spec.name], dtype=float), (spec.units,))
        fixed = True
    elif spec.gated:
        gate = sigmoid(net.params[f"{spec.name}.Wt"] @ x_t - net.beta)
    else:
        gate = np.ones(spec.units)
        fixed = True
    z = pre * gate
    out = np.maximum(z, 0.0) if spec.activation == "relu" else z
    return LayerCache(inp, pre, gate, z, out, fixed)


def forward(
    net: Network,
    stimuli: Sequence[np.ndarray],
    x_t: np.ndarray,
    gate_override: Optional[Dict[str, object]] = None,
) -> ForwardResult:
    """Run the network on one mini-batch.

    ``stimuli[d]`` has shape ``(B,) + encoders[d][0].in_shape``; conv inputs
    are channel-first. ``gate_override`` maps layer names to a fixed gate
    (scalar or vector); overridden gates receive no gradient.
    """
    cfg = net.config
    if len(stimuli) != len(cfg.encoders):
        raise InputError(f"expected {len(cfg.encoders)} stimulus arrays, got {len(stimuli)}")
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape != (cfg.n_tasks,):
        raise InputError(f"task vector must have shape ({cfg.n_tasks},)")
    caches: Dict[str, LayerCache] = {}
    feats = []
    batch = None
    for enc, s in zip(cfg.encoders, stimuli):
        s = np.asarray(s, dtype=float)
        if s.shape[1:] != tuple(enc[0].in_shape):
            raise InputError(
                f"{enc[0].name}: stimulus shape {s.shape[1:]} != {tuple(enc[0].in_shape)}"
            )
        if batch is None:
            batch = s.shape[0]
        elif s.shape[0] != batch:
            raise InputError("stimulus batch sizes differ")
        h = s.transpose(0, 2, 3, 1) if s.ndim == 4 else s
        for spec in enc:
            if spec.kind == "dense" and h.ndim == 4:
                h = h.transpose(0, 3, 1, 2).reshape(h.shape[0], -1)
            c = _layer_forward(net, spec, h, x_t, gate_override)
            caches[spec.name] = c
            h = c.out
        if h.ndim == 4:
            h = h.transpose(0, 3, 1, 2).reshape(h.shape[0], -1)
        feats.append(h)
    features = np.concatenate(feats, axis=1)
    logits = []
    for head in cfg.heads:
        c = _layer_forward(net, head, features, x_t, gate_override)
        caches[head.name] = c
        logits.append(c.out)
    return ForwardResult(logits, caches, x_t, net.version, features)


# --- loss -------------------------------------------------------------------

DEFAULT_CLASS = 0


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    logp = z - logsum[:, None]
    n = logits.shape[0]
    value = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(value), grad / n


def loss(
    logits: Sequence[np.ndarray],
    labels: Dict[int, np.ndarray],
    active_tasks: Sequence[int],
    task_io: Sequence[Tuple[int, int]],
    default_class: int = DEFAULT_CLASS,
) -> Tuple[float, List[np.ndarray]]:
    """Sum of per-output softmax cross-entropies.

    Outputs used by an active task are scored against that task's labels;
    every other output against ``default_class``. Returns the scalar loss
    and the gradient for each output's logits.
    """
    targets: Dict[int, int] = {}
    for t in active_tasks:
        if t not in labels:
            raise InputError(f"no labels for active task {t + 1}")
        o = task_io[t][1]
        if o in targets:
            raise InputError(
                f"tasks {targets[o] + 1} and {t + 1} both use output {o}; cannot run together"
            )
        targets[o] = t
    total = 0.0
    grads = []
    for o, lg in enumerate(logits):
        if o in targets:
            y = np.asarray(labels[targets[o]], dtype=int)
        else:
            y = np.full(lg.shape[0], default_class, dtype=int)
        v, g = _softmax_xent(lg, y)
        total += v
        grads.append(g)
    return total, grads


# --- backward ---------------------------------------------------------------


def _layer_backward(net, spec: LayerSpec, c: LayerCache, dout, x_t, grads, need_input: bool):
    if spec.activation == "relu":
        dz = dout * (c.z > 0)
    else:
        dz = dout
    dpre = dz * c.gate
    W = net.params[f"{spec.name}.W"]
    if spec.gated and not c.gate_fixed:
        axes = tuple(range(dz.ndim - 1))
        dgate = (dz * c.pre).sum(axis=axes)
        grads[f"{spec.name}.Wt"] = np.outer(dgate * c.gate * (1.0 - c.gate), x_t)
    elif spec.gated:
        grads[f"{spec.name}.Wt"] = np.zeros_like(net.params[f"{spec.name}.Wt"])
    if spec.kind == "dense":
        grads[f"{spec.name}.W"] = dpre.T @ c.inp
        grads[f"{spec.name}.b"] = dpre.sum(axis=0)
        return dpre @ W if need_input else None
    cout = W.shape[0]
    d2 = dpre.reshape(-1, cout)
    cols = c.inp.reshape(d2.shape[0], -1)
    grads[f"{spec.name}.W"] = (d2.T @ cols).reshape(W.shape)
    grads[f"{spec.name}.b"] = d2.sum(axis=0)
    if not need_input:
        return None
    dcols = dpre @ W.reshape(cout, -1)
    return _col2im(
        dcols, spec.in_shape[1:], spec.in_shape[0], spec.kernel, spec.stride, spec.padding
    )


def backward(net: Network, fwd: ForwardResult, dlogits: Sequence[np.ndarray]) -> Dict[str, np.ndarray]:
    """Exact gradients of the loss for every parameter; frozen entries zeroed."""
    if fwd.version != net.version:
        raise StaleCacheError(
            f"forward cache is from parameter version {fwd.version}, network is at {net.version}"
        )
    cfg = net.config
    grads: Dict[str, np.ndarray] = {}
    dfeat = np.zeros_like(fwd.features)
    for head, dl in zip(cfg.heads, dlogits):
        dfeat += _layer_backward(net, head, fwd.layers[head.name], dl, fwd.task_vector, grads, True)
    offset = 0
    for enc in cfg.encoders:
        last = enc[-1]
        n = last.out_size
        dh = dfeat[:, offset : offset + n]
        offset += n
        if last.kind == "conv":
            c, hh, ww = last.out_shape
            dh = dh.reshape(-1, c, hh, ww).transpose(0, 2, 3, 1)
        for idx in range(len(enc) - 1, -1, -1):
            spec = enc[idx]
            dh = _layer_backward(
                net, spec, fwd.layers[spec.name], dh, fwd.task_vector, grads, idx > 0
            )
            if idx > 0 and spec.kind == "dense" and enc[idx - 1].kind == "conv":
                c, hh, ww = enc[idx - 1].out_shape
                dh = dh.reshape(-1, c, hh, ww).transpose(0, 2, 3, 1)
    for k, m in net.frozen.items():
        if m.any():
            grads[k] = np.where(m, 0.0, grads[k])
    return grads


def sgd_step(net: Network, grads: Dict[str, np.ndarray], lr: float) -> None:
    if lr < 0:
        raise ConfigurationError(f"learning rate must be non-negative, got {lr}")
    for k, g in grads.items():
        if g.shape != net.params[k].shape:
            raise InputError(f"{k}: gradient shape {g.shape} != parameter shape {net.params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}")
    for k, g in grads.items():
        m = net.frozen[k]
        if m.any():
            net.params[k] -= lr * np.where(m, 0.0, g)
        else:
            net.params[k] -= lr * g
    net.version += 1


def predict(fwd: ForwardResult, task_io, task: int) -> np.ndarray:
    """Answer of an active task: its best content class.

    The no-response class is only ever a target for inactive outputs, so it
    is excluded when decoding a task that was asked for.
    """
    logits = fwd.logits[task_io[task][1]]
    return 1 + logits[:, DEFAULT_CLASS + 1 :].argmax(axis=1)


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(net: Network, path) -> None:
    """Write parameters, frozen masks and config to an ``.npz`` file.

    The header records the format version and the tensor order.
    """
    names = list(net.params)
    header = {
        "format": "mtlsim-checkpoint",
        "version": CHECKPOINT_VERSION,
        "order": names,
        "config": net.config.to_dict(),
    }
    arrays = {"header": np.array(json.dumps(header))}
    for i, k in enumerate(names):
        arrays[f"p{i}"] = net.params[k]
        arrays[f"f{i}"] = net.frozen[k]
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> Network:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != "mtlsim-checkpoint":
            raise ConfigurationError(f"{path}: not a checkpoint")
        if header["version"] != CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {header['version']}")
        config = NetworkConfig.from_dict(header["config"])
        params = {k: data[f"p{i}"].copy() for i, k in enumerate(header["order"])}
        frozen = {k: data[f"f{i}"].copy() for i, k in enumerate(header["order"])}
    net = Network(config, params)
    net.frozen = frozen
    return net
