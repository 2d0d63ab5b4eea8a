"""Finite-difference verification of the hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import (
    LayerSpec,
    Network,
    NetworkConfig,
    backward,
    conv_out_hw,
    forward,
    init_network,
    loss,
    task_vector,
)


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    checked: int
    skipped_kinks: int


def random_config(rng: np.random.Generator) -> NetworkConfig:
    """Small random two-input net: a dense path and a conv path, at most 3 layers deep."""
    n_in = int(rng.integers(3, 9))
    hidden = int(rng.integers(2, 17))
    enc_a = [LayerSpec("a1", "dense", (n_in,), (hidden,))]
    cin = int(rng.integers(1, 3))
    size = int(rng.integers(4, 7))
    ch = int(rng.integers(2, 5))
    stride = int(rng.integers(1, 3))
    h1, w1 = conv_out_hw(size, size, 3, stride, 1)
    enc_b = [LayerSpec("b1", "conv", (cin, size, size), (ch, h1, w1), stride=stride)]
    if rng.random() < 0.5:
        enc_b.append(LayerSpec("b2", "dense", (ch * h1 * w1,), (int(rng.integers(2, 17)),)))
    feat = hidden + enc_b[-1].out_size
    n_cls = int(rng.integers(3, 6))
    heads = [
        LayerSpec("out0", "dense", (feat,), (n_cls,), activation="identity"),
        LayerSpec("out1", "dense", (feat,), (n_cls,), activation="identity"),
    ]
    return NetworkConfig([enc_a, enc_b], heads, [(0, 0), (0, 1), (1, 0), (1, 1)])


def random_problem(seed: int, batch: int = 4):
    """A random gated net with non-trivial task projections, inputs and targets."""
    rng = np.random.default_rng(seed)
    cfg = random_config(rng)
    net = init_network(cfg, seed)
    for k, v in net.params.items():
        if k.endswith(".Wt"):
            net.params[k] = rng.normal(cfg.beta, 2.0, v.shape)
        elif k.endswith(".b"):
            net.params[k] = rng.normal(0, 0.5, v.shape)
    stimuli = [rng.standard_normal((batch,) + tuple(enc[0].in_shape)) for enc in cfg.encoders]
    n_cls = cfg.heads[0].out_shape[0]
    labels = {t: rng.integers(1, n_cls, batch) for t in range(cfg.n_tasks)}
    tasks = [int(rng.integers(0, 4))] if rng.random() < 0.5 else [[0, 3], [1, 2]][int(rng.integers(0, 2))]
    return net, stimuli, labels, tasks


def _relu_pattern(fwd):
    return [c.z > 0 for c in fwd.layers.values()]


def check_gradients(
    net: Network, stimuli, labels, tasks, h: float = 1e-4, corrupt: float = 0.0, floor: float = 1e-6
) -> GradCheckResult:
    """Compare every analytic gradient entry with a central difference.

    Entries whose perturbation flips a ReLU on or off are skipped, since the
    loss is not differentiable across the kink. ``corrupt`` adds a bias to
    the analytic gradient (fault injection for negative controls).
    """
    cfg = net.config
    x_t = task_vector(cfg.n_tasks, tasks)

    def value():
        fwd = forward(net, stimuli, x_t)
        return loss(fwd.logits, labels, tasks, cfg.task_io)[0], fwd

    fwd = forward(net, stimuli, x_t)
    _, dl = loss(fwd.logits, labels, tasks, cfg.task_io)
    grads = backward(net, fwd, dl)
    base = _relu_pattern(fwd)
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, p in net.params.items():
        g = grads[name] + corrupt
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp, fp = value()
            flat[i] = old - h
            lm, fm = value()
            flat[i] = old
            if any((a != b).any() for a, b in zip(base, _relu_pattern(fp))) or any(
                (a != b).any() for a, b in zip(base, _relu_pattern(fm))
            ):
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            err = abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), floor)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{i}]"
    return GradCheckResult(worst, worst_name, checked, skipped)


def run_gradient_checks(n_nets: int = 20, seed: int = 0, corrupt: float = 0.0):
    return [check_gradients(*random_problem(seed + i), corrupt=corrupt) for i in range(n_nets)]
