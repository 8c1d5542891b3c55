"""Update rules and the projected / penalized training loop.

The trainer follows the projected stochastic subgradient scheme: take a
minibatch step with the chosen update rule (penalty subgradients, when
configured, are added to the data gradient first), then re-project every
constrained layer onto its distance ball around the reference weights.
Constraints therefore hold after every step, not just at the end.
"""

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import BatchPlan, batches
from .linalg import matrix_view
from .regularizers import (
    ConstraintSpec,
    PenaltySpec,
    constraint_distance,
    penalty_value_grad,
    project_distance,
    L1_PROJECTIONS,
)

UPDATE_RULES = ("sgd", "adam")


class DivergenceError(RuntimeError):
    """Training loss became non-finite; ``step`` is the 0-based step index."""

    def __init__(self, step, message):
        super().__init__(message)
        self.step = step


def _check_finite_grads(grads):
    for i, g in enumerate(grads):
        if g is None:
            continue
        for name, arr in g.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite gradient in layer {i} ({name})")


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        def zeros_like(entry):
            if entry is None:
                return None
            return {k: np.zeros_like(a) for k, a in entry.items()}

        return cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=0,
                   m=[zeros_like(p) for p in params],
                   v=[zeros_like(p) for p in params])


def adam_update(state, params, grads):
    """One bias-corrected Adam step, in place: p -= lr * m_hat / (sqrt(v_hat) + eps)."""
    _check_finite_grads(grads)
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p is None:
            continue
        if g is None:
            raise ValueError(f"missing gradient for parameterized layer {i}")
        for name, arr in p.items():
            gi = g[name]
            m = state.m[i][name]
            v = state.v[i][name]
            m *= state.beta1
            m += (1.0 - state.beta1) * gi
            v *= state.beta2
            v += (1.0 - state.beta2) * gi * gi
            arr -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def sgd_update(params, grads, lr):
    """Plain gradient step, in place: p -= lr * g."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    _check_finite_grads(grads)
    for i, (p, g) in enumerate(zip(params, grads)):
        if p is None:
            continue
        if g is None:
            raise ValueError(f"missing gradient for parameterized layer {i}")
        for name, arr in p.items():
            arr -= lr * g[name]
    return params


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    seed: int = 0
    update_rule: str = "adam"
    lr: float = 1e-3
    lr_decay_factor: float = 1.0
    lr_decay_epoch: int = 0
    shuffle: bool = True
    constraints: ConstraintSpec = None
    penalties: PenaltySpec = None
    l1_projection: str = "scaling"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.lr_decay_factor <= 1.0):
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.update_rule not in UPDATE_RULES:
            raise ValueError(f"unknown update rule: {self.update_rule!r}")
        if self.l1_projection not in L1_PROJECTIONS:
            raise ValueError(f"unknown l1 projection: {self.l1_projection!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        con = set(self.constraints.entries) if self.constraints else set()
        pen = set(self.penalties.entries) if self.penalties else set()
        overlap = con & pen
        if overlap:
            raise ValueError(
                f"layers {sorted(overlap)} have both a constraint and a penalty; "
                "pick one per layer"
            )
        return self

    def regularized_layers(self):
        con = set(self.constraints.entries) if self.constraints else set()
        pen = set(self.penalties.entries) if self.penalties else set()
        return con | pen


def _check_spec_layers(net, cfg):
    parameterized = set(net.param_layer_indices())
    bad = cfg.regularized_layers() - parameterized
    if bad:
        raise ValueError(
            f"regularizer references layers {sorted(bad)}, but parameterized "
            f"layers are {sorted(parameterized)}"
        )


def layer_distances(net):
    """MARS and Frobenius distance of each parameterized layer from the reference."""
    out = {}
    for i in net.param_layer_indices():
        w = matrix_view(net.layers[i].params()["weight"])
        w0 = matrix_view(net.reference[i]["weight"])
        out[i] = {
            "mars": constraint_distance(w, w0, "mars"),
            "frobenius": constraint_distance(w, w0, "frobenius"),
        }
    return out


def evaluate_accuracy(net, ds, batch_size=512):
    correct = 0
    for start in range(0, len(ds), batch_size):
        logits, _ = net.forward(ds.inputs[start : start + batch_size])
        correct += int((logits.argmax(axis=1)
                        == ds.labels[start : start + batch_size]).sum())
    return correct / len(ds)


def train(net, data, cfg, sink=None, eval_data=None):
    """Run the (optionally projected / penalized) training loop.

    Returns the trained network and a history list with one record per
    epoch: train loss and accuracy, the penalty total, the per-layer
    distances from the reference, and test accuracy when ``eval_data``
    is given. ``sink`` is called with each record as it is produced.
    """
    cfg.validate()
    if net.reference is None:
        raise ValueError("capture_reference() must run before training")
    _check_spec_layers(net, cfg)

    plan = BatchPlan(seed=cfg.seed, batch_size=cfg.batch_size, shuffle=cfg.shuffle)
    state = None
    if cfg.update_rule == "adam":
        state = AdamState.for_params(net.params(), lr=cfg.lr, beta1=cfg.beta1,
                                     beta2=cfg.beta2, eps=cfg.eps)
    constraints = cfg.constraints.entries if cfg.constraints else {}
    penalties = cfg.penalties.entries if cfg.penalties else {}

    history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr
        if cfg.lr_decay_epoch and epoch >= cfg.lr_decay_epoch:
            lr *= cfg.lr_decay_factor
        if state is not None:
            state.lr = lr

        loss_sum = 0.0
        penalty_sum = 0.0
        correct = 0
        seen = 0
        for idx in batches(data, plan, epoch):
            logits, caches = net.forward(data.inputs[idx])
            loss, dlogits = nn.cross_entropy(logits, data.labels[idx])
            if not np.isfinite(loss):
                raise DivergenceError(step, f"loss became non-finite at step {step}")
            grads = net.backward(caches, dlogits)

            batch_penalty = 0.0
            for li, pen in penalties.items():
                w = matrix_view(net.layers[li].params()["weight"])
                w0 = matrix_view(net.reference[li]["weight"])
                value, g = penalty_value_grad(w, w0, pen)
                batch_penalty += value
                grads[li]["weight"] += g.reshape(grads[li]["weight"].shape)

            params = net.params()
            if state is not None:
                adam_update(state, params, grads)
            else:
                sgd_update(params, grads, lr)

            for li, con in constraints.items():
                layer = net.layers[li]
                w_live = layer.params()["weight"]
                w_hat = matrix_view(w_live)
                w0 = matrix_view(net.reference[li]["weight"])
                projected = project_distance(w0, w_hat, con, inner=cfg.l1_projection)
                if projected is not w_hat:
                    np.copyto(w_live, projected.reshape(w_live.shape))

            batch_n = len(idx)
            loss_sum += loss * batch_n
            penalty_sum += batch_penalty * batch_n
            correct += int((logits.argmax(axis=1) == data.labels[idx]).sum())
            seen += batch_n
            step += 1

        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": loss_sum / seen,
            "train_acc": correct / seen,
            "penalty": penalty_sum / seen,
            "test_acc": (evaluate_accuracy(net, eval_data)
                         if eval_data is not None else None),
            "distances": layer_distances(net),
        }
        history.append(record)
        if sink is not None:
            sink(record)
    return net, history
