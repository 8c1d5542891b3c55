"""Run configuration files and the architecture mini-grammar.

Config files are flat UTF-8 ``key = value`` lines with ``#`` comments.
Unknown keys are rejected. Architectures are comma-separated layer
tokens:

    conv:<out>x<kh>x<kw>[:s<sh>x<sw>][:p<ph>x<pw>][:relu|identity]
    maxpool:<h>x<w>[:s<sh>x<sw>]
    dense:<out>[:relu|identity]

Activations default to relu, except the final layer which defaults to
identity (it emits logits). Regularizer directives use selectors:
``constraint.layer2 = mars:0.5`` targets one layer, ``.head`` / ``.body``
target the last parameterized layer / all the others, and ``.all`` every
parameterized layer; more specific selectors win.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import load_idx
from .nn import ConvLayer, DenseLayer, MaxPoolLayer, Network
from .optim import TrainConfig
from .regularizers import (
    CONSTRAINT_KINDS,
    PENALTY_KINDS,
    ConstraintSpec,
    LayerConstraint,
    LayerPenalty,
    PenaltySpec,
)


class ConfigError(Exception):
    pass


@dataclass
class ConvSpec:
    out_ch: int
    kh: int
    kw: int
    stride: tuple = (1, 1)
    padding: tuple = (0, 0)
    activation: str = None


@dataclass
class PoolSpec:
    h: int
    w: int
    stride: tuple = None


@dataclass
class DenseSpec:
    out: int
    activation: str = None


def _pair(text, what):
    parts = text.split("x")
    if len(parts) != 2:
        raise ConfigError(f"expected <a>x<b> for {what}, got {text!r}")
    try:
        return (int(parts[0]), int(parts[1]))
    except ValueError:
        raise ConfigError(f"expected integers in {what}, got {text!r}") from None


def parse_arch(text):
    """Parse an architecture string into a list of layer specs."""
    specs = []
    for token in [t.strip() for t in text.split(",") if t.strip()]:
        fields = token.split(":")
        kind = fields[0]
        if kind == "conv":
            if len(fields) < 2:
                raise ConfigError(f"conv token needs dimensions: {token!r}")
            dims = fields[1].split("x")
            if len(dims) != 3:
                raise ConfigError(f"conv dims must be <out>x<kh>x<kw>: {token!r}")
            spec = ConvSpec(int(dims[0]), int(dims[1]), int(dims[2]))
            for extra in fields[2:]:
                if extra.startswith("s"):
                    spec.stride = _pair(extra[1:], "stride")
                elif extra.startswith("p"):
                    spec.padding = _pair(extra[1:], "padding")
                elif extra in ("relu", "identity"):
                    spec.activation = extra
                else:
                    raise ConfigError(f"unknown conv option {extra!r} in {token!r}")
            specs.append(spec)
        elif kind == "maxpool":
            if len(fields) < 2:
                raise ConfigError(f"maxpool token needs a window: {token!r}")
            spec = PoolSpec(*_pair(fields[1], "pool window"))
            for extra in fields[2:]:
                if extra.startswith("s"):
                    spec.stride = _pair(extra[1:], "stride")
                else:
                    raise ConfigError(f"unknown maxpool option {extra!r} in {token!r}")
            specs.append(spec)
        elif kind == "dense":
            if len(fields) < 2:
                raise ConfigError(f"dense token needs an output size: {token!r}")
            try:
                spec = DenseSpec(int(fields[1]))
            except ValueError:
                raise ConfigError(f"bad dense size in {token!r}") from None
            for extra in fields[2:]:
                if extra in ("relu", "identity"):
                    spec.activation = extra
                else:
                    raise ConfigError(f"unknown dense option {extra!r} in {token!r}")
            specs.append(spec)
        else:
            raise ConfigError(f"unknown layer kind {kind!r} in {token!r}")
    if not specs:
        raise ConfigError("architecture is empty")
    for i, spec in enumerate(specs):
        if isinstance(spec, (ConvSpec, DenseSpec)) and spec.activation is None:
            spec.activation = "identity" if i == len(specs) - 1 else "relu"
    return specs


def build_layers(specs, input_shape, rng):
    """Instantiate layers from specs, inferring fan-in along the chain."""
    layers = []
    shape = tuple(input_shape)
    for spec in specs:
        if isinstance(spec, ConvSpec):
            if len(shape) != 3:
                raise ConfigError(f"conv layer cannot follow a flat shape {shape}")
            layer = ConvLayer.from_init(shape[0], spec.out_ch, spec.kh, spec.kw,
                                        rng, spec.stride, spec.padding,
                                        spec.activation)
        elif isinstance(spec, PoolSpec):
            layer = MaxPoolLayer((spec.h, spec.w), spec.stride)
        else:
            layer = DenseLayer.from_init(int(np.prod(shape)), spec.out, rng,
                                         spec.activation)
        try:
            shape = layer.out_shape(shape)
        except ValueError as err:
            raise ConfigError(str(err)) from None
        layers.append(layer)
    return layers


def format_arch(net):
    """Render a network's layers back into the architecture grammar."""
    tokens = []
    for layer in net.layers:
        if isinstance(layer, ConvLayer):
            oc, _, kh, kw = layer.weight.shape
            token = f"conv:{oc}x{kh}x{kw}"
            if layer.stride != (1, 1):
                token += f":s{layer.stride[0]}x{layer.stride[1]}"
            if layer.padding != (0, 0):
                token += f":p{layer.padding[0]}x{layer.padding[1]}"
            tokens.append(token + f":{layer.activation}")
        elif isinstance(layer, MaxPoolLayer):
            token = f"maxpool:{layer.window[0]}x{layer.window[1]}"
            if layer.stride != layer.window:
                token += f":s{layer.stride[0]}x{layer.stride[1]}"
            tokens.append(token)
        elif isinstance(layer, DenseLayer):
            tokens.append(f"dense:{layer.weight.shape[0]}:{layer.activation}")
        else:
            raise ConfigError(f"cannot serialize layer type {type(layer).__name__}")
    return ",".join(tokens)


_SCALAR_KEYS = {
    "input", "arch", "seed", "epochs", "batch_size", "update_rule", "lr",
    "lr_decay_factor", "lr_decay_epoch", "shuffle", "l1_projection",
    "delta", "rho", "margin", "out_dir", "init_from", "reinit_head",
    "train_limit", "test_limit", "data_dir", "train_images", "train_labels",
    "test_images", "test_labels",
}
_SELECTOR_PREFIXES = ("constraint.", "penalty.")

# Conventional file names probed inside a data directory, in order.
_TRAIN_CANDIDATES = [
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    ("train-images.idx3-ubyte", "train-labels.idx1-ubyte"),
]
_TEST_CANDIDATES = [
    ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
    ("t10k-images.idx3-ubyte", "t10k-labels.idx1-ubyte"),
    ("test-images-idx3-ubyte", "test-labels-idx1-ubyte"),
    ("test-images-idx3-ubyte.gz", "test-labels-idx1-ubyte.gz"),
]


def resolve_data_paths(data_dir):
    """Locate the train/test IDX pairs inside a directory by convention."""
    def probe(candidates, required):
        for images, labels in candidates:
            ip = os.path.join(data_dir, images)
            lp = os.path.join(data_dir, labels)
            if os.path.exists(ip) and os.path.exists(lp):
                return ip, lp
        if required:
            raise ConfigError(
                f"no {'train' if required == 'train' else 'test'} IDX pair found "
                f"in {data_dir}"
            )
        return None, None

    train = probe(_TRAIN_CANDIDATES, "train")
    test = probe(_TEST_CANDIDATES, None)
    return train, test


def _parse_bool(value, key):
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key} expects true/false, got {value!r}")


def _parse_float(value, key):
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"{key} expects a number, got {value!r}") from None


def _parse_int(value, key):
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key} expects an integer, got {value!r}") from None


def _parse_regularizer_value(value, key, kinds):
    kind, sep, amount = value.partition(":")
    if not sep:
        raise ConfigError(f"{key} expects <kind>:<value>, got {value!r}")
    if kind not in kinds:
        raise ConfigError(f"{key}: unknown kind {kind!r} (choose from {kinds})")
    if amount == "inf":
        return kind, math.inf
    return kind, _parse_float(amount, key)


@dataclass
class RunConfig:
    arch_specs: list
    input_shape: tuple
    seed: int = 0
    epochs: int = 1
    batch_size: int = 64
    update_rule: str = "adam"
    lr: float = 1e-3
    lr_decay_factor: float = 1.0
    lr_decay_epoch: int = 0
    shuffle: bool = True
    l1_projection: str = "scaling"
    delta: float = 0.1
    rho: float = 1.0
    margin: float = 1.0
    out_dir: str = "."
    init_from: str = None
    reinit_head: bool = True
    train_limit: int = None
    test_limit: int = None
    train_images: str = None
    train_labels: str = None
    test_images: str = None
    test_labels: str = None
    constraints: ConstraintSpec = field(default_factory=ConstraintSpec)
    penalties: PenaltySpec = field(default_factory=PenaltySpec)

    def build_network(self):
        rng = np.random.default_rng(self.seed)
        layers = build_layers(self.arch_specs, self.input_shape, rng)
        net = Network(layers, self.input_shape, seed=self.seed)
        return net

    def train_config(self, scale=1.0):
        cons = self.constraints.scaled(scale) if self.constraints.entries else None
        pens = self.penalties.scaled(scale) if self.penalties.entries else None
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, seed=self.seed,
            update_rule=self.update_rule, lr=self.lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_epoch=self.lr_decay_epoch, shuffle=self.shuffle,
            constraints=cons, penalties=pens,
            l1_projection=self.l1_projection,
        ).validate()

    def load_datasets(self):
        if not self.train_images:
            raise ConfigError("config names no training data")
        train = load_idx(self.train_images, self.train_labels, name="train")
        test = None
        if self.test_images:
            test = load_idx(self.test_images, self.test_labels, name="test")
        if self.train_limit:
            train = train.subset(self.train_limit)
        if test is not None and self.test_limit:
            test = test.subset(self.test_limit)
        return train, test


def _resolve_selectors(directives, param_indices, family, kinds):
    """Map selector directives to per-layer entries, specific wins over broad."""
    if not param_indices:
        if directives:
            raise ConfigError(f"{family} directives given but the architecture "
                              "has no parameterized layers")
        return {}
    head = param_indices[-1]
    resolved = {}
    for selector, value in directives.items():
        kind, amount = value
        if selector == "all":
            targets, rank = param_indices, 1
        elif selector == "body":
            targets, rank = param_indices[:-1], 2
        elif selector == "head":
            targets, rank = [head], 2
        elif selector.startswith("layer"):
            try:
                idx = int(selector[len("layer"):])
            except ValueError:
                raise ConfigError(f"bad layer selector {selector!r}") from None
            if idx not in param_indices:
                raise ConfigError(
                    f"{family}.{selector} targets layer {idx}, but parameterized "
                    f"layers are {param_indices}"
                )
            targets, rank = [idx], 3
        else:
            raise ConfigError(f"unknown selector {family}.{selector}")
        for t in targets:
            existing = resolved.get(t)
            if existing is None or rank > existing[0]:
                resolved[t] = (rank, kind, amount)
            elif rank == existing[0] and (kind, amount) != existing[1:]:
                raise ConfigError(
                    f"conflicting {family} directives for layer {t}"
                )
    return {t: (kind, amount) for t, (rank, kind, amount) in resolved.items()}


def parse_config(path):
    """Parse a run config file into a validated :class:`RunConfig`."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    base = os.path.dirname(os.path.abspath(path))
    return parse_config_text(text, base)


def parse_config_text(text, base_dir="."):
    values = {}
    con_directives = {}
    pen_directives = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key = key.strip()
        value = value.strip()
        if key in _SCALAR_KEYS:
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            values[key] = value
        elif key.startswith("constraint."):
            sel = key[len("constraint."):]
            if sel in con_directives:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            con_directives[sel] = _parse_regularizer_value(value, key,
                                                           CONSTRAINT_KINDS)
        elif key.startswith("penalty."):
            sel = key[len("penalty."):]
            if sel in pen_directives:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            pen_directives[sel] = _parse_regularizer_value(value, key, PENALTY_KINDS)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")

    for required in ("input", "arch"):
        if required not in values:
            raise ConfigError(f"missing required key {required!r}")

    try:
        input_shape = tuple(int(s) for s in values["input"].split("x"))
    except ValueError:
        raise ConfigError(f"bad input shape {values['input']!r}") from None
    arch_specs = parse_arch(values["arch"])

    def path_of(key):
        if key not in values:
            return None
        p = values[key]
        return p if os.path.isabs(p) else os.path.join(base_dir, p)

    cfg = RunConfig(arch_specs=arch_specs, input_shape=input_shape)
    if "data_dir" in values:
        if "train_images" in values:
            raise ConfigError("give either data_dir or explicit dataset paths")
        (cfg.train_images, cfg.train_labels), (cfg.test_images, cfg.test_labels) = \
            resolve_data_paths(path_of("data_dir"))
    else:
        cfg.train_images = path_of("train_images")
        cfg.train_labels = path_of("train_labels")
        cfg.test_images = path_of("test_images")
        cfg.test_labels = path_of("test_labels")
        if bool(cfg.train_images) != bool(cfg.train_labels):
            raise ConfigError("train_images and train_labels must come together")
        if bool(cfg.test_images) != bool(cfg.test_labels):
            raise ConfigError("test_images and test_labels must come together")

    if "seed" in values:
        cfg.seed = _parse_int(values["seed"], "seed")
    if "epochs" in values:
        cfg.epochs = _parse_int(values["epochs"], "epochs")
    if "batch_size" in values:
        cfg.batch_size = _parse_int(values["batch_size"], "batch_size")
    if "update_rule" in values:
        cfg.update_rule = values["update_rule"]
    if "lr" in values:
        cfg.lr = _parse_float(values["lr"], "lr")
    if "lr_decay_factor" in values:
        cfg.lr_decay_factor = _parse_float(values["lr_decay_factor"],
                                           "lr_decay_factor")
    if "lr_decay_epoch" in values:
        cfg.lr_decay_epoch = _parse_int(values["lr_decay_epoch"], "lr_decay_epoch")
    if "shuffle" in values:
        cfg.shuffle = _parse_bool(values["shuffle"], "shuffle")
    if "l1_projection" in values:
        cfg.l1_projection = values["l1_projection"]
    if "delta" in values:
        cfg.delta = _parse_float(values["delta"], "delta")
    if "rho" in values:
        cfg.rho = _parse_float(values["rho"], "rho")
    if "margin" in values:
        cfg.margin = _parse_float(values["margin"], "margin")
    if "out_dir" in values:
        cfg.out_dir = path_of("out_dir")
    if "init_from" in values:
        cfg.init_from = path_of("init_from")
    if "reinit_head" in values:
        cfg.reinit_head = _parse_bool(values["reinit_head"], "reinit_head")
    if "train_limit" in values:
        cfg.train_limit = _parse_int(values["train_limit"], "train_limit")
    if "test_limit" in values:
        cfg.test_limit = _parse_int(values["test_limit"], "test_limit")
    if not (0.0 < cfg.delta < 1.0):
        raise ConfigError(f"delta must lie in (0, 1), got {cfg.delta}")
    if cfg.margin <= 0:
        raise ConfigError(f"margin must be positive, got {cfg.margin}")

    param_indices = [i for i, s in enumerate(arch_specs)
                     if isinstance(s, (ConvSpec, DenseSpec))]
    con = _resolve_selectors(con_directives, param_indices, "constraint",
                             CONSTRAINT_KINDS)
    pen = _resolve_selectors(pen_directives, param_indices, "penalty",
                             PENALTY_KINDS)
    both = set(con) & set(pen)
    if both:
        raise ConfigError(
            f"layers {sorted(both)} have both a constraint and a penalty; "
            "pick one per layer"
        )
    try:
        cfg.constraints = ConstraintSpec(
            {i: LayerConstraint(k, g) for i, (k, g) in con.items()})
        cfg.penalties = PenaltySpec(
            {i: LayerPenalty(k, w) for i, (k, w) in pen.items()})
        cfg.train_config()  # full validation, including epochs >= 1
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg
