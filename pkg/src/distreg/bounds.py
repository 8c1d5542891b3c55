"""Per-layer norm/distance statistics and generalization-bound measures.

Three complexity measures are computed from the same layer statistics:
one driven by MARS norms and distances, one by Frobenius norms of the
unfolded layer operators, and one by spectral norms scaled with the
parameter count. All logarithms are natural. The measures are the full
middle terms of their bounds (constants included) divided by sqrt(m);
the probabilistic bound adds the empirical risk and a confidence term.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .linalg import frobenius_norm, mars_norm, matrix_view, spectral_norm

CSV_HEADER = "epoch,mars,frobenius,spectral,risk,conf,m,c,d,C_inf,C_2,rho,delta"


class ZeroNormError(ValueError):
    """A layer norm is zero where a measure divides by it."""

    def __init__(self, layer, message):
        super().__init__(message)
        self.layer = layer


@dataclass
class LayerStats:
    """Measured norms of one layer and of its offset from the reference.

    For dense layers the norms act on the weight matrix itself. For
    convolutions the MARS values use the kernel matrix view (rows are
    output channels), the Frobenius values describe the unfolded linear
    operator (kernel norm scaled by sqrt(#output positions)), and the
    spectral values are power-iteration estimates on the actual operator.
    ``n_cols`` is the column count of the unfolded weight matrix.
    """

    layer: int
    kind: str
    b_mars: float
    d_mars: float
    b_fro: float
    d_fro: float
    b_spec: float
    d_spec: float
    n_cols: int
    param_count: int


def _dense_stats(index, layer, ref, power_iters, power_tol, power_seed):
    w = layer.weight
    w0 = ref["weight"]
    return LayerStats(
        layer=index,
        kind="dense",
        b_mars=mars_norm(w),
        d_mars=mars_norm(w - w0),
        b_fro=frobenius_norm(w),
        d_fro=frobenius_norm(w - w0),
        b_spec=spectral_norm(lambda v: w @ v, lambda u: w.T @ u, (w.shape[1],),
                             iters=power_iters, tol=power_tol, seed=power_seed),
        d_spec=spectral_norm(lambda v: (w - w0) @ v, lambda u: (w - w0).T @ u,
                             (w.shape[1],), iters=power_iters, tol=power_tol,
                             seed=power_seed),
        n_cols=w.shape[1],
        param_count=w.size,
    )


def _conv_operator_norm(kernel, stride, padding, in_shape, power_iters, power_tol,
                        power_seed):
    batch_shape = (1,) + tuple(in_shape)
    return spectral_norm(
        lambda v: nn.conv_apply(v, kernel, stride, padding),
        lambda u: nn.conv_apply_adjoint(u, kernel, stride, padding, batch_shape),
        batch_shape, iters=power_iters, tol=power_tol, seed=power_seed,
    )


def _conv_stats(index, layer, ref, in_shape, power_iters, power_tol, power_seed):
    k = layer.weight
    k0 = ref["weight"]
    _, oh, ow = layer.out_shape(in_shape)
    positions = oh * ow
    oc, ic, kh, kw = k.shape
    scale = math.sqrt(positions)
    return LayerStats(
        layer=index,
        kind="conv",
        b_mars=mars_norm(matrix_view(k)),
        d_mars=mars_norm(matrix_view(k - k0)),
        b_fro=scale * frobenius_norm(k),
        d_fro=scale * frobenius_norm(k - k0),
        b_spec=_conv_operator_norm(k, layer.stride, layer.padding, in_shape,
                                   power_iters, power_tol, power_seed),
        d_spec=_conv_operator_norm(k - k0, layer.stride, layer.padding, in_shape,
                                   power_iters, power_tol, power_seed),
        n_cols=ic * kh * kw * in_shape[1] * in_shape[2],
        param_count=k.size,
    )


def layer_stats(net, reference=None, power_iters=500, power_tol=1e-10, power_seed=0):
    """Norm/distance statistics for every parameterized layer of ``net``.

    ``reference`` defaults to the network's captured snapshot; shapes
    must match the live parameters exactly.
    """
    if reference is None:
        reference = net.reference
    if reference is None:
        raise ValueError("no reference parameters available")
    shapes = net.layer_input_shapes()
    stats = []
    for i in net.param_layer_indices():
        layer = net.layers[i]
        ref = reference[i]
        if ref is None or ref["weight"].shape != layer.weight.shape:
            raise ValueError(f"reference shape mismatch at layer {i}")
        if isinstance(layer, nn.ConvLayer):
            stats.append(_conv_stats(i, layer, ref, shapes[i], power_iters,
                                     power_tol, power_seed))
        else:
            stats.append(_dense_stats(i, layer, ref, power_iters, power_tol,
                                      power_seed))
    return stats


def mars_complexity(stats, m, c, d, c_inf, rho=1.0):
    """MARS-distance complexity measure.

    4 sqrt(ln(2d)) c rho C_inf [sum_j D_j/B_j] [prod_j 2 B_j] / sqrt(m),
    with B, D the MARS norms/distances.
    """
    if m < 1 or d < 1:
        raise ValueError("need m >= 1 and d >= 1")
    total = 0.0
    product = 1.0
    for s in stats:
        if s.b_mars == 0.0:
            raise ZeroNormError(s.layer, f"layer {s.layer} has zero MARS norm")
        total += s.d_mars / s.b_mars
        product *= 2.0 * s.b_mars
    return 4.0 * math.sqrt(math.log(2.0 * d)) * c * rho * c_inf * total * product \
        / math.sqrt(m)


def frobenius_complexity(stats, m, c, c_2, rho=1.0):
    """Frobenius-distance complexity measure for the unfolded operators.

    2 sqrt(2) c rho C_2 [sum_j D_j / (2 B_j prod_{i<=j} sqrt(n_i))]
    [prod_j 2 B_j sqrt(n_j)] / sqrt(m).
    """
    if m < 1:
        raise ValueError("need m >= 1")
    total = 0.0
    product = 1.0
    cumulative = 1.0
    for s in stats:
        if s.b_fro == 0.0:
            raise ZeroNormError(s.layer, f"layer {s.layer} has zero Frobenius norm")
        if s.n_cols < 1:
            raise ValueError(f"layer {s.layer} has n_cols < 1")
        root_n = math.sqrt(s.n_cols)
        cumulative *= root_n
        total += s.d_fro / (2.0 * s.b_fro * cumulative)
        product *= 2.0 * s.b_fro * root_n
    return 2.0 * math.sqrt(2.0) * c * rho * c_2 * total * product / math.sqrt(m)


def spectral_complexity(stats, m, c_2, rho=1.0):
    """Spectral-norm complexity measure, parameter-count scaled.

    sqrt(N/m) rho C_2 [sum_j D_j] [prod_j B_j] with N the total weight
    count; the big-O constant is taken as 1, so ratios between measures
    carry more meaning than absolute values.
    """
    if m < 1:
        raise ValueError("need m >= 1")
    n_params = sum(s.param_count for s in stats)
    total = sum(s.d_spec for s in stats)
    product = 1.0
    for s in stats:
        product *= s.b_spec
    return math.sqrt(n_params / m) * rho * c_2 * total * product


def confidence_term(m, delta):
    """High-probability slack: 3 sqrt(ln(2/delta) / (2m))."""
    if not (0.0 < delta < 1.0):
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    if m < 1:
        raise ValueError("need m >= 1")
    return 3.0 * math.sqrt(math.log(2.0 / delta) / (2.0 * m))


def generalization_bound(empirical_risk, complexity, m, delta):
    """Expected-loss bound: risk + complexity + confidence term."""
    return empirical_risk + complexity + confidence_term(m, delta)


def input_bounds(dataset):
    """Largest input infinity-norm and 2-norm over a nonempty dataset."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    flat = np.abs(dataset.inputs.reshape(len(dataset), -1))
    c_inf = float(flat.max())
    c_2 = float(np.sqrt((flat * flat).sum(axis=1)).max())
    return c_inf, c_2


@dataclass
class BoundReport:
    """The three complexity measures plus risk and confidence term."""

    epoch: int
    mars: float
    frobenius: float
    spectral: float
    empirical_risk: float
    confidence: float
    m: int
    c: int
    d: int
    c_inf: float
    c_2: float
    rho: float
    delta: float
    margin: float
    power_seed: int
    notes: tuple = ()

    def bound(self, measure):
        """Full probabilistic bound for one of the measures."""
        return self.empirical_risk + getattr(self, measure) + self.confidence

    def csv_row(self):
        values = [self.epoch, self.mars, self.frobenius, self.spectral,
                  self.empirical_risk, self.confidence, self.m, self.c, self.d,
                  self.c_inf, self.c_2, self.rho, self.delta]
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)

    def text_block(self):
        lines = [
            f"examples (m)          : {self.m}",
            f"classes (c)           : {self.c}",
            f"input dim (d)         : {self.d}",
            f"input bounds          : C_inf={self.c_inf!r} C_2={self.c_2!r}",
            f"loss Lipschitz (rho)  : {self.rho!r}",
            f"margin                : {self.margin!r}",
            f"power iteration seed  : {self.power_seed}",
            f"empirical ramp risk   : {self.empirical_risk!r}",
            f"confidence (delta={self.delta!r}): {self.confidence!r}",
            f"measure mars          : {self.mars!r}",
            f"measure spectral      : {self.spectral!r}",
            f"measure frobenius     : {self.frobenius!r}",
        ]
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)


def empirical_ramp_risk(net, dataset, margin, batch_size=512):
    """Mean ramp loss of the network over the dataset, evaluated in chunks."""
    total = 0.0
    for start in range(0, len(dataset), batch_size):
        X = dataset.inputs[start : start + batch_size]
        y = dataset.labels[start : start + batch_size]
        logits, _ = net.forward(X)
        total += nn.ramp_loss(logits, y, margin) * len(y)
    return total / len(dataset)


def bound_report(net, dataset, reference=None, rho=1.0, delta=0.1, margin=1.0,
                 epoch=0, power_seed=0):
    """Assemble the full report for a (network, reference, dataset) triple.

    Measures whose formula would divide by a zero layer norm are reported
    as +inf with a diagnostic note instead of failing the whole report.
    """
    stats = layer_stats(net, reference, power_seed=power_seed)
    m = len(dataset)
    c = dataset.class_count
    d = int(np.prod(net.input_shape))
    c_inf, c_2 = input_bounds(dataset)
    notes = []

    def guarded(fn, *args):
        try:
            return fn(*args)
        except ZeroNormError as err:
            notes.append(str(err))
            return math.inf

    mars = guarded(mars_complexity, stats, m, c, d, c_inf, rho)
    frob = guarded(frobenius_complexity, stats, m, c, c_2, rho)
    spec = spectral_complexity(stats, m, c_2, rho)
    risk = empirical_ramp_risk(net, dataset, margin)
    return BoundReport(
        epoch=epoch, mars=mars, frobenius=frob, spectral=spec,
        empirical_risk=risk, confidence=confidence_term(m, delta),
        m=m, c=c, d=d, c_inf=c_inf, c_2=c_2, rho=rho, delta=delta,
        margin=margin, power_seed=power_seed, notes=tuple(notes),
    )
