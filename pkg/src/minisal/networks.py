"""Declarative layer specs for the three saliency networks.

Three architectures share one vocabulary:

* spatial model: single RGB frame in, saliency map out
* temporal model: stacked frame pair (6 channels) in, saliency map out
* spatiotemporal model: both streams, channel-concatenated into a fusion head

Each single-stream model has 13 weighted layers: an 8-conv feature extractor
(2x2 max pools after convs 3 and 5), then a head of one 1x1 conv, two 3x3
convs and two stride-2 transposed convs that restore the input resolution.
The spatiotemporal model reuses the two extractors as parallel streams and
runs the same head shape on their concatenated features.

Canonical weight names follow ``[<stream>.]<layer>.{kernel,bias}`` where
``<stream>`` is ``s_stream``/``t_stream``/``fusion`` for the spatiotemporal
model and empty for the single-stream models, and ``<layer>`` is ``conv1`` ..
``conv11``, ``deconv12``, ``deconv13``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (NumericError, ShapeError, Tensor, concat_channels,
                     conv2d, deconv2d, maxpool2, relu)

PARAM_BUDGET = 300_000
PARAM_BUDGET_TOL = 0.05
TRUNC_SIGMA = 0.05


class CalibrationError(ValueError):
    """Raised when a layer table misses the parameter budget under --calibrated."""


@dataclass(frozen=True)
class LayerDef:
    name: str
    op: str              # "conv" | "deconv" | "pool"
    in_ch: int = 0
    out_ch: int = 0
    ksize: int = 0
    relu: bool = False


@dataclass(frozen=True)
class LayerTable:
    """Default channel widths, calibrated so the spatiotemporal model lands
    within +/-5% of the 0.30M parameter budget."""

    extractor: tuple = (16, 32, 32, 48, 48, 48, 64, 64)
    head: tuple = (32, 32, 16, 8, 1)

    def __post_init__(self):
        if len(self.extractor) != 8:
            raise ShapeError(f"extractor widths must list 8 convs, got {len(self.extractor)}")
        if len(self.head) != 5 or self.head[-1] != 1:
            raise ShapeError("head widths must list 5 layers ending in a 1-channel map")
        if any(w < 1 for w in self.extractor + self.head):
            raise ShapeError("all widths must be >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str            # "spatial" | "temporal" | "spatiotemporal"
    stream_s: tuple = ()
    stream_t: tuple = ()
    head: tuple = ()

    def weighted_layers(self):
        return [l for l in self.stream_s + self.stream_t + self.head if l.op != "pool"]

    def all_layers(self):
        return list(self.stream_s + self.stream_t + self.head)


class WeightStore(dict):
    """Named-tensor bag: canonical layer name -> Tensor."""

    def copy_detached(self):
        out = WeightStore()
        for k, v in self.items():
            out[k] = Tensor(v.data.copy(), requires_grad=v.requires_grad)
        return out


def _extractor(prefix, in_ch, widths):
    layers = []
    ch = in_ch
    for i, w in enumerate(widths, start=1):
        layers.append(LayerDef(f"{prefix}conv{i}", "conv", ch, w, 3, relu=True))
        ch = w
        if i in (3, 5):
            layers.append(LayerDef(f"{prefix}pool{1 if i == 3 else 2}", "pool", ch, ch))
    return tuple(layers)


def _head(prefix, in_ch, widths):
    c9, c10, c11, d12, d13 = widths
    return (
        LayerDef(f"{prefix}conv9", "conv", in_ch, c9, 1, relu=True),
        LayerDef(f"{prefix}conv10", "conv", c9, c10, 3, relu=True),
        LayerDef(f"{prefix}conv11", "conv", c10, c11, 3, relu=True),
        LayerDef(f"{prefix}deconv12", "deconv", c11, d12, 4, relu=True),
        LayerDef(f"{prefix}deconv13", "deconv", d12, d13, 4, relu=False),  # linear output
    )


def _check_calibrated(spec, calibrated):
    if not calibrated:
        return
    n = param_count(spec)
    lo = PARAM_BUDGET * (1 - PARAM_BUDGET_TOL)
    hi = PARAM_BUDGET * (1 + PARAM_BUDGET_TOL)
    if not lo <= n <= hi:
        raise CalibrationError(
            f"layer table yields {n} parameters, outside the calibrated band "
            f"[{lo:.0f}, {hi:.0f}] around {PARAM_BUDGET}")


def build_spatial_student(widths=LayerTable()):
    return NetworkSpec("spatial",
                       stream_s=_extractor("", 3, widths.extractor),
                       head=_head("", widths.extractor[-1], widths.head))


def build_temporal_student(widths=LayerTable()):
    return NetworkSpec("temporal",
                       stream_t=_extractor("", 6, widths.extractor),
                       head=_head("", widths.extractor[-1], widths.head))


def build_spatiotemporal(widths=LayerTable(), calibrated=False):
    spec = NetworkSpec("spatiotemporal",
                       stream_s=_extractor("s_stream.", 3, widths.extractor),
                       stream_t=_extractor("t_stream.", 6, widths.extractor),
                       head=_head("fusion.", 2 * widths.extractor[-1], widths.head))
    _check_calibrated(spec, calibrated)
    return spec


def param_count(spec):
    """Exact learnable-parameter count: sum of Kh*Kw*Cin*Cout + Cout per layer."""
    return sum(l.ksize * l.ksize * l.in_ch * l.out_ch + l.out_ch
               for l in spec.weighted_layers())


def _kernel_shape(layer):
    if layer.op == "conv":
        return (layer.out_ch, layer.in_ch, layer.ksize, layer.ksize)
    return (layer.in_ch, layer.out_ch, layer.ksize, layer.ksize)


def truncated_normal(shape, sigma, rng):
    """Normal(0, sigma) with samples outside +/-2 sigma redrawn."""
    out = rng.normal(0.0, sigma, size=shape)
    bad = np.abs(out) > 2 * sigma
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, size=int(bad.sum()))
        bad = np.abs(out) > 2 * sigma
    return out.astype(np.float32)


def init_weights(spec, seed):
    """Fresh weight store: truncated-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    store = WeightStore()
    for layer in spec.weighted_layers():
        store[f"{layer.name}.kernel"] = Tensor(
            truncated_normal(_kernel_shape(layer), TRUNC_SIGMA, rng), requires_grad=True)
        store[f"{layer.name}.bias"] = Tensor(
            np.zeros(layer.out_ch, dtype=np.float32), requires_grad=True)
    return store


def init_from_students(st_spec, s_weights, t_weights, seed):
    """Initialize the spatiotemporal model per the transfer protocol.

    Stream layers are copied verbatim from the trained students; fusion-head
    layers are drawn from the truncated normal. Deterministic given seed.
    """
    store = init_weights(st_spec, seed)
    for stream, src in (("s_stream.", s_weights), ("t_stream.", t_weights)):
        for layer in (st_spec.stream_s if stream == "s_stream." else st_spec.stream_t):
            if layer.op == "pool":
                continue
            bare = layer.name[len(stream):]
            for part in ("kernel", "bias"):
                key = f"{bare}.{part}"
                if key not in src:
                    raise ShapeError(f"student weights missing {key!r}")
                dst = store[f"{layer.name}.{part}"]
                if src[key].shape != dst.shape:
                    raise ShapeError(
                        f"student weight {key!r} has shape {src[key].shape}, "
                        f"stream layer expects {dst.shape}")
                dst.data[...] = src[key].data
    return store


def _run_layers(layers, weights, x):
    for layer in layers:
        if layer.op == "pool":
            x = maxpool2(x)
            continue
        k = weights[f"{layer.name}.kernel"]
        b = weights[f"{layer.name}.bias"]
        if layer.op == "conv":
            x = conv2d(x, k, b, stride=1, padding="same")
        else:
            x = deconv2d(x, k, b, stride=2)
        if layer.relu:
            x = relu(x)
    return x


def forward(spec, weights, *inputs):
    """Run a network; returns the single-channel saliency map tensor.

    Spatial/temporal models take one input (3 or 6 channels); the
    spatiotemporal model takes (frame, frame_pair). Spatial extents must be
    >= 4 so the two pools cannot annihilate the feature maps.
    """
    for x in inputs:
        if x.ndim != 4:
            raise ShapeError(f"network input must be 4-d, got {x.shape}")
        if x.shape[2] < 4 or x.shape[3] < 4:
            raise ShapeError(f"network input spatial extents must be >= 4, got {x.shape}")

    if spec.kind == "spatial":
        (x,) = inputs
        _expect_channels(x, 3)
        out = _run_layers(spec.stream_s + spec.head, weights, x)
    elif spec.kind == "temporal":
        (x,) = inputs
        _expect_channels(x, 6)
        out = _run_layers(spec.stream_t + spec.head, weights, x)
    elif spec.kind == "spatiotemporal":
        xs, xt = inputs
        _expect_channels(xs, 3)
        _expect_channels(xt, 6)
        fs = _run_layers(spec.stream_s, weights, xs)
        ft = _run_layers(spec.stream_t, weights, xt)
        out = _run_layers(spec.head, weights, concat_channels(fs, ft))
    else:
        raise ValueError(f"unknown network kind {spec.kind!r}")

    if not np.isfinite(out.data).all():
        raise NumericError("network forward produced non-finite values")
    return out


def stream_features(spec, weights, *inputs):
    """Pre-fusion activations of the spatiotemporal model (diagnostic)."""
    xs, xt = inputs
    return (_run_layers(spec.stream_s, weights, xs),
            _run_layers(spec.stream_t, weights, xt))


def _expect_channels(x, c):
    if x.shape[1] != c:
        raise ShapeError(f"expected {c}-channel input, got {x.shape[1]}")
