"""Trinary-weight binary-activation CNN: spec types, the reference forward
pass that the crossbar simulator must match bit-exactly, weight
trinarization, and the versioned model file.

Conventions (used by every module downstream):
  - activations are numpy arrays of shape (features, height, width)
  - a spike address (x, y, f) indexes plane[f, y, x]
  - convolutions are cross-correlations with symmetric zero padding;
    output size = (in + 2*pad - k) // stride + 1
  - grouped conv layers split both input and output features into
    `feature_groups` contiguous blocks (block b of outputs reads block b
    of inputs); classifier layers cover the full input extent and assign
    input-feature blocks to output neurons round-robin (neuron j reads
    block j % feature_groups), so populations of any size cover all blocks
  - a neuron spikes iff its integer synaptic sum strictly exceeds its
    integer threshold
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

KIND_HOST_CONV = "host_conv"
KIND_CORE_CONV = "core_conv"
KIND_CORE_CLASSIFIER = "core_classifier"
_KIND_CODES = {KIND_HOST_CONV: 0, KIND_CORE_CONV: 1, KIND_CORE_CLASSIFIER: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

CORE_FAN_IN_LIMIT = 256

MODEL_MAGIC = b"TNET"
MODEL_VERSION = 1


class SpecError(ValueError):
    """A network description violates its invariants."""


class InputShapeError(SpecError):
    """Input tensor does not match the shape a layer expects."""


class ModelFormatError(ValueError):
    """Model file is corrupt, truncated, or carries illegal values."""


class UnsupportedModelVersionError(ModelFormatError):
    pass


def out_size(in_size: int, k: int, stride: int, padding: int) -> int:
    return (in_size + 2 * padding - k) // stride + 1


@dataclass(eq=False)
class LayerSpec:
    """One layer: geometry plus deployed trinary weights and integer thresholds.

    weights: int8 array (out_features, in_features // feature_groups, kh, kw),
    values in {-1, 0, +1}. thresholds: int32 array (out_features,); for conv
    layers a threshold is shared by all spatial positions of a feature.
    """

    kind: str
    kh: int
    kw: int
    stride: int
    padding: int
    in_features: int
    out_features: int
    feature_groups: int
    weights: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.int8)
        self.thresholds = np.asarray(self.thresholds, dtype=np.int32)

    @property
    def in_per_group(self) -> int:
        return self.in_features // self.feature_groups

    @property
    def fan_in(self) -> int:
        return self.kh * self.kw * self.in_per_group

    def out_group(self, o: int) -> int:
        """Input-feature block read by output neuron/feature `o`."""
        if self.kind == KIND_CORE_CLASSIFIER:
            return o % self.feature_groups
        return o // (self.out_features // self.feature_groups)

    def out_shape(self, in_w: int, in_h: int) -> tuple[int, int]:
        return (
            out_size(in_w, self.kw, self.stride, self.padding),
            out_size(in_h, self.kh, self.stride, self.padding),
        )

    def validate(self, name: str = "layer") -> list[str]:
        bad = []
        if self.kind not in _KIND_CODES:
            bad.append(f"{name}: unknown kind {self.kind!r}")
            return bad
        if self.in_features % self.feature_groups != 0:
            bad.append(
                f"{name}: in_features {self.in_features} not divisible by "
                f"feature_groups {self.feature_groups}"
            )
            return bad
        if self.kind == KIND_CORE_CONV and self.out_features % self.feature_groups != 0:
            bad.append(
                f"{name}: out_features {self.out_features} not divisible by "
                f"feature_groups {self.feature_groups}"
            )
        if self.kind != KIND_HOST_CONV and self.fan_in > CORE_FAN_IN_LIMIT:
            bad.append(
                f"{name}: fan-in {self.kh}*{self.kw}*{self.in_per_group} = "
                f"{self.fan_in} exceeds {CORE_FAN_IN_LIMIT}"
            )
        expect = (self.out_features, self.in_per_group, self.kh, self.kw)
        if self.weights.shape != expect:
            bad.append(f"{name}: weight shape {self.weights.shape} != {expect}")
        elif not np.isin(self.weights, (-1, 0, 1)).all():
            bad.append(f"{name}: weights outside {{-1, 0, 1}}")
        if self.thresholds.shape != (self.out_features,):
            bad.append(f"{name}: threshold shape {self.thresholds.shape}")
        if self.stride < 1 or self.kh < 1 or self.kw < 1 or self.padding < 0:
            bad.append(f"{name}: bad geometry k=({self.kh},{self.kw}) s={self.stride} p={self.padding}")
        return bad

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerSpec):
            return NotImplemented
        return (
            (self.kind, self.kh, self.kw, self.stride, self.padding,
             self.in_features, self.out_features, self.feature_groups)
            == (other.kind, other.kh, other.kw, other.stride, other.padding,
                other.in_features, other.out_features, other.feature_groups)
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.thresholds, other.thresholds)
        )


@dataclass(eq=False)
class TrinaryNetworkSpec:
    """Layered description of the deployed network.

    input_shape is (width, height, channels) of the raw (host-side) input.
    class_populations partition the final layer's flat neuron ids
    (id = f * oh * ow + y * ow + x) into one set per steering class.
    """

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]
    class_populations: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.class_populations = tuple(
            tuple(int(i) for i in pop) for pop in self.class_populations
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_populations)

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """(w, h, f) entering each layer, plus the final output shape."""
        w, h, f = self.input_shape
        shapes = [(w, h, f)]
        for layer in self.layers:
            w, h = layer.out_shape(w, h)
            f = layer.out_features
            shapes.append((w, h, f))
        return shapes

    @property
    def core_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind != KIND_HOST_CONV)

    @property
    def host_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.kind == KIND_HOST_CONV)

    def core_input_shape(self) -> tuple[int, int, int]:
        """(w, h, f) of the spike bitmap fed to the first on-chip layer."""
        n_host = len(self.host_layers)
        return self.layer_shapes()[n_host]

    def output_shape(self) -> tuple[int, int, int]:
        return self.layer_shapes()[-1]

    def validate(self) -> list[str]:
        bad = []
        if not self.layers:
            return ["no layers"]
        seen_core = False
        shapes = self.layer_shapes()
        for i, layer in enumerate(self.layers):
            name = f"layer {i} ({layer.kind})"
            if layer.kind == KIND_HOST_CONV and seen_core:
                bad.append(f"{name}: host layers must precede all core layers")
            if layer.kind != KIND_HOST_CONV:
                seen_core = True
            in_w, in_h, in_f = shapes[i]
            if layer.in_features != in_f:
                bad.append(f"{name}: in_features {layer.in_features} != incoming {in_f}")
            ow, oh = shapes[i + 1][:2]
            if ow < 1 or oh < 1:
                bad.append(f"{name}: output shape {ow}x{oh} is empty")
            bad.extend(layer.validate(name))
        if not seen_core:
            bad.append("no core layers")
        ow, oh, of = shapes[-1]
        n_out = ow * oh * of
        ids = [i for pop in self.class_populations for i in pop]
        if len(self.class_populations) < 2:
            bad.append("need at least 2 class populations")
        if any(len(pop) == 0 for pop in self.class_populations):
            bad.append("empty class population")
        if sorted(ids) != list(range(n_out)):
            bad.append(
                f"class populations must partition the {n_out} output neurons"
            )
        return bad

    def lint(self) -> list[str]:
        """Non-fatal oddities worth flagging (legal but suspicious)."""
        notes = []
        for i, layer in enumerate(self.layers):
            if not layer.weights.any():
                notes.append(f"layer {i} ({layer.kind}): all-zero weights")
        return notes

    def __eq__(self, other) -> bool:
        if not isinstance(other, TrinaryNetworkSpec):
            return NotImplemented
        return (
            self.input_shape == other.input_shape
            and self.class_populations == other.class_populations
            and len(self.layers) == len(other.layers)
            and all(a == b for a, b in zip(self.layers, other.layers))
        )


@dataclass
class ShadowWeights:
    """Real-valued training-time weights from which trinary weights are cut.

    tau_frac scales the per-layer cut point: tau = tau_frac * mean(|w|).
    """

    tensors: list[np.ndarray]
    tau_frac: float = 0.7

    def __post_init__(self):
        if not (0.0 < self.tau_frac < 1.0):
            raise SpecError(f"tau_frac must be in (0, 1), got {self.tau_frac}")


def trinarize_array(w: np.ndarray, tau_frac: float) -> np.ndarray:
    """Cut one real tensor to {-1, 0, +1} at tau = tau_frac * mean|w|.

    An all-zero tensor gives tau = 0 and degenerates to sign(w) (all zeros).
    """
    if not (0.0 < tau_frac < 1.0):
        raise SpecError(f"tau_frac must be in (0, 1), got {tau_frac}")
    w = np.asarray(w, dtype=np.float64)
    tau = tau_frac * np.mean(np.abs(w))
    out = np.zeros(w.shape, dtype=np.int8)
    out[w > tau] = 1
    out[w < -tau] = -1
    return out


def trinarize(shadow: ShadowWeights) -> list[np.ndarray]:
    """Per-layer trinarization of a full shadow-weight stack."""
    return [trinarize_array(w, shadow.tau_frac) for w in shadow.tensors]


def conv2d_int(
    x: np.ndarray,
    weights: np.ndarray,
    stride: int,
    padding: int,
    groups: int,
) -> np.ndarray:
    """Integer grouped cross-correlation.

    x: (in_features, h, w) integer array. weights: (out, in_g, kh, kw) in
    {-1,0,1}. Returns int32 sums of shape (out, oh, ow). Pure and exact.
    """
    cin, h, w = x.shape
    cout, cin_g, kh, kw = weights.shape
    if cin != cin_g * groups:
        raise InputShapeError(
            f"input has {cin} features, weights expect {cin_g}*{groups}"
        )
    oh = out_size(h, kh, stride, padding)
    ow = out_size(w, kw, stride, padding)
    xp = np.zeros((cin, h + 2 * padding, w + 2 * padding), dtype=np.int32)
    xp[:, padding : padding + h, padding : padding + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :oh, :ow]  # (cin, oh, ow, kh, kw)
    out = np.empty((cout, oh, ow), dtype=np.int32)
    out_g = cout // groups
    for b in range(groups):
        xg = win[b * cin_g : (b + 1) * cin_g]
        cols = xg.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin_g * kh * kw)
        wg = weights[b * out_g : (b + 1) * out_g].reshape(out_g, -1).astype(np.int32)
        out[b * out_g : (b + 1) * out_g] = (cols @ wg.T).T.reshape(out_g, oh, ow)
    return out


def classifier_sums_int(x: np.ndarray, layer: LayerSpec) -> np.ndarray:
    """Integer sums of a classifier layer (full spatial extent, round-robin
    feature blocks). x: (in_features, kh, kw). Returns int32 (out, 1, 1)."""
    cin, h, w = x.shape
    if (cin, h, w) != (layer.in_features, layer.kh, layer.kw):
        raise InputShapeError(
            f"classifier expects {(layer.in_features, layer.kh, layer.kw)}, got {(cin, h, w)}"
        )
    g = layer.feature_groups
    cin_g = layer.in_per_group
    sums = np.empty((layer.out_features,), dtype=np.int32)
    flat_w = layer.weights.reshape(layer.out_features, -1).astype(np.int32)
    for b in range(g):
        idx = np.arange(b, layer.out_features, g)
        xg = x[b * cin_g : (b + 1) * cin_g].reshape(-1).astype(np.int32)
        sums[idx] = flat_w[idx] @ xg
    return sums.reshape(-1, 1, 1)


def layer_sums(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == KIND_CORE_CLASSIFIER:
        return classifier_sums_int(x, layer)
    return conv2d_int(x, layer.weights, layer.stride, layer.padding, layer.feature_groups)


@dataclass
class ForwardTrace:
    """Per-layer spike bitmaps plus the output class histogram counts."""

    layer_spikes: list[np.ndarray]
    counts: np.ndarray


def forward(spec: TrinaryNetworkSpec, binary_input: np.ndarray) -> ForwardTrace:
    """Reference on-chip forward pass.

    binary_input: (f, h, w) array of {0,1} matching the first core layer's
    input shape. Each neuron emits 1 iff its synaptic sum strictly exceeds
    its threshold. Deterministic; pure.
    """
    w, h, f = spec.core_input_shape()
    x = np.asarray(binary_input)
    if x.shape != (f, h, w):
        raise InputShapeError(f"expected input (f={f}, h={h}, w={w}), got {x.shape}")
    if x.dtype != bool and not np.isin(x, (0, 1)).all():
        raise InputShapeError("input values must be binary")
    x = x.astype(np.int32)
    spikes_per_layer: list[np.ndarray] = []
    for layer in spec.core_layers:
        sums = layer_sums(layer, x)
        spikes = sums > layer.thresholds[:, None, None]
        spikes_per_layer.append(spikes)
        x = spikes.astype(np.int32)
    counts = class_counts(spec, spikes_per_layer[-1])
    return ForwardTrace(spikes_per_layer, counts)


def class_counts(spec: TrinaryNetworkSpec, output_spikes: np.ndarray) -> np.ndarray:
    flat = output_spikes.reshape(-1)
    return np.array([int(flat[list(pop)].sum()) for pop in spec.class_populations],
                    dtype=np.int64)


# ---------------------------------------------------------------------------
# Default architecture and random instances


def default_architecture() -> TrinaryNetworkSpec:
    """The stock network: host 3x3 conv 3->12, three stride-2 on-chip convs
    (12->16->32->64, the last split in 2 feature groups), and a classifier
    over the full 6x5 extent in 8 feature groups feeding three populations
    of 30 neurons. Every on-chip fan-in fits a single core. Weights zero."""

    def zeros(kind, kh, kw, stride, padding, cin, cout, g):
        return LayerSpec(
            kind, kh, kw, stride, padding, cin, cout, g,
            weights=np.zeros((cout, cin // g, kh, kw), dtype=np.int8),
            thresholds=np.zeros(cout, dtype=np.int32),
        )

    layers = (
        zeros(KIND_HOST_CONV, 3, 3, 1, 1, 3, 12, 1),
        zeros(KIND_CORE_CONV, 3, 3, 2, 1, 12, 16, 1),
        zeros(KIND_CORE_CONV, 3, 3, 2, 1, 16, 32, 1),
        zeros(KIND_CORE_CONV, 3, 3, 2, 1, 32, 64, 2),
        zeros(KIND_CORE_CLASSIFIER, 5, 6, 1, 0, 64, 90, 8),
    )
    pops = (tuple(range(0, 30)), tuple(range(30, 60)), tuple(range(60, 90)))
    spec = TrinaryNetworkSpec(layers, (44, 36, 3), pops)
    assert not spec.validate()
    return spec


def randomize_weights(
    spec: TrinaryNetworkSpec,
    rng: np.random.Generator,
    zero_frac: float = 0.4,
    threshold_range: tuple[int, int] | None = None,
) -> TrinaryNetworkSpec:
    """Copy of `spec` with seeded random trinary weights and thresholds.

    Thresholds default to a small band around zero scaled to fan-in, which
    keeps spike activity neither saturated nor silent."""
    layers = []
    for layer in spec.layers:
        p = zero_frac
        w = rng.choice(
            np.array([-1, 0, 1], dtype=np.int8),
            size=layer.weights.shape,
            p=[(1 - p) / 2, p, (1 - p) / 2],
        )
        if threshold_range is None:
            hi = max(1, layer.fan_in // 8)
            lo = -2
        else:
            lo, hi = threshold_range
        th = rng.integers(lo, hi + 1, size=layer.out_features, dtype=np.int32)
        layers.append(
            LayerSpec(
                layer.kind, layer.kh, layer.kw, layer.stride, layer.padding,
                layer.in_features, layer.out_features, layer.feature_groups,
                weights=w, thresholds=th,
            )
        )
    return TrinaryNetworkSpec(tuple(layers), spec.input_shape, spec.class_populations)


# ---------------------------------------------------------------------------
# Model file ("TNET"): header, layer table, 2-bit packed weight tensors.

_TRIT_TO_CODE = {0: 0, 1: 1, -1: 2}


def pack_trits(values: np.ndarray) -> bytes:
    """Pack {-1,0,1} values as 2-bit codes (00=0, 01=+1, 10=-1), four per
    byte, first value in the lowest-order bits."""
    flat = np.asarray(values, dtype=np.int8).reshape(-1)
    codes = np.zeros(flat.shape, dtype=np.uint8)
    codes[flat == 1] = 1
    codes[flat == -1] = 2
    pad = (-len(codes)) % 4
    if pad:
        codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)])
    quads = codes.reshape(-1, 4)
    packed = quads[:, 0] | quads[:, 1] << 2 | quads[:, 2] << 4 | quads[:, 3] << 6
    return packed.astype(np.uint8).tobytes()


def unpack_trits(buf: bytes, count: int) -> np.ndarray:
    need = (count + 3) // 4
    if len(buf) != need:
        raise ModelFormatError(f"packed weights need {need} bytes, got {len(buf)}")
    raw = np.frombuffer(buf, dtype=np.uint8)
    codes = np.empty((len(raw), 4), dtype=np.uint8)
    codes[:, 0] = raw & 3
    codes[:, 1] = (raw >> 2) & 3
    codes[:, 2] = (raw >> 4) & 3
    codes[:, 3] = (raw >> 6) & 3
    codes = codes.reshape(-1)[:count]
    if (codes == 3).any():
        raise ModelFormatError("illegal weight code 0b11 in model file")
    out = np.zeros(count, dtype=np.int8)
    out[codes == 1] = 1
    out[codes == 2] = -1
    return out


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ModelFormatError(
                f"truncated file: wanted {n} bytes at offset {self.off}"
            )
        chunk = self.data[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self):
        if self.off != len(self.data):
            raise ModelFormatError(f"{len(self.data) - self.off} trailing bytes")


def save_spec(spec: TrinaryNetworkSpec, path) -> None:
    bad = spec.validate()
    if bad:
        raise SpecError("; ".join(bad))
    parts = [MODEL_MAGIC, struct.pack("<H", MODEL_VERSION)]
    w, h, c = spec.input_shape
    parts.append(struct.pack("<3H", w, h, c))
    parts.append(struct.pack("<H", spec.num_classes))
    for pop in spec.class_populations:
        parts.append(struct.pack("<I", len(pop)))
        parts.append(struct.pack(f"<{len(pop)}I", *pop))
    parts.append(struct.pack("<H", len(spec.layers)))
    for layer in spec.layers:
        parts.append(
            struct.pack(
                "<B6H",
                _KIND_CODES[layer.kind],
                layer.kh, layer.kw, layer.stride, layer.padding,
                layer.in_features, layer.out_features,
            )
        )
        parts.append(struct.pack("<H", layer.feature_groups))
        parts.append(layer.thresholds.astype("<i4").tobytes())
        parts.append(pack_trits(layer.weights))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_spec(path) -> TrinaryNetworkSpec:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data)
    if r.take(4) != MODEL_MAGIC:
        raise ModelFormatError("not a model file (bad magic)")
    (version,) = r.unpack("<H")
    if version != MODEL_VERSION:
        raise UnsupportedModelVersionError(
            f"model format version {version} unsupported (expected {MODEL_VERSION})"
        )
    w, h, c = r.unpack("<3H")
    (n_classes,) = r.unpack("<H")
    pops = []
    for _ in range(n_classes):
        (n,) = r.unpack("<I")
        pops.append(tuple(r.unpack(f"<{n}I")))
    (n_layers,) = r.unpack("<H")
    layers = []
    for _ in range(n_layers):
        kind_code, kh, kw, stride, padding, cin, cout = r.unpack("<B6H")
        if kind_code not in _KIND_NAMES:
            raise ModelFormatError(f"unknown layer kind code {kind_code}")
        (groups,) = r.unpack("<H")
        if groups == 0 or cin % groups:
            raise ModelFormatError(f"bad feature_groups {groups} for {cin} inputs")
        thresholds = np.frombuffer(r.take(4 * cout), dtype="<i4").astype(np.int32)
        n_weights = cout * (cin // groups) * kh * kw
        weights = unpack_trits(r.take((n_weights + 3) // 4), n_weights)
        layers.append(
            LayerSpec(
                _KIND_NAMES[kind_code], kh, kw, stride, padding, cin, cout, groups,
                weights=weights.reshape(cout, cin // groups, kh, kw),
                thresholds=thresholds,
            )
        )
    r.done()
    spec = TrinaryNetworkSpec(tuple(layers), (w, h, c), tuple(pops))
    bad = spec.validate()
    if bad:
        raise ModelFormatError("invalid model: " + "; ".join(bad))
    return spec
