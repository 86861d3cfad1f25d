"""Shared fixtures: a brute-force scalar forward pass (the independent
oracle the vectorized and simulated paths are checked against) and a
seeded generator of random small networks.

The scalar oracle is deliberately plain Python loops over plain ints; it
must never share code with neurotrail's vectorized layer math.
"""

from __future__ import annotations

import numpy as np
import pytest

from neurotrail.trinary_net import (
    KIND_CORE_CLASSIFIER,
    KIND_CORE_CONV,
    LayerSpec,
    TrinaryNetworkSpec,
    out_size,
    randomize_weights,
)


def scalar_layer(layer: LayerSpec, x: list) -> list:
    """Evaluate one layer with scalar loops. x is a nested list (f)(h)(w)
    of 0/1 ints; returns the same structure of output spikes."""
    cin = len(x)
    h = len(x[0])
    w = len(x[0][0])
    g = layer.feature_groups
    cin_g = cin // g
    weights = layer.weights.tolist()
    thresholds = layer.thresholds.tolist()
    out = []
    if layer.kind == KIND_CORE_CLASSIFIER:
        for o in range(layer.out_features):
            b = o % g
            s = 0
            for fc in range(cin_g):
                for yy in range(layer.kh):
                    for xx in range(layer.kw):
                        s += weights[o][fc][yy][xx] * x[b * cin_g + fc][yy][xx]
            out.append([[1 if s > thresholds[o] else 0]])
        return out
    out_g = layer.out_features // g
    oh = out_size(h, layer.kh, layer.stride, layer.padding)
    ow = out_size(w, layer.kw, layer.stride, layer.padding)
    for o in range(layer.out_features):
        b = o // out_g
        plane = []
        for oy in range(oh):
            row = []
            for ox in range(ow):
                s = 0
                for fc in range(cin_g):
                    for ky in range(layer.kh):
                        for kx in range(layer.kw):
                            iy = oy * layer.stride + ky - layer.padding
                            ix = ox * layer.stride + kx - layer.padding
                            if 0 <= iy < h and 0 <= ix < w:
                                s += weights[o][fc][ky][kx] * x[b * cin_g + fc][iy][ix]
                row.append(1 if s > thresholds[o] else 0)
            plane.append(row)
        out.append(plane)
    return out


def scalar_forward(spec: TrinaryNetworkSpec, binary_input: np.ndarray):
    """Scalar oracle for the full on-chip pass: per-layer spike lists plus
    per-class counts."""
    x = [[[int(v) for v in row] for row in plane] for plane in np.asarray(binary_input)]
    traces = []
    for layer in spec.core_layers:
        x = scalar_layer(layer, x)
        traces.append(x)
    flat = []
    for plane in x:
        for row in plane:
            flat.extend(row)
    counts = [sum(flat[i] for i in pop) for pop in spec.class_populations]
    return traces, counts


def _zeros_layer(kind, kh, kw, stride, padding, cin, cout, g) -> LayerSpec:
    return LayerSpec(
        kind, kh, kw, stride, padding, cin, cout, g,
        weights=np.zeros((cout, cin // g, kh, kw), dtype=np.int8),
        thresholds=np.zeros(cout, dtype=np.int32),
    )


def random_small_spec(
    rng: np.random.Generator,
    max_fan_in: int = 32,
    max_side: int = 8,
    max_features: int = 4,
    n_classes: int = 3,
) -> TrinaryNetworkSpec:
    """Random valid net: up to two conv layers then a classifier, every
    fan-in within `max_fan_in`. Rejection-samples until the geometry works."""
    for _ in range(500):
        w = int(rng.integers(3, max_side + 1))
        h = int(rng.integers(3, max_side + 1))
        f = int(rng.integers(1, max_features + 1))
        n_convs = int(rng.integers(0, 3))
        layers = []
        cw, ch, cf = w, h, f
        ok = True
        for _ in range(n_convs):
            kh = int(rng.integers(1, 4))
            kw = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            padding = int(rng.integers(0, 2)) if max(kh, kw) > 1 else 0
            groups = [g for g in range(1, cf + 1)
                      if cf % g == 0 and kh * kw * (cf // g) <= max_fan_in]
            if not groups:
                ok = False
                break
            g = int(rng.choice(groups))
            cout = g * int(rng.integers(1, max(2, 9 // g)))
            ow = out_size(cw, kw, stride, padding)
            oh = out_size(ch, kh, stride, padding)
            if ow < 1 or oh < 1:
                ok = False
                break
            layers.append(_zeros_layer(KIND_CORE_CONV, kh, kw, stride, padding, cf, cout, g))
            cw, ch, cf = ow, oh, cout
        if not ok:
            continue
        groups = [g for g in range(1, cf + 1)
                  if cf % g == 0 and ch * cw * (cf // g) <= max_fan_in]
        if not groups:
            continue
        g = int(rng.choice(groups))
        cout = int(rng.integers(n_classes, n_classes + 7))
        layers.append(_zeros_layer(KIND_CORE_CLASSIFIER, ch, cw, 1, 0, cf, cout, g))
        ids = list(rng.permutation(cout))
        cuts = sorted(rng.choice(np.arange(1, cout), size=n_classes - 1, replace=False))
        pops = []
        prev = 0
        for c in list(cuts) + [cout]:
            pops.append(tuple(int(i) for i in ids[prev:c]))
            prev = c
        spec = TrinaryNetworkSpec(tuple(layers), (w, h, f), tuple(pops))
        if spec.validate():
            continue
        return randomize_weights(spec, rng, zero_frac=float(rng.uniform(0.2, 0.6)),
                                 threshold_range=(-2, 4))
    raise RuntimeError("could not sample a valid random net")


def random_binary_input(rng: np.random.Generator, spec: TrinaryNetworkSpec,
                        density: float | None = None) -> np.ndarray:
    w, h, f = spec.core_input_shape()
    p = density if density is not None else float(rng.uniform(0.1, 0.6))
    return rng.random((f, h, w)) < p


@pytest.fixture
def rng():
    return np.random.default_rng(0xC0FFEE)
