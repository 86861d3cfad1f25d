"""Offline training of the trinary-weight spiking net.

Shadow weights are real-valued; every forward pass cuts them to {-1,0,+1}
at tau = tau_frac * mean|w| and spikes hard at zero, so the training-time
network computes exactly what the deployed integer network computes. The
backward pass uses straight-through surrogates: both quantizers pass
gradients unchanged inside the unit interval and block them outside, i.e.
the derivative of the relaxed forward in which each quantizer is replaced
by clamp(., -1, 1). `relaxed=True` switches the forward to those clamps,
which is what the finite-difference gradient checks differentiate.

Per-feature batch normalization follows every layer during training; at
export it folds exactly into the integer thresholds: with positive scale,
gamma * (a - mu) / sigma + beta > 0 iff a > mu - beta * sigma / gamma,
and since synaptic sums are integers the real cut c folds to the integer
threshold floor(c) without any approximation. The host layer trains on
pixels centered and scaled by 1/128, so its cut folds to floor(128 * c).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .pilot import decide
from .trinary_net import (
    KIND_CORE_CLASSIFIER,
    KIND_HOST_CONV,
    LayerSpec,
    TrinaryNetworkSpec,
    default_architecture,
    forward,
)
from .vision import PIXEL_CENTER, downsample, host_conv_threshold
from .world import DriveDataset, load_frame_pixels, split_dataset


class TrainingDataError(ValueError):
    pass


class _Trinarize(torch.autograd.Function):
    @staticmethod
    def forward(ctx, w, tau_frac, relaxed):
        ctx.save_for_backward(w)
        if relaxed:
            return w.clamp(-1.0, 1.0)
        tau = tau_frac * w.abs().mean()
        return (w > tau).to(w.dtype) - (w < -tau).to(w.dtype)

    @staticmethod
    def backward(ctx, grad):
        (w,) = ctx.saved_tensors
        return grad * (w.abs() <= 1.0).to(grad.dtype), None, None


class _Spike(torch.autograd.Function):
    @staticmethod
    def forward(ctx, a, relaxed):
        ctx.save_for_backward(a)
        if relaxed:
            return a.clamp(-1.0, 1.0)
        return (a > 0).to(a.dtype)

    @staticmethod
    def backward(ctx, grad):
        (a,) = ctx.saved_tensors
        return grad * (a.abs() <= 1.0).to(grad.dtype), None


class SpikingNet(nn.Module):
    """Trainable mirror of a network architecture (weights re-initialized)."""

    def __init__(self, arch: TrinaryNetworkSpec, tau_frac: float = 0.7,
                 temperature: float = 3.0):
        super().__init__()
        self.arch = arch
        self.tau_frac = tau_frac
        self.temperature = temperature
        self.relaxed = False
        self.shadow = nn.ParameterList()
        self.norms = nn.ModuleList()
        for layer in arch.layers:
            w = torch.empty(layer.out_features, layer.in_per_group,
                            layer.kh, layer.kw)
            nn.init.uniform_(w, -0.9, 0.9)
            self.shadow.append(nn.Parameter(w))
            if layer.kind == KIND_CORE_CLASSIFIER:
                self.norms.append(nn.BatchNorm1d(layer.out_features))
            else:
                self.norms.append(nn.BatchNorm2d(layer.out_features))
        n_out = int(np.prod(arch.output_shape()))
        masks = torch.zeros(arch.num_classes, n_out)
        for ci, pop in enumerate(arch.class_populations):
            masks[ci, list(pop)] = 1.0
        self.register_buffer("pop_masks", masks)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (B, 3, 36, 44) float, pixels centered and scaled by 1/128.
        Returns (B, classes) logits: population spike sums / temperature."""
        for i, layer in enumerate(self.arch.layers):
            w = _Trinarize.apply(self.shadow[i], self.tau_frac, self.relaxed)
            if layer.kind == KIND_CORE_CLASSIFIER:
                a = self._classifier_sums(x, w, layer)
            else:
                a = F.conv2d(x, w, None, stride=layer.stride,
                             padding=layer.padding, groups=layer.feature_groups)
            a = self.norms[i](a)
            x = _Spike.apply(a, self.relaxed)
        spikes = x.flatten(1)
        return spikes @ self.pop_masks.t() / self.temperature

    @staticmethod
    def _classifier_sums(x, w, layer: LayerSpec) -> torch.Tensor:
        b, cin, h, wdt = x.shape
        g = layer.feature_groups
        cin_g = layer.in_per_group
        flat_w = w.reshape(layer.out_features, -1)
        out = x.new_zeros(b, layer.out_features)
        for blk in range(g):
            idx = torch.arange(blk, layer.out_features, g, device=x.device)
            xg = x[:, blk * cin_g : (blk + 1) * cin_g].reshape(b, -1)
            out[:, idx] = xg @ flat_w[idx].t()
        return out

    @torch.no_grad()
    def clamp_parameters(self) -> None:
        """Keep shadow weights inside the surrogate window and batch-norm
        scales positive (a negative scale could not fold into a threshold)."""
        for w in self.shadow:
            w.clamp_(-1.0, 1.0)
        for bn in self.norms:
            bn.weight.clamp_(min=0.05)

    @torch.no_grad()
    def to_deployed(self) -> TrinaryNetworkSpec:
        """Integer network computing exactly the eval-mode training forward."""
        layers = []
        for i, layer in enumerate(self.arch.layers):
            w_tri = (
                _Trinarize.apply(self.shadow[i], self.tau_frac, False)
                .cpu().numpy().astype(np.int8)
            )
            bn = self.norms[i]
            gamma = bn.weight.double().cpu().numpy()
            beta = bn.bias.double().cpu().numpy()
            mu = bn.running_mean.double().cpu().numpy()
            sigma = np.sqrt(bn.running_var.double().cpu().numpy() + bn.eps)
            cut = mu - beta * sigma / gamma
            scale = PIXEL_CENTER if layer.kind == KIND_HOST_CONV else 1.0
            thresholds = np.floor(scale * cut).astype(np.int64)
            thresholds = np.clip(thresholds, np.iinfo(np.int32).min,
                                 np.iinfo(np.int32).max).astype(np.int32)
            layers.append(
                LayerSpec(layer.kind, layer.kh, layer.kw, layer.stride,
                          layer.padding, layer.in_features, layer.out_features,
                          layer.feature_groups, w_tri, thresholds)
            )
        return TrinaryNetworkSpec(tuple(layers), self.arch.input_shape,
                                  self.arch.class_populations)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 2e-3
    tau_frac: float = 0.7
    temperature: float = 3.0
    seed: int = 0
    balance_classes: bool = True  # inverse-frequency loss weights
    log: object = None  # callable(str) or None


@dataclass
class TrainReport:
    test_accuracy: float
    train_accuracy: float
    loss_history: list[float]
    confusion: np.ndarray  # (true, predicted)
    epochs: int
    seconds: float

    def confusion_lines(self) -> list[str]:
        labels = ("left", "forward", "right")
        rows = ["true\\pred  " + "".join(f"{l:>9}" for l in labels)]
        for i, l in enumerate(labels):
            rows.append(f"{l:>9}  " + "".join(f"{int(v):>9}" for v in self.confusion[i]))
        return rows


def prepare_arrays(dataset: DriveDataset) -> tuple[np.ndarray, np.ndarray]:
    """Decode and downsample every sample once: (N, 36, 44, 3) uint8 + labels."""
    if len(dataset) == 0:
        raise TrainingDataError("empty dataset")
    imgs = np.empty((len(dataset), 36, 44, 3), dtype=np.uint8)
    labels = np.empty(len(dataset), dtype=np.int64)
    for i, sample in enumerate(dataset.samples):
        pixels = load_frame_pixels(sample)
        imgs[i] = downsample(pixels) if pixels.shape[:2] == (144, 176) else pixels
        labels[i] = int(sample.command)
    return imgs, labels


def evaluate_deployed(spec: TrinaryNetworkSpec, imgs: np.ndarray,
                      labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Accuracy and 3x3 confusion of the integer pipeline: host conv
    threshold -> chip-reference forward -> histogram argmax."""
    (layer0,) = spec.host_layers
    confusion = np.zeros((3, 3), dtype=np.int64)
    hits = 0
    for img, label in zip(imgs, labels):
        plane = host_conv_threshold(img, layer0)
        counts = forward(spec, plane).counts
        pred = int(decide(tuple(int(c) for c in counts)))
        confusion[label, pred] += 1
        hits += int(pred == label)
    return hits / len(labels), confusion


def _batches(n: int, batch_size: int, generator: torch.Generator):
    perm = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield perm[i : i + batch_size]


def train(dataset: DriveDataset, config: TrainConfig = TrainConfig(),
          arch: TrinaryNetworkSpec | None = None):
    """Train on the every-fifth split of `dataset`; returns
    (deployed TrinaryNetworkSpec, TrainReport with held-out accuracy)."""
    t0 = time.time()
    log = config.log or (lambda s: None)
    counts = dataset.class_counts()
    missing = [k for k, v in counts.items() if v == 0]
    if missing:
        raise TrainingDataError(f"no samples for class(es): {', '.join(missing)}")
    train_ds, test_ds = split_dataset(dataset)
    if len(train_ds) == 0 or len(test_ds) == 0:
        raise TrainingDataError(
            f"split produced {len(train_ds)} train / {len(test_ds)} test samples"
        )
    log(f"decoding {len(train_ds)} train / {len(test_ds)} test frames")
    imgs_train, y_train = prepare_arrays(train_ds)
    imgs_test, y_test = prepare_arrays(test_ds)

    torch.manual_seed(config.seed)
    arch = arch or default_architecture()
    model = SpikingNet(arch, tau_frac=config.tau_frac,
                       temperature=config.temperature)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    gen = torch.Generator().manual_seed(config.seed)
    if config.balance_classes:
        freq = np.bincount(y_train, minlength=3).astype(np.float64)
        class_weights = torch.tensor(freq.sum() / (3.0 * np.maximum(freq, 1)),
                                     dtype=torch.float32)
    else:
        class_weights = None
    x_all = torch.from_numpy(imgs_train)
    y_all = torch.from_numpy(y_train)
    losses: list[float] = []
    model.train()
    for epoch in range(config.epochs):
        epoch_losses = []
        for idx in _batches(len(x_all), config.batch_size, gen):
            x = (x_all[idx].float() - PIXEL_CENTER) / PIXEL_CENTER
            x = x.permute(0, 3, 1, 2).contiguous()
            logits = model(x)
            loss = F.cross_entropy(logits, y_all[idx], weight=class_weights)
            opt.zero_grad()
            loss.backward()
            opt.step()
            model.clamp_parameters()
            epoch_losses.append(float(loss.detach()))
        losses.extend(epoch_losses)
        log(f"epoch {epoch + 1}/{config.epochs}: loss {np.mean(epoch_losses):.4f}")
    model.eval()
    spec = model.to_deployed()
    test_acc, confusion = evaluate_deployed(spec, imgs_test, y_test)
    train_acc, _ = evaluate_deployed(spec, imgs_train, y_train)
    log(f"deployed accuracy: train {train_acc:.4f}, test {test_acc:.4f}")
    report = TrainReport(
        test_accuracy=test_acc,
        train_accuracy=train_acc,
        loss_history=losses,
        confusion=confusion,
        epochs=config.epochs,
        seconds=time.time() - t0,
    )
    return spec, report
