"""Layered networks split into greedily trained modules with auxiliary heads."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import (
    AvgPool2d,
    BatchNorm2d,
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    Parameter,
    ReLU,
    Sequential,
    ShapeError,
    cross_entropy,
)
from .tensor.layers import DEFAULT_DTYPE

SUPPORTED_DEPTHS = (4, 5, 6)
POOL_BEFORE_LAYERS = (1, 3)


class AuxKind(str, Enum):
    CNN_AUX = "cnn-aux"
    MLP_AUX = "mlp-aux"
    MLP_SR_AUX = "mlp-sr-aux"

    @classmethod
    def parse(cls, value: "str | AuxKind") -> "AuxKind":
        if isinstance(value, AuxKind):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown auxiliary head kind {value!r}; expected one of "
                         f"{[k.value for k in cls]}")


# Hidden width of the 3-layer MLP, as a multiple of the module's channel count.
MLP_WIDTH_FACTOR = {AuxKind.MLP_AUX: 2, AuxKind.MLP_SR_AUX: 4}


def _mlp(in_shape, n_classes, width, n_hidden, rng, dtype) -> list:
    layers = []
    c, n, _ = in_shape
    target = min(2, n)
    layers += [AvgPool2d(target), Flatten()]
    features = c * target * target
    for _ in range(n_hidden):
        layers += [Dense(features, width, rng=rng, dtype=dtype), ReLU()]
        features = width
    layers.append(Dense(features, n_classes, rng=rng, dtype=dtype, name="projection"))
    return layers


def make_aux_head(kind: AuxKind, in_shape: tuple[int, int, int], n_classes: int,
                  rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> Sequential:
    kind = AuxKind.parse(kind)
    c, n, _ = in_shape
    if kind is AuxKind.CNN_AUX:
        layers = []
        for _ in range(2):
            layers += [Conv2d(c, c, 3, rng=rng, dtype=dtype, bias=False),
                       BatchNorm2d(c, dtype=dtype), ReLU()]
        target = min(2, n)
        layers += [AvgPool2d(target), Flatten(),
                   Dense(c * target * target, n_classes, rng=rng, dtype=dtype, name="projection")]
        return Sequential(layers)
    if kind is AuxKind.MLP_AUX:
        return Sequential(_mlp(in_shape, n_classes, MLP_WIDTH_FACTOR[kind] * c, 3, rng, dtype))
    # staged resolution: spatial /4 (never below 2), three 1x1 convs, then the MLP
    reduced = max(n // 4, min(2, n))
    layers = [AvgPool2d(reduced)]
    for _ in range(3):
        layers += [Conv2d(c, c, 1, rng=rng, dtype=dtype), ReLU()]
    layers += _mlp((c, reduced, reduced), n_classes, MLP_WIDTH_FACTOR[kind] * c, 3, rng, dtype)
    return Sequential(layers)


def make_final_head(in_shape, n_classes, rng, dtype=DEFAULT_DTYPE) -> Sequential:
    """Pooling followed by a 2-hidden-layer fully connected classifier."""
    c, n, _ = in_shape
    width = c * min(2, n) ** 2
    return Sequential(_mlp(in_shape, n_classes, width, 2, rng, dtype))


@dataclass
class GreedyModule:
    index: int
    body: Sequential
    head: Sequential
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]
    is_final: bool = False

    def params(self) -> list[Parameter]:
        return self.body.params() + self.head.params()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._check_input(x)
        return self.body.forward(x, train)

    def logits(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        return self.head.forward(self.forward(x, train), train)

    def local_loss(self, x: np.ndarray, labels: np.ndarray,
                   train: bool = True) -> tuple[float, np.ndarray, np.ndarray]:
        """Forward through body and head, backpropagate the head's loss.

        Gradients accumulate into this module's parameters only. Returns
        ``(loss, output, logits)`` where ``output`` is a detached copy.
        """
        self._check_input(x)
        out = self.body.forward(x, train)
        logits = self.head.forward(out, train)
        loss, g = cross_entropy(logits, labels)
        self.body.backward(self.head.backward(g), need_input=False)
        return loss, out.copy(), logits

    def _check_input(self, x):
        if tuple(x.shape[1:]) != tuple(self.in_shape):
            raise ShapeError(f"module {self.index}: expected input extents {self.in_shape}, "
                             f"got {tuple(x.shape[1:])}")

    def astype(self, dtype) -> "GreedyModule":
        self.body.astype(dtype)
        self.head.astype(dtype)
        return self


@dataclass
class Partition:
    modules: list[GreedyModule]
    class_count: int
    input_shape: tuple[int, int, int]
    aux_kind: AuxKind = AuxKind.MLP_SR_AUX
    channel_plan: list[int] = field(default_factory=list)

    def __post_init__(self):
        for a, b in zip(self.modules, self.modules[1:]):
            if tuple(a.out_shape) != tuple(b.in_shape):
                raise ShapeError(f"module {a.index} emits {a.out_shape} but module "
                                 f"{b.index} expects {b.in_shape}")

    def __len__(self):
        return len(self.modules)

    def __getitem__(self, j) -> GreedyModule:
        return self.modules[j]

    def params(self) -> list[Parameter]:
        return [p for m in self.modules for p in m.params()]

    def forward(self, x: np.ndarray, upto: int | None = None, train: bool = False) -> np.ndarray:
        """Run modules ``0..upto-1`` (all by default) end to end."""
        for m in self.modules[: len(self.modules) if upto is None else upto]:
            x = m.forward(x, train)
        return x

    def predict(self, x: np.ndarray, module: int | None = None) -> np.ndarray:
        j = len(self.modules) - 1 if module is None else module
        return self.modules[j].logits(self.forward(x, upto=j), train=False)

    def astype(self, dtype) -> "Partition":
        for m in self.modules:
            m.astype(dtype)
        return self


def local_loss(partition: Partition, j: int, x_prev: np.ndarray,
               labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Local objective of module ``j`` on its input ``x_prev``.

    Returns the loss and the module output, detached from the graph.
    """
    loss, out, _ = partition[j].local_loss(x_prev, labels)
    return loss, out


def _layer_block(c_in, c_out, pool, rng, dtype) -> list:
    layers = [MaxPool2d(2)] if pool else []
    layers += [Conv2d(c_in, c_out, 3, rng=rng, dtype=dtype, bias=False),
               BatchNorm2d(c_out, dtype=dtype), ReLU()]
    return layers


def build_partition(channels: list[int], class_count: int,
                    input_shape: tuple[int, int, int] = (3, 32, 32),
                    pool_before: tuple[int, ...] = POOL_BEFORE_LAYERS,
                    n_modules: int | None = None,
                    aux_kind: "AuxKind | str" = AuxKind.MLP_SR_AUX,
                    seed: int = 0, dtype=DEFAULT_DTYPE) -> Partition:
    """Stack 3x3 conv/BN/ReLU layers and split them into contiguous modules.

    ``n_modules`` defaults to one module per layer. Every module except the
    last gets an auxiliary head of ``aux_kind``; the last gets the final
    classifier.
    """
    aux_kind = AuxKind.parse(aux_kind)
    depth = len(channels)
    n_modules = depth if n_modules is None else n_modules
    if not 1 <= n_modules <= depth:
        raise ValueError(f"cannot split {depth} layers into {n_modules} modules")
    if class_count < 1:
        raise ValueError("class_count must be positive")
    rng = np.random.default_rng(seed)
    groups = np.array_split(np.arange(depth), n_modules)
    modules = []
    shape = tuple(input_shape)
    for j, layer_ids in enumerate(groups):
        layers = []
        for i in layer_ids:
            c_in = input_shape[0] if i == 0 else channels[i - 1]
            layers += _layer_block(c_in, channels[i], i in pool_before, rng, dtype)
        body = Sequential(layers)
        out_shape = body.output_shape(shape)
        final = j == n_modules - 1
        head = (make_final_head(out_shape, class_count, rng, dtype) if final
                else make_aux_head(aux_kind, out_shape, class_count, rng, dtype))
        modules.append(GreedyModule(j, body, head, shape, out_shape, is_final=final))
        shape = out_shape
    return Partition(modules, class_count, tuple(input_shape), aux_kind, list(channels))


def reference_channels(width: int, depth: int,
                       pool_before: tuple[int, ...] = POOL_BEFORE_LAYERS) -> list[int]:
    """Width doubles at every downsampling layer."""
    plan, c = [], width
    for i in range(depth):
        if i in pool_before:
            c *= 2
        plan.append(c)
    return plan


def build_reference_net(width: int = 128, depth_modules: int = 6, class_count: int = 10,
                        aux_kind: "AuxKind | str" = AuxKind.MLP_SR_AUX,
                        input_shape: tuple[int, int, int] = (3, 32, 32),
                        n_modules: int | None = None, seed: int = 0,
                        dtype=DEFAULT_DTYPE) -> Partition:
    """VGG-like CIFAR network: 3x3 convs, 2x2 max-pooling entering layers 2 and 4.

    ``depth_modules`` is the number of conv layers; ``n_modules`` optionally
    groups them into fewer modules (``n_modules=1`` is the plain end-to-end net).
    """
    if width < 1:
        raise ValueError("width must be >= 1")
    if depth_modules not in SUPPORTED_DEPTHS:
        raise ValueError(f"unsupported depth {depth_modules}; expected one of {SUPPORTED_DEPTHS}")
    channels = reference_channels(width, depth_modules)
    return build_partition(channels, class_count, input_shape, POOL_BEFORE_LAYERS,
                           n_modules, aux_kind, seed, dtype)


@dataclass
class FlopReport:
    module_flops: list[int]
    aux_flops: list[int]
    largest_module: int
    ratios: list[float]
    headline_ratio: float

    def table(self) -> str:
        rows = ["module  body_flops  head_flops  head/largest"]
        for j, (m, a, r) in enumerate(zip(self.module_flops, self.aux_flops, self.ratios)):
            rows.append(f"{j + 1:>6}  {m:>10}  {a:>10}  {100 * r:>11.2f}%")
        rows.append(f"aux head at largest module: {100 * self.headline_ratio:.2f}% of largest module")
        return "\n".join(rows)


def flop_report(p: Partition) -> FlopReport:
    """Per-sample flop counts (multiply-accumulate = 2 flops).

    ``headline_ratio`` is the auxiliary head of the most expensive module that
    carries one, relative to the most expensive module of the network.
    """
    module_flops = [m.body.flops(m.in_shape) for m in p.modules]
    aux_flops = [m.head.flops(m.out_shape) for m in p.modules]
    largest = max(module_flops) if module_flops else 0
    ratios = [a / largest if largest else 0.0 for a in aux_flops]
    with_aux = [j for j, m in enumerate(p.modules) if not m.is_final]
    if with_aux and largest:
        j_star = max(with_aux, key=lambda j: (module_flops[j], -j))
        headline = aux_flops[j_star] / largest
    else:
        headline = 0.0
    return FlopReport(module_flops, aux_flops, largest, ratios, headline)
