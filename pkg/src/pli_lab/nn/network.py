"""Sequential networks and the two architectures used throughout the lab."""

from __future__ import annotations

import numpy as np

from pli_lab.errors import ConfigurationError, StateError
from pli_lab.nn.layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Flatten,
    Layer,
    Linear,
    MaxPool2d,
    Parameter,
    ReLU,
    Tanh,
)


class Network:
    """An ordered stack of layers with a declared per-sample input shape."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], name: str = "net"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        for i, layer in enumerate(self.layers):
            layer.index = i
        self.output_shape = self._infer_shapes()
        self._ran_forward = False

    def _infer_shapes(self) -> tuple[int, ...]:
        shape = self.input_shape
        for layer in self.layers:
            shape = tuple(layer.output_shape(shape))
        return shape

    # -- modes ---------------------------------------------------------------
    def train(self) -> "Network":
        for layer in self.layers:
            layer.training = True
        return self

    def eval(self) -> "Network":
        for layer in self.layers:
            layer.training = False
        return self

    @property
    def training(self) -> bool:
        return any(layer.training for layer in self.layers)

    # -- passes ----------------------------------------------------------------
    def forward(self, batch: np.ndarray) -> np.ndarray:
        if batch.ndim != len(self.input_shape) + 1 or tuple(batch.shape[1:]) != self.input_shape:
            first = self.layers[0] if self.layers else None
            where = f"layer 0 ({first.kind})" if first else self.name
            raise ConfigurationError(
                f"{self.name}: {where} expects per-sample shape {self.input_shape}, "
                f"got batch of shape {tuple(batch.shape)}")
        x = batch
        for layer in self.layers:
            x = layer.forward(x)
        self._ran_forward = True
        return x

    __call__ = forward

    def backward(self, output_grad: np.ndarray, need_input_grad: bool = True) -> np.ndarray | None:
        """Backpropagate ``output_grad``; fills every parameter's grad and returns d(input).

        With ``need_input_grad=False`` the first layer skips its input gradient
        (training loops never need it) and ``None`` is returned.
        """
        if not self._ran_forward:
            raise StateError(f"{self.name}: backward called before forward")
        g = output_grad
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            g = self.layers[i].backward(g, need_input=need_input_grad or i > 0)
        return g

    def predict(self, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode forward in chunks; restores the previous mode afterwards."""
        was_training = [layer.training for layer in self.layers]
        self.eval()
        try:
            outs = [self.forward(batch[i:i + batch_size]) for i in range(0, len(batch), batch_size)]
        finally:
            for layer, flag in zip(self.layers, was_training):
                layer.training = flag
        if not outs:
            return np.zeros((0,) + self.output_shape, dtype=np.float32)
        return np.concatenate(outs, axis=0)

    # -- parameters ------------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Parameter]]:
        return [(f"{i}.{layer.kind}.{name}", p)
                for i, layer in enumerate(self.layers) for name, p in layer.params.items()]

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def get_weights(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters()]

    def set_weights(self, weights: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(weights) != len(params):
            raise ConfigurationError(f"{self.name}: expected {len(params)} arrays, got {len(weights)}")
        for p, w in zip(params, weights):
            if w.shape != p.data.shape:
                raise ConfigurationError(f"{self.name}: weight shape {w.shape} != {p.data.shape}")
            p.data[...] = w

    def signature(self) -> tuple:
        """Architecture identity (kinds + descriptors); equal signatures mean homogeneous models."""
        return (self.input_shape,) + tuple((l.kind, tuple(l.descriptor())) for l in self.layers)

    def __repr__(self) -> str:
        body = ", ".join(repr(l) for l in self.layers)
        return f"Network({self.name}: {self.input_shape} -> {self.output_shape}; {body})"


def classifier_net(num_classes: int, image_size: int = 64, in_channels: int = 3,
                   rng: np.random.Generator | None = None, dtype=np.float32,
                   name: str = "classifier") -> Network:
    """Server/client model: conv(32, 3x3) -> ReLU -> maxpool(3) -> flatten -> linear."""
    rng = rng if rng is not None else np.random.default_rng(0)
    conv = Conv2d(in_channels, 32, 3, stride=1, padding=0, rng=rng, dtype=dtype)
    side = (image_size - 2) // 3
    layers = [conv, ReLU(), MaxPool2d(3), Flatten(), Linear(32 * side * side, num_classes, rng=rng, dtype=dtype)]
    return Network(layers, (in_channels, image_size, image_size), name=name)


def inversion_net(num_classes: int, image_size: int = 64, out_channels: int = 3,
                  width: float = 1.0, rng: np.random.Generator | None = None,
                  dtype=np.float32, name: str = "inversion") -> Network:
    """Decoder from a pair of J-dim probability vectors (2J channels at 1x1) to an image.

    A kernel-4 stride-1 transposed convolution lifts 1x1 to 4x4, then kernel-4
    stride-2 pad-1 stages double the side until ``image_size``.  ``width``
    scales all hidden channel counts (1.0 gives 1024-512-256-128 at 64x64).
    """
    stages = int(round(np.log2(image_size / 4)))
    if stages < 1 or 4 * 2 ** stages != image_size:
        raise ConfigurationError(f"image_size must be 4*2^n with n>=1, got {image_size}")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = 1024 * 2 ** (stages - 4) if stages >= 4 else 128 * 2 ** (stages - 1)
    chans = [max(1, int(round(base * width / 2 ** i))) for i in range(stages)]
    layers: list[Layer] = [ConvTranspose2d(2 * num_classes, chans[0], 4, 1, 0, rng=rng, dtype=dtype),
                           BatchNorm2d(chans[0], dtype=dtype), Tanh()]
    for c_in, c_out in zip(chans[:-1], chans[1:]):
        layers += [ConvTranspose2d(c_in, c_out, 4, 2, 1, rng=rng, dtype=dtype),
                   BatchNorm2d(c_out, dtype=dtype), Tanh()]
    layers += [ConvTranspose2d(chans[-1], out_channels, 4, 2, 1, rng=rng, dtype=dtype), Tanh()]
    return Network(layers, (2 * num_classes, 1, 1), name=name)
