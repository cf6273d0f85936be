"""Miniature attention U-Net for binary mask segmentation.

Contracting path of two 3x3 conv+relu blocks per level with 2x2 max pooling,
an expanding path of bilinear upsampling followed by 3x3 convs, and additive
attention gates on the skip connections: the skip tensor is strided down to
the gating tensor's resolution, summed with a 1x1 projection of the gate,
collapsed to one channel, squashed to (0,1), upsampled back and multiplied
into the skip. Channel widths double per level; no normalization layers.

Parameters are He-initialized from a seeded generator in a fixed creation
order, so equal configs yield bit-identical weights.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor,
    concat_channels,
    conv2d,
    expand_channels,
    maxpool2d,
    mul,
    relu,
    sigmoid,
    upsample2d,
)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    out_channels: int = 1
    depth: int = 3
    base_channels: int = 16
    attention_enabled: bool = True
    init_seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"model depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be >= 1")


class AttentionUNet:
    """Segmentation model; parameters live in an ordered name -> Tensor map."""

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        self._params: dict[str, Tensor] = {}
        # Coefficient maps of the last forward pass, deepest gate first.
        self.gate_coefficients: list[np.ndarray] = []
        rng = np.random.default_rng(config.init_seed)

        c = config.base_channels
        widths = [c * (1 << i) for i in range(config.depth + 1)]

        prev = config.in_channels
        for i, width in enumerate(widths[:-1]):
            self._add_conv(rng, f"enc{i}.conv1", width, prev, 3)
            self._add_conv(rng, f"enc{i}.conv2", width, width, 3)
            prev = width
        self._add_conv(rng, "bottleneck.conv1", widths[-1], widths[-2], 3)
        self._add_conv(rng, "bottleneck.conv2", widths[-1], widths[-1], 3)

        for i in reversed(range(config.depth)):
            skip_c, gate_c = widths[i], widths[i + 1]
            if config.attention_enabled:
                inter = max(1, gate_c // 2)
                self._add_conv(rng, f"gate{i}.wx", inter, skip_c, 1)
                self._add_conv(rng, f"gate{i}.wg", inter, gate_c, 1)
                self._add_conv(rng, f"gate{i}.psi", 1, inter, 1)
            self._add_conv(rng, f"dec{i}.up", skip_c, gate_c, 3)
            self._add_conv(rng, f"dec{i}.conv1", skip_c, 2 * skip_c, 3)
            self._add_conv(rng, f"dec{i}.conv2", skip_c, skip_c, 3)
        self._add_conv(rng, "head", config.out_channels, widths[0], 1)

    def _add_conv(self, rng, name: str, cout: int, cin: int, k: int) -> None:
        std = np.sqrt(2.0 / (cin * k * k))
        self._params[f"{name}.weight"] = Tensor(
            rng.normal(0.0, std, (cout, cin, k, k)), requires_grad=True)
        self._params[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)

    # -- parameter access ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self._params.values())

    def get_weights(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self._params.values()])

    def set_weights(self, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.parameter_count,):
            raise ShapeError(
                f"weight vector has {vector.size} values, model expects "
                f"{self.parameter_count}"
            )
        offset = 0
        for p in self._params.values():
            p.data[...] = vector[offset:offset + p.size].reshape(p.shape)
            offset += p.size

    def get_grads_flat(self) -> np.ndarray:
        chunks = []
        for p in self._params.values():
            chunks.append(np.zeros(p.size) if p.grad is None else p.grad.ravel())
        return np.concatenate(chunks)

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            if name not in state:
                raise ShapeError(f"state is missing tensor {name}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"tensor {name}: shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def clone(self) -> "AttentionUNet":
        other = AttentionUNet(self.config)
        other.set_weights(self.get_weights())
        return other

    # -- forward -------------------------------------------------------------

    def _conv(self, x: Tensor, name: str, stride: int = 1, padding: int = 0) -> Tensor:
        return conv2d(x, self._params[f"{name}.weight"], self._params[f"{name}.bias"],
                      stride=stride, padding=padding)

    def _block(self, x: Tensor, name: str) -> Tensor:
        x = relu(self._conv(x, f"{name}.conv1", padding=1))
        return relu(self._conv(x, f"{name}.conv2", padding=1))

    def attention_gate(self, x: Tensor, g: Tensor, level: int) -> tuple[Tensor, Tensor]:
        """Gate the skip tensor ``x`` with the coarser tensor ``g`` one level down.

        Returns the gated skip and the (N,1,H,W) coefficient map, both at
        ``x``'s resolution; coefficients are strictly inside (0, 1).
        """
        if (g.shape[2] * 2, g.shape[3] * 2) != (x.shape[2], x.shape[3]):
            raise ShapeError(
                f"attention_gate: gating tensor {g.shape} is not at half the "
                f"resolution of the skip tensor {x.shape}"
            )
        a = self._conv(x, f"gate{level}.wx", stride=2)
        b = self._conv(g, f"gate{level}.wg")
        collapsed = self._conv(relu(a + b), f"gate{level}.psi")
        coeff = upsample2d(sigmoid(collapsed), "bilinear")
        gated = mul(x, expand_channels(coeff, x.shape[1]))
        return gated, coeff

    def forward(self, batch) -> Tensor:
        """Map a (N, in_channels, H, W) batch to per-pixel probabilities."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"forward expects (N,{self.config.in_channels},H,W), got {x.shape}"
            )
        factor = 1 << self.config.depth
        if x.shape[2] % factor or x.shape[3] % factor:
            raise ShapeError(
                f"spatial extents {x.shape[2]}x{x.shape[3]} must be divisible "
                f"by 2^depth = {factor}"
            )

        skips: list[Tensor] = []
        cur = x
        for i in range(self.config.depth):
            cur = self._block(cur, f"enc{i}")
            skips.append(cur)
            cur = maxpool2d(cur)
        cur = self._block(cur, "bottleneck")

        self.gate_coefficients = []
        for i in reversed(range(self.config.depth)):
            skip = skips[i]
            if self.config.attention_enabled:
                skip, coeff = self.attention_gate(skip, cur, i)
                self.gate_coefficients.append(coeff.data)
            up = relu(self._conv(upsample2d(cur, "bilinear"), f"dec{i}.up", padding=1))
            cur = self._block(concat_channels([skip, up]), f"dec{i}")
        return sigmoid(self._conv(cur, "head"))


def plain_variant(config: ModelConfig) -> ModelConfig:
    """The same architecture with the gates removed (ablation baseline)."""
    return replace(config, attention_enabled=False)
