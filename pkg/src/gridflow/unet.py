"""Dense-block U-Net over time-stacked traffic frames.

Encoder: ``depth`` dense blocks. Blocks 0..depth-2 are each followed by 2x2
average pooling; the last block runs at the coarsest resolution and feeds a
single 3x3 bottleneck conv. Decoder stage ``i`` concatenates the current
features with the pre-pool output of block ``depth-1-i`` and upsamples with a
2x2 stride-2 transposed conv, so block ``n`` feeds stage ``depth-1-n``. Block
0 is consumed by the last stage: the 1x1 linear output head.

Block ``j`` has ``layers_per_block`` 3x3 convs of width
``base_channels + j * growth``. Its first layer reads the block input; every
later layer reads ``concat(previous_output, block_input)``. The block output
is its last layer's output.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .data import INPUT_CHANNELS, TARGET_CHANNELS
from .formats import read_checkpoint, write_checkpoint
from .roadmask import RoadMasks, apply_masks
from .tensor import Tensor


class ArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    depth: int = 8
    growth: int = 16
    layers_per_block: int = 4
    base_channels: int = 16
    in_channels: int = INPUT_CHANNELS
    out_channels: int = TARGET_CHANNELS

    def validate(self) -> None:
        if self.depth < 2:
            raise ArchitectureError("depth must be >= 2")
        if self.layers_per_block < 1 or self.base_channels < 1 or self.growth < 0:
            raise ArchitectureError("invalid block widths")

    @property
    def n_transpose(self) -> int:
        return self.depth - 1

    @property
    def downsample(self) -> int:
        return 2 ** (self.depth - 1)

    def block_width(self, j: int) -> int:
        return self.base_channels + j * self.growth

    def check_extent(self, height: int, width: int) -> None:
        m = self.downsample
        if height < m or width < m or height % m or width % m:
            raise ArchitectureError(
                f"input {height}x{width} is not divisible by 2^{self.depth - 1}={m} "
                f"(depth {self.depth} would leave a sub-pixel or fractional bottleneck)"
            )


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # "conv" or "tconv"
    in_channels: int
    out_channels: int
    kernel: int
    resolution: int  # downsampling factor of the layer's input


def layer_plan(cfg: ArchConfig) -> list[LayerSpec]:
    """Every parameterized layer in execution order, with channel counts.

    Building the plan asserts the skip wiring: each decoder stage's input
    width is the incoming decoder width plus the width of the block it
    consumes, at that block's resolution.
    """
    cfg.validate()
    plan: list[LayerSpec] = []
    c_in = cfg.in_channels
    block_out: list[tuple[int, int]] = []  # (channels, resolution)
    for j in range(cfg.depth):
        res = 2**j
        width = cfg.block_width(j)
        for layer in range(cfg.layers_per_block):
            cin = c_in if layer == 0 else width + c_in
            plan.append(LayerSpec(f"block{j}.conv{layer}", "conv", cin, width, 3, res))
        block_out.append((width, res))
        c_in = width
    bottom = cfg.block_width(cfg.depth - 1)
    plan.append(LayerSpec("bottleneck", "conv", bottom, bottom, 3, 2 ** (cfg.depth - 1)))

    current, res = bottom, 2 ** (cfg.depth - 1)
    for i in range(cfg.depth - 1):
        skip_ch, skip_res = block_out[cfg.depth - 1 - i]
        if skip_res != res:
            raise ArchitectureError(f"stage {i}: skip resolution {skip_res} != decoder resolution {res}")
        out_ch = cfg.block_width(cfg.depth - 2 - i)
        plan.append(LayerSpec(f"up{i}", "tconv", current + skip_ch, out_ch, 2, res))
        current, res = out_ch, res // 2
    skip_ch, skip_res = block_out[0]
    if skip_res != res:
        raise ArchitectureError("head skip resolution mismatch")
    plan.append(LayerSpec("head", "conv", current + skip_ch, cfg.out_channels, 1, res))
    return plan


@dataclass
class ModelParams:
    arch: ArchConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    def equals(self, other: "ModelParams") -> bool:
        return (
            self.arch == other.arch
            and self.names() == other.names()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )

    def save(self, path) -> None:
        write_checkpoint(path, self.arrays)

    @classmethod
    def load(cls, path, arch: ArchConfig) -> "ModelParams":
        arrays = read_checkpoint(path)
        expected = expected_shapes(arch)
        if list(arrays) != list(expected):
            raise ArchitectureError("checkpoint parameter names do not match the architecture")
        for k, shape in expected.items():
            if arrays[k].shape != shape:
                raise ArchitectureError(f"{k}: checkpoint shape {arrays[k].shape} != {shape}")
        return cls(arch, arrays)


def expected_shapes(cfg: ArchConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in layer_plan(cfg):
        if spec.kind == "conv":
            shapes[f"{spec.name}.weight"] = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
        else:
            shapes[f"{spec.name}.weight"] = (spec.in_channels, spec.out_channels, 2, 2)
        shapes[f"{spec.name}.bias"] = (spec.out_channels,)
    return shapes


def build_model(
    cfg: ArchConfig,
    init_seed: int,
    height: Optional[int] = None,
    width: Optional[int] = None,
    dtype=np.float32,
) -> ModelParams:
    """Initialize parameters with fan-in scaled uniform weights and zero biases.

    ReLU layers use bound ``sqrt(6 / fan_in)``; the linear head uses
    ``sqrt(3 / fan_in)``. If ``height``/``width`` are given they are checked
    against the network's downsampling factor.
    """
    if height is not None or width is not None:
        cfg.check_extent(height or cfg.downsample, width or cfg.downsample)
    rng = np.random.default_rng(init_seed)
    arrays: dict[str, np.ndarray] = {}
    for spec in layer_plan(cfg):
        if spec.kind == "conv":
            shape = (spec.out_channels, spec.in_channels, spec.kernel, spec.kernel)
            fan_in = spec.in_channels * spec.kernel * spec.kernel
        else:
            shape = (spec.in_channels, spec.out_channels, 2, 2)
            fan_in = spec.in_channels
        gain = 3.0 if spec.name == "head" else 6.0
        bound = np.sqrt(gain / fan_in)
        arrays[f"{spec.name}.weight"] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        arrays[f"{spec.name}.bias"] = np.zeros(spec.out_channels, dtype=dtype)
    return ModelParams(cfg, arrays)


def dense_block_forward(x: Tensor, weights: Mapping[str, Tensor], block: int, layers: int) -> Tensor:
    """Run dense block ``block``; returns the last layer's activations.

    Layer ``l > 0`` convolves ``concat(out[l-1], x)``. Convolution is linear
    in its input channels, so that equals ``conv(out[l-1], W_prev) +
    conv(x, W_x)``; the ``x`` halves of every layer are stacked and computed
    in one wide convolution, which avoids re-reading the (wide) block input
    once per layer. :func:`dense_block_reference` is the literal version.
    """
    c_in = x.shape[1]
    ws = [weights[f"block{block}.conv{l}.weight"] for l in range(layers)]
    bs = [weights[f"block{block}.conv{l}.bias"] for l in range(layers)]
    width = ws[0].shape[0]
    for l, w in enumerate(ws):
        expected = c_in if l == 0 else width + c_in
        if w.shape[1] != expected:
            raise ArchitectureError(f"block{block}.conv{l}: weight expects {w.shape[1]} channels, block provides {expected}")
    if layers == 1:
        return T.relu(T.conv2d(x, ws[0], bs[0], padding=1))

    w_x = T.concat([ws[0]] + [T.narrow(w, 1, width, width + c_in) for w in ws[1:]], axis=0)
    from_x = T.conv2d(x, w_x, T.concat(bs, axis=0), padding=1)
    zero_bias = Tensor(np.zeros(width, dtype=x.dtype))
    out = T.relu(T.narrow(from_x, 1, 0, width))
    for l in range(1, layers):
        from_prev = T.conv2d(out, T.narrow(ws[l], 1, 0, width), zero_bias, padding=1)
        out = T.relu(T.add(from_prev, T.narrow(from_x, 1, l * width, (l + 1) * width)))
    return out


def dense_block_reference(x: Tensor, weights: Mapping[str, Tensor], block: int, layers: int) -> Tensor:
    """Literal dense block: every layer after the first reads ``concat(prev, x)``."""
    out = x
    for layer in range(layers):
        w = weights[f"block{block}.conv{layer}.weight"]
        b = weights[f"block{block}.conv{layer}.bias"]
        inp = x if layer == 0 else T.concat_channels(out, x)
        if inp.shape[1] != w.shape[1]:
            raise ArchitectureError(
                f"block{block}.conv{layer}: got {inp.shape[1]} channels, expected {w.shape[1]}"
            )
        out = T.relu(T.conv2d(inp, w, b, padding=1))
    return out


def forward_tensors(weights: Mapping[str, Tensor], cfg: ArchConfig, x: Tensor, trace: Optional[list] = None) -> Tensor:
    """Network forward on a batch ``x`` of shape (N, in_channels, H, W).

    ``trace``, when given, collects ``(stage_name, shape)`` pairs for
    shape-chain assertions.
    """
    if x.data.ndim != 4:
        raise ArchitectureError("forward expects a (N, C, H, W) batch")
    cfg.check_extent(*x.shape[2:])
    if x.shape[1] != cfg.in_channels:
        raise ArchitectureError(f"input has {x.shape[1]} channels, model expects {cfg.in_channels}")

    skips: list[Tensor] = []
    h = x
    for j in range(cfg.depth):
        h = dense_block_forward(h, weights, j, cfg.layers_per_block)
        skips.append(h)
        if trace is not None:
            trace.append((f"block{j}", h.shape))
        if j < cfg.depth - 1:
            h = T.avg_pool2(h)
    h = T.relu(T.conv2d(h, weights["bottleneck.weight"], weights["bottleneck.bias"], padding=1))
    if trace is not None:
        trace.append(("bottleneck", h.shape))
    for i in range(cfg.depth - 1):
        h = T.concat_channels(h, skips[cfg.depth - 1 - i])
        h = T.relu(T.transpose_conv2d(h, weights[f"up{i}.weight"], weights[f"up{i}.bias"]))
        if trace is not None:
            trace.append((f"up{i}", h.shape))
    h = T.concat_channels(h, skips[0])
    out = T.conv2d(h, weights["head.weight"], weights["head.bias"])
    if trace is not None:
        trace.append(("head", out.shape))
    return out


def as_tensors(params: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.arrays.items()}


def forward(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Unclamped network output for (C, H, W) or (N, C, H, W) input."""
    arr = np.asarray(x)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    batch = batch.astype(next(iter(params.arrays.values())).dtype, copy=False)
    out = forward_tensors(as_tensors(params), params.arch, Tensor(batch)).data
    return out[0] if single else out


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss of one batch and its gradient for every parameter."""
    weights = as_tensors(params, requires_grad=True)
    pred = forward_tensors(weights, params.arch, Tensor(x))
    loss = T.mse_loss(pred, Tensor(y))
    loss.backward()
    return loss.item(), {k: t.grad for k, t in weights.items()}


def pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad the last two axes up to a multiple; returns the array and original extent."""
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x, (h, w)
    pad = [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(x, pad), (h, w)


def predict(params: ModelParams, sample_input: np.ndarray, masks: Optional[RoadMasks] = None) -> np.ndarray:
    """Clamped (and optionally masked) forecast for (C, H, W) or (N, C, H, W) input.

    Inputs whose extent is not a multiple of the downsampling factor are
    zero-padded and the output cropped back.
    """
    padded, (h, w) = pad_to_multiple(np.asarray(sample_input), params.arch.downsample)
    out = forward(params, padded)[..., :h, :w]
    out = np.clip(out, 0.0, 1.0)
    if masks is not None:
        out = apply_masks(out, masks)
    return out


PARAM_NAME = re.compile(r"^(block(\d+)\.conv(\d+)|bottleneck|up(\d+)|head)\.(weight|bias)$")


def census(params: ModelParams) -> dict[str, int]:
    """Count layers by role from the parameter names."""
    counts = {"block_convs": 0, "blocks": 0, "bottleneck": 0, "transpose": 0, "head": 0}
    blocks = set()
    for name in params.names():
        m = PARAM_NAME.match(name)
        if not m:
            raise ArchitectureError(f"unexpected parameter name {name!r}")
        if m.group(5) != "weight":
            continue
        if m.group(2) is not None:
            counts["block_convs"] += 1
            blocks.add(int(m.group(2)))
        elif m.group(1) == "bottleneck":
            counts["bottleneck"] += 1
        elif m.group(4) is not None:
            counts["transpose"] += 1
        else:
            counts["head"] += 1
    counts["blocks"] = len(blocks)
    return counts


def arch_dict(cfg: ArchConfig) -> dict:
    return asdict(cfg)
