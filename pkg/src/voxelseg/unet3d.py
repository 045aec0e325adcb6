"""Standard 3D U-Net assembled from :mod:`voxelseg.nn` layers.

Encoder level ``l`` has ``base_filters * 2**l`` feature maps (capped at
``max_filters``) and ``convs_per_block`` blocks of Conv3x3x3 -> ReLU -> BN,
followed by 2x2x2 max pooling on every level but the last.  The decoder
mirrors it with 2x2x2 stride-2 transposed convolutions, concatenates the
matching encoder output, and ends in a 1x1x1 convolution plus a channel
softmax.

Parameter names follow ``enc{l}.conv{i}.weight``, ``enc{l}.bn{i}.gamma``,
``dec{l}.up.weight``, ``head.bias`` and so on; the order of
:func:`param_shapes` is the checkpoint order.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from voxelseg.errors import ConfigError, IndivisibleShape
from voxelseg.nn import ops
from voxelseg.nn.checkpoint import load_checkpoint, save_checkpoint
from voxelseg.nn.tensor import Tensor


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 4
    base_filters: int = 32
    num_levels: int = 5
    convs_per_block: int = 2
    max_filters: int = 512

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if self.base_filters < 1 or self.num_levels < 1 or self.convs_per_block < 1:
            raise ConfigError("base_filters, num_levels and convs_per_block must be >= 1")
        f = self.filters
        if any(b <= a for a, b in zip(f, f[1:])):
            raise ConfigError(f"filters must strictly increase with depth, got {f}")

    @property
    def filters(self) -> tuple[int, ...]:
        return tuple(min(self.base_filters * 2 ** lvl, self.max_filters)
                     for lvl in range(self.num_levels))

    @property
    def divisor(self) -> int:
        return 2 ** (self.num_levels - 1)


class LayerShape(NamedTuple):
    name: str
    shape: tuple[int, int, int, int]  # (x, y, z, channels)


@dataclass
class Model:
    config: UNetConfig
    params: dict[str, Tensor]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def arrays(self) -> dict[str, np.ndarray]:
        """Every named array (trainable parameters, then BN running stats)."""
        out = {k: t.data for k, t in self.params.items()}
        out.update(self.buffers)
        return out

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def _block_shapes(prefix, c_in, c_out, n_convs):
    shapes = {}
    for i in range(n_convs):
        cin = c_in if i == 0 else c_out
        shapes[f"{prefix}.conv{i}.weight"] = (3, 3, 3, cin, c_out)
        shapes[f"{prefix}.conv{i}.bias"] = (c_out,)
        shapes[f"{prefix}.bn{i}.gamma"] = (c_out,)
        shapes[f"{prefix}.bn{i}.beta"] = (c_out,)
    return shapes


def param_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Trainable parameter shapes in checkpoint order."""
    f = config.filters
    shapes = {}
    c_in = config.in_channels
    for lvl, width in enumerate(f):
        shapes.update(_block_shapes(f"enc{lvl}", c_in, width, config.convs_per_block))
        c_in = width
    for lvl in range(config.num_levels - 2, -1, -1):
        shapes[f"dec{lvl}.up.weight"] = (2, 2, 2, f[lvl], f[lvl + 1])
        shapes[f"dec{lvl}.up.bias"] = (f[lvl],)
        shapes.update(_block_shapes(f"dec{lvl}", 2 * f[lvl], f[lvl], config.convs_per_block))
    shapes["head.weight"] = (1, 1, 1, f[0], config.num_classes)
    shapes["head.bias"] = (config.num_classes,)
    return shapes


def buffer_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gamma"):
            stem = name[: -len(".gamma")]
            shapes[f"{stem}.running_mean"] = shape
            shapes[f"{stem}.running_var"] = shape
    return shapes


def param_count(config: UNetConfig) -> int:
    """Element count over every named array, BN running statistics included."""
    shapes = list(param_shapes(config).values()) + list(buffer_shapes(config).values())
    return int(sum(np.prod(s) for s in shapes))


def _fan_in(name: str, shape) -> int:
    if name.endswith(".up.weight"):
        return shape[4]  # each output voxel sees exactly one input position
    return int(np.prod(shape[:4]))


def build(config: UNetConfig, seed: int = 0, dtype=np.float32) -> Model:
    """Fresh model: He-normal weights (std sqrt(2/fan_in)), zero biases,
    BN gamma 1 / beta 0, running mean 0 / var 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            std = np.sqrt(2.0 / _fan_in(name, shape))
            arr = rng.standard_normal(shape) * std
        elif name.endswith(".gamma"):
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    buffers = {name: (np.zeros(s) if name.endswith("mean") else np.ones(s)).astype(dtype)
               for name, s in buffer_shapes(config).items()}
    return Model(config, params, buffers)


def check_input_shape(config: UNetConfig, spatial) -> None:
    bad = [n for n in spatial if n % config.divisor]
    if bad or any(n < 1 for n in spatial):
        raise IndivisibleShape(
            f"spatial shape {tuple(spatial)} must be divisible by {config.divisor} "
            f"for a {config.num_levels}-level U-Net")


def shape_inference(config: UNetConfig, input_shape) -> list[LayerShape]:
    """Symbolic (x, y, z, channels) output shape of every layer."""
    spatial = tuple(int(n) for n in input_shape[:3])
    check_input_shape(config, spatial)
    f = config.filters
    table = [LayerShape("input", spatial + (config.in_channels,))]
    sizes = []
    cur = spatial
    for lvl, width in enumerate(f):
        for i in range(config.convs_per_block):
            table.append(LayerShape(f"enc{lvl}.block{i}", cur + (width,)))
        sizes.append(cur)
        if lvl < config.num_levels - 1:
            cur = tuple(n // 2 for n in cur)
            table.append(LayerShape(f"enc{lvl}.pool", cur + (width,)))
    for lvl in range(config.num_levels - 2, -1, -1):
        cur = sizes[lvl]
        table.append(LayerShape(f"dec{lvl}.up", cur + (f[lvl],)))
        table.append(LayerShape(f"dec{lvl}.concat", cur + (2 * f[lvl],)))
        for i in range(config.convs_per_block):
            table.append(LayerShape(f"dec{lvl}.block{i}", cur + (f[lvl],)))
    table.append(LayerShape("head", cur + (config.num_classes,)))
    table.append(LayerShape("softmax", cur + (config.num_classes,)))
    return table


def bottleneck_shape(config: UNetConfig, input_shape) -> tuple[int, int, int]:
    last = f"enc{config.num_levels - 1}.block{config.convs_per_block - 1}"
    return next(row.shape[:3] for row in shape_inference(config, input_shape) if row.name == last)


def _block(model, prefix, x, training):
    p, cfg = model.params, model.config
    for i in range(cfg.convs_per_block):
        x = ops.conv3d(x, p[f"{prefix}.conv{i}.weight"], p[f"{prefix}.conv{i}.bias"])
        x = ops.relu(x)
        x = ops.batchnorm(x, p[f"{prefix}.bn{i}.gamma"], p[f"{prefix}.bn{i}.beta"],
                          model.buffers[f"{prefix}.bn{i}.running_mean"],
                          model.buffers[f"{prefix}.bn{i}.running_var"], training)
    return x


def forward(model: Model, batch, mode: str = "train") -> Tensor:
    """Per-voxel class probabilities, shape ``(b, x, y, z, num_classes)``.

    ``mode='train'`` normalizes with batch statistics (and updates the
    running ones); ``mode='infer'`` uses the running statistics.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    training = mode == "train"
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 5 or x.shape[-1] != cfg.in_channels:
        raise IndivisibleShape(f"expected (b, x, y, z, {cfg.in_channels}) input, got {x.shape}")
    check_input_shape(cfg, x.shape[1:4])
    skips = []
    for lvl in range(cfg.num_levels):
        x = _block(model, f"enc{lvl}", x, training)
        if lvl < cfg.num_levels - 1:
            skips.append(x)
            x = ops.maxpool3d(x)
    p = model.params
    for lvl in range(cfg.num_levels - 2, -1, -1):
        x = ops.transposed_conv3d(x, p[f"dec{lvl}.up.weight"], p[f"dec{lvl}.up.bias"])
        x = ops.concat_channels(skips[lvl], x)
        x = _block(model, f"dec{lvl}", x, training)
    x = ops.conv3d(x, p["head.weight"], p["head.bias"])
    return ops.softmax_channels(x)


def save_model(model: Model, path, extra_meta: dict | None = None):
    meta = {"unet": asdict(model.config), "dtype": np.dtype(model.dtype).name}
    if extra_meta:
        meta.update(extra_meta)
    return save_checkpoint(path, model.arrays(), meta)


def load_model(path) -> Model:
    arrays, meta = load_checkpoint(path)
    config = UNetConfig(**meta["unet"])
    params = {name: Tensor(arrays[name], requires_grad=True, name=name)
              for name in param_shapes(config)}
    buffers = {name: arrays[name] for name in buffer_shapes(config)}
    return Model(config, params, buffers)
