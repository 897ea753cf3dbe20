"""Shape and parameter accounting for the segmentation U-Net, its training
schedules, and fusion of ensemble prediction masks.

Nothing here executes a network.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from .errors import ContractError
from .imaging import MaskImage

INPUT_CHANNELS = 6
OUTPUT_CHANNELS = 1
STAGES = 3
CONVS_PER_STAGE = 3
FINAL_LR = 0.001
FINAL_MOMENTUM = 0.99
REPORTED_PARAMS = 543_888_390
FUSE_THRESHOLD = 128


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 128
    kernel_size: int = 5
    pool_size: int = 2
    n_filters_stage1: int = 32
    fc_dim: int = 8192
    dropout_a: float = 0.5
    dropout_b: float = 0.5
    dropout_c: float = 0.5
    noise_sigma: float = 0.025
    learn_rate0: float = 0.01
    momentum0: float = 0.95
    max_epochs: int = 2000

    def __post_init__(self):
        for name in ("input_size", "kernel_size", "pool_size", "n_filters_stage1", "fc_dim", "max_epochs"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        for name in ("dropout_a", "dropout_b", "dropout_c"):
            if not 0 <= getattr(self, name) < 1:
                raise ContractError(f"{name} must lie in [0, 1)")
        if self.noise_sigma < 0 or self.learn_rate0 <= 0 or self.momentum0 < 0:
            raise ContractError("noise, learning rate and momentum must be nonnegative")
        if self.input_size % (self.pool_size ** STAGES):
            raise ContractError(
                f"input size {self.input_size} not divisible by pool_size^{STAGES} = {self.pool_size ** STAGES}"
            )

    @classmethod
    def from_dict(cls, d: dict) -> UNetConfig:
        known = {f.name for f in fields(cls)}
        bad = set(d) - known
        if bad:
            raise ContractError(f"unknown U-Net config keys: {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# The ten ensemble members; the first row is the single best network.
TABLE2 = (
    UNetConfig(fc_dim=8192),
    UNetConfig(fc_dim=4096),
    UNetConfig(fc_dim=2048),
    UNetConfig(fc_dim=1024),
    UNetConfig(fc_dim=512),
    UNetConfig(fc_dim=256),
    UNetConfig(kernel_size=3, n_filters_stage1=16, fc_dim=1024),
    UNetConfig(fc_dim=8192, dropout_b=0.75),
    UNetConfig(fc_dim=8192, dropout_a=0.25, dropout_c=0.25),
    UNetConfig(input_size=64, fc_dim=8192),
)


@dataclass(frozen=True)
class LayerShape:
    name: str
    out_channels: int
    height: int
    width: int
    params: int
    kernel: int = 0


def conv_params(k: int, c_in: int, c_out: int) -> int:
    return k * k * c_in * c_out + c_out


def dense_params(n_in: int, n_out: int) -> int:
    return n_in * n_out + n_out


def infer_shapes(c: UNetConfig) -> list[LayerShape]:
    """Layer table under same-padding convolutions.

    Bottleneck: flatten -> dense(fc_dim) -> dense back onto the bottleneck grid.
    Decoder stages unpool, concatenate the mirrored encoder stage output, then
    apply three convolutions, the first with a ``2k+1`` kernel. A final
    ``k x k`` convolution produces the single output channel.
    """
    k, p, n = c.kernel_size, c.pool_size, c.n_filters_stage1
    size = c.input_size
    layers = [LayerShape("input", INPUT_CHANNELS, size, size, 0)]
    ch = INPUT_CHANNELS
    skips = []
    for s in range(STAGES):
        width = n * 2 ** s
        for i in range(CONVS_PER_STAGE):
            layers.append(LayerShape(f"conv{s + 1}_{i + 1}", width, size, size, conv_params(k, ch, width), k))
            ch = width
        skips.append((ch, size))
        size //= p
        layers.append(LayerShape(f"pool{s + 1}", ch, size, size, 0, p))

    flat = ch * size * size
    layers.append(LayerShape("fc", c.fc_dim, 1, 1, dense_params(flat, c.fc_dim)))
    layers.append(LayerShape("fc_expand", ch, size, size, dense_params(c.fc_dim, flat)))

    for s in reversed(range(STAGES)):
        width = n * 2 ** s
        size *= p
        layers.append(LayerShape(f"unpool{s + 1}", ch, size, size, 0, p))
        skip_ch, skip_size = skips[s]
        assert skip_size == size
        ch += skip_ch
        layers.append(LayerShape(f"concat{s + 1}", ch, size, size, 0))
        for i in range(CONVS_PER_STAGE):
            kk = 2 * k + 1 if i == 0 else k
            layers.append(LayerShape(f"deconv{s + 1}_{i + 1}", width, size, size, conv_params(kk, ch, width), kk))
            ch = width
    layers.append(LayerShape("output", OUTPUT_CHANNELS, size, size, conv_params(k, ch, OUTPUT_CHANNELS), k))
    return layers


def param_count(c: UNetConfig) -> int:
    return sum(layer.params for layer in infer_shapes(c))


def layer_table(c: UNetConfig) -> str:
    rows = [f"{'layer':<12}{'channels':>10}{'height':>8}{'width':>8}{'kernel':>8}{'params':>14}"]
    for layer in infer_shapes(c):
        kernel = str(layer.kernel) if layer.kernel else "-"
        rows.append(
            f"{layer.name:<12}{layer.out_channels:>10}{layer.height:>8}{layer.width:>8}{kernel:>8}{layer.params:>14,}"
        )
    total = param_count(c)
    rows.append(f"{'total':<12}{'':>34}{total:>14,}")
    return "\n".join(rows)


def schedule(epoch: int, c: UNetConfig) -> tuple[float, float]:
    """Learning rate and momentum, linear from the initial values to the final ones."""
    if not 1 <= epoch <= c.max_epochs:
        raise ContractError(f"epoch {epoch} outside [1, {c.max_epochs}]")
    frac = 0.0 if c.max_epochs == 1 else (epoch - 1) / (c.max_epochs - 1)
    lr = c.learn_rate0 + (FINAL_LR - c.learn_rate0) * frac
    mo = c.momentum0 + (FINAL_MOMENTUM - c.momentum0) * frac
    return lr, mo


def fuse_masks(masks) -> MaskImage:
    """Average confidence masks, then binarize at 128 (inclusive)."""
    masks = list(masks)
    if not masks:
        raise ContractError("need at least one mask")
    shape = masks[0].values.shape
    for m in masks[1:]:
        if m.values.shape != shape:
            raise ContractError(f"mask shape {m.values.shape} differs from {shape}")
    total = np.zeros(shape, dtype=np.int64)
    for m in masks:
        total += m.values
    # mean >= 128  <=>  sum >= 128 * count, kept in integers to avoid rounding
    return MaskImage(np.where(total >= FUSE_THRESHOLD * len(masks), 255, 0).astype(np.uint8))


def early_stop_check(history, patience: int = 100) -> tuple[bool, int]:
    losses = np.asarray(history, dtype=np.float64)
    if losses.size == 0:
        raise ContractError("history must not be empty")
    best = int(np.argmin(losses))
    return (losses.size - 1 - best) >= patience, best


def with_overrides(c: UNetConfig, **kw) -> UNetConfig:
    return replace(c, **{k: v for k, v in kw.items() if v is not None})
