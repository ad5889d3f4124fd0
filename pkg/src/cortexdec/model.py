"""Skip-connected 1-D convolutional encoder plus fully connected classifier.

Each encoding block is conv -> batchnorm -> ELU -> dropout -> maxpool; the
additive shortcut routes the block input through the same maxpool so the
dimensions match, and is active for every block whose input and output
channel widths agree (block 1 only when input_channels equals
feature_channels). The head is three linear layers (ELU + dropout after
the first two) ending in a softmax over the word classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataFormatError, DimensionError
from .tensor import BatchNormState, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    input_channels: int = 10
    input_samples: int = 1500
    n_blocks: int = 5
    feature_channels: int = 64
    kernel_size: int = 11
    pool_kernel: int = 2
    pool_stride: int = 2
    dropout_p: float = 0.5
    skip_enabled: bool = True
    skip_blocks: tuple[int, ...] | None = None  # None = every block from 2 on
    n_classes: int = 13
    head_hidden: int = 128
    softmax_head: bool = True  # False: raw affine outputs, for loss ablations

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.feature_channels < 1:
            raise ConfigError(f"feature_channels must be >= 1, got {self.feature_channels}")
        if self.input_channels < 1 or self.input_samples < 1:
            raise ConfigError("input_channels and input_samples must be >= 1")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be odd (same-padding), got {self.kernel_size}")
        if self.pool_kernel < 1 or self.pool_stride < 1:
            raise ConfigError("pool_kernel and pool_stride must be >= 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.head_hidden < 1:
            raise ConfigError(f"head_hidden must be >= 1, got {self.head_hidden}")
        if self.temporal_lengths()[-1] < 1:
            raise ConfigError(
                f"{self.input_samples} samples collapse below 1 after {self.n_blocks} pooling stages")
        if self.skip_blocks is not None:
            object.__setattr__(self, "skip_blocks", tuple(sorted(set(self.skip_blocks))))
            for b in self.skip_blocks:
                if not 1 <= b <= self.n_blocks:
                    raise ConfigError(f"skip_blocks entry {b} outside 1..{self.n_blocks}")
            if 1 in self.skip_blocks and self.input_channels != self.feature_channels:
                raise ConfigError(
                    "block 1 can only carry a skip when input_channels == feature_channels "
                    f"(got {self.input_channels} vs {self.feature_channels})")

    def temporal_lengths(self) -> list[int]:
        """Time-axis length after each block's pooling stage."""
        lengths = []
        t = self.input_samples
        for _ in range(self.n_blocks):
            t = (t - self.pool_kernel) // self.pool_stride + 1
            lengths.append(t)
        return lengths

    @property
    def latent_features(self) -> int:
        return self.feature_channels * self.temporal_lengths()[-1]

    def active_skips(self) -> frozenset[int]:
        if not self.skip_enabled:
            return frozenset()
        if self.skip_blocks is not None:
            return frozenset(self.skip_blocks)
        return frozenset(range(2, self.n_blocks + 1))


@dataclass
class ConvBlock:
    weight: Tensor
    bias: Tensor
    bn: BatchNormState


class SkipCnnModel:
    """Parameters and topology of the encoder plus classifier head."""

    def __init__(self, config: EncoderConfig, blocks: list[ConvBlock],
                 head: list[tuple[Tensor, Tensor]]):
        self.config = config
        self.blocks = blocks
        self.head = head
        self.training = True

    def train(self) -> "SkipCnnModel":
        self.training = True
        for blk in self.blocks:
            blk.bn.training = True
        return self

    def eval(self) -> "SkipCnnModel":
        self.training = False
        for blk in self.blocks:
            blk.bn.training = False
        return self

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            out.append((f"block{i}.conv.weight", blk.weight))
            out.append((f"block{i}.conv.bias", blk.bias))
            out.append((f"block{i}.bn.gamma", blk.bn.gamma))
            out.append((f"block{i}.bn.beta", blk.bn.beta))
        for j, (w, b) in enumerate(self.head, start=1):
            out.append((f"head{j}.weight", w))
            out.append((f"head{j}.bias", b))
        return out

    def named_buffers(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            out.append((f"block{i}.bn.running_mean", blk.bn.running_mean))
            out.append((f"block{i}.bn.running_var", blk.bn.running_var))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(n, t.data) for n, t in self.named_parameters()] + self.named_buffers()

    def encode(self, x, rng: np.random.Generator | None = None) -> Tensor:
        """Flattened encoder output (batch, feature_channels * final length)."""
        cfg = self.config
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if h.data.ndim != 3 or h.data.shape[1:] != (cfg.input_channels, cfg.input_samples):
            raise DimensionError(
                f"expected (batch, {cfg.input_channels}, {cfg.input_samples}), got {h.data.shape}")
        skips = cfg.active_skips()
        pad = cfg.kernel_size // 2
        for k, blk in enumerate(self.blocks, start=1):
            y = T.conv1d(h, blk.weight, blk.bias, stride=1, padding=pad)
            y = T.batchnorm1d(y, blk.bn)
            y = T.elu(y)
            y = T.dropout(y, cfg.dropout_p, self.training, rng)
            y = T.maxpool1d(y, cfg.pool_kernel, cfg.pool_stride)
            if k in skips and h.data.shape[1] == y.data.shape[1]:
                y = y + T.maxpool1d(h, cfg.pool_kernel, cfg.pool_stride)
            h = y
        return T.flatten(h)

    def head_forward(self, latent: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        h = latent
        for j, (w, b) in enumerate(self.head, start=1):
            h = T.linear(h, w, b)
            if j < len(self.head):
                h = T.elu(h)
                h = T.dropout(h, cfg.dropout_p, self.training, rng)
        return T.softmax(h) if cfg.softmax_head else h

    def forward(self, x, rng: np.random.Generator | None = None) -> Tensor:
        """Class probabilities (batch, n_classes); rows sum to 1."""
        return self.head_forward(self.encode(x, rng), rng)

    def __call__(self, x, rng: np.random.Generator | None = None) -> Tensor:
        return self.forward(x, rng)


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def build_model(config: EncoderConfig, seed: int) -> SkipCnnModel:
    """Deterministically initialized model; identical seeds, identical bits.

    Weights are uniform in +-sqrt(1/fan_in) drawn block 1..n then head 1..3;
    biases start at zero.
    """
    rng = np.random.default_rng(seed)
    blocks = []
    in_ch = config.input_channels
    for _ in range(config.n_blocks):
        shape = (config.feature_channels, in_ch, config.kernel_size)
        blocks.append(ConvBlock(
            weight=Tensor(_uniform_init(rng, shape, in_ch * config.kernel_size), requires_grad=True),
            bias=Tensor(np.zeros(config.feature_channels, dtype=np.float32), requires_grad=True),
            bn=BatchNormState.create(config.feature_channels),
        ))
        in_ch = config.feature_channels
    dims = [config.latent_features, config.head_hidden, config.head_hidden, config.n_classes]
    head = []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        head.append((
            Tensor(_uniform_init(rng, (d_out, d_in), d_in), requires_grad=True),
            Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True),
        ))
    return SkipCnnModel(config, blocks, head)


def count_parameters(model: SkipCnnModel) -> int:
    """Learnable element count; running statistics excluded."""
    return sum(t.data.size for t in model.parameters())


# ---------------------------------------------------------------------------
# self-describing checkpoints


_CONFIG_FIELDS = (
    "input_channels", "input_samples", "n_blocks", "feature_channels", "kernel_size",
    "pool_kernel", "pool_stride", "dropout_p", "skip_enabled", "skip_blocks",
    "n_classes", "head_hidden", "softmax_head",
)


def _config_to_text(config: EncoderConfig) -> str:
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if name == "skip_blocks":
            if value is None:
                continue
            value = ",".join(str(v) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"


def _config_from_text(text: str) -> EncoderConfig:
    kwargs: dict = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_FIELDS:
            raise DataFormatError(f"checkpoint config has unknown key {key!r}")
        if key == "skip_blocks":
            kwargs[key] = tuple(int(v) for v in value.split(",") if v)
        elif key == "dropout_p":
            kwargs[key] = float(value)
        elif key in ("skip_enabled", "softmax_head"):
            kwargs[key] = value == "True"
        else:
            kwargs[key] = int(value)
    return EncoderConfig(**kwargs)


def save_model(model: SkipCnnModel, path) -> None:
    """Write parameters, running stats and the config record to one file."""
    T.write_checkpoint(path, model.state_arrays(), _config_to_text(model.config))


def load_model(path) -> SkipCnnModel:
    """Rebuild a model from a checkpoint written by save_model."""
    params, config_text = T.read_checkpoint(path)
    if config_text is None:
        raise DataFormatError(f"{path}: checkpoint lacks the trailing config record")
    model = build_model(_config_from_text(config_text), seed=0)
    expected = dict(model.state_arrays())
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise DataFormatError(f"{path}: checkpoint entries mismatch (missing {missing}, extra {extra})")
    for name, tensor in model.named_parameters():
        arr = params[name]
        if arr.shape != tensor.data.shape:
            raise DataFormatError(
                f"{path}: {name} has shape {arr.shape}, expected {tensor.data.shape}")
        tensor.data = arr.astype(np.float32)
    for name, buf in model.named_buffers():
        buf[...] = params[name]
    return model.eval()
