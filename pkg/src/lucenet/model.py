"""Miniature densely connected CNN with a fixed four-layer classifier head.

The backbone is a standard DenseNet skeleton at desk scale: a 3x3 stem conv
plus 2x2 average pool, dense blocks whose layers each consume the channel
concatenation of the block input and every previous layer's output, 1x1
compression transitions with 2x2 average pooling between blocks, and a global
average pool feeding the head. The head is pinned to
dense(512)-relu-dense(256)-relu-dense(256)-relu-dropout(0.3)-dense(1) and can
only be changed through an explicit override flag, which is logged.

Checkpoints are a versioned little-endian binary format (magic "LUCENET1")
that round-trips byte-identically.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .rng import substream

log = logging.getLogger(__name__)

HEAD_DIMS = (512, 256, 256)
HEAD_DROPOUT = 0.3
CHECKPOINT_MAGIC = b"LUCENET1"
CHECKPOINT_FORMAT = 1
DEFAULT_INIT_STD = 0.05


class CheckpointError(Exception):
    """Base class for checkpoint read/write failures."""


class VersionMismatchError(CheckpointError):
    """Magic bytes or format version do not match this writer."""


class TruncatedPayloadError(CheckpointError):
    """The file ended before the declared payload."""


class ConfigMismatchError(CheckpointError):
    """Stored parameters do not fit the requested architecture."""


@dataclass(frozen=True)
class DenseNetConfig:
    input_size: int = 64
    stem_filters: int = 8
    growth_rate: int = 4
    block_layout: tuple[int, ...] = (2, 2, 2)
    compression: float = 0.5
    kernel_size: int = 3
    head_dims: tuple[int, ...] = HEAD_DIMS
    head_dropout: float = HEAD_DROPOUT
    head_override: bool = False

    def __post_init__(self):
        object.__setattr__(self, "block_layout", tuple(int(v) for v in self.block_layout))
        object.__setattr__(self, "head_dims", tuple(int(v) for v in self.head_dims))
        if not self.block_layout or any(l < 1 for l in self.block_layout):
            raise ValueError("block_layout: every block needs >= 1 layer")
        if self.growth_rate < 1:
            raise ValueError("growth_rate must be >= 1")
        if not 0.0 < self.compression <= 1.0:
            raise ValueError("compression must be in (0, 1]")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd and positive")
        pools = 2 ** len(self.block_layout)  # stem pool + one per transition
        if self.input_size < pools or self.input_size % pools:
            raise ValueError(
                f"input_size {self.input_size} must be a multiple of {pools} "
                f"for {len(self.block_layout)} pooling stages")
        if not self.head_override and (self.head_dims != HEAD_DIMS
                                       or self.head_dropout != HEAD_DROPOUT):
            raise ValueError(
                "the classifier head is fixed at dims (512, 256, 256) with "
                "dropout 0.3; pass head_override=True to deviate deliberately")
        if self.head_override:
            log.warning("classifier head override active: dims=%s dropout=%s",
                        self.head_dims, self.head_dropout)

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "stem_filters": self.stem_filters,
            "growth_rate": self.growth_rate,
            "block_layout": list(self.block_layout),
            "compression": self.compression,
            "kernel_size": self.kernel_size,
            "head_dims": list(self.head_dims),
            "head_dropout": self.head_dropout,
            "head_override": self.head_override,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNetConfig":
        return cls(
            input_size=d["input_size"],
            stem_filters=d["stem_filters"],
            growth_rate=d["growth_rate"],
            block_layout=tuple(d["block_layout"]),
            compression=d["compression"],
            kernel_size=d["kernel_size"],
            head_dims=tuple(d["head_dims"]),
            head_dropout=d["head_dropout"],
            head_override=d["head_override"],
        )


# the paper-echo configuration reproduces the 64-filter first and 32-filter
# last conv layers of the published activation panels at a tractable size
PAPER_ECHO = DenseNetConfig(input_size=32, stem_filters=64, growth_rate=32,
                            block_layout=(2, 2), compression=0.5)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str          # "conv" | "pool" | "global_pool" | "dense" | "relu" | "dropout"
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    padding: int = 0


def layer_plan(config: DenseNetConfig) -> list[LayerSpec]:
    """Execution-ordered recipe of the network, with channel bookkeeping."""
    k = config.kernel_size
    pad = k // 2
    plan = [LayerSpec("stem.conv", "conv", 1, config.stem_filters, k, pad),
            LayerSpec("stem.pool", "pool")]
    channels = config.stem_filters
    n_blocks = len(config.block_layout)
    for bi, layers in enumerate(config.block_layout, start=1):
        c0 = channels
        for li in range(1, layers + 1):
            in_ch = c0 + (li - 1) * config.growth_rate
            plan.append(LayerSpec(f"block{bi}.layer{li}.conv", "conv",
                                  in_ch, config.growth_rate, k, pad))
        channels = c0 + layers * config.growth_rate
        if bi < n_blocks:
            out_ch = int(np.floor(channels * config.compression))
            plan.append(LayerSpec(f"trans{bi}.conv", "conv", channels, out_ch, 1, 0))
            plan.append(LayerSpec(f"trans{bi}.pool", "pool"))
            channels = out_ch
    plan.append(LayerSpec("global_pool", "global_pool", channels, channels))
    widths = [channels, *config.head_dims, 1]
    names = [f"head.fc{i}" for i in range(1, len(config.head_dims) + 1)] + ["head.out"]
    for i, name in enumerate(names):
        plan.append(LayerSpec(name, "dense", widths[i], widths[i + 1]))
        if i < len(config.head_dims):
            plan.append(LayerSpec(name + ".relu", "relu"))
    # dropout sits between the last hidden activation and the output layer
    out_spec = plan.pop()
    plan.append(LayerSpec("head.dropout", "dropout"))
    plan.append(out_spec)
    return plan


def conv_layer_names(config: DenseNetConfig) -> list[str]:
    return [s.name for s in layer_plan(config) if s.kind == "conv"]


def first_conv_layer(config: DenseNetConfig) -> str:
    return conv_layer_names(config)[0]


def last_conv_layer(config: DenseNetConfig) -> str:
    return conv_layer_names(config)[-1]


@dataclass
class Model:
    config: DenseNetConfig
    params: dict[str, T.Tensor]
    frozen: set[str] = field(default_factory=set)
    provenance: dict = field(default_factory=dict)

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("head.")]

    def head_names(self) -> list[str]:
        return [n for n in self.params if n.startswith("head.")]

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())


def _param_shapes(config: DenseNetConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in layer_plan(config):
        if spec.kind == "conv":
            shapes[spec.name + ".w"] = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
            shapes[spec.name + ".b"] = (spec.out_ch,)
        elif spec.kind == "dense":
            shapes[spec.name + ".w"] = (spec.in_ch, spec.out_ch)
            shapes[spec.name + ".b"] = (spec.out_ch,)
    return shapes


def gaussian_init(rng: np.random.Generator, shape: tuple[int, ...],
                  std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(np.float32)


def _fan_in(shape: tuple[int, ...]) -> int:
    if len(shape) == 4:  # conv [F, C, kh, kw]
        return shape[1] * shape[2] * shape[3]
    return shape[0]      # dense [D, M]


def build(config: DenseNetConfig, seed: int,
          std: float | str = DEFAULT_INIT_STD) -> Model:
    """Fresh model with Gaussian(0, std) weights and zero biases.

    ``std="he"`` draws each weight tensor at sqrt(2 / fan_in) instead of a
    global std, which keeps activations from collapsing with depth; the
    pretext pretraining uses it, while the re-trained regime keeps the flat
    0.05 default.
    """
    rng = substream(seed, "init")
    params: dict[str, T.Tensor] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith(".w"):
            scale = float(np.sqrt(2.0 / _fan_in(shape))) if std == "he" else std
            data = gaussian_init(rng, shape, scale)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = T.Tensor(data, requires_grad=True)
    return Model(config, params, provenance={"seed": seed, "regime": "fresh",
                                             "epochs": 0})


def forward(model: Model, batch: T.Tensor, training: bool,
            rng: np.random.Generator | None = None,
            stop_at: str | None = None,
            capture: Callable[[str, T.Tensor], None] | None = None) -> T.Tensor:
    """Run the network on batch [N,1,H,W] and return logits [N,1].

    Inference (training=False) is a pure function of (parameters, input).
    Dropout draws from ``rng``, required only when training. ``stop_at``
    returns the named conv layer's pre-activation output instead of logits;
    ``capture`` is called with every conv pre-activation as it is computed.
    """
    cfg = model.config
    if batch.data.ndim != 4 or batch.data.shape[1] != 1:
        raise ValueError("forward: expected batch of shape [N,1,H,W]")
    if batch.data.shape[2] != cfg.input_size or batch.data.shape[3] != cfg.input_size:
        raise ValueError(
            f"forward: spatial size {batch.data.shape[2:]} does not match "
            f"configured input size {cfg.input_size}")
    if training and rng is None:
        raise ValueError("forward: training mode needs an rng for dropout")
    p = model.params

    def conv(name: str, x: T.Tensor, padding: int) -> T.Tensor:
        return T.conv2d(x, p[name + ".w"], p[name + ".b"], stride=1, padding=padding)

    # centre the [0,1] input: without this the DC component dominates every
    # conv response and training stalls on the base-rate plateau
    x = T.add_scalar(batch, -0.5)
    block: list[T.Tensor] = []
    for spec in layer_plan(cfg):
        if spec.kind == "conv":
            if spec.name.startswith("block"):
                cat = block[0] if len(block) == 1 else T.concat_channels(block)
                out = conv(spec.name, cat, spec.padding)
                if capture is not None:
                    capture(spec.name, out)
                if spec.name == stop_at:
                    return out
                block.append(T.relu(out))
                if spec.name.split(".")[1] == f"layer{_block_layers(cfg, spec.name)}":
                    x = block[0] if len(block) == 1 else T.concat_channels(block)
            else:  # stem or transition
                out = conv(spec.name, x, spec.padding)
                if capture is not None:
                    capture(spec.name, out)
                if spec.name == stop_at:
                    return out
                x = T.relu(out)
        elif spec.kind == "pool":
            x = T.avg_pool2d(x, 2)
            if spec.name == "stem.pool" or spec.name.startswith("trans"):
                block = [x]
        elif spec.kind == "global_pool":
            x = T.global_avg_pool(x)
        elif spec.kind == "dense":
            x = T.dense(x, p[spec.name + ".w"], p[spec.name + ".b"])
        elif spec.kind == "relu":
            x = T.relu(x)
        elif spec.kind == "dropout":
            x = T.dropout(x, cfg.head_dropout, training, rng)
    if stop_at is not None:
        raise ValueError(f"forward: no conv layer named {stop_at!r}")
    return x


def _block_layers(cfg: DenseNetConfig, conv_name: str) -> int:
    bi = int(conv_name.split(".")[0].removeprefix("block"))
    return cfg.block_layout[bi - 1]


def freeze_backbone(model: Model) -> Model:
    model.frozen = set(model.backbone_names())
    # frozen leaves drop requires_grad so the tape skips the whole backbone
    for name in model.frozen:
        model.params[name].requires_grad = False
    return model


def unfreeze_all(model: Model) -> Model:
    model.frozen = set()
    for p in model.params.values():
        p.requires_grad = True
    return model


def zero_grads(model: Model) -> None:
    for p in model.params.values():
        p.grad = None


def clone(model: Model) -> Model:
    params = {n: T.Tensor(p.data.copy(), requires_grad=True)
              for n, p in model.params.items()}
    return Model(model.config, params, set(model.frozen), dict(model.provenance))


def parameter_fingerprint(model: Model) -> str:
    """sha256 over parameter names and payload bytes (order-sensitive)."""
    h = hashlib.sha256()
    for name, p in model.params.items():
        h.update(name.encode("utf-8"))
        h.update(p.data.astype("<f4").tobytes())
    return h.hexdigest()


def describe(model: Model) -> str:
    """Plain-text architecture summary."""
    cfg = model.config
    lines = [f"input: {cfg.input_size}x{cfg.input_size} grayscale"]
    for spec in layer_plan(cfg):
        if spec.kind == "conv":
            n = model.params[spec.name + ".w"].data.size + spec.out_ch
            lines.append(f"{spec.name}: conv {spec.kernel}x{spec.kernel} "
                         f"{spec.in_ch}->{spec.out_ch} filters={spec.out_ch} params={n}")
        elif spec.kind == "pool":
            lines.append(f"{spec.name}: avg-pool 2x2")
        elif spec.kind == "global_pool":
            lines.append(f"global_pool: {spec.in_ch} features")
        elif spec.kind == "dense":
            n = model.params[spec.name + ".w"].data.size + spec.out_ch
            lines.append(f"{spec.name}: dense {spec.in_ch}->{spec.out_ch} params={n}")
        elif spec.kind == "dropout":
            lines.append(f"head.dropout: p={cfg.head_dropout}")
    convs = conv_layer_names(cfg)
    first = model.params[convs[0] + ".w"].data.shape[0]
    last = model.params[convs[-1] + ".w"].data.shape[0]
    lines.append(f"first conv layer: {convs[0]} ({first} filters)")
    lines.append(f"last conv layer: {convs[-1]} ({last} filters)")
    lines.append(f"total parameters: {model.parameter_count()}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(model: Model, path, scope: str = "full",
                    provenance: dict | None = None) -> None:
    """Write the model to the versioned binary format.

    ``scope`` is "full" or "backbone" (backbone-only checkpoints are what
    pretext pretraining emits). Round-trip save->load->save is byte-identical.
    """
    if scope not in ("full", "backbone"):
        raise ValueError(f"save_checkpoint: bad scope {scope!r}")
    names = list(model.params) if scope == "full" else model.backbone_names()
    header = _canonical_json({
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "provenance": provenance if provenance is not None else model.provenance,
        "scope": scope,
    })
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        raw = name.encode("utf-8")
        p = model.params[name]
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(p.data.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise TruncatedPayloadError(
            f"truncated payload: wanted {n} bytes, got {len(raw)}")
    return raw


def read_checkpoint(path) -> tuple[DenseNetConfig, dict[str, np.ndarray], str, dict]:
    """Parse a checkpoint file into (config, arrays, scope, provenance)."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise VersionMismatchError(f"bad magic {magic!r}: not a LUCENET1 checkpoint")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            header = json.loads(_read_exact(fh, hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise VersionMismatchError(
                f"format version {header.get('format')} != {CHECKPOINT_FORMAT}")
        config = DenseNetConfig.from_dict(header["config"])
        scope = header.get("scope", "full")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, nlen).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            payload = _read_exact(fh, 4 * int(np.prod(dims)))
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after final parameter record")
    return config, arrays, scope, header.get("provenance", {})


def build_from_checkpoint(path, config: DenseNetConfig | None = None,
                          head_seed: int = 0,
                          head_std: float = DEFAULT_INIT_STD) -> Model:
    """Rebuild a model from a checkpoint file.

    For backbone-scope checkpoints the head is freshly Gaussian-initialised
    from ``head_seed``. A ``config`` argument asserts compatibility with the
    stored architecture.
    """
    stored_config, arrays, scope, provenance = read_checkpoint(path)
    if config is not None and config != stored_config:
        raise ConfigMismatchError(
            f"config mismatch: checkpoint has {stored_config}, caller wants {config}")
    shapes = _param_shapes(stored_config)
    rng = substream(head_seed, "head-init")
    params: dict[str, T.Tensor] = {}
    for name, shape in shapes.items():
        if name in arrays:
            if arrays[name].shape != shape:
                raise ConfigMismatchError(
                    f"config mismatch: parameter {name} has shape "
                    f"{arrays[name].shape}, architecture wants {shape}")
            params[name] = T.Tensor(arrays[name], requires_grad=True)
        elif scope == "backbone" and name.startswith("head."):
            data = (gaussian_init(rng, shape, head_std) if name.endswith(".w")
                    else np.zeros(shape, dtype=np.float32))
            params[name] = T.Tensor(data, requires_grad=True)
        else:
            raise ConfigMismatchError(f"config mismatch: missing parameter {name}")
    extra = set(arrays) - set(shapes)
    if extra:
        raise ConfigMismatchError(f"config mismatch: unknown parameters {sorted(extra)}")
    return Model(stored_config, params, provenance=dict(provenance))


def load_checkpoint(path) -> Model:
    """Load a full-scope checkpoint as an inference-ready model."""
    return build_from_checkpoint(path)
