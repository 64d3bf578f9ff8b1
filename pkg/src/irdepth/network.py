"""Inception-ResNet encoder, skip-connected decoder and checkpoint I/O.

Block topologies follow the Inception-ResNet-v2 family: multi-branch
convolutions (with factorised 3x3 / 1x7+7x1 / 1x3+3x1 kernels), channel
concatenation, a 1x1 projection back to the input width, a scaled
residual add and a ReLU. Canonical branch widths are multiplied by a
width factor so that the same code serves a full-width preset (used only
for shape and parameter-count checks) and a CPU-sized desk preset.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .tensor import (
    DimensionError,
    Tensor,
    concat_many,
    conv2d,
    leaky_relu,
    no_grad,
    pool2d,
    relu,
    sigmoid,
    upsample2x,
)

BLOCK_KINDS = ("stem", "ir_a", "ir_b", "ir_c", "red_a", "red_b")

# canonical (width_factor == 1) branch widths, in the order each layout consumes them
CANONICAL_WIDTHS: Dict[str, Tuple[int, ...]] = {
    "stem": (32, 320),
    "ir_a": (32, 32, 32, 32, 48, 64),
    "red_a": (384, 256, 256, 384),
    "ir_b": (192, 128, 160, 192),
    "red_b": (256, 384, 256, 288, 256, 288, 320),
    "ir_c": (192, 192, 224, 256),
}

DEFAULT_PARAM_BUDGET = 20_000_000
DOWNSAMPLING = 16
SKIP_TAPS = ("stem1", "ir_a", "ir_b", "red_b")
_TAP_SCALE = {"stem1": 2, "stem2": 4, "ir_a": 4, "red_a": 8, "ir_b": 8, "red_b": 16}

CHECKPOINT_MAGIC = b"DFKT1"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointError(OSError):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    widths: Tuple[int, ...]
    residual_scale: float = 0.2

    def __post_init__(self):
        if self.kind not in BLOCK_KINDS:
            raise ConfigError(f"unknown block kind {self.kind!r}")
        if len(self.widths) != len(CANONICAL_WIDTHS[self.kind]):
            raise ConfigError(
                f"{self.kind} takes {len(CANONICAL_WIDTHS[self.kind])} branch widths, got {len(self.widths)}"
            )
        if self.in_channels < 1 or any(w < 1 for w in self.widths):
            raise ConfigError(f"channel widths must be >= 1: in={self.in_channels}, widths={self.widths}")
        if not 0.0 < self.residual_scale <= 1.0:
            raise ConfigError(f"residual_scale must lie in (0, 1], got {self.residual_scale}")

    @property
    def out_channels(self) -> int:
        w = self.widths
        if self.kind == "stem":
            return w[1]
        if self.kind == "red_a":
            return self.in_channels + w[0] + w[3]
        if self.kind == "red_b":
            return self.in_channels + w[1] + w[3] + w[6]
        return self.in_channels


@dataclass(frozen=True)
class ModelConfig:
    repeats: Tuple[int, int, int] = (2, 1, 2)
    width_factor: float = 0.028
    input_hw: Tuple[int, int] = (64, 64)
    decoder_widths: Tuple[int, ...] = (32, 32, 16, 16)
    leaky_alpha: float = 0.2
    residual_scale: float = 0.2
    min_width: int = 8
    skip_taps: Tuple[str, ...] = SKIP_TAPS
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if len(self.repeats) != 3 or any(r < 1 for r in self.repeats):
            raise ConfigError(f"repeats must be three ints >= 1, got {self.repeats}")
        if self.width_factor <= 0:
            raise ConfigError(f"width_factor must be positive, got {self.width_factor}")
        h, w = self.input_hw
        if h % DOWNSAMPLING or w % DOWNSAMPLING or h < DOWNSAMPLING or w < DOWNSAMPLING:
            raise ConfigError(f"input size {self.input_hw} must be a positive multiple of {DOWNSAMPLING}")
        if len(self.decoder_widths) != len(self.skip_taps) or any(d < 1 for d in self.decoder_widths):
            raise ConfigError("decoder needs one positive width per skip tap")
        scales = [_TAP_SCALE.get(t) for t in self.skip_taps]
        if None in scales or scales != [2, 4, 8, 16]:
            raise ConfigError(f"skip taps must sit at /2, /4, /8, /16 (shallowest first), got {self.skip_taps}")
        if not 0.0 < self.leaky_alpha < 1.0:
            raise ConfigError(f"leaky_alpha must lie in (0, 1), got {self.leaky_alpha}")

    @classmethod
    def desk(cls, h: int = 64, w: int = 64, seed: int = 0) -> "ModelConfig":
        return cls(input_hw=(h, w), seed=seed)

    @classmethod
    def paper(cls, h: int = 64, w: int = 64, seed: int = 0) -> "ModelConfig":
        return cls(
            repeats=(10, 5, 10),
            width_factor=1.0,
            input_hw=(h, w),
            decoder_widths=(512, 256, 128, 64),
            min_width=1,
            seed=seed,
        )

    @classmethod
    def preset(cls, name: str, h: int = 64, w: int = 64, seed: int = 0) -> "ModelConfig":
        if name == "desk":
            return cls.desk(h, w, seed)
        if name == "paper":
            return cls.paper(h, w, seed)
        raise ConfigError(f"unknown preset {name!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    def scaled(self, width: int) -> int:
        return max(self.min_width, math.ceil(width * self.width_factor - 1e-9))

    def block_specs(self) -> Dict[str, BlockSpec]:
        """Specs of the stem, one block of each repeated kind, and both reductions."""
        specs = {}
        c = self.in_channels
        for kind in ("stem", "ir_a", "red_a", "ir_b", "red_b", "ir_c"):
            widths = tuple(self.scaled(x) for x in CANONICAL_WIDTHS[kind])
            specs[kind] = BlockSpec(kind, c, widths, self.residual_scale)
            c = specs[kind].out_channels
        return specs


# --------------------------------------------------------------------------
# layers


class Conv:
    """Convolution weights plus their geometry."""

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None, dtype=np.float32):
        kh, kw = kernel
        self.stride = stride
        self.padding = padding
        if rng is None:
            self.weight = Tensor(np.zeros((c_out, c_in, kh, kw), dtype=dtype), requires_grad=True)
        else:
            std = math.sqrt(2.0 / (c_in * kh * kw))
            self.weight = Tensor(rng.normal(0.0, std, (c_out, c_in, kh, kw)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def _layer_table(spec: BlockSpec) -> List[Tuple[str, int, int, Tuple[int, int], int, Tuple[int, int]]]:
    """(name, c_in, c_out, kernel, stride, padding) for every conv in a block."""
    c = spec.in_channels
    w = spec.widths
    if spec.kind == "stem":
        return [
            ("conv1", c, w[0], (3, 3), 2, (1, 1)),
            ("conv2", w[0], w[1], (3, 3), 2, (1, 1)),
        ]
    if spec.kind == "ir_a":
        return [
            ("b0", c, w[0], (1, 1), 1, (0, 0)),
            ("b1_1x1", c, w[1], (1, 1), 1, (0, 0)),
            ("b1_3x3", w[1], w[2], (3, 3), 1, (1, 1)),
            ("b2_1x1", c, w[3], (1, 1), 1, (0, 0)),
            ("b2_3x3a", w[3], w[4], (3, 3), 1, (1, 1)),
            ("b2_3x3b", w[4], w[5], (3, 3), 1, (1, 1)),
            ("project", w[0] + w[2] + w[5], c, (1, 1), 1, (0, 0)),
        ]
    if spec.kind in ("ir_b", "ir_c"):
        k = 7 if spec.kind == "ir_b" else 3
        return [
            ("b0", c, w[0], (1, 1), 1, (0, 0)),
            ("b1_1x1", c, w[1], (1, 1), 1, (0, 0)),
            (f"b1_1x{k}", w[1], w[2], (1, k), 1, (0, k // 2)),
            (f"b1_{k}x1", w[2], w[3], (k, 1), 1, (k // 2, 0)),
            ("project", w[0] + w[3], c, (1, 1), 1, (0, 0)),
        ]
    if spec.kind == "red_a":
        return [
            ("b1_3x3", c, w[0], (3, 3), 2, (1, 1)),
            ("b2_1x1", c, w[1], (1, 1), 1, (0, 0)),
            ("b2_3x3a", w[1], w[2], (3, 3), 1, (1, 1)),
            ("b2_3x3b", w[2], w[3], (3, 3), 2, (1, 1)),
        ]
    # red_b
    return [
        ("b1_1x1", c, w[0], (1, 1), 1, (0, 0)),
        ("b1_3x3", w[0], w[1], (3, 3), 2, (1, 1)),
        ("b2_1x1", c, w[2], (1, 1), 1, (0, 0)),
        ("b2_3x3", w[2], w[3], (3, 3), 2, (1, 1)),
        ("b3_1x1", c, w[4], (1, 1), 1, (0, 0)),
        ("b3_3x3a", w[4], w[5], (3, 3), 1, (1, 1)),
        ("b3_3x3b", w[5], w[6], (3, 3), 2, (1, 1)),
    ]


def block_parameter_count(spec: BlockSpec) -> int:
    return sum(co * ci * kh * kw + co for _, ci, co, (kh, kw), _, _ in _layer_table(spec))


class Block:
    def __init__(self, spec: BlockSpec, rng: Optional[np.random.Generator], dtype=np.float32):
        self.spec = spec
        self.convs: Dict[str, Conv] = {
            name: Conv(ci, co, k, s, p, rng, dtype) for name, ci, co, k, s, p in _layer_table(spec)
        }

    def parameters(self) -> Dict[str, Tensor]:
        return {f"{name}.{p}": t for name, conv in self.convs.items() for p, t in conv.parameters().items()}

    def _run(self, x: Tensor, *names: str) -> Tensor:
        for name in names:
            x = relu(self.convs[name](x))
        return x

    def __call__(self, x: Tensor):
        kind = self.spec.kind
        if x.shape[1] != self.spec.in_channels:
            raise DimensionError(f"{kind} block expects {self.spec.in_channels} channels, got input {x.shape}")
        if kind == "stem":
            s1 = self._run(x, "conv1")
            return s1, self._run(s1, "conv2")
        if kind == "red_a":
            return concat_many([pool2d(x, "max", 2, 2), self._run(x, "b1_3x3"), self._run(x, "b2_1x1", "b2_3x3a", "b2_3x3b")])
        if kind == "red_b":
            return concat_many(
                [
                    pool2d(x, "max", 2, 2),
                    self._run(x, "b1_1x1", "b1_3x3"),
                    self._run(x, "b2_1x1", "b2_3x3"),
                    self._run(x, "b3_1x1", "b3_3x3a", "b3_3x3b"),
                ]
            )
        if kind == "ir_a":
            branches = [
                self._run(x, "b0"),
                self._run(x, "b1_1x1", "b1_3x3"),
                self._run(x, "b2_1x1", "b2_3x3a", "b2_3x3b"),
            ]
        else:
            k = 7 if kind == "ir_b" else 3
            branches = [self._run(x, "b0"), self._run(x, "b1_1x1", f"b1_1x{k}", f"b1_{k}x1")]
        mixed = self.convs["project"](concat_many(branches))
        return relu(x + mixed * self.spec.residual_scale)


def build_block(spec: BlockSpec, rng_seed: Optional[int] = 0, max_params: int = DEFAULT_PARAM_BUDGET, dtype=np.float32) -> Block:
    """Instantiate a block; ``rng_seed=None`` gives all-zero weights."""
    count = block_parameter_count(spec)
    if count > max_params:
        raise ConfigError(f"{spec.kind} block needs {count} parameters, budget is {max_params}")
    rng = None if rng_seed is None else np.random.default_rng(rng_seed)
    return Block(spec, rng, dtype)


# --------------------------------------------------------------------------
# model


@dataclass
class EncoderOutput:
    bottleneck: Tensor
    skips: List[Tensor] = field(default_factory=list)


def _decoder_layout(config: ModelConfig, specs: Dict[str, BlockSpec]):
    tap_channels = {
        "stem1": specs["stem"].widths[0],
        "stem2": specs["stem"].out_channels,
        "ir_a": specs["ir_a"].out_channels,
        "red_a": specs["red_a"].out_channels,
        "ir_b": specs["ir_b"].out_channels,
        "red_b": specs["red_b"].out_channels,
    }
    layers = []
    c = specs["ir_c"].out_channels
    # deepest skip first: /16 is fused without upsampling, then /8, /4, /2
    for level, (tap, width) in enumerate(zip(reversed(config.skip_taps), config.decoder_widths)):
        c_in = c + tap_channels[tap]
        layers.append((level, tap, c_in, width))
        c = width
    return layers, c


def parameter_count(config: ModelConfig) -> int:
    specs = config.block_specs()
    n_a, n_b, n_c = config.repeats
    total = block_parameter_count(specs["stem"])
    total += n_a * block_parameter_count(specs["ir_a"]) + block_parameter_count(specs["red_a"])
    total += n_b * block_parameter_count(specs["ir_b"]) + block_parameter_count(specs["red_b"])
    total += n_c * block_parameter_count(specs["ir_c"])
    layers, c_last = _decoder_layout(config, specs)
    for _, _, c_in, width in layers:
        total += (c_in * 9 + 1) * width + (width * 9 + 1) * width
    total += c_last + 1
    return total


class DepthModel:
    """Encoder-decoder producing a sigmoid depth map at half the input resolution."""

    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        specs = config.block_specs()
        self.specs = specs
        root = np.random.SeedSequence(config.seed)
        seeds = iter(root.spawn(4 + sum(config.repeats) + 2 * len(config.decoder_widths) + 1))

        def rng():
            return np.random.default_rng(next(seeds))

        n_a, n_b, n_c = config.repeats
        self.stem = Block(specs["stem"], rng(), dtype)
        self.ir_a = [Block(specs["ir_a"], rng(), dtype) for _ in range(n_a)]
        self.red_a = Block(specs["red_a"], rng(), dtype)
        self.ir_b = [Block(specs["ir_b"], rng(), dtype) for _ in range(n_b)]
        self.red_b = Block(specs["red_b"], rng(), dtype)
        self.ir_c = [Block(specs["ir_c"], rng(), dtype) for _ in range(n_c)]
        layout, c_last = _decoder_layout(config, specs)
        self.decoder = [
            (Conv(c_in, width, (3, 3), 1, 1, rng(), dtype), Conv(width, width, (3, 3), 1, 1, rng(), dtype))
            for _, _, c_in, width in layout
        ]
        self.head = Conv(c_last, 1, (1, 1), 1, 0, rng(), dtype)

    # -- parameters ---------------------------------------------------------
    def named_blocks(self):
        yield "stem", self.stem
        for i, b in enumerate(self.ir_a):
            yield f"ir_a.{i}", b
        yield "red_a", self.red_a
        for i, b in enumerate(self.ir_b):
            yield f"ir_b.{i}", b
        yield "red_b", self.red_b
        for i, b in enumerate(self.ir_c):
            yield f"ir_c.{i}", b

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for name, block in self.named_blocks():
            params.update({f"{name}.{k}": v for k, v in block.parameters().items()})
        for i, (c1, c2) in enumerate(self.decoder):
            params.update({f"decoder.{i}.conv1.{k}": v for k, v in c1.parameters().items()})
            params.update({f"decoder.{i}.conv2.{k}": v for k, v in c2.parameters().items()})
        params.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return params

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise CheckpointError(f"state mismatch: missing {missing[:3]}, unexpected {extra[:3]}")
        for k, p in params.items():
            if state[k].shape != p.data.shape:
                raise CheckpointError(f"parameter {k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def astype(self, dtype) -> "DepthModel":
        """A copy of the model with parameters cast to ``dtype``."""
        clone = DepthModel(self.config, dtype=dtype)
        clone.load_state_dict({k: v.astype(dtype) for k, v in self.state_dict().items()})
        return clone

    def copy(self) -> "DepthModel":
        return self.astype(self.dtype)

    @property
    def dtype(self):
        return self.head.weight.data.dtype

    # -- forward ------------------------------------------------------------
    def _check_input(self, x: Tensor) -> None:
        h, w = self.config.input_hw
        if x.ndim != 4 or x.shape[1] != self.config.in_channels or x.shape[2:] != (h, w):
            raise DimensionError(
                f"model expects input (n, {self.config.in_channels}, {h}, {w}), got {x.shape}"
            )

    def encode(self, x: Tensor) -> EncoderOutput:
        self._check_input(x)
        taps: Dict[str, Tensor] = {}
        taps["stem1"], x = self.stem(x)
        taps["stem2"] = x
        for block in self.ir_a:
            x = block(x)
        taps["ir_a"] = x
        x = self.red_a(x)
        taps["red_a"] = x
        for block in self.ir_b:
            x = block(x)
        taps["ir_b"] = x
        x = self.red_b(x)
        taps["red_b"] = x
        for block in self.ir_c:
            x = block(x)
        return EncoderOutput(bottleneck=x, skips=[taps[t] for t in self.config.skip_taps])

    def decode(self, enc: EncoderOutput) -> Tensor:
        alpha = self.config.leaky_alpha
        x = leaky_relu(enc.bottleneck, alpha)
        for level, (skip, (c1, c2)) in enumerate(zip(reversed(enc.skips), self.decoder)):
            if level > 0:
                x = upsample2x(x, "bilinear")
            if x.shape[2:] != skip.shape[2:]:
                raise DimensionError(f"decoder level {level}: feature {x.shape} vs skip {skip.shape}")
            x = concat_many([x, skip])
            x = leaky_relu(c1(x), alpha)
            x = leaky_relu(c2(x), alpha)
        return sigmoid(self.head(x))

    def forward(self, x: Tensor) -> Tensor:
        return self.decode(self.encode(x))

    __call__ = forward

    def predict(self, rgb) -> Tensor:
        """Full-resolution depth: the half-size head output upsampled 2x."""
        x = rgb if isinstance(rgb, Tensor) else Tensor(np.asarray(rgb, dtype=self.dtype))
        if x.ndim == 3:
            x = Tensor(x.data[None])
        with no_grad():
            return upsample2x(self.forward(x), "bilinear")


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: DepthModel, path) -> None:
    params = model.parameters()
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "parameter_count": model.num_parameters(),
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for v in params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh.read(), path)[0]


def _read_header(blob: bytes, path) -> Tuple[dict, int]:
    n = len(CHECKPOINT_MAGIC)
    if blob[:n] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < n + 4:
        raise CheckpointError(f"{path}: truncated header")
    (size,) = struct.unpack("<I", blob[n : n + 4])
    start = n + 4
    if len(blob) < start + size:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[start : start + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    return header, start + size


def load_checkpoint(path) -> DepthModel:
    blob = Path(path).read_bytes()
    header, offset = _read_header(blob, path)
    try:
        sizes = [int(np.prod(t["shape"])) for t in header["tensors"]]
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: malformed tensor manifest") from exc
    expected = offset + 4 * sum(sizes)
    if len(blob) != expected:
        raise CheckpointError(f"{path}: payload is {len(blob) - offset} bytes, manifest needs {expected - offset}")
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: bad config: {exc}") from exc
    state = {}
    for t, size in zip(header["tensors"], sizes):
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(t["shape"])
        state[t["name"]] = arr.astype(np.float32)
        offset += 4 * size
    model = DepthModel(config)
    model.load_state_dict(state)
    return model
