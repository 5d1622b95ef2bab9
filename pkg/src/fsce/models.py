"""Backbones, presets, checkpoint serialization, and cost counting.

A backbone is a stem (3x3 conv, BN, ReLU), a sequence of stages whose first
block downsamples by 2, global average pooling, and a linear classifier.
Stage blocks are either plain conv-BN-ReLU or basic residual blocks. The
enhancement block can be inserted after the stem ("pre") or after any stage
("s1", "s2", ...); its channel count always matches the feature map at that
point, so logits shapes never depend on the insertion choice.

Checkpoints are a flat named-tensor container (format tag FSM1):

    magic   4 bytes  b"FSM1"
    count   u32 LE   number of entries
    entry   u16 LE name length, utf-8 name, u8 rank, rank * u32 LE dims,
            then dim-product f32 LE values, C order

Entries hold every parameter and every batch-norm running buffer, plus two
reserved entries: "__config__" (the build config as JSON, one byte per f32
value) and "__seed__" (the build seed). A checkpoint therefore rebuilds the
exact module tree with no side channel. Data is stored as f32; models built
in another precision are cast on save.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import rng as rng_streams
from . import tensor as T
from .dsaf import BRANCH_CHOICES, DsafBlock
from .errors import ConfigError, FormatError, ShapeError
from .nn import BatchNorm2d, Conv2d, Linear, Module, note
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FSM1"


@dataclass(frozen=True)
class DsafSettings:
    kernel_sizes: tuple = (3, 5, 7, 9)
    cbam_reduction: int = 8
    branches: str = "both"
    legacy_cbam: bool = False
    wt_kernel: int = 3


@dataclass(frozen=True)
class ModelConfig:
    block: str                      # "plain" | "residual"
    stages: tuple                   # ((blocks, channels), ...)
    num_classes: int = 4
    in_channels: int = 1
    insertion: str = "none"         # "none" | "pre" | "s<k>"
    dsaf: DsafSettings = field(default_factory=DsafSettings)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["dsaf"]["kernel_sizes"] = list(self.dsaf.kernel_sizes)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        try:
            dsaf = DsafSettings(
                kernel_sizes=tuple(d["dsaf"]["kernel_sizes"]),
                cbam_reduction=int(d["dsaf"]["cbam_reduction"]),
                branches=str(d["dsaf"]["branches"]),
                legacy_cbam=bool(d["dsaf"]["legacy_cbam"]),
                wt_kernel=int(d["dsaf"]["wt_kernel"]),
            )
            return ModelConfig(
                block=str(d["block"]),
                stages=tuple((int(b), int(c)) for b, c in d["stages"]),
                num_classes=int(d["num_classes"]),
                in_channels=int(d["in_channels"]),
                insertion=str(d["insertion"]),
                dsaf=dsaf,
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed model config: {exc}") from exc

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


PRESETS: dict[str, ModelConfig] = {
    "student-M": ModelConfig("plain", ((1, 8), (1, 16), (1, 32), (1, 64))),
    "student-L": ModelConfig("residual", ((2, 16), (2, 32), (2, 64), (2, 128))),
    "teacher": ModelConfig("residual", ((3, 32), (4, 64), (6, 128), (3, 256))),
    "teacher-S": ModelConfig("residual", ((1, 12), (1, 24), (2, 48))),
}


def get_preset(name: str) -> ModelConfig:
    for key, cfg in PRESETS.items():
        if key.lower() == name.lower():
            return cfg
    raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")


def _validate(config: ModelConfig):
    if config.block not in ("plain", "residual"):
        raise ConfigError(f"block must be plain|residual, got {config.block!r}")
    if not config.stages:
        raise ConfigError("at least one stage is required")
    for blocks, channels in config.stages:
        if blocks < 1 or channels < 1:
            raise ConfigError(f"bad stage spec {(blocks, channels)}")
    if config.num_classes < 2:
        raise ConfigError(f"need >= 2 classes, got {config.num_classes}")
    if config.in_channels < 1:
        raise ConfigError(f"bad in_channels {config.in_channels}")
    ins = config.insertion
    if ins not in ("none", "pre") and not (
            ins.startswith("s") and ins[1:].isdigit()
            and 1 <= int(ins[1:]) <= len(config.stages)):
        raise ConfigError(
            f"insertion must be none, pre, or s1..s{len(config.stages)}, got {ins!r}")
    if config.dsaf.branches not in BRANCH_CHOICES:
        raise ConfigError(f"dsaf branches must be one of {BRANCH_CHOICES}")


def insertion_channels(config: ModelConfig) -> int:
    if config.insertion == "pre":
        return config.stages[0][1]
    return config.stages[int(config.insertion[1:]) - 1][1]


class ConvBnRelu(Module):
    def __init__(self, cin, cout, k, *, stride=1, padding=0, rng, dtype):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride=stride, padding=padding,
                           bias=False, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))

    def flops(self, in_shape, trace=None):
        f1, shape = self.conv.flops(in_shape, trace)
        f2, shape = self.bn.flops(shape, trace)
        f3 = note(trace, "act", int(np.prod(shape)), elems=int(np.prod(shape)),
                  op="relu")
        return f1 + f2 + f3, shape


class ResidualBlock(Module):
    def __init__(self, cin, cout, *, stride=1, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False,
                            rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, padding=1, bias=False, rng=rng,
                            dtype=dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride=stride, bias=False,
                               rng=rng, dtype=dtype)
            self.proj_bn = BatchNorm2d(cout, dtype=dtype)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x):
        h = T.relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(T.add(h, skip))

    def flops(self, in_shape, trace=None):
        total, shape = self.conv1.flops(in_shape, trace)
        f, shape = self.bn1.flops(shape, trace)
        total += f
        n = int(np.prod(shape))
        total += note(trace, "act", n, elems=n, op="relu")
        f, shape = self.conv2.flops(shape, trace)
        total += f
        f, shape = self.bn2.flops(shape, trace)
        total += f
        if self.proj is not None:
            f, pshape = self.proj.flops(in_shape, trace)
            total += f
            f, pshape = self.proj_bn.flops(pshape, trace)
            total += f
        total += note(trace, "add", n, elems=n)
        total += note(trace, "act", n, elems=n, op="relu")
        return total, shape


class Backbone(Module):
    def __init__(self, config: ModelConfig, *, rng, dtype=np.float32):
        super().__init__()
        _validate(config)
        self.config = config
        c0 = config.stages[0][1]
        self.stem = ConvBnRelu(config.in_channels, c0, 3, padding=1,
                               rng=rng, dtype=dtype)
        self.stage_blocks = []
        cin = c0
        for blocks, cout in config.stages:
            stage = []
            for b in range(blocks):
                stride = 2 if b == 0 else 1
                if config.block == "residual":
                    stage.append(ResidualBlock(cin, cout, stride=stride,
                                               rng=rng, dtype=dtype))
                else:
                    stage.append(ConvBnRelu(cin, cout, 3, stride=stride,
                                            padding=1, rng=rng, dtype=dtype))
                cin = cout
            self.stage_blocks.append(stage)
        if config.insertion != "none":
            self.dsaf = DsafBlock(insertion_channels(config),
                                  kernel_sizes=config.dsaf.kernel_sizes,
                                  cbam_reduction=config.dsaf.cbam_reduction,
                                  branches=config.dsaf.branches,
                                  legacy_cbam=config.dsaf.legacy_cbam,
                                  wt_kernel=config.dsaf.wt_kernel,
                                  rng=rng, dtype=dtype)
        else:
            self.dsaf = None
        self.head = Linear(cin, config.num_classes, rng=rng, dtype=dtype)
        self.feature_dim = cin

    # stage_blocks is a list of lists; flatten for Module traversal
    def _children(self):
        yield "stem", self.stem
        for si, stage in enumerate(self.stage_blocks):
            for bi, block in enumerate(stage):
                yield f"stage{si + 1}.{bi}", block
        if self.dsaf is not None:
            yield "dsaf", self.dsaf
        yield "head", self.head

    def _walk(self, x: Tensor, tap: str | None):
        tapped = None
        h = self.stem(x)
        if self.config.insertion == "pre":
            h = self.dsaf(h)
        if tap == "pre":
            tapped = h
        for si, stage in enumerate(self.stage_blocks, start=1):
            for block in stage:
                h = block(h)
            if self.config.insertion == f"s{si}":
                h = self.dsaf(h)
            if tap == f"s{si}":
                tapped = h
        return h, tapped

    def features(self, x: Tensor) -> Tensor:
        h, _ = self._walk(x, None)
        n, c = h.shape[0], h.shape[1]
        return T.reshape(T.tmean(h, (2, 3), keepdims=True), (n, c))

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))

    def forward_with_tap(self, x: Tensor, tap: str):
        """Logits plus the activation at a named point (after the enhancement
        block when it sits there)."""
        valid = ["pre"] + [f"s{i + 1}" for i in range(len(self.stage_blocks))]
        if tap not in valid:
            raise ConfigError(f"tap must be one of {valid}, got {tap!r}")
        h, tapped = self._walk(x, tap)
        n, c = h.shape[0], h.shape[1]
        feats = T.reshape(T.tmean(h, (2, 3), keepdims=True), (n, c))
        return self.head(feats), tapped

    def flops(self, in_shape, trace=None):
        c, h, w = in_shape
        if c != self.config.in_channels:
            raise ShapeError(f"model expects {self.config.in_channels} input "
                             f"channels, got {c}")
        total, shape = self.stem.flops(in_shape, trace)
        if self.config.insertion == "pre":
            f, shape = self.dsaf.flops(shape, trace)
            total += f
        for si, stage in enumerate(self.stage_blocks, start=1):
            for block in stage:
                f, shape = block.flops(shape, trace)
                total += f
            if self.config.insertion == f"s{si}":
                f, shape = self.dsaf.flops(shape, trace)
                total += f
        n = int(np.prod(shape))
        total += note(trace, "pool", n, elems=n, op="gap")
        f, _ = self.head.flops((shape[0],), trace)
        total += f
        return total, (self.config.num_classes,)


def build_model(config: ModelConfig, seed: int, dtype=np.float32,
                rng=None) -> Backbone:
    """Deterministic build: same config and seed give bitwise-equal initial
    parameters."""
    if rng is None:
        rng = rng_streams.stream(seed, rng_streams.INIT_GENERIC)
    return Backbone(config, rng=rng, dtype=dtype)


def count_params(model: Module) -> int:
    return int(sum(p.data.size for p in model.parameters()))


def count_flops(model: Module, in_shape, trace=None) -> int:
    """Analytic forward cost for one sample of in_shape (C, H, W).
    Convention: 1 MAC = 2 FLOPs; BN 2/element; activation 1/element;
    pool/add/scale 1 per input element involved."""
    return model.flops(tuple(in_shape), trace)[0]


# ------------------------------------------------------------- checkpointing

def _entries(model: Backbone):
    yield from model.named_parameters()
    yield from model.named_buffers()


def save_checkpoint(path, model: Backbone, seed: int):
    cfg = model.config.canonical_json().encode("utf-8")
    items = [("__config__", np.frombuffer(cfg, dtype=np.uint8).astype(np.float32)),
             ("__seed__", np.array([float(seed)], dtype=np.float32))]
    for name, value in _entries(model):
        data = value.data if isinstance(value, Tensor) else value
        items.append((name, np.ascontiguousarray(data, dtype=np.float32)))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(items)))
        for name, arr in items:
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated checkpoint while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[Backbone, ModelConfig, int]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CHECKPOINT_MAGIC:
            raise FormatError("not a model checkpoint (bad magic)")
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "count"))
        tensors: dict[str, np.ndarray] = {}
        order: list[str] = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            size = int(np.prod(dims)) if rank else 1
            raw = _read_exact(fh, 4 * size, f"data of {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
            order.append(name)
        if fh.read(1):
            raise FormatError("trailing bytes after the last tensor")
    if "__config__" not in tensors or "__seed__" not in tensors:
        raise FormatError("checkpoint misses the reserved config/seed entries")
    cfg_json = tensors.pop("__config__").astype(np.uint8).tobytes().decode("utf-8")
    try:
        config = ModelConfig.from_dict(json.loads(cfg_json))
    except json.JSONDecodeError as exc:
        raise FormatError(f"embedded config is not valid JSON: {exc}") from exc
    seed = int(tensors.pop("__seed__")[0])
    model = build_model(config, seed)
    expected = dict(_entries(model))
    missing = sorted(set(expected) - set(tensors))
    extra = sorted(set(tensors) - set(expected))
    if missing or extra:
        raise FormatError(f"checkpoint/model tensor mismatch: missing {missing}, "
                          f"unexpected {extra}")
    for name, arr in tensors.items():
        target = expected[name]
        dest = target.data if isinstance(target, Tensor) else target
        if dest.shape != arr.shape:
            raise FormatError(f"tensor {name} has shape {arr.shape}, "
                              f"model wants {dest.shape}")
        dest[...] = arr
    return model, config, seed
