"""Block-wise conv feature extractor with auxiliary branches and cosine classifiers.

Branch 0 is the main branch.  Auxiliary branch ``j`` (1-based) splits off
after block ``branch_points[j-1]`` (1-based block count) and owns freshly
initialized copies of every later block plus its own classifier.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import FormatError, InvalidArgumentError, InvalidConfigError
from .tensor import Parameter, RunningStats, Tensor


@dataclass
class BackboneConfig:
    blocks: Tuple[Tuple[int, int], ...] = ((16, 1), (32, 1), (64, 1), (128, 1))
    input_shape: Tuple[int, int, int] = (3, 32, 32)
    branch_points: Tuple[int, ...] = (2, 3)
    num_classes: int = 20
    leaky_slope: float = 0.1
    tau: float = 20.0
    residual: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    decay_classifier: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.blocks = tuple((int(c), int(k)) for c, k in self.blocks)
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.branch_points = tuple(int(b) for b in self.branch_points)

    @property
    def num_blocks(self) -> int:
        return len(self.blocks)

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1][0]

    @property
    def num_classifiers(self) -> int:
        return 1 + len(self.branch_points)

    def validate(self):
        nb = self.num_blocks
        if nb < 1 or any(c < 1 or k < 1 for c, k in self.blocks):
            raise InvalidConfigError("blocks must be a non-empty list of (channels>=1, convs>=1)")
        if list(self.branch_points) != sorted(set(self.branch_points)):
            raise InvalidConfigError("branch_points must be strictly increasing")
        if any(not 0 < b < nb for b in self.branch_points):
            raise InvalidConfigError(f"branch_points must lie strictly inside (0, {nb})")
        _, h, w = self.input_shape
        if h % (2 ** nb) or w % (2 ** nb):
            raise InvalidConfigError(f"input {h}x{w} not divisible by 2^{nb}")
        if self.num_classes < 1:
            raise InvalidConfigError("num_classes must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise InvalidConfigError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [list(b) for b in self.blocks]
        d["input_shape"] = list(self.input_shape)
        d["branch_points"] = list(self.branch_points)
        return d


def branch_points_for(num_classifiers: int, num_blocks: int) -> Tuple[int, ...]:
    """Deepest ``num_classifiers - 1`` split points, e.g. 3 classifiers on 4 blocks -> (2, 3)."""
    if not 1 <= num_classifiers <= num_blocks:
        raise InvalidConfigError(f"number of classifiers must lie in [1, {num_blocks}]")
    return tuple(range(num_blocks - num_classifiers + 1, num_blocks))


def _uniform_init(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Block:
    """``convs`` x (3x3 conv -> batch norm -> leaky ReLU), then 2x2 max pooling."""

    def __init__(self, name: str, in_ch: int, out_ch: int, convs: int, rng, dtype, residual: bool):
        self.name = name
        self.convs: List[Parameter] = []
        self.bn_scale: List[Parameter] = []
        self.bn_shift: List[Parameter] = []
        self.stats: List[RunningStats] = []
        ch = in_ch
        for i in range(convs):
            self.convs.append(Parameter(_uniform_init(rng, (out_ch, ch, 3, 3), ch * 9, dtype),
                                        f"{name}.conv{i}.weight"))
            self._add_bn(f"{name}.bn{i}", out_ch, dtype)
            ch = out_ch
        self.shortcut: Optional[Parameter] = None
        if residual:
            self.shortcut = Parameter(_uniform_init(rng, (out_ch, in_ch, 1, 1), in_ch, dtype),
                                      f"{name}.shortcut.weight")
            self._add_bn(f"{name}.shortcut_bn", out_ch, dtype)

    def _add_bn(self, prefix, ch, dtype):
        self.bn_scale.append(Parameter(np.ones(ch, dtype=dtype), f"{prefix}.scale", True))
        self.bn_shift.append(Parameter(np.zeros(ch, dtype=dtype), f"{prefix}.shift", True))
        self.stats.append(RunningStats(ch, np.float64))

    def parameters(self) -> List[Parameter]:
        params = []
        for i, w in enumerate(self.convs):
            params += [w, self.bn_scale[i], self.bn_shift[i]]
        if self.shortcut is not None:
            params += [self.shortcut, self.bn_scale[-1], self.bn_shift[-1]]
        return params

    def buffers(self) -> Dict[str, RunningStats]:
        names = [f"{self.name}.bn{i}" for i in range(len(self.convs))]
        if self.shortcut is not None:
            names.append(f"{self.name}.shortcut_bn")
        return dict(zip(names, self.stats))

    def forward(self, x: Tensor, training: bool, cfg: BackboneConfig) -> Tensor:
        h = x
        last = len(self.convs) - 1
        for i, w in enumerate(self.convs):
            h = T.conv2d(h, w, stride=1, padding=1)
            h = T.batch_norm(h, self.bn_scale[i], self.bn_shift[i], self.stats[i], training,
                             cfg.bn_momentum, cfg.bn_eps)
            if i == last and self.shortcut is not None:
                s = T.conv2d(x, self.shortcut)
                s = T.batch_norm(s, self.bn_scale[-1], self.bn_shift[-1], self.stats[-1], training,
                                 cfg.bn_momentum, cfg.bn_eps)
                h = T.add(h, s)
            h = T.leaky_relu(h, cfg.leaky_slope)
        return T.max_pool2d(h)

    def clone(self, name: Optional[str] = None) -> "Block":
        """Independent copy with new Parameter objects holding equal values."""
        twin = copy.copy(self)
        twin.name = name or self.name
        rename = lambda p: Parameter(p.data, p.name.replace(self.name, twin.name, 1),  # noqa: E731
                                     p.weight_decay_exempt)
        twin.convs = [rename(p) for p in self.convs]
        twin.bn_scale = [rename(p) for p in self.bn_scale]
        twin.bn_shift = [rename(p) for p in self.bn_shift]
        twin.stats = [s.copy() for s in self.stats]
        twin.shortcut = rename(self.shortcut) if self.shortcut is not None else None
        return twin


class BranchedNetwork:
    """Shared trunk, per-branch tail blocks and per-branch base-class classifiers."""

    def __init__(self, cfg: BackboneConfig, trunk: List[Block], tails: List[List[Block]],
                 classifiers: List[Parameter]):
        self.cfg = cfg
        self.trunk = trunk
        self.tails = tails
        self.classifiers = classifiers

    @property
    def num_classifiers(self) -> int:
        return 1 + len(self.tails)

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def named_parameters(self) -> List[Tuple[str, Parameter]]:
        params = []
        for block in self.trunk:
            params += block.parameters()
        for tail in self.tails:
            for block in tail:
                params += block.parameters()
        params += self.classifiers
        return [(p.name, p) for p in params]

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def branch_parameters(self, branch: int) -> List[Parameter]:
        """Parameters that branch ``branch`` owns exclusively (tail + classifier)."""
        owned = [] if branch == 0 else [p for b in self.tails[branch - 1] for p in b.parameters()]
        return owned + [self.classifiers[branch]]

    def buffers(self) -> Dict[str, RunningStats]:
        out = {}
        for block in self.trunk:
            out.update(block.buffers())
        for tail in self.tails:
            for block in tail:
                out.update(block.buffers())
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def _as_input(self, images) -> Tensor:
        data = images.data if isinstance(images, Tensor) else np.asarray(images)
        if data.ndim != 4 or tuple(data.shape[1:]) != self.cfg.input_shape:
            raise InvalidArgumentError(
                f"input shape {tuple(data.shape)} does not match config {self.cfg.input_shape}")
        if isinstance(images, Tensor) and images.dtype == self.dtype:
            return images
        return Tensor(data.astype(self.dtype, copy=False))

    def forward_all(self, images, training: bool) -> List[Tensor]:
        """Pooled features ``[N, D]`` for every branch, sharing the trunk computation."""
        x = self._as_input(images)
        taps = {}
        h = x
        for depth, block in enumerate(self.trunk, start=1):
            h = block.forward(h, training, self.cfg)
            taps[depth] = h
        feats = [T.global_average_pool(h)]
        for point, tail in zip(self.cfg.branch_points, self.tails):
            b = taps[point]
            for block in tail:
                b = block.forward(b, training, self.cfg)
            feats.append(T.global_average_pool(b))
        return feats

    def forward_features(self, images, branch: int = 0, training: bool = False) -> Tensor:
        if not 0 <= branch < self.num_classifiers:
            raise InvalidArgumentError(f"branch {branch} out of range [0, {self.num_classifiers})")
        x = self._as_input(images)
        point = self.cfg.num_blocks if branch == 0 else self.cfg.branch_points[branch - 1]
        h = x
        for block in self.trunk[:point]:
            h = block.forward(h, training, self.cfg)
        if branch:
            for block in self.tails[branch - 1]:
                h = block.forward(h, training, self.cfg)
        return T.global_average_pool(h)

    def features_numpy(self, images: np.ndarray, branch: int = 0, batch_size: int = 256) -> np.ndarray:
        """Eval-mode features in chunks, as a plain array."""
        chunks = [self.forward_features(images[i:i + batch_size], branch, training=False).data
                  for i in range(0, len(images), batch_size)]
        if not chunks:
            return np.zeros((0, self.cfg.feature_dim), dtype=self.dtype)
        return np.concatenate(chunks)

    def logits(self, features: Tensor, branch: int = 0) -> Tensor:
        return T.cosine_logits(features, self.classifiers[branch], self.cfg.tau)


def build_network(cfg: BackboneConfig, rng: np.random.Generator) -> BranchedNetwork:
    """Fresh network; every block and classifier draws its own weights from ``rng``."""
    cfg.validate()
    dtype = np.dtype(cfg.dtype)
    in_ch = cfg.input_shape[0]
    chans = [in_ch] + [c for c, _ in cfg.blocks]
    trunk = [Block(f"trunk.block{i + 1}", chans[i], chans[i + 1], cfg.blocks[i][1], rng, dtype,
                   cfg.residual) for i in range(cfg.num_blocks)]
    tails = []
    for j, point in enumerate(cfg.branch_points, start=1):
        tails.append([Block(f"branch{j}.block{i + 1}", chans[i], chans[i + 1], cfg.blocks[i][1],
                            rng, dtype, cfg.residual) for i in range(point, cfg.num_blocks)])
    d = cfg.feature_dim
    classifiers = [Parameter(_uniform_init(rng, (cfg.num_classes, d), d, dtype),
                             f"classifier{j}.weight", not cfg.decay_classifier)
                   for j in range(cfg.num_classifiers)]
    return BranchedNetwork(cfg, trunk, tails, classifiers)


# -- checkpoint format ----------------------------------------------------------
#
# "FFWT" | u16 version | u32 config-json length | config json (utf-8)
# | u32 entry count | entries | raw little-endian data
# entry: u16 name length | name | u8 dtype code | u8 ndim | u32 dims... | u64 offset | u64 nbytes
# Offsets are relative to the start of the raw data section.

CHECKPOINT_MAGIC = b"FFWT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def _state_arrays(net: BranchedNetwork) -> List[Tuple[str, np.ndarray]]:
    arrays = [(name, p.data) for name, p in net.named_parameters()]
    for name, stats in net.buffers().items():
        arrays.append((f"{name}.running_mean", stats.mean))
        arrays.append((f"{name}.running_var", stats.var))
    return arrays


def checkpoint_bytes(net: BranchedNetwork, extra: Optional[dict] = None) -> bytes:
    echo = {"backbone": net.cfg.to_dict()}
    if extra:
        echo.update(extra)
    cfg_blob = json.dumps(echo, sort_keys=True).encode("utf-8")
    arrays = _state_arrays(net)
    header = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(cfg_blob)), cfg_blob,
              struct.pack("<I", len(arrays))]
    payload = []
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        nb = name.encode("utf-8")
        header.append(struct.pack("<H", len(nb)) + nb)
        header.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<QQ", offset, len(raw)))
        payload.append(raw)
        offset += len(raw)
    return b"".join(header + payload)


def save_checkpoint(net: BranchedNetwork, path, extra: Optional[dict] = None) -> str:
    """Write a checkpoint and return its id (sha256 prefix of the file bytes)."""
    blob = checkpoint_bytes(net, extra)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()[:16]


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise FormatError("truncated checkpoint", self.pos)
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("truncated checkpoint", self.pos)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> Tuple[BranchedNetwork, dict]:
    """Rebuild a network from a checkpoint; returns ``(net, config_echo)``."""
    blob = Path(path).read_bytes()
    r = _Reader(blob)
    if r.raw(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    version, cfg_len = r.take("<HI")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    echo = json.loads(r.raw(cfg_len).decode("utf-8"))
    (count,) = r.take("<I")
    entries = []
    for _ in range(count):
        (nlen,) = r.take("<H")
        name = r.raw(nlen).decode("utf-8")
        entry_pos = r.pos
        code, ndim = r.take("<BB")
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", entry_pos)
        shape = r.take(f"<{ndim}I") if ndim else ()
        offset, nbytes = r.take("<QQ")
        entries.append((name, _CODE_DTYPES[code], shape, offset, nbytes))
    data_start = r.pos
    arrays = {}
    for name, dtype, shape, offset, nbytes in entries:
        start = data_start + offset
        if start + nbytes > len(blob):
            raise FormatError(f"data for {name!r} runs past end of file", start)
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize,
                                     offset=start).reshape(shape).copy()
    cfg = BackboneConfig(**echo["backbone"])
    net = build_network(cfg, np.random.default_rng(0))
    for name, p in net.named_parameters():
        if name not in arrays:
            raise FormatError(f"missing parameter {name!r}", data_start)
        p.data = arrays[name].astype(p.dtype)
    for name, stats in net.buffers().items():
        stats.mean = arrays[f"{name}.running_mean"]
        stats.var = arrays[f"{name}.running_var"]
    return net, echo


def parameter_checksum(net: BranchedNetwork) -> str:
    h = hashlib.sha256()
    for name, arr in _state_arrays(net):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
