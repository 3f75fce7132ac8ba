"""Skip-connected, deeply supervised 3D encoder-decoder.

Layout for ``levels = 4`` (channels ``n``, convs ``k`` per level)::

    input -> noise -> Block(n0,k0) ----------------------------- concat -> Block(n0,k0) -> 1x1x1 -> logits
                         |  maxpool                              ^ up + 1x1x1 halve
                       Block(n1,k1) ------------- concat -> Block(n1,k1) -> 1x1x1 -> up x2 -> (+)
                         |  maxpool                ^
                       Block(n2,k2) - concat -> Block(n2,k2) -> 1x1x1 -> up x4 -> (+)
                         |  maxpool    ^
                       Block(n3,k3) -> dropout

A block is ``k`` x [3x3x3 conv -> BN -> ReLU] added to a 1x1x1 conv of its
input.  All supervision logits are summed before a single channel softmax.
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import volgrad as vg
from .volgrad import BatchNormState, Tensor

CHECKPOINT_MAGIC = b"ELSEG1"


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    convs: int

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"block channels must be >= 1, got {self.channels}")
        if not 1 <= self.convs <= 8:
            raise ValueError(f"block convs must be in [1, 8], got {self.convs}")


@dataclass
class NetworkConfig:
    """Architecture hyperparameters.

    ``base_channels`` is the width at full resolution and doubles with every
    level; ``max_channels`` (if given) must not truncate that doubling.
    """

    levels: int = 4
    base_channels: int = 6
    max_channels: int | None = 48
    convs: tuple[int, ...] = (1, 2, 3, 3)
    num_labels: int = 5
    extent: int = 32
    in_channels: int = 1
    noise_sigma: float = 0.01
    dropout_rate: float = 0.25
    deep_supervision: bool = True
    supervise_deepest: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.convs = tuple(int(k) for k in self.convs)
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if len(self.convs) != self.levels:
            raise ValueError(f"convs schedule needs {self.levels} entries, got {len(self.convs)}")
        if any(b < a for a, b in zip(self.convs, self.convs[1:])):
            raise ValueError(f"convs schedule must be non-decreasing with depth, got {self.convs}")
        for k in self.convs:
            BlockSpec(self.base_channels, k)
        deepest = self.base_channels * 2 ** (self.levels - 1)
        if self.max_channels is not None and self.max_channels < deepest:
            raise ValueError(
                f"max_channels={self.max_channels} would stop the channel doubling; "
                f"{self.levels} levels from base {self.base_channels} need {deepest}"
            )
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        div = 2 ** (self.levels - 1)
        if self.extent < 1 or self.extent % div:
            raise ValueError(f"extent {self.extent} must be divisible by 2**(levels-1) = {div}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2 ** i for i in range(self.levels))

    def blocks(self) -> list[BlockSpec]:
        return [BlockSpec(n, k) for n, k in zip(self.channels, self.convs)]

    def supervised_levels(self) -> list[int]:
        """Decoder levels carrying an auxiliary 1x1x1 head (level 0 is the final layer)."""
        if not self.deep_supervision:
            return []
        lv = list(range(1, self.levels - 1))
        if self.supervise_deepest:
            lv.append(self.levels - 1)
        return lv

    def to_dict(self) -> dict:
        d = asdict(self)
        d["convs"] = list(self.convs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**{**d, "convs": tuple(d["convs"])})


def paper_config(**overrides) -> NetworkConfig:
    """The full-size configuration: 24/48/96/192 channels, 20 labels, 128^3."""
    cfg = dict(levels=4, base_channels=24, max_channels=192, convs=(1, 2, 3, 3), num_labels=20, extent=128)
    cfg.update(overrides)
    return NetworkConfig(**cfg)


def desk_config(**overrides) -> NetworkConfig:
    return NetworkConfig(**overrides)


def _block_shapes(prefix: str, in_c: int, spec: BlockSpec) -> tuple[dict, list[str]]:
    shapes, bns = OrderedDict(), []
    c = in_c
    for j in range(spec.convs):
        shapes[f"{prefix}.conv{j}.w"] = (spec.channels, c, 3, 3, 3)
        shapes[f"{prefix}.conv{j}.b"] = (spec.channels,)
        shapes[f"{prefix}.bn{j}.scale"] = (spec.channels,)
        shapes[f"{prefix}.bn{j}.shift"] = (spec.channels,)
        bns.append(f"{prefix}.bn{j}")
        c = spec.channels
    shapes[f"{prefix}.skip.w"] = (spec.channels, in_c, 1, 1, 1)
    shapes[f"{prefix}.skip.b"] = (spec.channels,)
    return shapes, bns


def parameter_shapes(config: NetworkConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Name -> shape of every trainable tensor, in a fixed order."""
    shapes = OrderedDict()
    ch = config.channels
    blocks = config.blocks()
    c = config.in_channels
    for lv in range(config.levels):
        s, _ = _block_shapes(f"enc{lv}", c, blocks[lv])
        shapes.update(s)
        c = ch[lv]
    for lv in range(config.levels - 2, -1, -1):
        shapes[f"up{lv}.w"] = (ch[lv], ch[lv + 1], 1, 1, 1)
        shapes[f"up{lv}.b"] = (ch[lv],)
        s, _ = _block_shapes(f"dec{lv}", 2 * ch[lv], blocks[lv])
        shapes.update(s)
    for lv in config.supervised_levels():
        shapes[f"head{lv}.w"] = (config.num_labels, ch[lv], 1, 1, 1)
        shapes[f"head{lv}.b"] = (config.num_labels,)
    shapes["final.w"] = (config.num_labels, ch[0], 1, 1, 1)
    shapes["final.b"] = (config.num_labels,)
    return shapes


def param_count(config: NetworkConfig) -> int:
    """Exact number of trainable scalars (kernels, biases, BN scale/shift)."""
    return int(sum(np.prod(s) for s in parameter_shapes(config).values()))


def batchnorm_names(config: NetworkConfig) -> list[str]:
    names = []
    for lv, spec in enumerate(config.blocks()):
        names += [f"enc{lv}.bn{j}" for j in range(spec.convs)]
    for lv in range(config.levels - 2, -1, -1):
        names += [f"dec{lv}.bn{j}" for j in range(config.convs[lv])]
    return names


def _init_param(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".w"):
        receptive = int(np.prod(shape[2:]))
        limit = np.sqrt(6.0 / (shape[1] * receptive + shape[0] * receptive))
        return rng.uniform(-limit, limit, shape).astype(np.float32)
    if name.endswith(".scale"):
        return np.ones(shape, np.float32)
    return np.zeros(shape, np.float32)


class ELNet:
    """Network parameters, batchnorm state, and the forward pass.

    Parameters
    ----------
    config : NetworkConfig
    seed : int
        Seeds the Glorot-uniform kernel initialisation.
    """

    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict(
            (name, Tensor(_init_param(name, shape, rng).astype(dtype), requires_grad=True, name=name))
            for name, shape in parameter_shapes(config).items()
        )
        self.bn_state: "OrderedDict[str, BatchNormState]" = OrderedDict(
            (name, BatchNormState.fresh(self.params[f"{name}.scale"].shape[0], config.bn_momentum, config.bn_eps))
            for name in batchnorm_names(config)
        )

    def param_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def _conv(self, name: str, x: Tensor) -> Tensor:
        return vg.conv3d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _block(self, prefix: str, x: Tensor, convs: int, training: bool) -> Tensor:
        h = x
        for j in range(convs):
            h = self._conv(f"{prefix}.conv{j}", h)
            bn = f"{prefix}.bn{j}"
            h = vg.batchnorm(h, self.params[f"{bn}.scale"], self.params[f"{bn}.shift"], self.bn_state[bn], training)
            h = vg.relu(h)
        return vg.add(h, self._conv(f"{prefix}.skip", x))

    def logits(self, volume, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        x = vg.as_tensor(volume)
        if x.data.ndim == 5 and x.shape[0] == 1:
            x = Tensor(x.data[0])
        expected = (cfg.in_channels,) + (cfg.extent,) * 3
        if x.shape != expected:
            raise ValueError(f"input shape {x.shape} does not match the network's expected {expected}")
        if training and rng is None:
            raise ValueError("training mode needs an rng for the noise and dropout layers")
        x = Tensor(x.data.astype(self.params["final.w"].dtype, copy=False))

        h = vg.gaussian_noise(x, rng, cfg.noise_sigma, training)
        skips = []
        for lv in range(cfg.levels):
            h = self._block(f"enc{lv}", h, cfg.convs[lv], training)
            if lv < cfg.levels - 1:
                skips.append(h)
                h = vg.maxpool3d(h)
        h = vg.dropout(h, rng, cfg.dropout_rate, training)

        supervised = set(cfg.supervised_levels())
        outputs = []
        if cfg.levels - 1 in supervised:
            outputs.append(self._head(cfg.levels - 1, h))
        for lv in range(cfg.levels - 2, -1, -1):
            h = self._conv(f"up{lv}", vg.upsample3d(h))
            h = vg.concat_channels(skips[lv], h)
            h = self._block(f"dec{lv}", h, cfg.convs[lv], training)
            if lv in supervised:
                outputs.append(self._head(lv, h))
        outputs.append(self._conv("final", h))
        return vg.add_all(outputs)

    def _head(self, lv: int, h: Tensor) -> Tensor:
        out = self._conv(f"head{lv}", h)
        for _ in range(lv):
            out = vg.upsample3d(out)
        return out

    def forward(self, volume, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Softmax probabilities, ``num_labels x E x E x E``."""
        return vg.softmax_channels(self.logits(volume, training, rng))

    __call__ = forward

    def predict_probs(self, volume) -> np.ndarray:
        with vg.no_grad():
            return self.forward(volume, training=False).data

    # -- serialisation ---------------------------------------------------------

    def state_arrays(self) -> tuple[dict, dict]:
        params = OrderedDict((k, p.data) for k, p in self.params.items())
        moments = OrderedDict()
        for k, s in self.bn_state.items():
            moments[f"{k}.running_mean"] = s.mean
            moments[f"{k}.running_var"] = s.var
        return params, moments

    def load_arrays(self, params: dict, moments: dict) -> None:
        for k, p in self.params.items():
            if k not in params:
                raise ValueError(f"checkpoint is missing parameter {k!r}")
            if tuple(params[k].shape) != p.shape:
                raise ValueError(f"checkpoint parameter {k!r} has shape {params[k].shape}, expected {p.shape}")
            p.data = np.array(params[k], dtype=p.dtype)
        for k, s in self.bn_state.items():
            s.mean = np.array(moments[f"{k}.running_mean"], dtype=np.float32)
            s.var = np.array(moments[f"{k}.running_var"], dtype=np.float32)


# -- checkpoint container ------------------------------------------------------
#
# "ELSEG1" | u32 len | JSON config | section* where each section is
# u32 count followed by count blocks of
# u32 name_len | name | u32 ndim | u32 extents[ndim] | f32 little-endian data.
# Sections in order: parameters, BN running moments, optimizer state.


class CheckpointError(ValueError):
    pass


def _write_blocks(buf, arrays: dict) -> None:
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("checkpoint is truncated")
    return data


def _read_blocks(buf) -> "OrderedDict[str, np.ndarray]":
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read_exact(buf, 4))
        name = _read_exact(buf, nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(buf, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim))
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(_read_exact(buf, 4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def checkpoint_bytes(net: ELNet, optimizer_state: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    header = json.dumps(net.config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    params, moments = net.state_arrays()
    _write_blocks(buf, params)
    _write_blocks(buf, moments)
    _write_blocks(buf, optimizer_state or {})
    return buf.getvalue()


def save_checkpoint(path, net: ELNet, optimizer_state: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(net, optimizer_state))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ELNet, dict]:
    """Returns the network and the (possibly empty) optimizer state blocks."""
    with open(path, "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not an ELSEG1 checkpoint (bad magic)")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4))
        try:
            config = NetworkConfig.from_dict(json.loads(_read_exact(f, hlen).decode("utf-8")))
        except (json.JSONDecodeError, TypeError) as e:
            raise CheckpointError(f"{path}: corrupt config header ({e})") from e
        params = _read_blocks(f)
        moments = _read_blocks(f)
        optim_state = _read_blocks(f)
        if f.read(1):
            raise CheckpointError(f"{path}: trailing bytes after the optimizer section")
    net = ELNet(config)
    net.load_arrays(params, moments)
    return net, optim_state
