"""Spatio-temporal graph encoder with projection and prediction heads.

Parameters are plain :class:`~cpm.autodiff.Tensor` leaves kept in an ordered
dict; batchnorm running statistics live in a separate buffer dict.  Inputs
arrive as ``(B, C, T, V)`` and are turned time-major before the first block.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import GraphAdjacency

CHECKPOINT_MAGIC = b"CPMP"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("<i8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class EncoderConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    temporal_kernel: int = 9
    in_channels: int = 3
    projector_hidden: int = 64
    projector_out: int = 32
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.widths = [int(w) for w in self.widths]
        if len(self.widths) < 1:
            raise ValueError("encoder needs at least one block")
        if self.temporal_kernel % 2 == 0:
            raise ValueError("temporal kernel size must be odd")

    @property
    def num_blocks(self) -> int:
        return len(self.widths)

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]


def parameter_count(config: EncoderConfig) -> int:
    """Number of trainable scalars.

    Each block has a spatial weight (C_in x C), batchnorm scale and shift
    (2C) and a temporal kernel with bias (k C^2 + C).  Each head is
    ``fc1 (no bias) -> bn -> relu -> fc2``: ``in*hid + 2 hid + hid*out + out``.
    """
    k = config.temporal_kernel
    total, cin = 0, config.in_channels
    for c in config.widths:
        total += cin * c + 2 * c + k * c * c + c
        cin = c
    hid, out = config.projector_hidden, config.projector_out

    def head(d_in):
        return d_in * hid + 2 * hid + hid * out + out

    return total + head(config.feature_dim) + head(out)


def _uniform(rng, fan_in, shape, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    def __init__(self, config: EncoderConfig, adjacency: GraphAdjacency, seed: int = 0,
                 dtype=np.float64):
        self.config = config
        self.adjacency = adjacency
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, ad.Tensor] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()
        self._init(np.random.default_rng(seed))

    # -- construction -------------------------------------------------
    def _param(self, name, value):
        self.params[name] = ad.Tensor(value, requires_grad=True)

    def _bn(self, prefix, width):
        self._param(f"{prefix}.gamma", np.ones(width, self.dtype))
        self._param(f"{prefix}.beta", np.zeros(width, self.dtype))
        self.buffers[f"{prefix}.running_mean"] = np.zeros(width, np.float64)
        self.buffers[f"{prefix}.running_var"] = np.ones(width, np.float64)

    def _head(self, rng, prefix, d_in):
        hid, out = self.config.projector_hidden, self.config.projector_out
        self._param(f"{prefix}.fc1.weight", _uniform(rng, d_in, (d_in, hid), self.dtype))
        self._bn(f"{prefix}.bn", hid)
        self._param(f"{prefix}.fc2.weight", _uniform(rng, hid, (hid, out), self.dtype))
        self._param(f"{prefix}.fc2.bias", np.zeros(out, self.dtype))

    def _init(self, rng):
        cfg = self.config
        k, cin = cfg.temporal_kernel, cfg.in_channels
        for b, c in enumerate(cfg.widths):
            p = f"encoder.block{b}"
            self._param(f"{p}.spatial.weight", _uniform(rng, cin, (cin, c), self.dtype))
            self._bn(f"{p}.bn", c)
            self._param(f"{p}.temporal.weight", _uniform(rng, k * c, (k, c, c), self.dtype))
            self._param(f"{p}.temporal.bias", np.zeros(c, self.dtype))
            cin = c
        self._head(rng, "projector", cfg.feature_dim)
        self._head(rng, "predictor", cfg.projector_out)

    # -- forward ------------------------------------------------------
    def _batchnorm(self, x, prefix, train):
        return ad.batchnorm(
            x, self.params[f"{prefix}.gamma"], self.params[f"{prefix}.beta"],
            self.buffers[f"{prefix}.running_mean"], self.buffers[f"{prefix}.running_var"],
            train, self.config.bn_momentum, self.config.bn_eps,
        )

    def encode(self, x, train: bool = True) -> ad.Tensor:
        """``(B, C, T, V)`` clips to pooled ``(B, feature_dim)`` features."""
        x = np.asarray(x.data if isinstance(x, ad.Tensor) else x)
        if x.ndim != 4:
            raise ad.ShapeError(f"encode expects (B, C, T, V), got {x.shape}")
        if x.shape[3] != self.adjacency.num_joints:
            raise ad.ShapeError(
                f"input has {x.shape[3]} joints, adjacency has {self.adjacency.num_joints}")
        if x.shape[1] != self.config.in_channels:
            raise ad.ShapeError(f"input has {x.shape[1]} channels, expected {self.config.in_channels}")
        feats = ad.Tensor(np.ascontiguousarray(x.transpose(2, 0, 3, 1), dtype=self.dtype))
        a = ad.Tensor(self.adjacency.matrix.astype(self.dtype))
        for b in range(self.config.num_blocks):
            p = f"encoder.block{b}"
            feats = ad.matmul(ad.matmul(a, feats), self.params[f"{p}.spatial.weight"])
            feats = ad.relu(self._batchnorm(feats, f"{p}.bn", train))
            feats = ad.temporal_conv1d(feats, self.params[f"{p}.temporal.weight"],
                                       self.params[f"{p}.temporal.bias"])
        return ad.reduce_mean(feats, axis=(0, 2))

    def _run_head(self, prefix, x, train):
        y = ad.matmul(x, self.params[f"{prefix}.fc1.weight"])
        y = ad.relu(self._batchnorm(y, f"{prefix}.bn", train))
        return ad.matmul(y, self.params[f"{prefix}.fc2.weight"]) + self.params[f"{prefix}.fc2.bias"]

    def project(self, h: ad.Tensor, train: bool = True) -> ad.Tensor:
        return self._run_head("projector", h, train)

    def predict(self, z: ad.Tensor, train: bool = True) -> ad.Tensor:
        return self._run_head("predictor", z, train)

    def embed(self, x, train: bool = True) -> ad.Tensor:
        return self.project(self.encode(x, train), train)

    def forward_views(self, x1, x2, train: bool = True, target: "Model | None" = None,
                      symmetrize: bool = True) -> dict:
        """Student predictions and stop-gradient targets for both views.

        Returns ``p1`` (from ``x1``) and ``t2`` (stopped ``z`` of ``x2``);
        with ``symmetrize`` also ``p2`` and ``t1``.  ``target`` replaces the
        shared weights on the stop-gradient side (moving-average teacher).
        """
        z1 = self.embed(x1, train)
        out = {"p1": self.predict(z1, train)}
        if target is None and symmetrize:
            z2 = self.embed(x2, train)
            out["t2"] = ad.stop_gradient(z2)
            out["p2"] = self.predict(z2, train)
            out["t1"] = ad.stop_gradient(z1)
        elif target is None:
            with ad.no_grad():
                out["t2"] = ad.stop_gradient(self.embed(x2, train))
        else:
            with ad.no_grad():
                out["t2"] = ad.stop_gradient(target.embed(x2, train))
                if symmetrize:
                    out["t1"] = ad.stop_gradient(target.embed(x1, train))
            if symmetrize:
                out["p2"] = self.predict(self.embed(x2, train), train)
        return out

    # -- bookkeeping --------------------------------------------------
    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def encoder_parameters(self) -> dict[str, ad.Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith("encoder.")}

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def encoder_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            if name.startswith("encoder."):
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data).tobytes())
        for name, b in self.buffers.items():
            if name.startswith("encoder."):
                h.update(name.encode())
                h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        out.update({f"buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            arr = arrays[f"param/{k}"]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype).copy()
            p.grad = None
        for k in self.buffers:
            self.buffers[k] = arrays[f"buffer/{k}"].astype(np.float64).copy()

    def copy(self) -> "Model":
        clone = Model.__new__(Model)
        clone.config = self.config
        clone.adjacency = self.adjacency
        clone.dtype = self.dtype
        clone.params = OrderedDict((k, ad.Tensor(v.data.copy(), requires_grad=True))
                                   for k, v in self.params.items())
        clone.buffers = OrderedDict((k, v.copy()) for k, v in self.buffers.items())
        return clone

    def describe(self) -> dict:
        return {
            "encoder": asdict(self.config),
            "num_joints": self.adjacency.num_joints,
            "edges": [list(e) for e in self.adjacency.edges],
            "dtype": self.dtype.name,
        }

    @classmethod
    def from_description(cls, desc: dict, seed: int = 0) -> "Model":
        adjacency = GraphAdjacency(int(desc["num_joints"]), [tuple(e) for e in desc["edges"]])
        return cls(EncoderConfig(**desc["encoder"]), adjacency, seed=seed, dtype=desc.get("dtype", "float64"))


# ----------------------------------------------------------------------
# checkpoint container


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write ``CPMP`` | version u16 | JSON length u32 | JSON | count u32 | records.

    A record is: name length u16, UTF-8 name, dtype code u8 (0 float32,
    1 float64, 2 int64), ndim u8, extents u32 each, little-endian values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.dtype.newbyteorder("<")
            if le not in _DTYPE_CODES:
                raise TypeError(f"cannot store dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _DTYPE_CODES[le], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad magic bytes {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 10
    meta = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        dt = _CODE_DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype=dt, count=size, offset=pos).reshape(shape).copy()
        pos += size * dt.itemsize
    if pos != len(buf):
        raise ValueError("checkpoint has trailing bytes")
    return arrays, meta


def model_from_checkpoint(path, dtype=None) -> tuple[Model, dict, dict]:
    arrays, meta = load_checkpoint(path)
    desc = dict(meta["model"])
    if dtype is not None:
        desc["dtype"] = np.dtype(dtype).name
    model = Model.from_description(desc)
    model.load_state_arrays(arrays)
    return model, arrays, meta
