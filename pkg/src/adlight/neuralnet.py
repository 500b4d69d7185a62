"""Actor-critic network with hand-written backpropagation.

Layout (batch dimension first)::

    state (B, 8, 8)
      -> shared per-movement affine 8->128, ReLU         (B, 8, 128)
      -> flatten channel-major, affine 1024->256, ReLU   (B, 256)
      -> FC 128, ReLU -> FC 64, ReLU                     (B, 64)
      -> policy: FC 32, ReLU -> FC n_actions
      -> value:  FC 32, ReLU -> FC 1

The first two layers are the 1x8 and 8x1 convolutions written as affine maps;
at these kernel sizes the two are the same operation.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .topology import N_MOVEMENTS

N_FEATURES = 8
ENC_WIDTH = 128
MIX_WIDTH = 256
N_DURATION_ACTIONS = 12

# (name, out, in) for every affine layer, in forward order
def layer_shapes(n_actions: int = N_DURATION_ACTIONS):
    return [
        ("enc", ENC_WIDTH, N_FEATURES),
        ("mix", MIX_WIDTH, ENC_WIDTH * N_MOVEMENTS),
        ("fc1", 128, MIX_WIDTH),
        ("fc2", 64, 128),
        ("pi1", 32, 64),
        ("pi2", n_actions, 32),
        ("v1", 32, 64),
        ("v2", 1, 32),
    ]


class NetworkError(ValueError):
    pass


@dataclass
class NetworkParams:
    """Weights ``<layer>_w`` (out, in) and biases ``<layer>_b`` (out,)."""

    tensors: dict[str, np.ndarray]

    @property
    def n_actions(self) -> int:
        return self.tensors["pi2_w"].shape[0]

    @property
    def dtype(self):
        return self.tensors["enc_w"].dtype

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "NetworkParams":
        return NetworkParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams({k: np.zeros_like(v) for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def n_params(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(
    rng: np.random.Generator, n_actions: int = N_DURATION_ACTIONS, dtype=np.float32
) -> NetworkParams:
    """He-style init for hidden layers; output layers shrunk by 100x."""
    t = {}
    for name, n_out, n_in in layer_shapes(n_actions):
        w = rng.standard_normal((n_out, n_in)) * np.sqrt(2.0 / n_in)
        if name in ("pi2", "v2"):
            w *= 0.01
        t[f"{name}_w"] = w.astype(dtype)
        t[f"{name}_b"] = np.zeros(n_out, dtype=dtype)
    return NetworkParams(t)


@dataclass
class ForwardCache:
    x: np.ndarray
    h_enc: np.ndarray
    z_mix: np.ndarray
    h_mix: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    hp: np.ndarray
    hv: np.ndarray


def _relu(x):
    return np.maximum(x, 0)


def forward(params: NetworkParams, state: np.ndarray):
    """Return ``(logits, value, cache)``.

    ``state`` is (8, 8) or a batch (B, 8, 8); outputs follow the input's
    batching (``value`` is a scalar for a single state).
    """
    x = np.asarray(state, dtype=params.dtype)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.shape[1:] != (N_MOVEMENTS, N_FEATURES):
        raise NetworkError(f"state must be 8x8, got {x.shape[1:]}")
    if not np.isfinite(x).all():
        raise NetworkError("non-finite value in state")
    p = params.tensors
    B = x.shape[0]
    h_enc = _relu(x @ p["enc_w"].T + p["enc_b"])  # (B, 8, 128)
    z_mix = h_enc.transpose(0, 2, 1).reshape(B, ENC_WIDTH * N_MOVEMENTS)
    h_mix = _relu(z_mix @ p["mix_w"].T + p["mix_b"])
    h1 = _relu(h_mix @ p["fc1_w"].T + p["fc1_b"])
    h2 = _relu(h1 @ p["fc2_w"].T + p["fc2_b"])
    hp = _relu(h2 @ p["pi1_w"].T + p["pi1_b"])
    logits = hp @ p["pi2_w"].T + p["pi2_b"]
    hv = _relu(h2 @ p["v1_w"].T + p["v1_b"])
    value = (hv @ p["v2_w"].T + p["v2_b"])[:, 0]
    cache = ForwardCache(x, h_enc, z_mix, h_mix, h1, h2, hp, hv)
    if single:
        return logits[0], value[0], cache
    return logits, value, cache


def backward(params: NetworkParams, cache: ForwardCache, dlogits, dvalue) -> NetworkParams:
    """Gradients of a scalar loss given its gradients w.r.t. logits and value."""
    p = params.tensors
    B = cache.x.shape[0]
    dlogits = np.asarray(dlogits, dtype=params.dtype).reshape(B, -1)
    dvalue = np.asarray(dvalue, dtype=params.dtype).reshape(B, 1)
    if dlogits.shape[1] != params.n_actions:
        raise NetworkError(f"dlogits has {dlogits.shape[1]} columns, network has {params.n_actions} actions")
    g = {}

    g["pi2_w"] = dlogits.T @ cache.hp
    g["pi2_b"] = dlogits.sum(0)
    dhp = (dlogits @ p["pi2_w"]) * (cache.hp > 0)
    g["pi1_w"] = dhp.T @ cache.h2
    g["pi1_b"] = dhp.sum(0)

    g["v2_w"] = dvalue.T @ cache.hv
    g["v2_b"] = dvalue.sum(0)
    dhv = (dvalue @ p["v2_w"]) * (cache.hv > 0)
    g["v1_w"] = dhv.T @ cache.h2
    g["v1_b"] = dhv.sum(0)

    dh2 = (dhp @ p["pi1_w"] + dhv @ p["v1_w"]) * (cache.h2 > 0)
    g["fc2_w"] = dh2.T @ cache.h1
    g["fc2_b"] = dh2.sum(0)
    dh1 = (dh2 @ p["fc2_w"]) * (cache.h1 > 0)
    g["fc1_w"] = dh1.T @ cache.h_mix
    g["fc1_b"] = dh1.sum(0)
    dmix = (dh1 @ p["fc1_w"]) * (cache.h_mix > 0)
    g["mix_w"] = dmix.T @ cache.z_mix
    g["mix_b"] = dmix.sum(0)
    dz = dmix @ p["mix_w"]
    denc = dz.reshape(B, ENC_WIDTH, N_MOVEMENTS).transpose(0, 2, 1) * (cache.h_enc > 0)
    # shared kernel: gradients from all eight movement rows accumulate
    denc2 = denc.reshape(B * N_MOVEMENTS, ENC_WIDTH)
    g["enc_w"] = denc2.T @ cache.x.reshape(B * N_MOVEMENTS, N_FEATURES)
    g["enc_b"] = denc2.sum(0)
    return NetworkParams({k: g[k].astype(params.dtype, copy=False) for k in p})


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    m: NetworkParams
    v: NetworkParams
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # per-environment reward statistics (count, mean, m2) so training can resume
    reward_stats: Optional[np.ndarray] = None

    @classmethod
    def for_params(cls, params: NetworkParams, lr: float = 3e-4) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like(), 0, lr)

    def copy(self) -> "OptimizerState":
        stats = None if self.reward_stats is None else self.reward_stats.copy()
        return OptimizerState(
            self.m.copy(), self.v.copy(), self.step, self.lr, self.beta1, self.beta2, self.eps, stats
        )


def adam_step(params: NetworkParams, grads: NetworkParams, opt: OptimizerState) -> None:
    """Bias-corrected Adam update, in place."""
    for k, g in grads.tensors.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {k}")
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for k, g in grads.tensors.items():
        m = opt.m.tensors[k]
        v = opt.v.tensors[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        upd = opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        params.tensors[k] -= upd.astype(params.tensors[k].dtype, copy=False)


def global_norm(grads: NetworkParams) -> float:
    return float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.tensors.values())))


def clip_by_global_norm(grads: NetworkParams, max_norm: float) -> float:
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads.tensors.values():
            g *= scale
    return norm


# ---------------------------------------------------------------------------
# checkpoints
#
# "ADL1" | version u8 | n_tensors u32 | tensors... | n_opt u32 | opt tensors...
# tensor: name_len u16 | utf-8 name | ndim u8 | dims u32 * ndim | float32 LE data
# Optimiser scalars travel as 1-element tensors named opt/step, opt/lr, ...

MAGIC = b"ADL1"
VERSION = 1


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(buf, n: int, what: str) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise NetworkError(f"checkpoint truncated while reading {what}")
    return data


def _read_tensor(buf) -> tuple[str, np.ndarray]:
    (n,) = struct.unpack("<H", _read_exact(buf, 2, "name length"))
    name = _read_exact(buf, n, "name").decode()
    (ndim,) = struct.unpack("<B", _read_exact(buf, 1, f"{name} rank"))
    shape = struct.unpack(f"<{ndim}I", _read_exact(buf, 4 * ndim, f"{name} shape"))
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(_read_exact(buf, 4 * count, f"{name} data"), dtype="<f4").reshape(shape)
    return name, data.astype(np.float32)


def save_checkpoint(params: NetworkParams, opt: Optional[OptimizerState], path) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    buf.write(struct.pack("<I", len(params.tensors)))
    for k, v in params.tensors.items():
        _write_tensor(buf, k, v)
    if opt is None:
        buf.write(struct.pack("<I", 0))
    else:
        items = [(f"m/{k}", v) for k, v in opt.m.tensors.items()]
        items += [(f"v/{k}", v) for k, v in opt.v.tensors.items()]
        for s in ("step", "lr", "beta1", "beta2", "eps"):
            items.append((f"opt/{s}", np.array([getattr(opt, s)], dtype=np.float32)))
        if opt.reward_stats is not None:
            items.append(("opt/reward_stats", np.asarray(opt.reward_stats, dtype=np.float32)))
        buf.write(struct.pack("<I", len(items)))
        for k, v in items:
            _write_tensor(buf, k, v)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[NetworkParams, Optional[OptimizerState]]:
    with open(path, "rb") as f:
        buf = io.BytesIO(f.read())
    if buf.read(4) != MAGIC:
        raise NetworkError(f"{path}: not an ADL1 checkpoint (bad magic)")
    (version,) = struct.unpack("<B", _read_exact(buf, 1, "version"))
    if version != VERSION:
        raise NetworkError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", _read_exact(buf, 4, "tensor count"))
    tensors = dict(_read_tensor(buf) for _ in range(n))
    n_actions = tensors["pi2_w"].shape[0] if "pi2_w" in tensors else -1
    expected = {}
    for name, n_out, n_in in layer_shapes(n_actions):
        expected[f"{name}_w"] = (n_out, n_in)
        expected[f"{name}_b"] = (n_out,)
    if set(tensors) != set(expected):
        raise NetworkError(f"{path}: unexpected layers {sorted(set(tensors) ^ set(expected))}")
    for k, shape in expected.items():
        if tensors[k].shape != shape:
            raise NetworkError(f"{path}: layer {k} has shape {tensors[k].shape}, expected {shape}")
    params = NetworkParams({k: tensors[k] for k in expected})
    (n_opt,) = struct.unpack("<I", _read_exact(buf, 4, "optimizer count"))
    opt = None
    if n_opt:
        items = dict(_read_tensor(buf) for _ in range(n_opt))
        try:
            m = NetworkParams({k: items[f"m/{k}"] for k in expected})
            v = NetworkParams({k: items[f"v/{k}"] for k in expected})
            opt = OptimizerState(
                m, v,
                step=int(items["opt/step"][0]), lr=float(items["opt/lr"][0]),
                beta1=float(items["opt/beta1"][0]), beta2=float(items["opt/beta2"][0]),
                eps=float(items["opt/eps"][0]),
                reward_stats=items.get("opt/reward_stats"),
            )
        except KeyError as exc:
            raise NetworkError(f"{path}: optimizer section missing {exc}") from exc
    if buf.read(1):
        raise NetworkError(f"{path}: trailing bytes after checkpoint")
    return params, opt
