"""MLP blocks, a GRU cell, and parameter (de)serialization.

Parameters live in a flat {name: Tensor} store shared by every network in a
run (agents, mixer, hypernets, classifier). Initialization follows the usual
uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) scheme.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, ContractViolation

_ACTIVATIONS = {
    "relu": ad.relu,
    "identity": lambda t: t,
    "abs": ad.abs_,
}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths include the input width: [in, h1, ..., out]."""

    widths: tuple
    activations: tuple  # one per affine layer, from {relu, identity, abs}

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ContractViolation("MlpSpec needs at least one layer")
        if any(w <= 0 for w in self.widths):
            raise ContractViolation(f"MlpSpec widths must be positive: {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise ContractViolation("MlpSpec needs one activation per layer")
        for a in self.activations:
            if a not in _ACTIVATIONS:
                raise ContractViolation(f"unknown activation '{a}'")


@dataclass(frozen=True)
class GruCellSpec:
    input_dim: int
    hidden_dim: int = 64

    def __post_init__(self):
        if self.input_dim <= 0 or self.hidden_dim <= 0:
            raise ContractViolation("GruCellSpec dims must be positive")


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return ad.tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_mlp(rng, spec: MlpSpec, prefix: str, params: dict):
    for i in range(len(spec.widths) - 1):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        params[f"{prefix}.w{i}"] = _uniform_init(rng, (fan_in, fan_out), fan_in)
        params[f"{prefix}.b{i}"] = _uniform_init(rng, (fan_out,), fan_in)


def mlp_forward(spec: MlpSpec, params: dict, prefix: str, x):
    if x.data.shape[-1] != spec.widths[0]:
        raise ContractViolation(
            f"mlp_forward: input width {x.data.shape[-1]} != spec width {spec.widths[0]}"
        )
    h = x
    for i, act in enumerate(spec.activations):
        h = ad.linear(h, params[f"{prefix}.w{i}"], params[f"{prefix}.b{i}"])
        h = _ACTIVATIONS[act](h)
    return h


def init_gru(rng, spec: GruCellSpec, prefix: str, params: dict):
    d_in, d_h = spec.input_dim, spec.hidden_dim
    for name in ("w_ir", "w_iz", "w_in"):
        params[f"{prefix}.{name}"] = _uniform_init(rng, (d_in, d_h), d_h)
    for name in ("w_hr", "w_hz", "w_hn"):
        params[f"{prefix}.{name}"] = _uniform_init(rng, (d_h, d_h), d_h)
    for name in ("b_r", "b_z", "b_in", "b_hn"):
        params[f"{prefix}.{name}"] = _uniform_init(rng, (d_h,), d_h)


def gru_step(spec: GruCellSpec, params: dict, prefix: str, x, h):
    """Standard GRU cell: h' = z*h + (1-z)*n.

    Zero parameters give z = 0.5 and n = 0, hence h' = 0.5*h.
    """
    if x.data.shape[-1] != spec.input_dim or h.data.shape[-1] != spec.hidden_dim:
        raise ContractViolation(
            f"gru_step: got x width {x.data.shape[-1]}, h width {h.data.shape[-1]}, "
            f"spec ({spec.input_dim}, {spec.hidden_dim})"
        )
    p = lambda n: params[f"{prefix}.{n}"]
    return ad.gru_cell(
        x, h,
        p("w_ir"), p("w_hr"), p("b_r"),
        p("w_iz"), p("w_hz"), p("b_z"),
        p("w_in"), p("b_in"), p("w_hn"), p("b_hn"),
    )


# ---------------------------------------------------------------------------
# inference-only forwards (plain numpy, no tape, no per-op records)

_ACTIVATIONS_NP = {
    "relu": lambda x: np.maximum(x, 0.0),
    "identity": lambda x: x,
    "abs": np.abs,
}


def mlp_forward_np(spec: MlpSpec, params: dict, prefix: str, x):
    """Gradient-free twin of mlp_forward for rollouts and target networks."""
    if x.shape[-1] != spec.widths[0]:
        raise ContractViolation(
            f"mlp_forward: input width {x.shape[-1]} != spec width {spec.widths[0]}"
        )
    for i, act in enumerate(spec.activations):
        x = _ACTIVATIONS_NP[act](
            x @ params[f"{prefix}.w{i}"].data + params[f"{prefix}.b{i}"].data
        )
    return x


def gru_step_np(spec: GruCellSpec, params: dict, prefix: str, x, h):
    """Gradient-free twin of gru_step; mirrors the fused cell's arithmetic."""
    if x.shape[-1] != spec.input_dim or h.shape[-1] != spec.hidden_dim:
        raise ContractViolation(
            f"gru_step: got x width {x.shape[-1]}, h width {h.shape[-1]}, "
            f"spec ({spec.input_dim}, {spec.hidden_dim})"
        )
    p = lambda n: params[f"{prefix}.{n}"].data
    d = spec.hidden_dim
    wi = np.concatenate((p("w_ir"), p("w_iz"), p("w_in")), axis=1)
    wh = np.concatenate((p("w_hr"), p("w_hz"), p("w_hn")), axis=1)
    gi = x @ wi
    gh = h @ wh
    r = 1.0 / (1.0 + np.exp(-(gi[:, :d] + gh[:, :d] + p("b_r"))))
    z = 1.0 / (1.0 + np.exp(-(gi[:, d : 2 * d] + gh[:, d : 2 * d] + p("b_z"))))
    n = np.tanh(gi[:, 2 * d :] + p("b_in") + r * (gh[:, 2 * d :] + p("b_hn")))
    return z * h + (1.0 - z) * n


# ---------------------------------------------------------------------------
# parameter store helpers


def snapshot(params: dict, requires_grad=False) -> dict:
    """Immutable value copy, safe to hand to rollout workers or use as target."""
    return {
        name: ad.tensor(p.data.copy(), requires_grad=requires_grad)
        for name, p in params.items()
    }


def param_count(params: dict) -> int:
    return sum(p.data.size for p in params.values())


# Checkpoint wire format: magic, u64 tensor count, then per tensor:
# u64 name length + UTF-8 name, u64 rank, u64 dims, raw little-endian f64 data.
_MAGIC = b"AIRCKPT1"


def save_params(params: dict) -> bytes:
    chunks = [_MAGIC, struct.pack("<Q", len(params))]
    for name in sorted(params):
        raw = name.encode("utf-8")
        data = params[name].data
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}Q", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(chunks)


def load_params(blob: bytes, requires_grad=True) -> dict:
    view = memoryview(blob)
    if bytes(view[: len(_MAGIC)]) != _MAGIC:
        raise CheckpointError("bad checkpoint magic")
    off = len(_MAGIC)

    def take(n):
        nonlocal off
        if off + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[off : off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", take(8))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        n_items = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * n_items), dtype="<f8").reshape(dims)
        if name in params:
            raise CheckpointError(f"duplicate tensor name '{name}'")
        params[name] = ad.tensor(data.astype(np.float64), requires_grad=requires_grad)
    if off != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return params


def restore_into(params: dict, blob: bytes):
    """Load a checkpoint into an existing store, refusing any mismatch."""
    loaded = load_params(blob, requires_grad=False)
    if set(loaded) != set(params):
        missing = set(params) - set(loaded)
        extra = set(loaded) - set(params)
        raise CheckpointError(f"name mismatch: missing={sorted(missing)}, extra={sorted(extra)}")
    for name, p in params.items():
        if loaded[name].data.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for '{name}': "
                f"{loaded[name].data.shape} vs {p.data.shape}"
            )
    for name, p in params.items():
        p.data = loaded[name].data
