"""Neural occupancy field, its optimizer state, and checkpointing.

The field maps a 3D point to an occupancy probability in (0, 1): a frequency
encoding of the coordinates feeds a ReLU MLP whose final channel is squashed
by a sigmoid. The final layer initializes to zero so an untrained field is
exactly 0.5 everywhere, which keeps early ray products well conditioned.

Everything is float64. Parameters are plain torch tensors managed by the
hand-rolled Adam below rather than a torch optimizer, so the full optimizer
state round-trips through checkpoints bit-for-bit.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .geometry import DTYPE, ProjectionConstraint

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncodingConfig:
    """Frequency band count L for the positional encoding."""

    frequencies: int = 6

    @property
    def dim(self) -> int:
        return 3 + 6 * self.frequencies


def encode(points, config: EncodingConfig) -> torch.Tensor:
    """(p, sin(2^0 p), cos(2^0 p), ..., sin(2^(L-1) p), cos(2^(L-1) p)).

    points: (..., 3) -> (..., 3 + 6L). The raw coordinates ride along in the
    first three slots.
    """
    p = points if isinstance(points, torch.Tensor) else torch.as_tensor(points, dtype=DTYPE)
    p = p.to(DTYPE)
    parts = [p]
    for k in range(config.frequencies):
        scaled = (2.0**k) * p
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


class OccupancyField:
    """ReLU MLP over encoded coordinates with a sigmoid occupancy head.

    Hidden weights draw from a uniform fan-in (Kaiming-style) distribution;
    hidden biases and the entire final layer start at zero.
    """

    def __init__(
        self,
        encoding: EncodingConfig | None = None,
        hidden_layers: int = 8,
        hidden_width: int = 256,
        seed: int = 0,
    ) -> None:
        self.encoding = encoding or EncodingConfig()
        self.hidden_layers = hidden_layers
        self.hidden_width = hidden_width
        gen = torch.Generator().manual_seed(seed)
        dims = [self.encoding.dim] + [hidden_width] * hidden_layers + [1]
        self.weights: list[torch.Tensor] = []
        self.biases: list[torch.Tensor] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            if fan_out == 1:
                w = torch.zeros(fan_in, fan_out, dtype=DTYPE)
            else:
                bound = math.sqrt(6.0 / fan_in)
                w = (torch.rand(fan_in, fan_out, generator=gen, dtype=DTYPE) * 2 - 1) * bound
            b = torch.zeros(fan_out, dtype=DTYPE)
            w.requires_grad_(True)
            b.requires_grad_(True)
            self.weights.append(w)
            self.biases.append(b)

    def __call__(self, points) -> torch.Tensor:
        """Occupancy in (0, 1) for points of shape (..., 3) -> (...,)."""
        h = encode(points, self.encoding)
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = torch.relu(h @ w + b)
        out = h @ self.weights[-1] + self.biases[-1]
        return torch.sigmoid(out.squeeze(-1))

    def parameters(self) -> list[torch.Tensor]:
        return [t for pair in zip(self.weights, self.biases) for t in pair]


def gradients(loss: torch.Tensor, params: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar loss; exact zeros for untouched params."""
    grads = torch.autograd.grad(loss, list(params), allow_unused=True, retain_graph=False)
    return [g if g is not None else torch.zeros_like(p) for g, p in zip(grads, params)]


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter group."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[torch.Tensor] = dc_field(default_factory=list)
    v: list[torch.Tensor] = dc_field(default_factory=list)

    @classmethod
    def for_params(
        cls,
        params: Sequence[torch.Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> "AdamState":
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
        )

    def snapshot(self) -> tuple[int, list[torch.Tensor], list[torch.Tensor]]:
        return self.step, [m.clone() for m in self.m], [v.clone() for v in self.v]

    def restore(self, snap) -> None:
        self.step = snap[0]
        for m, src in zip(self.m, snap[1]):
            m.copy_(src)
        for v, src in zip(self.v, snap[2]):
            v.copy_(src)


def adam_step(
    params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState
) -> None:
    """One bias-corrected Adam update, in place."""
    state.step += 1
    t = state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
            m_hat = m / (1 - state.beta1**t)
            v_hat = v / (1 - state.beta2**t)
            p.sub_(state.lr * m_hat / (v_hat.sqrt() + state.eps))


@dataclass
class Checkpoint:
    field: OccupancyField
    constraints: list[ProjectionConstraint]
    widths: list[int]
    heights: list[int]
    epoch: int
    adam_field: AdamState | None = None
    adam_dirs: list[AdamState | None] | None = None


def _adam_arrays(prefix: str, state: AdamState, arrays: dict, meta: dict) -> None:
    meta[prefix] = {
        "lr": state.lr,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "eps": state.eps,
        "step": state.step,
        "count": len(state.m),
    }
    for i, (m, v) in enumerate(zip(state.m, state.v)):
        arrays[f"{prefix}_m{i}"] = m.detach().numpy()
        arrays[f"{prefix}_v{i}"] = v.detach().numpy()


def _adam_from_arrays(prefix: str, data, meta: dict) -> AdamState:
    info = meta[prefix]
    state = AdamState(
        lr=info["lr"], beta1=info["beta1"], beta2=info["beta2"], eps=info["eps"],
        step=info["step"],
    )
    for i in range(info["count"]):
        state.m.append(torch.from_numpy(data[f"{prefix}_m{i}"].copy()))
        state.v.append(torch.from_numpy(data[f"{prefix}_v{i}"].copy()))
    return state


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Self-describing uncompressed .npz dump; reloads byte-for-byte."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "frequencies": ck.field.encoding.frequencies,
        "hidden_layers": ck.field.hidden_layers,
        "hidden_width": ck.field.hidden_width,
        "epoch": ck.epoch,
        "constraints": [
            {"distance": c.distance, "index": c.index} for c in ck.constraints
        ],
        "widths": [int(w) for w in ck.widths],
        "heights": [int(h) for h in ck.heights],
        "has_adam_field": ck.adam_field is not None,
        "adam_dirs_present": [st is not None for st in (ck.adam_dirs or [])],
    }
    arrays: dict[str, np.ndarray] = {}
    for i, (w, b) in enumerate(zip(ck.field.weights, ck.field.biases)):
        arrays[f"w{i}"] = w.detach().numpy()
        arrays[f"b{i}"] = b.detach().numpy()
    arrays["lights"] = np.stack([c.light.detach().numpy() for c in ck.constraints])
    arrays["screens"] = np.stack([c.screen.detach().numpy() for c in ck.constraints])
    if ck.adam_field is not None:
        _adam_arrays("adam_field", ck.adam_field, arrays, meta)
    for j, st in enumerate(ck.adam_dirs or []):
        if st is not None:
            _adam_arrays(f"adam_dir{j}", st, arrays, meta)
    arrays["meta"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = np.load(Path(path))
    meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    if meta["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
    fld = OccupancyField(
        encoding=EncodingConfig(frequencies=meta["frequencies"]),
        hidden_layers=meta["hidden_layers"],
        hidden_width=meta["hidden_width"],
    )
    with torch.no_grad():
        for i in range(len(fld.weights)):
            fld.weights[i].copy_(torch.from_numpy(data[f"w{i}"].copy()))
            fld.biases[i].copy_(torch.from_numpy(data[f"b{i}"].copy()))
    constraints = []
    for j, info in enumerate(meta["constraints"]):
        constraints.append(
            ProjectionConstraint(
                light=torch.from_numpy(data["lights"][j].copy()),
                screen=torch.from_numpy(data["screens"][j].copy()),
                distance=info["distance"],
                index=info["index"],
            )
        )
    adam_field = _adam_from_arrays("adam_field", data, meta) if meta["has_adam_field"] else None
    adam_dirs: list[AdamState | None] | None = None
    if meta["adam_dirs_present"]:
        adam_dirs = [
            _adam_from_arrays(f"adam_dir{j}", data, meta) if present else None
            for j, present in enumerate(meta["adam_dirs_present"])
        ]
    return Checkpoint(
        field=fld,
        constraints=constraints,
        widths=list(meta["widths"]),
        heights=list(meta["heights"]),
        epoch=meta["epoch"],
        adam_field=adam_field,
        adam_dirs=adam_dirs,
    )
