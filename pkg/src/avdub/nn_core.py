"""Parameter containers, deterministic init, AdamW, checkpoints and gradient checks.

Models in this package keep their weights in a :class:`ParameterSet` of
float64 numpy arrays. Forward passes run in torch (float64) so that
gradients come from autograd; :func:`value_and_grad` is the bridge.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

torch.set_default_dtype(torch.float64)
# single-threaded kernels keep reductions in a fixed order
torch.set_num_threads(1)

MAGIC = b"AVSC1\n"


class ParameterSet:
    """Ordered mapping ``name -> float64 array`` (insertion order is preserved)."""

    def __init__(self, entries: Iterable[tuple[str, np.ndarray]] | dict | None = None):
        self._data: dict[str, np.ndarray] = {}
        if entries is None:
            return
        items = entries.items() if isinstance(entries, dict) else entries
        for name, value in items:
            if name in self._data:
                raise ValueError(f"duplicate parameter {name!r}")
            self._data[name] = np.array(value, dtype=np.float64)

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __contains__(self, name: object) -> bool:
        return name in self._data

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def names(self) -> list[str]:
        return list(self._data)

    def items(self):
        return self._data.items()

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._data.items()}

    def copy(self) -> "ParameterSet":
        return ParameterSet((k, v.copy()) for k, v in self._data.items())

    def map(self, fn: Callable[[np.ndarray], np.ndarray]) -> "ParameterSet":
        return ParameterSet((k, fn(v)) for k, v in self._data.items())

    def zeros_like(self) -> "ParameterSet":
        return self.map(np.zeros_like)

    def num_values(self) -> int:
        return int(sum(v.size for v in self._data.values()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self._data.values())

    def to_bytes(self, meta: dict | None = None) -> bytes:
        return checkpoint_bytes(self, meta)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterSet):
            return NotImplemented
        return self.names() == other.names() and all(
            self[k].shape == other[k].shape and np.array_equal(self[k], other[k]) for k in self
        )

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}:{list(v.shape)}" for k, v in self._data.items())
        return f"ParameterSet({inner})"


def _name_key(seed: int, name: str) -> int:
    h = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return int.from_bytes(h[:16], "little")


def keyed_rng(seed: int, name: str) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, name)``."""
    return np.random.Generator(np.random.Philox(key=_name_key(seed, name)))


def init_parameters(layout: list[tuple[str, tuple[int, ...] | list[int]]], seed: int) -> ParameterSet:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init, fan_in = last dimension.

    Each tensor draws from its own Philox stream keyed by (seed, name), so adding
    a tensor to the layout never changes the others.
    """
    seen: set[str] = set()
    entries = []
    for name, shape in layout:
        if name in seen:
            raise ValueError(f"duplicate parameter {name!r}")
        seen.add(name)
        shape = tuple(int(s) for s in shape)
        if not shape or any(s <= 0 for s in shape):
            raise ValueError(f"parameter {name!r} needs a positive shape, got {shape}")
        bound = 1.0 / np.sqrt(shape[-1])
        entries.append((name, keyed_rng(seed, name).uniform(-bound, bound, size=shape)))
    return ParameterSet(entries)


@dataclass
class OptimizerState:
    m: ParameterSet
    v: ParameterSet
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def create(cls, params: ParameterSet, **hyper) -> "OptimizerState":
        return cls(m=params.zeros_like(), v=params.zeros_like(), **hyper)


def optimizer_step(params: ParameterSet, grads: ParameterSet,
                   state: OptimizerState) -> tuple[ParameterSet, OptimizerState]:
    """One AdamW update (decoupled weight decay, bias-corrected moments)."""
    if grads.names() != params.names():
        raise ValueError("gradient names do not match parameters")
    for name in params:
        if grads[name].shape != params[name].shape:
            raise ValueError(f"shape mismatch for {name!r}: {grads[name].shape} vs {params[name].shape}")
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_p, new_m, new_v = [], [], []
    for name in params:
        p, g = params[name], grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        p = p - state.lr * state.weight_decay * p
        p = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_p.append((name, p))
        new_m.append((name, m))
        new_v.append((name, v))
    out = ParameterSet(new_p)
    new_state = OptimizerState(
        m=ParameterSet(new_m), v=ParameterSet(new_v), step=step, lr=state.lr,
        beta1=b1, beta2=b2, eps=state.eps, weight_decay=state.weight_decay,
    )
    return out, new_state


# ---------------------------------------------------------------- autodiff bridge

def as_tensors(params: ParameterSet, requires_grad: bool = False) -> dict[str, torch.Tensor]:
    return {k: torch.tensor(v, dtype=torch.float64, requires_grad=requires_grad) for k, v in params.items()}


def value_and_grad(fn: Callable[[dict[str, torch.Tensor]], torch.Tensor],
                   params: ParameterSet) -> tuple[float, ParameterSet]:
    """Evaluate ``fn`` on torch views of ``params`` and return (value, gradients)."""
    tensors = as_tensors(params, requires_grad=True)
    out = fn(tensors)
    out.backward()
    grads = ParameterSet(
        (k, t.grad.numpy().copy() if t.grad is not None else np.zeros(t.shape)) for k, t in tensors.items()
    )
    return float(out.detach()), grads


def finite_difference_check(loss: Callable[[ParameterSet], float | tuple[float, ParameterSet]],
                            params: ParameterSet, epsilon: float = 1e-5,
                            grad: Callable[[ParameterSet], ParameterSet] | None = None,
                            max_coords: int = 500, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``loss`` may return either a scalar (then ``grad`` must be supplied) or a
    ``(value, grads)`` pair. Above ``max_coords`` coordinates a deterministic
    subset is checked.
    """
    def value(p):
        out = loss(p)
        v = out[0] if isinstance(out, tuple) else out
        v = float(v)
        if not np.isfinite(v):
            raise FloatingPointError("loss returned a non-finite value")
        return v

    if grad is not None:
        analytic = grad(params)
    else:
        out = loss(params)
        if not isinstance(out, tuple):
            raise TypeError("loss must return (value, grads) when no grad function is given")
        analytic = out[1]

    coords = [(name, idx) for name in params for idx in np.ndindex(params[name].shape)]
    if len(coords) > max_coords:
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = 0.0
    for name, idx in coords:
        plus, minus = params.copy(), params.copy()
        plus[name][idx] += epsilon
        minus[name][idx] -= epsilon
        g_fd = (value(plus) - value(minus)) / (2.0 * epsilon)
        g_an = float(analytic[name][idx])
        err = abs(g_an - g_fd) / max(1e-12, abs(g_an) + abs(g_fd))
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------- checkpoints

def checkpoint_bytes(params: ParameterSet, meta: dict | None = None) -> bytes:
    tensors, payload, offset = [], io.BytesIO(), 0
    for name, value in params.items():
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset})
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        payload.write(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": tensors, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(manifest)) + manifest + payload.getvalue()


def parse_checkpoint(data: bytes) -> tuple[ParameterSet, dict]:
    if not data.startswith(MAGIC):
        raise ValueError("not an AVSC1 checkpoint")
    pos = len(MAGIC)
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    manifest = json.loads(data[pos:pos + n].decode("utf-8"))
    body = data[pos + n:]
    entries = []
    for t in manifest["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=t["offset"])
        entries.append((t["name"], arr.reshape(t["shape"]).astype(np.float64)))
    return ParameterSet(entries), manifest.get("meta", {})


def save_checkpoint(path: str | Path, params: ParameterSet, meta: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(params, meta))


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict]:
    return parse_checkpoint(Path(path).read_bytes())


@dataclass
class TrainLog:
    """Loss curve kept by every training routine."""
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    extra: dict[str, list[float]] = field(default_factory=dict)

    def add(self, step: int, loss: float, **extra: float) -> None:
        self.steps.append(step)
        self.losses.append(float(loss))
        for k, v in extra.items():
            self.extra.setdefault(k, []).append(float(v))

    def to_csv(self) -> str:
        cols = ["step", "loss", *self.extra]
        rows = [",".join(cols)]
        for i, s in enumerate(self.steps):
            vals = [str(s), repr(self.losses[i])] + [repr(self.extra[k][i]) for k in self.extra]
            rows.append(",".join(vals))
        return "\n".join(rows) + "\n"
