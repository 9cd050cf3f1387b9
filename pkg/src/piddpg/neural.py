"""Numeric substrate: 64-bit tensors, layers, initializers, Adam and gradient checks.

Tensors default to ``torch.float64``; networks may be cast to float32 for
speed (see ``NetConfig.dtype``). Reverse-mode gradients come from torch autograd
and are cross-checked against central finite differences by :func:`grad_check`.

The ConvLSTM convolutions are 3x3, zero padded and masked to the map. They are
evaluated on the vector of valid cells: a per-map tap table scatters each 3x3
kernel into a dense ``(C_in * n, C_out * n)`` operator, which is exactly a
masked ``conv2d`` on the axial embedding but only computes in-map outputs.
"""
from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError
from .hexgrid import GridMap

DTYPE = torch.float64
CHECKPOINT_FORMAT = "piddpg.checkpoint/1"
ACTIVATIONS = ("relu", "tanh", "linear")


def _as_tensor(values) -> torch.Tensor:
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def init_he_normal(shape, fan_in: int, rng: np.random.Generator) -> torch.Tensor:
    if fan_in <= 0:
        raise ConfigError(f"He initialization needs fan_in > 0, got {fan_in}")
    return _as_tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def init_glorot(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> torch.Tensor:
    if fan_in + fan_out <= 0:
        raise ConfigError("Glorot initialization needs fan_in + fan_out > 0")
    return _as_tensor(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape))


def init_uniform_bounded(shape, rng: np.random.Generator, lo: float = -0.03, hi: float = 0.03) -> torch.Tensor:
    if not lo < hi:
        raise ConfigError(f"uniform initialization needs lo < hi, got [{lo}, {hi}]")
    return _as_tensor(rng.uniform(lo, hi, size=shape))


class ParamSet:
    """Named trainable tensors plus their Adam moment accumulators."""

    def __init__(self, tensors=None):
        self.tensors = OrderedDict()
        self.m = OrderedDict()
        self.v = OrderedDict()
        self.step_count = 0
        for name, value in (tensors or {}).items():
            self.add(name, value)

    def add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        t = value.detach()
        t = (t if t.is_floating_point() else t.to(DTYPE)).clone().requires_grad_(True)
        self.tensors[name] = t
        self.m[name] = torch.zeros_like(t, requires_grad=False)
        self.v[name] = torch.zeros_like(t, requires_grad=False)
        return t

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def values(self):
        return list(self.tensors.values())

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.tensors.items():
            out.add(name, t)
            out.m[name] = self.m[name].clone()
            out.v[name] = self.v[name].clone()
        out.step_count = self.step_count
        return out

    def frozen(self, flag: bool = True) -> None:
        for t in self.tensors.values():
            t.requires_grad_(not flag)

    def flat(self) -> torch.Tensor:
        return torch.cat([t.detach().reshape(-1) for t in self.tensors.values()])

    def to_arrays(self, prefix: str = "") -> dict:
        out = {}
        for name, t in self.tensors.items():
            out[f"{prefix}{name}"] = t.detach().numpy().copy()
            out[f"{prefix}{name}@m"] = self.m[name].numpy().copy()
            out[f"{prefix}{name}@v"] = self.v[name].numpy().copy()
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, names: Sequence[str], prefix: str = "", step_count: int = 0) -> "ParamSet":
        out = cls()
        for name in names:
            out.add(name, torch.from_numpy(np.array(arrays[f"{prefix}{name}"])))
            out.m[name] = torch.from_numpy(np.array(arrays[f"{prefix}{name}@m"]))
            out.v[name] = torch.from_numpy(np.array(arrays[f"{prefix}{name}@v"]))
        out.step_count = step_count
        return out

    def equal(self, other: "ParamSet") -> bool:
        return self.names() == other.names() and all(
            torch.equal(self[n].detach(), other[n].detach()) for n in self.tensors
        )


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values at {where}")
    return x


def dense(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, activation: str = "linear") -> torch.Tensor:
    if x.shape[-1] != weight.shape[0] or bias.shape != weight.shape[1:]:
        raise ShapeError(
            f"dense: input {tuple(x.shape)}, weight {tuple(weight.shape)}, bias {tuple(bias.shape)} are incompatible"
        )
    z = x @ weight + bias
    if activation == "relu":
        return torch.relu(z)
    if activation == "tanh":
        return torch.tanh(z)
    if activation == "linear":
        return z
    raise ConfigError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")


class HexConv:
    """Tap geometry of a masked 3x3 convolution on a map's axial embedding."""

    def __init__(self, grid: GridMap):
        self.grid = grid
        n = grid.n_cells
        self.n = n
        index = {grid.cell_to_index[c]: i for i, c in enumerate(grid.cells)}
        taps = np.zeros((9, n, n))
        for i, c in enumerate(grid.cells):
            r, col = grid.cell_to_index[c]
            for k, (dr, dc) in enumerate((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)):
                j = index.get((r + dr, col + dc))
                if j is not None:
                    taps[k, i, j] = 1.0
        # taps[k, p, q] = 1 when valid cell q sits at kernel offset k of output p
        self.taps = torch.from_numpy(taps)
        self._taps_by_dtype = {self.taps.dtype: self.taps}
        self.rows_cols = (grid.axial_rows, grid.axial_cols)
        flat = np.flatnonzero(grid.mask.ravel())
        self.flat_index = torch.from_numpy(flat)

    def operator(self, kernel: torch.Tensor) -> torch.Tensor:
        """Dense ``(C_in * n, C_out * n)`` matrix of a ``(C_out, C_in, 3, 3)`` kernel."""
        c_out, c_in = kernel.shape[:2]
        taps = self._taps_by_dtype.get(kernel.dtype)
        if taps is None:
            taps = self._taps_by_dtype[kernel.dtype] = self.taps.to(kernel.dtype)
        op = torch.einsum("ock,kpq->cqop", kernel.reshape(c_out, c_in, 9), taps)
        return op.reshape(c_in * self.n, c_out * self.n)

    def apply(self, x: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
        """Convolve cell-vector input ``(B, C_in, n)`` to ``(B, C_out, n)``."""
        if x.shape[-2] != kernel.shape[1] or x.shape[-1] != self.n:
            raise ShapeError(f"conv input {tuple(x.shape)} does not match kernel {tuple(kernel.shape)}")
        return self.apply_operator(x, self.operator(kernel), kernel.shape[0])

    def apply_operator(self, x: torch.Tensor, op: torch.Tensor, c_out: int) -> torch.Tensor:
        """Like :meth:`apply` with a prebuilt :meth:`operator` matrix."""
        b = x.shape[0]
        return (x.reshape(b, -1) @ op).reshape(b, c_out, self.n)

    def to_cells(self, grid_tensor: torch.Tensor) -> torch.Tensor:
        """``(..., C, rows, cols)`` -> ``(..., C, n)``."""
        if tuple(grid_tensor.shape[-2:]) != self.rows_cols:
            raise ShapeError(f"spatial dims {tuple(grid_tensor.shape[-2:])} != map embedding {self.rows_cols}")
        return grid_tensor.flatten(-2).index_select(-1, self.flat_index)

    def to_grid(self, cells: torch.Tensor) -> torch.Tensor:
        """``(..., C, n)`` -> ``(..., C, rows, cols)`` with zeros outside the map."""
        lead = cells.shape[:-1]
        out = cells.new_zeros(*lead, self.rows_cols[0] * self.rows_cols[1])
        out[..., self.flat_index] = cells
        return out.reshape(*lead, *self.rows_cols)


@dataclass
class ConvLSTMState:
    hidden: torch.Tensor
    cell: torch.Tensor

    @classmethod
    def zeros(cls, channels: int, rows: int, cols: int, batch: int | None = None) -> "ConvLSTMState":
        shape = (channels, rows, cols) if batch is None else (batch, channels, rows, cols)
        return cls(torch.zeros(shape, dtype=DTYPE), torch.zeros(shape, dtype=DTYPE))


def convlstm_params(
    in_channels: int, hidden_channels: int, rng: np.random.Generator, prefix: str = "convlstm."
) -> dict:
    """Gate kernels for ``[input, forget, output, candidate]`` stacked on the output axis."""
    fan_in = (in_channels + hidden_channels) * 9
    fan_out = 4 * hidden_channels * 9
    return {
        f"{prefix}wx": init_glorot((4 * hidden_channels, in_channels, 3, 3), fan_in, fan_out, rng),
        f"{prefix}wh": init_glorot((4 * hidden_channels, hidden_channels, 3, 3), fan_in, fan_out, rng),
        f"{prefix}b": torch.zeros(4 * hidden_channels, dtype=DTYPE),
    }


def _gates(pre: torch.Tensor, c: torch.Tensor):
    i, f, o, g = pre.chunk(4, dim=1)
    c_new = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    h_new = torch.sigmoid(o) * torch.tanh(c_new)
    return h_new, c_new


def convlstm_cells_step(x, h, c, wx, wh, b, geom: HexConv):
    """One ConvLSTM step on cell vectors ``(B, C, n)``."""
    pre = geom.apply(x, wx) + geom.apply(h, wh) + b[None, :, None]
    return _gates(pre, c)


def convlstm_sequence(xs: torch.Tensor, wx, wh, b, geom: HexConv, hidden_channels: int) -> torch.Tensor:
    """Run the recurrence over ``xs`` of shape ``(B, L, C, n)``; returns the final hidden ``(B, HC, n)``."""
    bsz, length, c_in, n = xs.shape
    h = xs.new_zeros(bsz, hidden_channels, n)
    c = xs.new_zeros(bsz, hidden_channels, n)
    if length == 0:
        return h
    # input convolutions for every step in one product
    px = geom.apply(xs.reshape(bsz * length, c_in, n), wx).reshape(bsz, length, -1, n)
    bias = b[None, :, None]
    op_h = geom.operator(wh)
    c_h = wh.shape[0]
    for t in range(length):
        pre = px[:, t] + geom.apply_operator(h, op_h, c_h) + bias
        h, c = _gates(pre, c)
    return h


def convlstm_step(x: torch.Tensor, state: ConvLSTMState, params: dict, geom: HexConv, prefix: str = "convlstm.") -> ConvLSTMState:
    """Grid-tensor ConvLSTM step; ``x`` is ``([B,] C, rows, cols)``."""
    batched = x.dim() == 4
    if not batched:
        x = x.unsqueeze(0)
        state = ConvLSTMState(state.hidden.unsqueeze(0), state.cell.unsqueeze(0))
    if x.dim() != 4 or state.hidden.shape != state.cell.shape or state.hidden.shape[0] != x.shape[0]:
        raise ShapeError("convlstm_step: input and state batch/shape mismatch")
    if x.shape[-2:] != state.hidden.shape[-2:]:
        raise ShapeError(f"input spatial dims {tuple(x.shape[-2:])} != state dims {tuple(state.hidden.shape[-2:])}")
    wx, wh, b = params[f"{prefix}wx"], params[f"{prefix}wh"], params[f"{prefix}b"]
    if state.hidden.shape[1] != wh.shape[1] or x.shape[1] != wx.shape[1]:
        raise ShapeError("convlstm_step: channel counts do not match the kernels")
    h, c = convlstm_cells_step(
        geom.to_cells(x), geom.to_cells(state.hidden), geom.to_cells(state.cell), wx, wh, b, geom
    )
    out = ConvLSTMState(geom.to_grid(h), geom.to_grid(c))
    if not batched:
        out = ConvLSTMState(out.hidden[0], out.cell[0])
    return out


def adam_step(
    params: ParamSet,
    grads,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamSet:
    """Bias-corrected Adam update applied in place."""
    if isinstance(grads, dict):
        grads = [grads[n] for n in params.names()]
    grads = list(grads)
    if len(grads) != len(params):
        raise ShapeError(f"expected {len(params)} gradients, got {len(grads)}")
    for name, g in zip(params.names(), grads):
        if g is None:
            raise ShapeError(f"missing gradient for {name}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(params[name].shape)}")
        check_finite(g, f"gradient of {name}")
    params.step_count += 1
    k = params.step_count
    bc1 = 1.0 - beta1**k
    bc2 = 1.0 - beta2**k
    with torch.no_grad():
        for name, g in zip(params.names(), grads):
            m = params.m[name]
            v = params.v[name]
            m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            if lr:
                step = (m / bc1) / ((v / bc2).sqrt() + eps)
                params[name].sub_(lr * step)
    return params


def numeric_gradient(fn: Callable, point: Sequence[torch.Tensor], h: float = 1e-5) -> list[torch.Tensor]:
    """Central finite differences of scalar ``fn(*point)`` with respect to every entry."""
    base = [p.detach().clone() for p in point]
    out = []
    with torch.no_grad():
        for idx, p in enumerate(base):
            g = torch.zeros_like(p)
            flat = p.reshape(-1)
            gflat = g.reshape(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + h
                fp = float(fn(*base))
                flat[j] = orig - h
                fm = float(fn(*base))
                flat[j] = orig
                gflat[j] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def analytic_gradient(fn: Callable, point: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    leaves = [p.detach().clone().requires_grad_(True) for p in point]
    value = fn(*leaves)
    grads = torch.autograd.grad(value, leaves, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(leaves, grads)]


def relative_error(analytic: Sequence[torch.Tensor], numeric: Sequence[torch.Tensor]) -> float:
    """Max entrywise ``|a - n| / max(|a|, |n|, floor)`` with ``floor`` = 1e-3 of the largest entry.

    The scale-aware floor keeps entries that are tiny relative to the gradient
    (or exactly zero, such as masked positions) from dominating on round-off.
    """
    a = torch.cat([x.reshape(-1) for x in analytic])
    nm = torch.cat([x.reshape(-1) for x in numeric])
    scale = float(torch.maximum(a.abs(), nm.abs()).max()) if a.numel() else 0.0
    floor = max(1e-3 * scale, 1e-12)
    denom = torch.clamp(torch.maximum(a.abs(), nm.abs()), min=floor)
    return float(((a - nm).abs() / denom).max()) if a.numel() else 0.0


def grad_check(fn: Callable, point: Sequence[torch.Tensor], h: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences of ``fn`` at ``point``."""
    return relative_error(analytic_gradient(fn, point), numeric_gradient(fn, point, h))


def save_checkpoint(path, sets: dict, meta: dict | None = None) -> Path:
    """Write named :class:`ParamSet` groups and a JSON header to an ``.npz`` container."""
    path = Path(path)
    arrays = {}
    header = {"format": CHECKPOINT_FORMAT, "groups": {}, "meta": meta or {}}
    for group, ps in sets.items():
        header["groups"][group] = {
            "names": ps.names(),
            "shapes": [list(ps[n].shape) for n in ps.names()],
            "step_count": ps.step_count,
        }
        arrays.update(ps.to_arrays(prefix=f"{group}/"))
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ConfigError(f"unsupported checkpoint format {header.get('format')!r}")
        arrays = {k: data[k] for k in data.files}
    sets = {}
    for group, info in header["groups"].items():
        ps = ParamSet.from_arrays(arrays, info["names"], prefix=f"{group}/", step_count=info["step_count"])
        for name, shape in zip(info["names"], info["shapes"]):
            if list(ps[name].shape) != shape:
                raise ConfigError(f"checkpoint tensor {group}/{name} has inconsistent shape")
        sets[group] = ps
    return sets, header["meta"]
