"""Function approximation: flat parameter vectors, tanh MLPs, categorical and
Gaussian heads, reverse-mode gradients, and the parameter checkpoint format.

Reverse-mode differentiation is delegated to ``torch.autograd``; everything
runs in float64 so finite-difference checks are meaningful.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = math.log(2.0 * math.pi)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# ---- parameter vectors ---------------------------------------------------------

@dataclass
class ParamVector:
    """Flat float64 values plus a name -> (offset, shape) layout."""

    values: np.ndarray
    layout: dict

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("ParamVector values must be flat")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("ParamVector contains non-finite entries")
        cursor = 0
        for name, (offset, shape) in sorted(self.layout.items(), key=lambda kv: kv[1][0]):
            if offset != cursor:
                raise ValueError(f"layout gap or overlap at slice {name!r}")
            cursor += int(np.prod(shape, dtype=np.int64))
        if cursor != self.values.size:
            raise ValueError("layout does not cover the value array exactly")

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        n = int(np.prod(shape, dtype=np.int64))
        return self.values[offset: offset + n].reshape(shape)

    def names(self) -> list[str]:
        return [k for k, _ in sorted(self.layout.items(), key=lambda kv: kv[1][0])]

    def _check(self, other: "ParamVector") -> None:
        if self.layout != other.layout:
            raise ValueError("parameter layouts differ")

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values + other.values, dict(self.layout))

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other)
        return ParamVector(self.values - other.values, dict(self.layout))

    def __mul__(self, scale: float) -> "ParamVector":
        return ParamVector(self.values * float(scale), dict(self.layout))

    __rmul__ = __mul__

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), dict(self.layout))

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))


def module_layout(module: nn.Module) -> dict:
    layout, offset = {}, 0
    for name, p in module.named_parameters():
        layout[name] = (offset, tuple(p.shape))
        offset += p.numel()
    return layout


def get_params(module: nn.Module) -> ParamVector:
    with torch.no_grad():
        flat = [p.detach().reshape(-1).numpy() for p in module.parameters()]
    values = np.concatenate(flat) if flat else np.zeros(0)
    return ParamVector(values.copy(), module_layout(module))


def set_params(module: nn.Module, params: ParamVector) -> None:
    if params.layout != module_layout(module):
        raise ValueError("parameter layout does not match module")
    with torch.no_grad():
        for name, p in module.named_parameters():
            p.copy_(torch.from_numpy(np.array(params[name])))


def grad(objective: torch.Tensor, module: nn.Module, retain_graph: bool = False) -> ParamVector:
    """Reverse-mode gradient of a scalar objective with respect to ``module``'s parameters.

    Parameters the objective does not reach get a zero gradient.
    """
    if objective.dim() != 0:
        raise ValueError("objective must be a scalar")
    params = list(module.parameters())
    if objective.grad_fn is None and not objective.requires_grad:
        return ParamVector(np.zeros(sum(p.numel() for p in params)), module_layout(module))
    gs = torch.autograd.grad(objective, params, retain_graph=retain_graph, allow_unused=True)
    flat = [
        (torch.zeros_like(p) if g is None else g).detach().reshape(-1).numpy()
        for p, g in zip(params, gs)
    ]
    return ParamVector(np.concatenate(flat).copy(), module_layout(module))


def apply_gradient(module: nn.Module, optimizer: torch.optim.Optimizer, g: ParamVector) -> None:
    """Load ``g`` into ``.grad`` and take one optimizer step."""
    if g.layout != module_layout(module):
        raise ValueError("gradient layout does not match module")
    for name, p in module.named_parameters():
        p.grad = torch.from_numpy(np.array(g[name]))
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


# ---- finite-difference oracle ---------------------------------------------------

def finite_difference(f: Callable[[], float], module: nn.Module, step: float = 1e-5,
                      indices: Optional[Sequence[int]] = None) -> ParamVector:
    """Central differences of ``f`` over the module's flat parameters.

    ``f`` is re-evaluated with perturbed parameters; the module is restored afterwards.
    """
    base = get_params(module)
    out = np.zeros_like(base.values)
    idx = range(base.values.size) if indices is None else indices
    try:
        for i in idx:
            v = base.values.copy()
            v[i] += step
            set_params(module, ParamVector(v, base.layout))
            f_plus = float(f())
            v[i] -= 2 * step
            set_params(module, ParamVector(v, base.layout))
            f_minus = float(f())
            out[i] = (f_plus - f_minus) / (2 * step)
    finally:
        set_params(module, base)
    return ParamVector(out, base.layout)


def relative_error(analytic: ParamVector | np.ndarray, numeric: ParamVector | np.ndarray,
                   indices: Optional[Sequence[int]] = None) -> float:
    """``max|g - g_fd| / max(max|g|, max|g_fd|)`` (0 when both vanish)."""
    a = analytic.values if isinstance(analytic, ParamVector) else np.asarray(analytic)
    n = numeric.values if isinstance(numeric, ParamVector) else np.asarray(numeric)
    if indices is not None:
        a, n = a[list(indices)], n[list(indices)]
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(n), initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - n)) / scale)


# ---- networks ---------------------------------------------------------------------

def _init_linear(layer: nn.Linear, rng: np.random.Generator, scale: float = 1.0) -> None:
    bound = scale / math.sqrt(layer.in_features)
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.weight.shape))))
        layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, size=tuple(layer.bias.shape))))


class MLP(nn.Module):
    """Fully connected net with tanh hidden layers and a linear output layer."""

    def __init__(self, sizes: Sequence[int], rng: Optional[np.random.Generator] = None,
                 out_scale: float = 1.0):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = tuple(int(s) for s in sizes)
        rng = np.random.default_rng(0) if rng is None else rng
        self.layers = nn.ModuleList(
            nn.Linear(i, o, dtype=DTYPE) for i, o in zip(self.sizes[:-1], self.sizes[1:])
        )
        for n, layer in enumerate(self.layers):
            _init_linear(layer, rng, out_scale if n == len(self.layers) - 1 else 1.0)

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input dimension {self.in_dim}, got {x.shape[-1]}")
        for layer in self.layers[:-1]:
            x = torch.tanh(layer(x))
        return self.layers[-1](x)


def mlp_forward(net: MLP, x) -> torch.Tensor:
    x = as_tensor(x)
    if not torch.all(torch.isfinite(x)):
        raise ValueError("non-finite input to MLP")
    return net(x)


class CategoricalHead(nn.Module):
    """Softmax distribution on top of a logits network."""

    def __init__(self, logits_net: nn.Module):
        super().__init__()
        self.net = logits_net

    def log_probs(self, x) -> torch.Tensor:
        return torch.log_softmax(self.net(x), dim=-1)

    def probs(self, x) -> torch.Tensor:
        return torch.softmax(self.net(x), dim=-1)

    def mode(self, x) -> torch.Tensor:
        return torch.argmax(self.net(x), dim=-1)


def gaussian_log_prob(mean: torch.Tensor, log_std: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Diagonal Gaussian log-density summed over the last axis."""
    z = (x - mean) * torch.exp(-log_std)
    return (-0.5 * z * z - log_std - 0.5 * _LOG_2PI).sum(dim=-1)


class GaussianHead(nn.Module):
    """Diagonal Gaussian whose mean and log-std are functions of the input.

    ``log_std`` is either a second block of the body's output (state dependent)
    or, with ``state_dependent_std=False``, a free parameter vector. Either way
    it is clamped to ``[log_std_min, log_std_max]``.
    """

    def __init__(self, in_dim: int, out_dim: int, hidden: Sequence[int],
                 rng: Optional[np.random.Generator] = None,
                 log_std_min: float = LOG_STD_MIN, log_std_max: float = LOG_STD_MAX,
                 state_dependent_std: bool = True, init_log_std: float = 0.0,
                 out_scale: float = 1.0):
        super().__init__()
        self.out_dim = out_dim
        self.log_std_min, self.log_std_max = float(log_std_min), float(log_std_max)
        self.state_dependent_std = state_dependent_std
        body_out = 2 * out_dim if state_dependent_std else out_dim
        self.body = MLP([in_dim, *hidden, body_out], rng, out_scale=out_scale)
        if state_dependent_std:
            with torch.no_grad():
                self.body.layers[-1].bias[out_dim:] += init_log_std
        else:
            self.log_std_param = nn.Parameter(torch.full((out_dim,), float(init_log_std), dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        out = self.body(x)
        if self.state_dependent_std:
            mean, log_std = out[..., : self.out_dim], out[..., self.out_dim:]
        else:
            mean = out
            log_std = self.log_std_param.expand_as(mean)
        return mean, torch.clamp(log_std, self.log_std_min, self.log_std_max)

    def log_prob(self, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        mean, log_std = self(x)
        return gaussian_log_prob(mean, log_std, y)

    def mode(self, x: torch.Tensor) -> torch.Tensor:
        return self(x)[0]


def reparam_sample(head: GaussianHead, x, eps) -> torch.Tensor:
    """``mean(x) + exp(log_std(x)) * eps``; differentiable in the head parameters."""
    mean, log_std = head(as_tensor(x))
    return mean + torch.exp(log_std) * as_tensor(eps)


# ---- checkpoints ------------------------------------------------------------------

CHECKPOINT_FORMAT = "depolab-params"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: Union[str, Path], sections: Mapping[str, ParamVector],
                    manifest: Optional[dict] = None) -> None:
    """Write named parameter sections into one flat float64 array plus a JSON header."""
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "sections": {}, "manifest": manifest or {}}
    chunks, offset = [], 0
    for name, pv in sections.items():
        header["sections"][name] = {
            "offset": offset,
            "size": int(pv.values.size),
            "layout": [[k, int(o), list(s)] for k, (o, s) in pv.layout.items()],
        }
        chunks.append(pv.values)
        offset += pv.values.size
    values = np.concatenate(chunks) if chunks else np.zeros(0)
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), values=values.astype(np.float64))


def load_checkpoint(path: Union[str, Path],
                    only: Optional[Iterable[str]] = None) -> tuple[dict[str, ParamVector], dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        values = np.array(data["values"])
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    wanted = set(header["sections"]) if only is None else set(only)
    missing = wanted - set(header["sections"])
    if missing:
        raise KeyError(f"{path}: missing section(s) {sorted(missing)}")
    sections = {}
    for name, meta in header["sections"].items():
        if name not in wanted:
            continue
        chunk = values[meta["offset"]: meta["offset"] + meta["size"]].copy()
        layout = {k: (o, tuple(s)) for k, o, s in meta["layout"]}
        sections[name] = ParamVector(chunk, layout)
    return sections, header["manifest"]
