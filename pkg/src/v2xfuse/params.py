"""Containers for learnable tensors and their initialisers."""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .tensors import DiffTensor


class ParamSet:
    """Mixin for dataclasses whose fields are tensors, nested sets, or dicts of them.

    Names are dotted paths; dict keys become path components.
    """

    def named_parameters(self, prefix: str = ""):
        out = []
        for f in dataclasses.fields(self):
            _collect(getattr(self, f.name), prefix + f.name, out)
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag

    def state_dict(self) -> dict:
        return {k: t.data.copy() for k, t in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        named = dict(self.named_parameters())
        if strict:
            missing = set(named) - set(state)
            extra = set(state) - set(named)
            if missing or extra:
                raise KeyError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for k, t in named.items():
            if k in state:
                arr = np.asarray(state[k])
                if arr.shape != t.shape:
                    raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
                t.data = arr.astype(t.dtype).copy()


def _collect(value, name, out):
    if isinstance(value, DiffTensor):
        out.append((name, value))
    elif isinstance(value, ParamSet):
        out.extend(value.named_parameters(name + "."))
    elif isinstance(value, dict):
        for k in sorted(value, key=str):
            _collect(value[k], f"{name}.{_key(k)}", out)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _collect(v, f"{name}.{i}", out)


def _key(k) -> str:
    if isinstance(k, tuple):
        return "__".join(str(p) for p in k)
    return str(k)


def param(arr, dtype=np.float64) -> DiffTensor:
    return DiffTensor(np.array(arr, dtype=dtype), requires_grad=True)


def he_conv(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype=np.float64,
            gain: float = 1.0) -> DiffTensor:
    std = gain * math.sqrt(2.0 / (c_in * k * k))
    return param(rng.normal(0.0, std, size=(c_out, c_in, k, k)), dtype)


def zeros(shape, dtype=np.float64) -> DiffTensor:
    return param(np.zeros(shape), dtype)


def xavier(rng: np.random.Generator, n_out: int, n_in: int, dtype=np.float64) -> DiffTensor:
    lim = math.sqrt(6.0 / (n_in + n_out))
    return param(rng.uniform(-lim, lim, size=(n_out, n_in)), dtype)
