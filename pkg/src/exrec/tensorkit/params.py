"""Parameter containers, seeded initialisation and checkpoint files."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Iterator, Mapping

import numpy as np

from ..errors import ArtifactError, InconsistencyError, ShapeError

FORMAT_TAG = "exrec-params"
FORMAT_VERSION = 1


class Parameter:
    """A float64 array paired with a gradient buffer of identical shape."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.ascontiguousarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class ParameterSet:
    """Ordered name -> Parameter map.

    Layers keep references to their ``Parameter`` objects, so loading a
    checkpoint writes into the existing arrays instead of rebinding them.
    """

    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._frozen = False

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if self._frozen:
            raise RuntimeError("parameter set is frozen")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def uniform(self, name: str, shape, fan_in: int, rng: np.random.Generator) -> Parameter:
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape) -> Parameter:
        return self.add(name, np.zeros(shape))

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad.fill(0.0)

    def n_values(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        missing = [n for n in self._params if n not in state]
        if strict and missing:
            raise InconsistencyError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in self._params.items():
            if name not in state:
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.value.shape}")
            p.value[...] = arr

    def freeze(self) -> None:
        """Mark every value array read-only; safe for concurrent readers afterwards."""
        self._frozen = True
        for p in self._params.values():
            p.value.setflags(write=False)

    def unfreeze(self) -> None:
        self._frozen = False
        for p in self._params.values():
            p.value.setflags(write=True)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(p.grad**2)) for p in self._params.values())))


def save_checkpoint(path, params: ParameterSet | Mapping[str, np.ndarray], namespace: str | None = None) -> Path:
    """Write ``{name: array}`` to an ``.npz`` file with a format header.

    Names are prefixed with ``namespace/`` when given. The write goes through a
    temporary file and ``os.replace`` so readers never see a partial file.
    """
    path = Path(path)
    if isinstance(params, ParameterSet):
        arrays = {p.name: p.value for p in params}
    else:
        arrays = dict(params)
    if namespace:
        arrays = {f"{namespace}/{k}": v for k, v in arrays.items()}
    payload = {"__format__": np.array(FORMAT_TAG), "__version__": np.array(FORMAT_VERSION)}
    for k, v in arrays.items():
        payload[k] = np.ascontiguousarray(v, dtype=np.float64)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        with open(tmp, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def load_checkpoint(path, namespace: str | None = None) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        if "__format__" not in z.files or str(z["__format__"]) != FORMAT_TAG:
            raise InconsistencyError(f"{path}: not a parameter checkpoint")
        version = int(z["__version__"])
        if version != FORMAT_VERSION:
            raise InconsistencyError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for k in z.files:
            if k.startswith("__"):
                continue
            if namespace:
                if not k.startswith(namespace + "/"):
                    continue
                out[k[len(namespace) + 1 :]] = z[k]
            else:
                out[k] = z[k]
    return out
