"""Named, seeded parameter storage."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

INIT_STD = 0.02


class ParameterStore:
    """Ordered map of trainable tensors.

    Parameters are drawn from a single generator in creation order, so the
    same construction sequence and seed always yields identical values.
    """

    def __init__(self, seed: int = 0):
        self._params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    def normal(self, name: str, shape, std: float = INIT_STD) -> Tensor:
        return self._add(name, self._rng.normal(0.0, std, size=shape))

    def zeros(self, name: str, shape) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, shape) -> Tensor:
        return self._add(name, np.ones(shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy values in; every name must exist with a matching shape."""
        missing = [k for k in self._params if k not in state]
        extra = [k for k in state if k not in self._params]
        if missing or extra:
            raise CheckpointError(f"parameter set mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, t in self._params.items():
            if state[k].shape != t.shape:
                raise CheckpointError(
                    f"shape mismatch for parameter {k!r}: checkpoint {state[k].shape}, model {t.shape}")
        for k, t in self._params.items():
            t.data = np.array(state[k], dtype=np.float64)
