"""Named parameter containers shared by the embedder and the field MLP."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def he_uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ParamSet:
    """Ordered mapping of name -> trainable :class:`Tensor`."""

    prefix = ""

    def __init__(self, config):
        self.config = config
        self.params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.array(value, dtype=self.config.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {f"{self.prefix}{k}": v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            p.data = np.array(state[f"{self.prefix}{k}"], dtype=p.dtype)
