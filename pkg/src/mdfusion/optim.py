"""AdamW with decoupled weight decay."""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor
from .errors import NumericError


class AdamW:
    """AdamW over a name -> Tensor mapping.

    Only names in ``trainable`` are updated; names in ``no_decay`` get the
    Adam step but no weight decay. The decay is applied as
    ``p * (1 - lr * wd)`` before subtracting the Adam step.
    """

    def __init__(self, params: Mapping[str, Tensor], trainable: Iterable[str] | None = None,
                 lr: float = 1e-4, weight_decay: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, no_decay: Iterable[str] = ()):
        self.params = dict(params)
        self.trainable = list(trainable) if trainable is not None else list(self.params)
        unknown = [k for k in self.trainable if k not in self.params]
        if unknown:
            raise KeyError(f"unknown parameters {unknown}")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.no_decay = frozenset(no_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(self.params[k].data) for k in self.trainable}
        self.v = {k: np.zeros_like(self.params[k].data) for k in self.trainable}

    def decays(self, name: str) -> bool:
        return name not in self.no_decay and self.weight_decay != 0.0

    def zero_grad(self) -> None:
        for k in self.trainable:
            self.params[k].zero_grad()

    def step(self) -> None:
        grads = {}
        for k in self.trainable:
            g = self.params[k].grad
            g = np.zeros_like(self.params[k].data) if g is None else g
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for '{k}'; step aborted")
            grads[k] = g

        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.step_count
        corr2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            m = b1 * self.m[k] + (1.0 - b1) * g
            v = b2 * self.v[k] + (1.0 - b2) * (g * g)
            self.m[k], self.v[k] = m, v
            update = (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            p = self.params[k]
            if self.decays(k):
                p.data = p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update
            else:
                p.data = p.data - self.lr * update

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adamw.step": np.array([[float(self.step_count)]])}
        for k in self.trainable:
            out[f"adamw.m.{k}"] = self.m[k]
            out[f"adamw.v.{k}"] = self.v[k]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.step_count = int(arrays["adamw.step"][0, 0])
        for k in self.trainable:
            self.m[k] = np.array(arrays[f"adamw.m.{k}"])
            self.v[k] = np.array(arrays[f"adamw.v.{k}"])
