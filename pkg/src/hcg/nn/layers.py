from __future__ import annotations

import contextlib
import hashlib
import math
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; subclasses register Tensors and child Modules as attributes."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                out[prefix + name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(prefix + name + "."))
            elif isinstance(val, (list, tuple)):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        out.update(m.named_parameters(f"{prefix}{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ad.ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, p in self.named_parameters().items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop gradient accumulation into this module's parameters."""
        params = self.parameters()
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in params:
                p.requires_grad = True

    def n_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        bound = math.sqrt(6.0 / (n_in + n_out))
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.affine(x, self.weight, self.bias)


class MLP(Module):
    """Linear layers with ReLU between them; ``out_act`` applies after the last."""

    def __init__(self, sizes, rng: np.random.Generator, out_act: bool = False):
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.out_act = out_act

    @property
    def sizes(self):
        return [self.layers[0].weight.shape[0]] + [l.weight.shape[1] for l in self.layers]

    def __call__(self, x) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.out_act:
                x = ad.relu(x)
        return x


class SetEncoder(Module):
    """Shared per-point MLP followed by a max over the point axis."""

    def __init__(self, sizes, rng: np.random.Generator):
        self.mlp = MLP(sizes, rng, out_act=True)

    @property
    def out_dim(self) -> int:
        return self.mlp.sizes[-1]

    def __call__(self, points) -> Tensor:
        points = ad.as_tensor(points)
        if points.ndim < 2 or points.shape[-2] == 0:
            raise ad.ShapeError("set_encode needs at least one point")
        x = points
        *hidden, last = self.mlp.layers
        for layer in hidden:
            x = ad.relu(layer(x))
        # bias and ReLU are monotone, so they commute with the max; applying
        # them after pooling skips the widest elementwise passes
        pooled = ad.max_pool_over_set(ad.matmul(x, last.weight))
        return ad.relu(pooled + last.bias)


def set_encode(points, mlp) -> Tensor:
    """Row-wise ``mlp`` then max over rows of an (N, F) or (..., N, F) tensor."""
    points = ad.as_tensor(points)
    if points.ndim < 2 or points.shape[-2] == 0:
        raise ad.ShapeError("set_encode needs at least one point")
    return ad.max_pool_over_set(mlp(points))
