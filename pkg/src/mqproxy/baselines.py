"""Handcrafted training-free proxies, scored per layer and bit-weighted per config."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import dsl, hessian, netzoo, quant

BASELINES = ("bparams", "hawq", "hawq_v2", "ompq", "qe", "snip", "synflow", "plain", "fisher", "emq")
EPS = 1e-9


class HvpContext:
    """Supplies layer-restricted Hessian-vector products for the curvature proxies."""

    seed: int = 0
    n_probes: int = 8

    def hvp(self, j: int) -> Callable[[np.ndarray], np.ndarray]:
        raise NotImplementedError

    def shape(self, j: int) -> tuple[int, ...]:
        raise NotImplementedError


@dataclass
class NetContext(HvpContext):
    net: netzoo.ReferenceNet
    x: np.ndarray
    y: np.ndarray
    seed: int = 0
    n_probes: int = 8

    @classmethod
    def from_dataset(cls, net, dataset, seed: int = 0, batch_size: int = 64, n_probes: int = 8):
        x, y = netzoo.calibration_batch(dataset, seed, batch_size)
        return cls(net, x, y, seed, n_probes)

    def hvp(self, j):
        return netzoo.layer_hvp(self.net, j, self.x, self.y)

    def shape(self, j):
        return self.net.layers[j].weight.shape


def _gram(a: np.ndarray) -> np.ndarray:
    z = a.reshape(a.shape[0], -1)
    return z @ z.T


def orm(a: np.ndarray, b: np.ndarray) -> float:
    """||X^T Y||_F^2 / (||X^T X||_F ||Y^T Y||_F) for batch-major activations, via Gram matrices."""
    ka, kb = _gram(a), _gram(b)
    den = np.linalg.norm(ka) * np.linalg.norm(kb)
    return float(np.sum(ka * kb) / den) if den > 0 else 0.0


def _curvature_rng(ctx: HvpContext, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([ctx.seed, 4391, j]))


def hawq_score(ctx: HvpContext, j: int) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("always", hessian.ConvergenceWarning)
        eig, _ = hessian.power_iteration(ctx.hvp(j), ctx.shape(j), _curvature_rng(ctx, j))
    return eig


def hawq_v2_score(ctx: HvpContext | None, j: int, stats: netzoo.LayerStats | None = None) -> float:
    """Average Hessian trace, trace / numel. Uses the stored diagonal estimate without a context."""
    if ctx is None:
        return float(np.mean(stats.H))
    shape = ctx.shape(j)
    tr = hessian.hutchinson_trace(ctx.hvp(j), shape, ctx.n_probes, _curvature_rng(ctx, j))
    return tr / int(np.prod(shape))


def qe_score(st: netzoo.LayerStats) -> float:
    # log(C_l * sigma^2) + log(var(act)); sigma^2 = scale^2 / 12 of the 8-bit weight scheme
    scheme = quant.calibrate(st.W, 8)
    return float(np.log(st.fan_in * scheme.scale ** 2 / 12.0) + np.log(np.var(st.A)))


def fisher_score(st: netzoo.LayerStats) -> float:
    z = (st.dA * st.A).reshape(st.A.shape[0], -1)
    return float(np.mean(np.sum(z ** 2, axis=1)))


def emq_score(st: netzoo.LayerStats) -> float:
    return float(np.mean(np.log(np.abs(st.V)) * np.sqrt(np.sum(np.abs(st.W)) / (st.W.size + EPS))))


def layer_scores(name: str, stats: Sequence[netzoo.LayerStats], ctx: HvpContext | None = None) -> np.ndarray:
    """Per-layer scores of baseline ``name``."""
    n = len(stats)
    if name == "bparams":
        return np.array([float(st.W.size) for st in stats])
    if name == "hawq":
        if ctx is None:
            raise ValueError("hawq needs a Hessian-vector-product context")
        return np.array([hawq_score(ctx, j) for j in range(n)])
    if name == "hawq_v2":
        return np.array([hawq_v2_score(ctx, j, st) for j, st in enumerate(stats)])
    if name == "ompq":
        if n < 2:
            raise ValueError("ompq needs at least two layers")
        return np.array([1.0 - orm(stats[j].A, stats[j + 1 if j + 1 < n else j - 1].A) for j in range(n)])
    if name == "qe":
        return np.array([qe_score(st) for st in stats])
    if name == "snip":
        return np.array([np.mean(np.abs(st.G * st.W)) for st in stats])
    if name == "synflow":
        return np.array([np.mean(st.V * np.abs(st.W)) for st in stats])
    if name == "plain":
        return np.array([np.mean(st.G * st.W) for st in stats])
    if name == "fisher":
        return np.array([fisher_score(st) for st in stats])
    if name == "emq":
        return np.array([emq_score(st) for st in stats])
    raise KeyError(f"unknown baseline {name!r}; choose from {', '.join(BASELINES)}")


def config_score(name: str, stats, cfg: Sequence[int], ctx: HvpContext | None = None) -> float:
    return dsl.config_score(layer_scores(name, stats, ctx), cfg)
