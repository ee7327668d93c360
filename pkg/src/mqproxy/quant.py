"""Uniform asymmetric fake quantization, bit configurations and bit allocation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import netzoo
from .tensor import Tensor

ALLOWED_BITS = frozenset({2, 3, 4, 5, 6, 7, 8, 32})
DEFAULT_PALETTE = (2, 3, 4)
SCALE_FLOOR = 1e-8
GRID = np.append(np.linspace(0.2, 1.2, 100), 1.0)  # 1.0 keeps the min-max scheme a candidate
EXHAUSTIVE_LIMIT = 10_000


class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True)
class QuantScheme:
    bits: int
    scale: float = 1.0
    zero_point: float = 0.0
    mode: str = "asymmetric"

    def __post_init__(self):
        if self.bits not in ALLOWED_BITS:
            raise ValueError(f"unsupported bit-width {self.bits}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    @property
    def levels(self) -> int:
        return 2 ** self.bits - 1

    def apply(self, x: np.ndarray) -> np.ndarray:
        return quantize_dequantize(x, self)


@dataclass(frozen=True)
class BitConfig:
    weights: tuple[int, ...]
    activation_bits: int = 8

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(int(b) for b in self.weights))
        bad = [b for b in self.weights + (self.activation_bits,) if b not in ALLOWED_BITS]
        if bad:
            raise ValueError(f"unsupported bit-widths {bad}")

    def __len__(self) -> int:
        return len(self.weights)


def _as_bits(cfg) -> tuple[int, ...]:
    return cfg.weights if isinstance(cfg, BitConfig) else tuple(int(b) for b in cfg)


def quantize_dequantize(x, scheme: QuantScheme) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if scheme.bits == 32:
        return x.copy()
    q = np.clip(np.rint((x - scheme.zero_point) / scheme.scale), 0, scheme.levels)
    return q * scheme.scale + scheme.zero_point


def min_max_scheme(x, bits: int) -> QuantScheme:
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if bits == 32:
        return QuantScheme(32)
    if hi == lo:
        return QuantScheme(bits, SCALE_FLOOR, lo)
    return QuantScheme(bits, (hi - lo) / (2 ** bits - 1), lo)


def calibrate(x, bits: int) -> QuantScheme:
    """Scale minimising reconstruction MSE over a grid of clipped ranges.

    Candidate ``a`` uses scale ``a * (max - min) / (2^bits - 1)`` with the
    quantization range centred on the data range.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if bits == 32:
        return QuantScheme(32)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return QuantScheme(bits, SCALE_FLOOR, lo)
    levels = 2 ** bits - 1
    best = None
    for a in GRID:
        scale = a * (hi - lo) / levels
        zp = 0.5 * (hi + lo) - 0.5 * scale * levels
        if a == 1.0:
            zp = lo
        q = np.clip(np.rint((x - zp) / scale), 0, levels)
        err = float(np.mean((q * scale + zp - x) ** 2))
        if best is None or err < best[0]:
            best = (err, scale, zp)
    return QuantScheme(bits, best[1], best[2])


def reconstruction_mse(x, bits: int) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean((quantize_dequantize(x, calibrate(x, bits)) - x) ** 2))


class WeightSchemeCache:
    """Calibrated weight schemes per (layer, bits); weights never change."""

    def __init__(self, net: netzoo.ReferenceNet):
        self.net = net
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def quantized(self, layer: int, bits: int) -> np.ndarray:
        key = (layer, bits)
        if key not in self._cache:
            w = self.net.layers[layer].weight
            self._cache[key] = quantize_dequantize(w, calibrate(w, bits))
        return self._cache[key]


def apply_bit_config(net: netzoo.ReferenceNet, cfg: BitConfig | Sequence[int], calib_x: np.ndarray | None = None,
                     activation_bits: int | None = None, cache: WeightSchemeCache | None = None) -> netzoo.ReferenceNet:
    """Fresh copy of ``net`` with fake-quantized weights and layer-input quantizers.

    Activation schemes are calibrated layer by layer on ``calib_x`` as it
    flows through the already-quantized prefix of the network.
    """
    bits = _as_bits(cfg)
    if activation_bits is None:
        activation_bits = cfg.activation_bits if isinstance(cfg, BitConfig) else 8
    if len(bits) != net.n_layers:
        raise ValueError(f"config has {len(bits)} entries, network has {net.n_layers} quantizable layers")
    cache = cache or WeightSchemeCache(net)
    weights = [cache.quantized(i, b) for i, b in enumerate(bits)]
    qnet = net.with_weights(weights)
    if activation_bits == 32:
        return qnet
    if calib_x is None:
        raise ValueError("activation quantization needs calibration inputs")
    schemes = []
    h = Tensor(calib_x)
    for layer in qnet.layers:
        scheme = calibrate(h.data, activation_bits)
        schemes.append(scheme)
        h = netzoo.pool(layer, netzoo.layer_forward(layer, Tensor(scheme.apply(h.data))))
    qnet.input_quant = tuple(schemes)
    return qnet


def evaluate_accuracy(net: netzoo.ReferenceNet, x: np.ndarray, y: np.ndarray) -> float:
    return netzoo.accuracy(net, x, y)


def _numels(net_or_numels) -> list[int]:
    if isinstance(net_or_numels, netzoo.ReferenceNet):
        return net_or_numels.numels()
    return [int(n) for n in net_or_numels]


def model_size_mb(net_or_numels, cfg) -> float:
    numels = _numels(net_or_numels)
    bits = _as_bits(cfg)
    if len(bits) != len(numels):
        raise ValueError("config length does not match layer count")
    return sum(n * b for n, b in zip(numels, bits)) / 8 / 1e6


def compute_bops(net: netzoo.ReferenceNet, cfg, activation_bits: int | None = None) -> float:
    """Giga bit-operations: sum over layers of MACs * weight bits * activation bits."""
    bits = _as_bits(cfg)
    if activation_bits is None:
        activation_bits = cfg.activation_bits if isinstance(cfg, BitConfig) else 8
    return sum(m * b * activation_bits for m, b in zip(net.macs(), bits)) / 1e9


def enumerate_configs(n_layers: int, palette: Sequence[int]) -> list[tuple[int, ...]]:
    return list(itertools.product(sorted(palette), repeat=n_layers))


def assign_bits(scorer: Callable[[tuple[int, ...]], float] | Sequence[float], numels: Sequence[int],
                budget_mb: float, palette: Sequence[int] = DEFAULT_PALETTE, n_samples: int = 5000,
                seed: int = 0, pinned: dict[int, int] | None = None) -> tuple[int, ...]:
    """Highest-scoring bit configuration whose model size fits ``budget_mb``.

    ``scorer`` is either a callable on configs or a vector of layer scores
    (config score = sum of bits * layer score). Candidates are all configs
    when the space has at most 10^4 members, otherwise ``n_samples``
    distinct feasible random configs. Ties go to the smaller model, then
    the lexicographically smaller config.
    """
    numels = list(numels)
    n = len(numels)
    pinned = dict(pinned or {})
    palette = sorted(set(palette))
    floor = [pinned.get(i, palette[0]) for i in range(n)]
    if model_size_mb(numels, floor) > budget_mb:
        raise InfeasibleBudget(f"smallest config needs {model_size_mb(numels, floor):.6g} MB > budget {budget_mb:.6g} MB")

    free = [i for i in range(n) if i not in pinned]

    def fill(sub):
        cfg = list(floor)
        for i, b in zip(free, sub):
            cfg[i] = b
        return tuple(cfg)

    if len(palette) ** len(free) <= EXHAUSTIVE_LIMIT:
        candidates = [fill(sub) for sub in itertools.product(palette, repeat=len(free))]
    else:
        rng = np.random.default_rng(seed)
        seen: dict[tuple[int, ...], None] = {}
        attempts = 0
        while len(seen) < n_samples and attempts < 50 * n_samples:
            attempts += 1
            cfg = fill(rng.choice(palette, size=len(free)))
            if model_size_mb(numels, cfg) <= budget_mb:
                seen.setdefault(cfg)
        candidates = list(seen)
    feasible = [c for c in candidates if model_size_mb(numels, c) <= budget_mb]
    if not feasible:
        raise InfeasibleBudget(f"no sampled config fits {budget_mb:.6g} MB")

    if callable(scorer):
        scores = [float(scorer(c)) for c in feasible]
    else:
        s = np.asarray(scorer, dtype=np.float64)
        scores = list(np.asarray(feasible, dtype=np.float64) @ s)
    scores = [sc if np.isfinite(sc) else -np.inf for sc in scores]
    best = min(range(len(feasible)), key=lambda k: (-scores[k], model_size_mb(numels, feasible[k]), feasible[k]))
    return feasible[best]
