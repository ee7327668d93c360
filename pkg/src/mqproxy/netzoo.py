"""Desk-scale reference networks, synthetic data, training and statistic extraction."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .hessian import hutchinson_diagonal

SPLITS = ("train", "calib", "eval")


class TrainingDiverged(RuntimeError):
    pass


class StatisticError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticDataset:
    """Images of shape (1, S, S) drawn as ``sign * amp * template[class] + noise``.

    The random sign makes every class mean zero, so no linear classifier
    separates the classes.
    """

    x: np.ndarray
    y: np.ndarray
    split: np.ndarray
    seed: int
    n_classes: int

    def part(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in SPLITS:
            raise KeyError(name)
        mask = self.split == name
        return self.x[mask], self.y[mask]

    def __len__(self) -> int:
        return int(self.y.shape[0])


def _templates(rng, n_classes, size):
    out = []
    for _ in range(n_classes):
        raw = rng.standard_normal((size + 2, size + 2))
        smooth = sum(raw[i:i + size, j:j + size] for i in range(3) for j in range(3))
        smooth -= smooth.mean()
        out.append(smooth / np.linalg.norm(smooth))
    return np.stack(out)


def make_dataset(seed: int = 0, n_classes: int = 4, n_per_class: int = 512, size: int = 8,
                 noise: float = 0.2, fractions: tuple[float, float, float] = (0.5, 0.125, 0.375)) -> SyntheticDataset:
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    rng = np.random.default_rng(seed)
    tmpl = _templates(rng, n_classes, size)
    xs, ys, tags = [], [], []
    counts = [int(round(f * n_per_class)) for f in fractions[:2]]
    counts.append(n_per_class - sum(counts))
    for k in range(n_classes):
        sign = rng.choice([-1.0, 1.0], size=n_per_class)
        amp = rng.uniform(0.8, 1.2, size=n_per_class)
        x = sign[:, None, None] * amp[:, None, None] * tmpl[k] + noise * rng.standard_normal((n_per_class, size, size))
        xs.append(x)
        ys.append(np.full(n_per_class, k))
        tags += [name for name, c in zip(SPLITS, counts) for _ in range(c)]
    x = np.concatenate(xs)[:, None, :, :]
    y = np.concatenate(ys).astype(np.int64)
    split = np.array(tags)
    order = rng.permutation(len(y))
    return SyntheticDataset(x[order], y[order], split[order], seed, n_classes)


@dataclass
class Layer:
    name: str
    kind: str  # "linear" or "conv"
    weight: np.ndarray
    bias: np.ndarray
    act: str = "relu"  # "relu" or "none"
    pool: str | None = None  # None, "avg2" or "gap"

    @property
    def numel(self) -> int:
        return int(self.weight.size)

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weight.shape[1:]))


@dataclass
class ReferenceNet:
    spec: str
    seed: int
    input_shape: tuple[int, ...]
    layers: list[Layer]
    # optional per-layer input quantizers, anything with an ``apply(array)`` method
    input_quant: tuple | None = None

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def numels(self) -> list[int]:
        return [layer.numel for layer in self.layers]

    def weights(self) -> list[np.ndarray]:
        return [layer.weight for layer in self.layers]

    def with_weights(self, weights: Sequence[np.ndarray]) -> ReferenceNet:
        layers = [replace(layer, weight=np.array(w, dtype=np.float64)) for layer, w in zip(self.layers, weights)]
        return replace(self, layers=layers)

    def macs(self) -> list[int]:
        """Multiply-accumulates per sample for each quantizable layer."""
        out = []
        spatial = self.input_shape[1] * self.input_shape[2] if len(self.input_shape) == 3 else 1
        for layer in self.layers:
            if layer.kind == "conv":
                out.append(layer.weight.size * spatial)
                if layer.pool == "avg2":
                    spatial //= 4
                elif layer.pool == "gap":
                    spatial = 1
            else:
                out.append(layer.weight.size)
        return out


# (kind, out_features, act, pool); in-features follow from the previous layer
ARCHITECTURES: dict[str, tuple] = {
    "mlp-s": (
        ("linear", 32, "relu", None),
        ("linear", 32, "relu", None),
        ("linear", 16, "relu", None),
        ("linear", None, "none", None),
    ),
    "cnn-s": (
        ("conv", 8, "relu", None),
        ("conv", 8, "relu", "avg2"),
        ("conv", 16, "relu", None),
        ("conv", 16, "relu", "gap"),
        ("linear", 32, "relu", None),
        ("linear", None, "none", None),
    ),
}


def build_net(spec: str, seed: int = 0, n_classes: int = 4, input_shape=(1, 8, 8)) -> ReferenceNet:
    if spec not in ARCHITECTURES:
        raise KeyError(f"unknown architecture {spec!r}; known: {sorted(ARCHITECTURES)}")
    rng = np.random.default_rng(seed)
    layers = []
    channels = input_shape[0]
    features = int(np.prod(input_shape))
    flat = spec.startswith("mlp")
    for i, (kind, out, act, pool) in enumerate(ARCHITECTURES[spec]):
        out = n_classes if out is None else out
        if kind == "conv":
            fan_in = channels * 9
            w = rng.standard_normal((out, channels, 3, 3)) * np.sqrt(2.0 / fan_in)
            channels = out
            features = out
        else:
            fan_in = features if flat or i > 0 else int(np.prod(input_shape))
            w = rng.standard_normal((out, fan_in)) * np.sqrt(2.0 / fan_in)
            features = out
        layers.append(Layer(f"{kind}{i}", kind, w, np.zeros(out), act, pool))
    return ReferenceNet(spec, seed, tuple(input_shape), layers)


def forward(net: ReferenceNet, x, weights: Sequence[T.Tensor] | None = None,
            biases: Sequence[T.Tensor] | None = None, capture: list | None = None) -> T.Tensor:
    """Run the network. ``weights``/``biases`` override the stored parameters
    (used to put them on a tape); ``capture`` collects each layer's output."""
    h = x if isinstance(x, T.Tensor) else T.Tensor(x)
    for i, layer in enumerate(net.layers):
        w = weights[i] if weights is not None else T.Tensor(layer.weight)
        b = biases[i] if biases is not None else T.Tensor(layer.bias)
        if net.input_quant is not None and net.input_quant[i] is not None and h.tape is None:
            h = T.Tensor(net.input_quant[i].apply(h.data))
        out = layer_forward(layer, h, w, b)
        if capture is not None:
            capture.append(out)
        h = pool(layer, out)
    return h


def layer_forward(layer: Layer, h: T.Tensor, w: T.Tensor | None = None, b: T.Tensor | None = None) -> T.Tensor:
    """One quantizable layer plus its activation, before pooling."""
    w = T.Tensor(layer.weight) if w is None else w
    b = T.Tensor(layer.bias) if b is None else b
    if layer.kind == "conv":
        h = T.add_bias(T.conv2d(h, w), b)
    else:
        if h.data.ndim > 2:
            h = T.flatten(h)
        h = T.linear(h, w, b)
    return T.relu(h) if layer.act == "relu" else h


def pool(layer: Layer, h: T.Tensor) -> T.Tensor:
    if layer.pool == "avg2":
        return T.avg_pool2(h)
    if layer.pool == "gap":
        return T.global_avg_pool(h)
    return h


def predict(net: ReferenceNet, x: np.ndarray, batch: int = 512) -> np.ndarray:
    out = [np.argmax(forward(net, x[i:i + batch]).data, axis=1) for i in range(0, len(x), batch)]
    return np.concatenate(out)


def accuracy(net: ReferenceNet, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        raise ValueError("empty evaluation split")
    return float(np.mean(predict(net, x) == y))


def loss_and_grads(net: ReferenceNet, x, y) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    tape = T.Tape()
    ws = [tape.param(layer.weight) for layer in net.layers]
    bs = [tape.param(layer.bias) for layer in net.layers]
    loss = T.cross_entropy(forward(net, x, ws, bs), y)
    grads = T.backward(tape, loss)
    n = len(ws)
    return float(loss.data), grads[:n], grads[n:]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    lr: float = 0.01
    batch_size: int = 64
    seed: int = 0


def train(net: ReferenceNet, dataset: SyntheticDataset, epochs: int = 40, lr: float = 0.01,
          seed: int = 0, batch_size: int = 64) -> tuple[ReferenceNet, float]:
    """Adam on cross-entropy. Returns a trained copy and its eval accuracy."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    net = copy.deepcopy(net)
    x, y = dataset.part("train")
    rng = np.random.default_rng(seed)
    params = [l.weight for l in net.layers] + [l.bias for l in net.layers]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    n = len(net.layers)
    for epoch in range(epochs):
        # cosine decay keeps the end of training quiet so weights settle
        lr_e = 0.5 * lr * (1.0 + np.cos(np.pi * epoch / epochs))
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            loss, gw, gb = loss_and_grads(net, x[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}")
            step += 1
            for k, g in enumerate(gw + gb):
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** step)
                vh = v[k] / (1 - b2 ** step)
                params[k] -= lr_e * mh / (np.sqrt(vh) + eps)
    for k, layer in enumerate(net.layers):
        layer.weight, layer.bias = params[k], params[n + k]
    xe, ye = dataset.part("eval")
    return net, accuracy(net, xe, ye)


@dataclass(frozen=True)
class LayerStats:
    """Per-layer statistics consumed by proxies.

    ``W`` weight, ``G`` task-loss gradient w.r.t. ``W``, ``A`` layer output
    on the calibration batch, ``H`` Hutchinson estimate of the Hessian
    diagonal w.r.t. ``W``, ``V`` synaptic-flow gradient w.r.t. ``|W|``.
    ``dA`` is the task-loss gradient w.r.t. ``A`` (Fisher needs it).
    """

    name: str
    kind: str
    W: np.ndarray
    G: np.ndarray
    A: np.ndarray
    H: np.ndarray
    V: np.ndarray
    dA: np.ndarray
    fan_in: int
    macs: int
    seed: int = 0
    batch_size: int = 0

    @property
    def numel(self) -> int:
        return int(self.W.size)

    def get(self, kind: str) -> np.ndarray:
        if kind not in ("W", "G", "A", "H", "V"):
            raise KeyError(kind)
        return getattr(self, kind)


def calibration_batch(dataset: SyntheticDataset, seed: int, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    x, y = dataset.part("calib")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(y), size=min(batch_size, len(y)), replace=False))
    return x[idx], y[idx]


def layer_loss_fn(net: ReferenceNet, j: int, x, y) -> Callable[[T.Tensor], T.Tensor]:
    """Task loss as a function of layer ``j``'s weight only."""
    fixed = [T.Tensor(layer.weight) for layer in net.layers]

    def loss(w: T.Tensor) -> T.Tensor:
        ws = list(fixed)
        ws[j] = w
        return T.cross_entropy(forward(net, x, ws), y)

    return loss


def layer_hvp(net: ReferenceNet, j: int, x, y, step: float | None = None) -> Callable[[np.ndarray], np.ndarray]:
    fn = layer_loss_fn(net, j, x, y)
    w = net.layers[j].weight
    return lambda v: T.hvp(fn, w, v, step)


def synflow_grads(net: ReferenceNet) -> list[np.ndarray]:
    """Gradient of R = 1^T f(1; |theta|) with respect to each ``|W|``."""
    tape = T.Tape()
    ws = [tape.param(np.abs(layer.weight)) for layer in net.layers]
    bs = [T.Tensor(np.abs(layer.bias)) for layer in net.layers]
    ones = np.ones((1,) + tuple(net.input_shape))
    if net.spec.startswith("mlp"):
        ones = ones.reshape(1, -1)
    plain = replace(net, input_quant=None)
    r = T.sum_(forward(plain, ones, ws, bs))
    return T.backward(tape, r)


def extract_stats(net: ReferenceNet, dataset: SyntheticDataset, seed: int = 0,
                  n_probes: int = 8, batch_size: int = 64) -> list[LayerStats]:
    x, y = calibration_batch(dataset, seed, batch_size)
    tape = T.Tape()
    ws = [tape.param(layer.weight) for layer in net.layers]
    acts: list[T.Tensor] = []
    loss = T.cross_entropy(forward(net, x, ws, capture=acts), y)
    grads = T.backward(tape, loss, ws + acts)
    grads, act_grads = grads[:len(ws)], grads[len(ws):]
    vgrads = synflow_grads(net)
    macs = net.macs()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
    out = []
    for j, layer in enumerate(net.layers):
        h = hutchinson_diagonal(layer_hvp(net, j, x, y), layer.weight.shape, n_probes, rng)
        st = LayerStats(layer.name, layer.kind, layer.weight.copy(), grads[j], acts[j].data.copy(), h,
                        vgrads[j], act_grads[j], layer.fan_in, macs[j], seed, len(y))
        for kind in ("W", "G", "A", "H", "V"):
            if not np.all(np.isfinite(st.get(kind))):
                raise StatisticError(f"non-finite {kind} statistic in layer {j} ({layer.name})")
        out.append(st)
    return out


@dataclass
class DeskSetup:
    """A trained network with its dataset, as used by the benchmark and search."""

    net: ReferenceNet
    dataset: SyntheticDataset
    float_accuracy: float
    train_config: TrainConfig = field(default_factory=TrainConfig)


def desk_setup(spec: str = "cnn-s", net_seed: int = 0, data_seed: int = 0, n_per_class: int = 512,
               train_config: TrainConfig | None = None) -> DeskSetup:
    cfg = train_config or TrainConfig(seed=net_seed)
    data = make_dataset(data_seed, n_per_class=n_per_class)
    net = build_net(spec, net_seed, n_classes=data.n_classes, input_shape=data.x.shape[1:])
    trained, acc = train(net, data, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size)
    return DeskSetup(trained, data, acc, cfg)
