"""Desk-scale quantization benchmark: build, persist, query.

A benchmark is a list of ``(bit configuration, post-training-quantized
accuracy, model size)`` records for one trained reference net, plus a
seeded 70/30 validation/test split of its entries.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import netzoo, quant

FORMAT_VERSION = 1
VAL_FRACTION = 0.7


class BenchmarkFormatError(ValueError):
    pass


class UnsupportedVersion(BenchmarkFormatError):
    pass


@dataclass(frozen=True)
class BenchmarkEntry:
    index: int
    bit_cfg: tuple[int, ...]
    accuracy: float
    model_size_mb: float


@dataclass(frozen=True)
class Benchmark:
    net_spec: str
    net_seed: int
    palette: tuple[int, ...]
    entries: tuple[BenchmarkEntry, ...]
    activation_bits: int = 8
    split_seed: int = 0
    meta: dict = field(default_factory=dict, compare=True)

    def __post_init__(self):
        cfgs = [e.bit_cfg for e in self.entries]
        if len(set(cfgs)) != len(cfgs):
            raise ValueError("duplicate bit configurations in benchmark")
        idx = [e.index for e in self.entries]
        if len(set(idx)) != len(idx):
            raise ValueError("duplicate entry indices in benchmark")
        object.__setattr__(self, "_by_index", {e.index: e for e in self.entries})
        object.__setattr__(self, "_by_cfg", {e.bit_cfg: e for e in self.entries})

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def n_layers(self) -> int:
        return len(self.entries[0].bit_cfg) if self.entries else 0

    def entry(self, idx: int) -> BenchmarkEntry:
        try:
            return self._by_index[int(idx)]
        except KeyError:
            raise KeyError(f"no benchmark entry with index {idx}") from None

    def split(self) -> tuple[list[int], list[int]]:
        return split_validation_test(self, self.split_seed)

    def accuracies(self, indices: Sequence[int]) -> np.ndarray:
        return np.array([self.entry(i).accuracy for i in indices])

    def configs(self, indices: Sequence[int]) -> list[tuple[int, ...]]:
        return [self.entry(i).bit_cfg for i in indices]


def _decode(code: int, palette: Sequence[int], n_layers: int) -> tuple[int, ...]:
    digits = []
    for _ in range(n_layers):
        code, r = divmod(code, len(palette))
        digits.append(palette[r])
    return tuple(reversed(digits))


def sample_configs(n_layers: int, palette: Sequence[int], n_configs: int, seed: int) -> list[tuple[int, ...]]:
    """``n_configs`` distinct configs drawn uniformly without replacement.

    When the space is no larger than ``n_configs`` every config is returned
    in lexicographic order.
    """
    palette = sorted(palette)
    space = len(palette) ** n_layers
    if n_configs > space:
        raise ValueError(f"{n_configs} configs requested but only {space} exist")
    if n_configs < 1:
        raise ValueError("need at least one config")
    if n_configs == space:
        return quant.enumerate_configs(n_layers, palette)
    codes = np.random.default_rng(seed).choice(space, size=n_configs, replace=False)
    return [_decode(int(c), palette, n_layers) for c in codes]


_WORKER: dict = {}


def _init_worker(net, calib_x, eval_x, eval_y, activation_bits):
    _WORKER.update(net=net, calib_x=calib_x, eval_x=eval_x, eval_y=eval_y, activation_bits=activation_bits,
                   cache=quant.WeightSchemeCache(net))


def _evaluate(cfg):
    w = _WORKER
    qnet = quant.apply_bit_config(w["net"], cfg, w["calib_x"], w["activation_bits"], w["cache"])
    return quant.evaluate_accuracy(qnet, w["eval_x"], w["eval_y"])


def build_benchmark(net: netzoo.ReferenceNet, dataset: netzoo.SyntheticDataset, n_configs: int = 425,
                    palette: Sequence[int] = quant.DEFAULT_PALETTE, seed: int = 0, activation_bits: int = 8,
                    calib_seed: int = 0, calib_batch: int = 64, jobs: int = 1, meta: dict | None = None) -> Benchmark:
    """Quantize ``net`` under sampled configs and record eval-split accuracy."""
    palette = tuple(sorted(palette))
    cfgs = sample_configs(net.n_layers, palette, n_configs, seed)
    calib_x, _ = netzoo.calibration_batch(dataset, calib_seed, calib_batch)
    eval_x, eval_y = dataset.part("eval")
    init = (net, calib_x, eval_x, eval_y, activation_bits)
    if jobs > 1:
        with ProcessPoolExecutor(jobs, initializer=_init_worker, initargs=init) as pool:
            accs = list(pool.map(_evaluate, cfgs, chunksize=16))
    else:
        _init_worker(*init)
        accs = [_evaluate(c) for c in cfgs]
        _WORKER.clear()
    numels = net.numels()
    entries = tuple(BenchmarkEntry(i, c, float(a), quant.model_size_mb(numels, c))
                    for i, (c, a) in enumerate(zip(cfgs, accs)))
    info = {"bench_seed": seed, "calib_seed": calib_seed, "calib_batch": calib_batch}
    info.update(meta or {})
    return Benchmark(net.spec, net.seed, palette, entries, activation_bits, seed, info)


def split_validation_test(bench: Benchmark, seed: int) -> tuple[list[int], list[int]]:
    """Seeded 70/30 partition of entry indices into validation and test."""
    n = len(bench)
    if n < 10:
        raise ValueError("split needs at least 10 entries")
    idx = np.array(sorted(e.index for e in bench.entries))
    perm = np.random.default_rng(np.random.SeedSequence([seed, 70])).permutation(idx)
    n_val = int(np.floor(VAL_FRACTION * n + 0.5))
    return sorted(int(i) for i in perm[:n_val]), sorted(int(i) for i in perm[n_val:])


def query_by_index(bench: Benchmark, idx: int) -> tuple[tuple[int, ...], float]:
    e = bench.entry(idx)
    return e.bit_cfg, e.accuracy


def get_index_by_config(bench: Benchmark, cfg: Sequence[int]) -> int:
    key = tuple(int(b) for b in cfg)
    try:
        return bench._by_cfg[key].index
    except KeyError:
        raise KeyError(f"config {list(key)} is not in the benchmark") from None


def query_by_config(bench: Benchmark, cfg: Sequence[int]) -> float:
    return bench.entry(get_index_by_config(bench, cfg)).accuracy


def random_config(bench: Benchmark, seed: int | np.random.Generator) -> tuple[int, ...]:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return bench.entries[int(rng.integers(len(bench)))].bit_cfg


def to_dict(bench: Benchmark) -> dict:
    return {
        "version": FORMAT_VERSION,
        "net": {"spec": bench.net_spec, "seed": bench.net_seed},
        "activation_bits": bench.activation_bits,
        "palette": list(bench.palette),
        "split_seed": bench.split_seed,
        "meta": bench.meta,
        "entries": [{"index": e.index, "bit_cfg": list(e.bit_cfg), "accuracy": e.accuracy,
                     "model_size_mb": e.model_size_mb} for e in bench.entries],
    }


def from_dict(doc: dict) -> Benchmark:
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported benchmark version {version!r} (expected {FORMAT_VERSION})")
    try:
        entries = tuple(BenchmarkEntry(int(e["index"]), tuple(int(b) for b in e["bit_cfg"]),
                                       float(e["accuracy"]), float(e["model_size_mb"]))
                        for e in doc["entries"])
        return Benchmark(doc["net"]["spec"], int(doc["net"]["seed"]), tuple(doc["palette"]), entries,
                         int(doc["activation_bits"]), int(doc["split_seed"]), dict(doc.get("meta", {})))
    except (KeyError, TypeError) as exc:
        raise BenchmarkFormatError(f"malformed benchmark document: missing or bad field {exc}") from None


def dumps(bench: Benchmark) -> str:
    return json.dumps(to_dict(bench), indent=1) + "\n"


def loads(text: str) -> Benchmark:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BenchmarkFormatError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise BenchmarkFormatError("line 1, column 1: top level must be an object")
    return from_dict(doc)


def persist(bench: Benchmark, path) -> None:
    Path(path).write_text(dumps(bench), encoding="utf-8")


def load(path) -> Benchmark:
    return loads(Path(path).read_text(encoding="utf-8"))
