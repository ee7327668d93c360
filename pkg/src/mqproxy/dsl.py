"""Proxy search space: genomes, evaluation, canonical hashing and screening.

A genome is a small computation graph over one layer's statistics
(``W``, ``G``, ``A``, ``H``, ``V``) built from the unary and binary
primitives in :mod:`mqproxy.primitives`. Three fixed templates exist:

* ``sequential``: one input, four unary ops, then the aggregate.
* ``branched``: two inputs, two unary ops per branch, one binary op
  joining the branches, then the aggregate.
* ``dag``: two inputs and three middle nodes; each middle node folds its
  binary op over all predecessors and applies one unary op. The output is
  the mean of the middle nodes' scalar means.

The score of a bit configuration is ``sum_i b_i * layer_score_i``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

import networkx as nx
import numpy as np

from . import primitives as P

STRUCTURES = ("sequential", "branched", "dag")
STAT_KINDS = ("W", "G", "A", "H", "V")

UNARY_OPS = (
    "no_op", "element_wise_abs", "element_wise_tanh", "element_wise_pow", "element_wise_exp",
    "element_wise_log", "element_wise_relu", "element_wise_leaky_relu", "element_wise_swish",
    "element_wise_mish", "element_wise_invert", "element_wise_normalized_sum", "normalize", "sigmoid",
    "logsoftmax", "softmax", "element_wise_sqrt", "element_wise_revert", "frobenius_norm",
    "element_wise_abslog", "l1_norm", "min_max_normalize", "to_mean_scalar", "to_std_scalar",
)
BINARY_OPS = ("element_wise_sum", "element_wise_difference", "element_wise_product", "matrix_multiplication")
UNARY_ID = {op: f"UOP{i:02d}" for i, op in enumerate(UNARY_OPS)}
BINARY_ID = {op: f"BOP{i + 1:02d}" for i, op in enumerate(BINARY_OPS)}

# 0.2 on no_op; the rest share 0.8 so the distribution is proper
UNARY_WEIGHTS = np.array([0.2] + [0.8 / 23] * 23)
BINARY_WEIGHTS = np.array([0.6, 0.3, 0.05, 0.05])

SEQ_DEPTH = 4
BRANCH_DEPTH = 2
DAG_NODES = 3

_ACTIVATIONS = {"element_wise_relu", "element_wise_leaky_relu", "element_wise_swish", "element_wise_mish",
                "element_wise_tanh"}
CONFLICTS = frozenset(frozenset(p) for p in [
    ("element_wise_log", "element_wise_exp"),
    ("normalize", "min_max_normalize"),
    ("element_wise_relu", "sigmoid"),
    ("element_wise_log", "softmax"),
    ("element_wise_pow", "element_wise_sqrt"),
    ("sigmoid", "softmax"),
    ("frobenius_norm", "element_wise_revert"),
    ("element_wise_invert",),
    ("element_wise_revert",),
    ("element_wise_abs", "element_wise_relu"),
])


class GenomeError(ValueError):
    pass


@dataclass(frozen=True)
class Invalid:
    """Marker for an evaluation that produced no usable score."""

    reason: str

    def __bool__(self):
        return False


@dataclass(frozen=True)
class ScreenReport:
    passed: bool
    reason: str = "ok"

    def __post_init__(self):
        if self.passed != (self.reason == "ok"):
            raise ValueError("reason must be 'ok' exactly when passed")


OK = ScreenReport(True)


@dataclass(frozen=True)
class Genome:
    """``unary`` holds one op chain per branch (sequential: one chain of 4;
    branched: two chains of 2; dag: three chains of 1, one per middle node).
    ``binary`` holds one op for branched and one per middle node for dag."""

    structure: str
    inputs: tuple[str, ...]
    unary: tuple[tuple[str, ...], ...]
    binary: tuple[str, ...] = ()
    aggregate: str = "to_mean_scalar"

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "unary", tuple(tuple(c) for c in self.unary))
        object.__setattr__(self, "binary", tuple(self.binary))
        validate(self)


def _shape_of(structure: str) -> tuple[int, tuple[int, ...], int]:
    if structure == "sequential":
        return 1, (SEQ_DEPTH,), 0
    if structure == "branched":
        return 2, (BRANCH_DEPTH, BRANCH_DEPTH), 1
    if structure == "dag":
        return 2, (1,) * DAG_NODES, DAG_NODES
    raise GenomeError(f"unknown structure {structure!r}")


def validate(g: Genome) -> None:
    n_in, chains, n_bin = _shape_of(g.structure)
    if len(g.inputs) != n_in or any(k not in STAT_KINDS for k in g.inputs):
        raise GenomeError(f"{g.structure} genome needs {n_in} inputs from {STAT_KINDS}, got {g.inputs}")
    if tuple(len(c) for c in g.unary) != chains:
        raise GenomeError(f"{g.structure} genome needs unary chains of lengths {chains}")
    for op in (op for c in g.unary for op in c):
        if op not in P.UNARY:
            raise GenomeError(f"unknown unary op {op!r}")
    if len(g.binary) != n_bin or any(op not in P.BINARY for op in g.binary):
        raise GenomeError(f"{g.structure} genome needs {n_bin} binary ops from {BINARY_OPS}")
    if g.aggregate not in P.AGGREGATING:
        raise GenomeError(f"aggregate {g.aggregate!r} is not a scalar-producing op")


# sampling ------------------------------------------------------------------

def _unary(rng, osp: bool, size=None):
    p = UNARY_WEIGHTS if osp else None
    return rng.choice(UNARY_OPS, size=size, p=p)


def sample_unary(rng: np.random.Generator, osp: bool = True) -> str:
    return str(_unary(rng, osp))


def sample_binary(rng: np.random.Generator, osp: bool = True) -> str:
    return str(rng.choice(BINARY_OPS, p=BINARY_WEIGHTS if osp else None))


def sample_input(rng: np.random.Generator) -> str:
    return str(rng.choice(STAT_KINDS))


def sample_genome(structure: str, rng: np.random.Generator, osp: bool = True) -> Genome:
    n_in, chains, n_bin = _shape_of(structure)
    inputs = tuple(sample_input(rng) for _ in range(n_in))
    unary = tuple(tuple(sample_unary(rng, osp) for _ in range(n)) for n in chains)
    binary = tuple(sample_binary(rng, osp) for _ in range(n_bin))
    return Genome(structure, inputs, unary, binary)


# evaluation ----------------------------------------------------------------

def _chain(ops, x):
    for op in ops:
        x = P.apply_unary(op, x)
    return x


def _run(g: Genome, get) -> np.ndarray:
    if g.structure == "sequential":
        return P.apply_unary(g.aggregate, _chain(g.unary[0], get(g.inputs[0])))
    if g.structure == "branched":
        a = _chain(g.unary[0], get(g.inputs[0]))
        b = _chain(g.unary[1], get(g.inputs[1]))
        return P.apply_unary(g.aggregate, P.apply_binary(g.binary[0], a, b))
    nodes = [get(k) for k in g.inputs]
    outs = []
    for op, chain in zip(g.binary, g.unary):
        h = nodes[0]
        for pred in nodes[1:]:
            h = P.apply_binary(op, h, pred)
        h = _chain(chain, h)
        nodes.append(h)
        outs.append(P.apply_unary(g.aggregate, h))
    return np.mean(outs)


def evaluate_layer(g: Genome, stats) -> float | Invalid:
    """Scalar sensitivity score of one layer, or an :class:`Invalid` marker."""
    try:
        with np.errstate(all="ignore"):
            out = np.asarray(_run(g, stats.get), dtype=np.float64)
    except P.IncompatibleShapes:
        return Invalid("shape")
    if out.size != 1:
        return Invalid("shape")
    value = float(out.reshape(-1)[0])
    if not np.isfinite(value):
        return Invalid("nonfinite")
    return value


def layer_scores(g: Genome, stats_list) -> np.ndarray | Invalid:
    scores = []
    for st in stats_list:
        s = evaluate_layer(g, st)
        if isinstance(s, Invalid):
            return s
        scores.append(s)
    return np.array(scores)


def config_score(scores: np.ndarray, cfg: Sequence[int]) -> float:
    return float(np.dot(np.asarray(cfg, dtype=np.float64), scores))


def config_scores(scores: np.ndarray, cfgs: Sequence[Sequence[int]]) -> np.ndarray:
    return np.asarray(cfgs, dtype=np.float64) @ np.asarray(scores, dtype=np.float64)


def score_config(g: Genome, stats_list, cfg: Sequence[int], cache: dict | None = None) -> float | Invalid:
    """``sum_i b_i * evaluate_layer(g, stats_i)``; ``cache`` maps genomes to layer scores."""
    if cache is not None and g in cache:
        scores = cache[g]
    else:
        scores = layer_scores(g, stats_list)
        if cache is not None:
            cache[g] = scores
    if isinstance(scores, Invalid):
        return scores
    return config_score(scores, cfg)


# screening -----------------------------------------------------------------

def unary_paths(g: Genome) -> list[tuple[str, ...]]:
    """Unary chains with no_op stripped; consecutive pairs are checked for conflicts."""
    return [tuple(op for op in chain if op != "no_op") for chain in g.unary]


def is_conflict(a: str, b: str) -> bool:
    if a in _ACTIVATIONS and b in _ACTIVATIONS:
        return True
    return frozenset((a, b)) in CONFLICTS


def check_conflicts(g: Genome) -> ScreenReport:
    for path in unary_paths(g):
        for a, b in zip(path, path[1:]):
            if is_conflict(a, b):
                return ScreenReport(False, "conflict")
    return OK


def naive_invalid(score) -> bool:
    """True when a score is non-finite or indistinguishable (-1, 0 or 1)."""
    if isinstance(score, Invalid):
        return True
    s = float(score)
    if not np.isfinite(s):
        return True
    return any(abs(s - v) <= 1e-12 for v in (-1.0, 0.0, 1.0))


def probe_configs(n_layers: int, palette: Sequence[int] = (2, 3, 4), n: int = 5, seed: int = 0) -> list[tuple[int, ...]]:
    """``n`` distinct configs: the uniform ones first, then seeded random mixes."""
    palette = sorted(palette)
    out = [tuple([b] * n_layers) for b in palette][:n]
    rng = np.random.default_rng(seed)
    space = len(palette) ** n_layers
    while len(out) < min(n, space):
        cfg = tuple(int(b) for b in rng.choice(palette, size=n_layers))
        if cfg not in out:
            out.append(cfg)
    return out


def sensitivity_check(scores: np.ndarray, probe_cfgs: Sequence[Sequence[int]]) -> ScreenReport:
    probes = [tuple(c) for c in probe_cfgs]
    if len(set(probes)) < 2 or len(probes) < 5:
        raise ValueError("sensitivity check needs at least 5 probe configs that are not all equal")
    vals = config_scores(scores, probes)
    if np.std(vals) < 1e-12 * max(1.0, abs(float(np.mean(vals)))):
        return ScreenReport(False, "insensitive")
    return OK


@dataclass
class Screener:
    """Runs the screening checks in cost order and remembers seen hashes."""

    stats: list
    probes: list = field(default_factory=list)
    conflicts: bool = True
    invalid: bool = True
    sensitivity: bool = True
    duplicates: bool = True
    seen: set = field(default_factory=set)

    def __post_init__(self):
        if not self.probes:
            self.probes = probe_configs(len(self.stats))

    def screen(self, g: Genome) -> tuple[ScreenReport, np.ndarray | Invalid]:
        if self.conflicts:
            rep = check_conflicts(g)
            if not rep.passed:
                return rep, Invalid("conflict")
        scores = layer_scores(g, self.stats)
        if self.invalid:
            if isinstance(scores, Invalid) or any(naive_invalid(s) for s in scores):
                return ScreenReport(False, "invalid_score"), Invalid("invalid_score")
        if self.sensitivity and not isinstance(scores, Invalid):
            rep = sensitivity_check(scores, self.probes)
            if not rep.passed:
                return rep, Invalid("insensitive")
        if self.duplicates:
            h = canonical_hash(g)
            if h in self.seen:
                return ScreenReport(False, "duplicate"), Invalid("duplicate")
            self.seen.add(h)
        return OK, scores


def is_valid(g: Genome, stats_list, probes=None) -> bool:
    """Survives conflict, invalid-score and sensitivity screening (duplicates aside)."""
    return Screener(list(stats_list), list(probes or []), duplicates=False).screen(g)[0].passed


# canonical hashing ---------------------------------------------------------

def to_graph(g: Genome) -> nx.DiGraph:
    """Operator graph with edges from consumer to operand; no_op nodes elided."""
    G = nx.DiGraph()
    counter = iter(range(10_000))

    def node(label):
        n = next(counter)
        G.add_node(n, label=label)
        return n

    def link(parent, child, pos):
        G.add_edge(parent, child, pos=pos)

    def chain(ops, src):
        for op in ops:
            if op == "no_op":
                continue
            n = node(op)
            link(n, src, "u")
            src = n
        return src

    def binary(op, a, b):
        n = node(op)
        commutative = op in P.COMMUTATIVE
        link(n, a, "c" if commutative else "0")
        link(n, b, "c" if commutative else "1")
        return n

    ins = [node(f"input:{k}") for k in g.inputs]
    if g.structure == "sequential":
        root = node(g.aggregate)
        link(root, chain(g.unary[0], ins[0]), "u")
    elif g.structure == "branched":
        a = chain(g.unary[0], ins[0])
        b = chain(g.unary[1], ins[1])
        root = node(g.aggregate)
        link(root, binary(g.binary[0], a, b), "u")
    else:
        nodes = list(ins)
        root = node("mean_of_nodes")
        for op, ops in zip(g.binary, g.unary):
            h = nodes[0]
            for pred in nodes[1:]:
                h = binary(op, h, pred)
            h = chain(ops, h)
            nodes.append(h)
            agg = node(g.aggregate)
            link(agg, h, "u")
            link(root, agg, "c")
    return G


def canonical_hash(g: Genome, iterations: int = 3) -> str:
    return nx.weisfeiler_lehman_graph_hash(to_graph(g), node_attr="label", edge_attr="pos", iterations=iterations)


# serialization -------------------------------------------------------------

def to_dict(g: Genome) -> dict:
    doc: dict = {"structure": g.structure, "inputs": list(g.inputs)}
    if g.structure == "sequential":
        doc["ops"] = list(g.unary[0])
    elif g.structure == "branched":
        doc["branch_a"] = list(g.unary[0])
        doc["branch_b"] = list(g.unary[1])
        doc["binary"] = g.binary[0]
    else:
        doc["nodes"] = [{"binary": b, "unary": u[0]} for b, u in zip(g.binary, g.unary)]
    doc["aggregate"] = g.aggregate
    return doc


def from_dict(doc: dict) -> Genome:
    try:
        structure = doc["structure"]
        if structure == "sequential":
            unary, binary = (doc["ops"],), ()
        elif structure == "branched":
            unary, binary = (doc["branch_a"], doc["branch_b"]), (doc["binary"],)
        elif structure == "dag":
            unary = tuple((n["unary"],) for n in doc["nodes"])
            binary = tuple(n["binary"] for n in doc["nodes"])
        else:
            raise GenomeError(f"unknown structure {structure!r}")
        return Genome(structure, tuple(doc["inputs"]), unary, binary, doc.get("aggregate", "to_mean_scalar"))
    except (KeyError, TypeError) as exc:
        raise GenomeError(f"malformed genome document: {exc}") from None


def dumps(g: Genome) -> str:
    return json.dumps(to_dict(g), indent=2) + "\n"


def loads(text: str) -> Genome:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenomeError(f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise GenomeError("genome document must be a JSON object")
    return from_dict(doc)


def emq_genome() -> Genome:
    """The shipped searched proxy: mean(log|V| * sqrt(sum|W| / (numel + eps)))."""
    return loads(resources.files("mqproxy").joinpath("data/emq.json").read_text(encoding="utf-8"))
