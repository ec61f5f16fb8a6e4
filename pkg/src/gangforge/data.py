"""Dataset directories, injection files, splitting and the synthetic fraud-gang generator."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .graph import (
    CONTINUOUS,
    DEFAULT_P,
    DEFAULT_RHO,
    DEFAULT_XI,
    DISCRETE,
    SPLITS,
    AttributedGraph,
    ConfigError,
    InjectionPlan,
    TargetSet,
    make_target_sets,
)


class DataError(ValueError):
    """Malformed dataset or injection file; carries the file and line when known."""

    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        self.path = None if path is None else str(path)
        self.line = line
        where = ""
        if path is not None:
            where = f"{Path(path).name}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


@dataclass
class DatasetBundle:
    graph: AttributedGraph
    target_sets: list[TargetSet]
    train_nodes: np.ndarray
    val_nodes: np.ndarray
    test_nodes: np.ndarray
    rho: float = DEFAULT_RHO
    xi: float = DEFAULT_XI

    def __post_init__(self):
        for name in ("train_nodes", "val_nodes", "test_nodes"):
            setattr(self, name, np.asarray(sorted(set(int(v) for v in getattr(self, name))), dtype=np.int64))
        validate_bundle(self)

    def split_nodes(self, split: str) -> np.ndarray:
        return {"train": self.train_nodes, "val": self.val_nodes, "test": self.test_nodes}[split]

    def sets_in(self, split: str) -> list[TargetSet]:
        return [t for t in self.target_sets if t.split == split]

    def same_as(self, other: "DatasetBundle") -> bool:
        return (
            self.graph.same_as(other.graph)
            and self.target_sets == other.target_sets
            and all(np.array_equal(self.split_nodes(s), other.split_nodes(s)) for s in SPLITS)
        )


def validate_bundle(bundle: DatasetBundle) -> None:
    g = bundle.graph
    if g.labels is None:
        raise DataError("bundle graph must carry labels")
    owner = {}
    for split in SPLITS:
        nodes = bundle.split_nodes(split)
        if nodes.size and (nodes[0] < 0 or nodes[-1] >= g.num_nodes):
            raise DataError(f"{split} split has node index out of range")
        for v in nodes.tolist():
            if v in owner:
                raise DataError(f"node {v} appears in both {owner[v]} and {split} splits")
            owner[v] = split
    labeled = set(np.flatnonzero(g.labels >= 0).tolist())
    if labeled != set(owner):
        raise DataError("splits must cover exactly the labeled nodes")
    for t in bundle.target_sets:
        for v in t.members:
            if not 0 <= v < g.num_nodes:
                raise DataError(f"target set {t.set_id} member {v} out of range")
            if g.labels[v] != 1:
                raise DataError(f"target set {t.set_id} member {v} is not a fraud")
            if owner.get(v) != t.split:
                raise DataError(f"target set {t.set_id} member {v} lies outside the {t.split} split")


# ---------------------------------------------------------------------------
# On-disk dataset format
# ---------------------------------------------------------------------------

def _data_lines(path: Path):
    """Yield (line_number, stripped_text), skipping blanks and # comments."""
    with open(path, encoding="utf-8") as fh:
        no = 0
        try:
            for no, raw in enumerate(fh, start=1):
                text = raw.split("#", 1)[0].strip()
                if text:
                    yield no, text
        except UnicodeDecodeError:
            raise DataError("file is not valid UTF-8 text", path, no + 1) from None


def _read_json(path: Path):
    try:
        raw = path.read_text(encoding="utf-8")
    except UnicodeDecodeError:
        raise DataError("file is not valid UTF-8 text", path) from None
    text = "\n".join(line for line in raw.splitlines() if not line.lstrip().startswith("#"))
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON ({exc.msg})", path, exc.lineno) from None


def _require(directory: Path, name: str) -> Path:
    path = directory / name
    if not path.is_file():
        raise DataError(f"missing required file {name}", path)
    return path


def load_dataset(directory: str | Path, rho: float = DEFAULT_RHO, xi: float = DEFAULT_XI) -> DatasetBundle:
    """Load and validate a dataset directory; budgets are computed from rho and xi."""
    directory = Path(directory)
    meta_path = _require(directory, "meta.json")
    paths = {name: _require(directory, name) for name in
             ("edges.txt", "features.csv", "labels.csv", "target_sets.json", "splits.json")}

    meta = _read_json(meta_path)
    try:
        n = int(meta["num_nodes"])
        D = int(meta["attr_dim"])
        kind = meta["attribute_kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad or missing field {exc}", meta_path) from None
    if kind not in (CONTINUOUS, DISCRETE):
        raise DataError(f"attribute_kind must be continuous or discrete, got {kind!r}", meta_path)
    if n < 1 or D < 1:
        raise DataError("num_nodes and attr_dim must be positive", meta_path)

    edges, seen = [], set()
    for no, text in _data_lines(paths["edges.txt"]):
        parts = text.split()
        if len(parts) != 2:
            raise DataError("expected 'u v'", paths["edges.txt"], no)
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError("edge endpoints must be integers", paths["edges.txt"], no) from None
        if not (0 <= u < v < n):
            raise DataError(f"edge ({u}, {v}) must satisfy 0 <= u < v < {n}", paths["edges.txt"], no)
        if (u, v) in seen:
            raise DataError(f"duplicate edge ({u}, {v})", paths["edges.txt"], no)
        seen.add((u, v))
        edges.append((u, v))

    rows = []
    for no, text in _data_lines(paths["features.csv"]):
        parts = text.split(",")
        if len(parts) != D:
            raise DataError(f"expected {D} values, got {len(parts)}", paths["features.csv"], no)
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise DataError("non-numeric feature value", paths["features.csv"], no) from None
        if not all(math.isfinite(r) for r in row):
            raise DataError("non-finite feature value", paths["features.csv"], no)
        if kind == DISCRETE and any(r not in (0.0, 1.0) for r in row):
            raise DataError("discrete features must be 0 or 1", paths["features.csv"], no)
        rows.append(row)
    if len(rows) != n:
        raise DataError(f"expected {n} feature rows, got {len(rows)}", paths["features.csv"])

    labels = np.full(n, -1, dtype=np.int64)
    for no, text in _data_lines(paths["labels.csv"]):
        parts = text.split(",")
        if len(parts) != 2:
            raise DataError("expected 'node,label'", paths["labels.csv"], no)
        try:
            v, y = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataError("node and label must be integers", paths["labels.csv"], no) from None
        if not 0 <= v < n:
            raise DataError(f"node {v} out of range", paths["labels.csv"], no)
        if y not in (0, 1):
            raise DataError(f"label {y} outside {{0,1}}", paths["labels.csv"], no)
        if labels[v] != -1:
            raise DataError(f"node {v} labeled twice", paths["labels.csv"], no)
        labels[v] = y

    graph = AttributedGraph(n, edges, np.asarray(rows).reshape(n, D), kind, labels)

    splits = _read_json(paths["splits.json"])
    if not isinstance(splits, dict) or set(splits) != set(SPLITS):
        raise DataError("splits.json must have exactly train/val/test keys", paths["splits.json"])
    owner = {}
    for split in SPLITS:
        if not isinstance(splits[split], list) or not all(isinstance(v, int) for v in splits[split]):
            raise DataError(f"{split} must be a list of integers", paths["splits.json"])
        for v in splits[split]:
            if v in owner:
                raise DataError(f"node {v} appears in both {owner[v]} and {split}", paths["splits.json"])
            owner[v] = split

    raw_sets = _read_json(paths["target_sets.json"])
    if not isinstance(raw_sets, list) or not raw_sets:
        raise DataError("target_sets.json must be a nonempty list", paths["target_sets.json"])
    groups, set_splits = [], []
    for k, entry in enumerate(raw_sets):
        if not isinstance(entry, dict) or "members" not in entry or "split" not in entry:
            raise DataError(f"entry {k} needs members and split", paths["target_sets.json"])
        members, split = entry["members"], entry["split"]
        if split not in SPLITS:
            raise DataError(f"entry {k} has unknown split {split!r}", paths["target_sets.json"])
        if not isinstance(members, list) or not members or not all(isinstance(v, int) for v in members):
            raise DataError(f"entry {k} members must be a nonempty integer list", paths["target_sets.json"])
        for v in members:
            if not 0 <= v < n:
                raise DataError(f"entry {k} member {v} out of range", paths["target_sets.json"])
            if labels[v] != 1:
                raise DataError(f"entry {k} member {v} is not a fraud", paths["target_sets.json"])
            if owner.get(v) != split:
                raise DataError(f"entry {k} member {v} is not in the {split} split", paths["target_sets.json"])
        groups.append(members)
        set_splits.append(split)

    target_sets = make_target_sets(graph, groups, set_splits, rho, xi)
    try:
        return DatasetBundle(graph, target_sets, splits["train"], splits["val"], splits["test"], rho, xi)
    except DataError as exc:
        raise DataError(str(exc), paths["splits.json"]) from None


def save_dataset(bundle: DatasetBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    g = bundle.graph
    meta = {"num_nodes": g.num_nodes, "attr_dim": g.attr_dim, "attribute_kind": g.attribute_kind}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    with open(directory / "edges.txt", "w", encoding="utf-8") as fh:
        fh.writelines(f"{u} {v}\n" for u, v in g.edges.tolist())
    with open(directory / "features.csv", "w", encoding="utf-8") as fh:
        for row in g.attributes:
            fh.write(",".join(repr(float(a)) for a in row) + "\n")
    with open(directory / "labels.csv", "w", encoding="utf-8") as fh:
        fh.writelines(f"{v},{y}\n" for v, y in enumerate(g.labels.tolist()) if y >= 0)
    sets = [{"members": list(t.members), "split": t.split} for t in bundle.target_sets]
    (directory / "target_sets.json").write_text(json.dumps(sets) + "\n", encoding="utf-8")
    splits = {s: bundle.split_nodes(s).tolist() for s in SPLITS}
    (directory / "splits.json").write_text(json.dumps(splits) + "\n", encoding="utf-8")
    return directory


# ---------------------------------------------------------------------------
# Injection files
# ---------------------------------------------------------------------------

def _endpoint(value, num_attack: int, path, k):
    if isinstance(value, bool):
        raise DataError(f"edge {k}: invalid endpoint {value!r}", path)
    if isinstance(value, int):
        if value < 0:
            raise DataError(f"edge {k}: negative node index", path)
        return ("o", value)
    if isinstance(value, str) and value.startswith("a") and value[1:].isdigit():
        i = int(value[1:])
        if i >= num_attack:
            raise DataError(f"edge {k}: attack index {i} >= {num_attack}", path)
        return ("a", i)
    raise DataError(f"edge {k}: invalid endpoint {value!r}", path)


def plan_to_dict(plan: InjectionPlan) -> dict:
    edges = [[f"a{i}", v] for i, v in plan.original_edges]
    edges += [[f"a{i}", f"a{j}"] for i, j in plan.attack_edges]
    return {
        "num_attack_nodes": plan.num_attack_nodes,
        "attributes": [[float(a) for a in row] for row in plan.attributes],
        "edges": edges,
    }


def plan_from_dict(obj, path=None) -> InjectionPlan:
    if not isinstance(obj, dict) or not {"num_attack_nodes", "attributes", "edges"} <= set(obj):
        raise DataError("injection must have num_attack_nodes, attributes and edges", path)
    delta = obj["num_attack_nodes"]
    if not isinstance(delta, int) or isinstance(delta, bool) or delta < 1:
        raise DataError("num_attack_nodes must be a positive integer", path)
    attrs = obj["attributes"]
    if not isinstance(attrs, list) or len(attrs) != delta:
        raise DataError(f"expected {delta} attribute rows", path)
    try:
        x = np.asarray(attrs, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError("attribute rows must be equal-length numeric lists", path) from None
    if x.ndim != 2:
        raise DataError("attribute rows must be equal-length numeric lists", path)
    to_orig, between = [], []
    if not isinstance(obj["edges"], list):
        raise DataError("edges must be a list", path)
    for k, pair in enumerate(obj["edges"]):
        if not isinstance(pair, list) or len(pair) != 2:
            raise DataError(f"edge {k} must be a pair", path)
        a, b = (_endpoint(p, delta, path, k) for p in pair)
        if a[0] == "o" and b[0] == "o":
            raise DataError(f"edge {k} has no attack endpoint", path)
        if a[0] == "a" and b[0] == "a":
            if a[1] == b[1]:
                raise DataError(f"edge {k} is a self-loop", path)
            between.append((a[1], b[1]))
        else:
            i, v = (a[1], b[1]) if a[0] == "a" else (b[1], a[1])
            to_orig.append((i, v))
    plan = InjectionPlan(x, to_orig, between)
    if len(set(plan.original_edges)) != len(plan.original_edges) or len(set(plan.attack_edges)) != len(plan.attack_edges):
        raise DataError("duplicate edge", path)
    return plan


def save_injection(plan: InjectionPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_dict(plan), indent=1) + "\n", encoding="utf-8")


def load_injection(path: str | Path) -> InjectionPlan:
    path = Path(path)
    if not path.is_file():
        raise DataError("injection file not found", path)
    return plan_from_dict(_read_json(path), path)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def _split_sizes(total: int, p: float) -> dict[str, int]:
    n_train = int(math.floor(p * total + 0.5))
    rest = total - n_train
    n_val = int(math.floor(rest / 3 + 0.5))
    return {"train": n_train, "val": n_val, "test": rest - n_val}


def split_dataset(
    graph: AttributedGraph,
    gang_assignment: Sequence[Sequence[int]],
    p: float,
    seed: int,
    rho: float = DEFAULT_RHO,
    xi: float = DEFAULT_XI,
) -> DatasetBundle:
    """Partition labeled nodes into train/val/test with fractions p, (1-p)/3, 2(1-p)/3.

    Whole gangs are placed first so no gang straddles two splits; the remaining
    frauds and benign nodes then fill each split, keeping the fraud ratio close
    to uniform across splits.
    """
    if not 0 < p < 1:
        raise ConfigError(f"p must be in (0, 1), got {p}")
    if graph.labels is None:
        raise ConfigError("graph must be labeled")
    rng = np.random.default_rng(seed)
    labeled = np.flatnonzero(graph.labels >= 0)
    sizes = _split_sizes(len(labeled), p)
    fractions = {s: sizes[s] / len(labeled) for s in SPLITS}

    gangs = [sorted(set(int(v) for v in g)) for g in gang_assignment]
    in_gang = set()
    for g in gangs:
        if not g:
            raise ConfigError("gangs must be nonempty")
        for v in g:
            if graph.labels[v] != 1:
                raise ConfigError(f"gang member {v} is not a fraud")
            if v in in_gang:
                raise ConfigError(f"node {v} belongs to two gangs")
            in_gang.add(v)

    assigned: dict[str, list[int]] = {s: [] for s in SPLITS}
    gang_split = [None] * len(gangs)
    gang_total = sum(len(g) for g in gangs)
    for k in rng.permutation(len(gangs)):
        g = gangs[k]
        # place each gang where its gang-node share lags the target fraction most
        fits = [s for s in SPLITS if len(assigned[s]) + len(g) <= sizes[s]]
        if not fits:
            raise ConfigError("gangs do not fit into the requested split sizes")
        split = min(fits, key=lambda s: (len(assigned[s]) - fractions[s] * gang_total) / max(fractions[s], 1e-12))
        assigned[split].extend(g)
        gang_split[k] = split

    lone_fraud = [v for v in labeled.tolist() if graph.labels[v] == 1 and v not in in_gang]
    benign = [v for v in labeled.tolist() if graph.labels[v] == 0]
    total_fraud = gang_total + len(lone_fraud)
    lone_fraud = rng.permutation(np.asarray(lone_fraud, dtype=np.int64)).tolist()
    benign = rng.permutation(np.asarray(benign, dtype=np.int64)).tolist()

    for split in SPLITS:
        want = int(math.floor(fractions[split] * total_fraud + 0.5)) - len(assigned[split])
        room = sizes[split] - len(assigned[split])
        take = max(0, min(want, room, len(lone_fraud)))
        assigned[split].extend(lone_fraud[:take])
        lone_fraud = lone_fraud[take:]
    pool = lone_fraud + benign
    for split in SPLITS:
        room = sizes[split] - len(assigned[split])
        assigned[split].extend(pool[:room])
        pool = pool[room:]
    assert not pool

    target_sets = make_target_sets(graph, gangs, gang_split, rho, xi)
    return DatasetBundle(graph, target_sets, assigned["train"], assigned["val"], assigned["test"], rho, xi)


# ---------------------------------------------------------------------------
# Synthetic fraud-gang graphs
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    num_nodes: int = 2000
    fraud_fraction: float = 0.1
    num_gangs: int = 40
    gang_size_range: tuple[int, int] = (3, 8)
    intra_gang_edge_prob: float = 0.8
    camouflage_edge_prob: float = 0.002
    background_edge_prob: float = 0.004
    attr_dim: int = 16
    attribute_kind: str = CONTINUOUS
    class_separation: float = 3.0
    seed: int = 7

    def __post_init__(self):
        self.gang_size_range = tuple(int(s) for s in self.gang_size_range)
        self.validate()

    def validate(self) -> None:
        for name in ("intra_gang_edge_prob", "camouflage_edge_prob", "background_edge_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if not 0 < self.fraud_fraction < 1:
            raise ConfigError("fraud_fraction must be in (0, 1)")
        lo, hi = self.gang_size_range
        if lo < 2 or hi < lo:
            raise ConfigError("gang sizes must satisfy 2 <= min <= max")
        if self.attr_dim < 2:
            raise ConfigError("attr_dim must be >= 2")
        if self.attribute_kind not in (CONTINUOUS, DISCRETE):
            raise ConfigError(f"unknown attribute_kind {self.attribute_kind!r}")
        if self.num_gangs < 1 or self.num_nodes < 2:
            raise ConfigError("need at least one gang and two nodes")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["gang_size_range"] = list(self.gang_size_range)
        return d


def _bernoulli_pairs(rng, rows: np.ndarray, cols: np.ndarray | None, prob: float) -> np.ndarray:
    """Sample each pair independently with ``prob``; within one set when cols is None."""
    if prob <= 0 or rows.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if cols is None:
        mask = np.triu(rng.random((rows.size, rows.size)) < prob, k=1)
        i, j = np.nonzero(mask)
        return np.stack([rows[i], rows[j]], axis=1)
    if cols.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    i, j = np.nonzero(rng.random((rows.size, cols.size)) < prob)
    return np.stack([rows[i], cols[j]], axis=1)


def generate_synthetic_fraud_graph(
    config: SynthConfig,
    p: float = DEFAULT_P,
    rho: float = DEFAULT_RHO,
    xi: float = DEFAULT_XI,
) -> DatasetBundle:
    """Planted fraud gangs in a sparse benign background.

    Benign nodes form an Erdos-Renyi background, gang members are densely
    linked to each other, and every fraud node gets camouflage edges to random
    benign nodes. Components are then joined into one by random bridging edges.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = config.num_nodes
    n_fraud = int(round(config.fraud_fraction * n))
    lo, hi = config.gang_size_range
    if lo * config.num_gangs > n_fraud:
        raise ConfigError(f"{config.num_gangs} gangs of size >= {lo} need more than the {n_fraud} fraud nodes")
    sizes = rng.integers(lo, hi + 1, size=config.num_gangs)
    # shrink random gangs until every gang fits into the fraud population
    while sizes.sum() > n_fraud:
        k = rng.choice(np.flatnonzero(sizes > lo))
        sizes[k] -= 1

    perm = rng.permutation(n)
    fraud = np.sort(perm[:n_fraud])
    benign = np.sort(perm[n_fraud:])
    labels = np.zeros(n, dtype=np.int64)
    labels[fraud] = 1
    shuffled_fraud = rng.permutation(fraud)
    gangs, start = [], 0
    for s in sizes.tolist():
        gangs.append(np.sort(shuffled_fraud[start:start + s]))
        start += s

    parts = [_bernoulli_pairs(rng, benign, None, config.background_edge_prob)]
    for g in gangs:
        parts.append(_bernoulli_pairs(rng, g, None, config.intra_gang_edge_prob))
    parts.append(_bernoulli_pairs(rng, fraud, benign, config.camouflage_edge_prob))
    edges = np.vstack(parts)
    edges = np.unique(np.sort(edges, axis=1), axis=0)

    # join components: link each non-giant component to a random node of the giant one
    adj = sp.coo_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])), shape=(n, n))
    n_comp, comp = connected_components(adj, directed=False)
    if n_comp > 1:
        counts = np.bincount(comp)
        giant = int(np.argmax(counts))
        giant_nodes = np.flatnonzero(comp == giant)
        bridges = []
        for c in range(n_comp):
            if c == giant:
                continue
            members = np.flatnonzero(comp == c)
            u = int(rng.choice(members))
            v = int(rng.choice(giant_nodes))
            bridges.append((min(u, v), max(u, v)))
        edges = np.unique(np.vstack([edges, np.asarray(bridges, dtype=np.int64)]), axis=0)

    D = config.attr_dim
    if config.attribute_kind == CONTINUOUS:
        direction = np.zeros(D)
        direction[: D // 2] = 1.0
        direction /= np.linalg.norm(direction)
        x = rng.standard_normal((n, D))
        x[fraud] += config.class_separation * direction
    else:
        base = np.full(D, 0.15)
        shift = np.zeros(D)
        shift[: D // 2] = 0.1 * config.class_separation
        shift[D // 2:] = -0.05 * config.class_separation
        fraud_profile = np.clip(base + shift, 0.01, 0.99)
        probs = np.where(labels[:, None] == 1, fraud_profile[None, :], base[None, :])
        x = (rng.random((n, D)) < probs).astype(np.float64)
        empty = x.sum(axis=1) == 0
        x[empty, rng.integers(0, D, size=int(empty.sum()))] = 1.0

    graph = AttributedGraph(n, edges, x, config.attribute_kind, labels)
    return split_dataset(graph, gangs, p, config.seed, rho, xi)
