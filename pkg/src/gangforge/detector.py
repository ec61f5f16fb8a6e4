"""GCN / GraphSAGE fraud detectors used as surrogate and victim models."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import f1_score

from .graph import AttributedGraph, ConfigError, GraphError

logger = logging.getLogger(__name__)

DETECTOR_MAGIC = b"GFDET1"
ARCHITECTURES = ("gcn", "sage")


class TrainingError(RuntimeError):
    pass


@dataclass
class DetectorConfig:
    architecture: str = "gcn"
    num_layers: int = 2
    hidden_dim: int = 64
    head_layers: int = 2
    learning_rate: float = 0.01
    weight_decay: float = 1e-3
    max_epochs: int = 1000
    validate_every: int = 10
    patience: int = 100
    class_weighting: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}, got {self.architecture!r}")
        for name in ("num_layers", "hidden_dim", "head_layers", "validate_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.max_epochs < 0 or self.patience < 0:
            raise ConfigError("max_epochs and patience must be non-negative")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")


@dataclass
class GraphTensors:
    """Tensor view of a graph: features plus a symmetric, weighted edge list."""

    x: torch.Tensor
    edge_index: torch.Tensor  # (2, 2E), both directions
    edge_weight: torch.Tensor

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_graph(cls, graph: AttributedGraph, dtype=torch.float32) -> "GraphTensors":
        e = torch.as_tensor(np.array(graph.edges), dtype=torch.long).reshape(-1, 2)
        edge_index = torch.cat([e.t(), e.flip(1).t()], dim=1)
        return cls(
            torch.as_tensor(np.array(graph.attributes), dtype=dtype),
            edge_index,
            torch.ones(edge_index.shape[1], dtype=dtype),
        )

    def extend(self, new_x: torch.Tensor, pairs: torch.Tensor, weights: torch.Tensor) -> "GraphTensors":
        """Append nodes ``new_x`` and undirected weighted edges ``pairs`` (P, 2)."""
        pairs = pairs.reshape(-1, 2)
        extra = torch.cat([pairs.t(), pairs.flip(1).t()], dim=1)
        return GraphTensors(
            torch.cat([self.x, new_x.to(self.x.dtype)], dim=0),
            torch.cat([self.edge_index, extra], dim=1),
            torch.cat([self.edge_weight, weights, weights]),
        )


class GCNLayer(nn.Module):
    """Symmetric-normalized graph convolution with self-loops and edge weights."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)

    def forward(self, h, edge_index, edge_weight):
        n = h.shape[0]
        src, dst = edge_index
        deg = torch.ones(n, dtype=h.dtype).index_add(0, dst, edge_weight)
        inv_sqrt = deg.rsqrt()
        hw = h @ self.linear.weight.t()
        norm = (edge_weight * inv_sqrt[src] * inv_sqrt[dst]).unsqueeze(1)
        out = (hw / deg.unsqueeze(1)).index_add(0, dst, norm * hw[src])
        return out + self.linear.bias


class SAGELayer(nn.Module):
    """GraphSAGE layer with a (weighted) mean aggregator."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.self_linear = nn.Linear(in_dim, out_dim)
        self.neigh_linear = nn.Linear(in_dim, out_dim, bias=False)

    def forward(self, h, edge_index, edge_weight):
        n = h.shape[0]
        src, dst = edge_index
        total = torch.zeros(n, dtype=h.dtype).index_add(0, dst, edge_weight)
        agg = torch.zeros(n, h.shape[1], dtype=h.dtype).index_add(0, dst, edge_weight.unsqueeze(1) * h[src])
        mean = agg / total.clamp_min(1.0).unsqueeze(1)
        return self.self_linear(h) + self.neigh_linear(mean)


class DetectorModel(nn.Module):
    """Message-passing encoder followed by an MLP head producing 2-class scores."""

    def __init__(self, in_dim: int, config: DetectorConfig):
        super().__init__()
        self.config = config
        self.in_dim = in_dim
        layer_cls = GCNLayer if config.architecture == "gcn" else SAGELayer
        dims = [in_dim] + [config.hidden_dim] * config.num_layers
        self.encoder = nn.ModuleList(layer_cls(a, b) for a, b in zip(dims[:-1], dims[1:]))
        head = []
        for _ in range(config.head_layers - 1):
            head += [nn.Linear(config.hidden_dim, config.hidden_dim), nn.ReLU()]
        head.append(nn.Linear(config.hidden_dim, 2))
        self.head = nn.Sequential(*head)
        self.training_log: list[dict] = []

    def encode(self, gt: GraphTensors) -> torch.Tensor:
        if gt.x.shape[1] != self.in_dim:
            raise GraphError(f"attribute dimension {gt.x.shape[1]} does not match detector input {self.in_dim}")
        h = gt.x
        for layer in self.encoder:
            h = F.relu(layer(h, gt.edge_index, gt.edge_weight))
        return h

    def forward(self, gt: GraphTensors) -> torch.Tensor:
        return self.head(self.encode(gt))

    def freeze(self) -> "DetectorModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def _as_index(graph: AttributedGraph, nodes) -> torch.Tensor:
    nodes = np.asarray(list(nodes) if not isinstance(nodes, np.ndarray) else nodes, dtype=np.int64)
    if nodes.size and (nodes.min() < 0 or nodes.max() >= graph.num_nodes):
        raise GraphError("node index out of range")
    return torch.as_tensor(nodes, dtype=torch.long)


def _model_dtype(model: nn.Module):
    return next(model.parameters()).dtype


@torch.no_grad()
def predict_scores(model: DetectorModel, graph: AttributedGraph, nodes) -> np.ndarray:
    """Raw 2-class scores for ``nodes``; the predicted label is the argmax."""
    idx = _as_index(graph, nodes)
    gt = GraphTensors.from_graph(graph, _model_dtype(model))
    return model(gt)[idx].cpu().numpy()


@torch.no_grad()
def encode_nodes(model: DetectorModel, graph: AttributedGraph, nodes) -> np.ndarray:
    idx = _as_index(graph, nodes)
    gt = GraphTensors.from_graph(graph, _model_dtype(model))
    return model.encode(gt)[idx].cpu().numpy()


def predict_labels(scores: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, so ties go to class 0 (benign)
    return np.argmax(scores, axis=1)


def class_weights(labels: np.ndarray) -> np.ndarray:
    counts = np.bincount(labels, minlength=2).astype(np.float64)
    return len(labels) / (2.0 * counts)


def macro_f1(y_true, y_pred) -> float:
    return float(f1_score(y_true, y_pred, average="macro", labels=[0, 1], zero_division=0))


def build_detector(in_dim: int, config: DetectorConfig) -> DetectorModel:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        return DetectorModel(in_dim, config)


def training_loss(model, gt, train_idx, train_y, weights):
    out = model(gt)[train_idx]
    return F.cross_entropy(out, train_y, weight=weights)


def train_detector(bundle, config: DetectorConfig) -> DetectorModel:
    """Full-batch training with weighted cross entropy and early stopping on validation macro-F1."""
    graph = bundle.graph
    y = graph.labels
    train_idx = bundle.train_nodes
    val_idx = bundle.val_nodes
    if len(np.unique(y[train_idx])) < 2:
        raise TrainingError("training split must contain both classes")
    model = build_detector(graph.attr_dim, config)
    if config.max_epochs == 0:
        return model

    gt = GraphTensors.from_graph(graph)
    weights = torch.as_tensor(
        class_weights(y[train_idx]) if config.class_weighting else np.ones(2), dtype=torch.float32
    )
    tr = torch.as_tensor(train_idx)
    tr_y = torch.as_tensor(y[train_idx])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay)

    best_f1, best_state, best_epoch = -1.0, copy.deepcopy(model.state_dict()), 0
    log = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(1, config.max_epochs + 1):
            model.train()
            optimizer.zero_grad()
            loss = training_loss(model, gt, tr, tr_y, weights)
            loss.backward()
            optimizer.step()
            if epoch % config.validate_every and epoch != config.max_epochs:
                continue
            model.eval()
            with torch.no_grad():
                pred = model(gt).argmax(dim=1).numpy()
            val_f1 = macro_f1(y[val_idx], pred[val_idx])
            log.append({"epoch": epoch, "train_loss": loss.item(), "val_macro_f1": val_f1})
            if val_f1 > best_f1:
                best_f1, best_epoch = val_f1, epoch
                best_state = copy.deepcopy(model.state_dict())
            elif epoch - best_epoch >= config.patience:
                logger.info("early stop at epoch %d (best %d, f1=%.4f)", epoch, best_epoch, best_f1)
                break
    model.load_state_dict(best_state)
    model.eval()
    model.training_log = log
    return model


# ---------------------------------------------------------------------------
# Checkpoints: magic line, JSON header line, then raw little-endian arrays
# ---------------------------------------------------------------------------

def pack_arrays(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        raw = a.astype(a.dtype.newbyteorder("<")).tobytes()
        entries.append({"name": name, "dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode("utf-8")
    return magic + b"\n" + header + b"\n" + b"".join(blobs)


def unpack_arrays(data: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    first, _, rest = data.partition(b"\n")
    if first != magic:
        raise ValueError(f"not a {magic.decode()} file (found header {first[:16]!r})")
    header, _, body = rest.partition(b"\n")
    info = json.loads(header)
    arrays = {}
    for e in info["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"]).newbyteorder("<")).reshape(e["shape"]).copy()
    return info["meta"], arrays


def state_to_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_detector(model: DetectorModel, path: str | Path) -> str:
    """Write a checkpoint and return its sha256 content hash."""
    meta = {"config": asdict(model.config), "in_dim": model.in_dim, "training_log": model.training_log}
    data = pack_arrays(DETECTOR_MAGIC, meta, state_to_arrays(model))
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_detector(path: str | Path) -> DetectorModel:
    data = Path(path).read_bytes()
    meta, arrays = unpack_arrays(data, DETECTOR_MAGIC)
    model = DetectorModel(meta["in_dim"], DetectorConfig(**meta["config"]))
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    model.training_log = meta["training_log"]
    model.eval()
    return model


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
