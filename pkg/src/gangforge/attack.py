"""Multi-target one-time injection attack.

Pipeline per target set: pick candidate nodes from the targets' K-hop
neighborhood, encode targets / candidates / attack nodes as one sequence,
run a transformer over it, then generate attack attributes and all
adversarial edges at once. The loss is a hinge on the surrogate's scores.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ablation import AblationConfig, apply_ablation
from .detector import (
    DetectorModel,
    GraphTensors,
    file_sha256,
    load_detector,
    pack_arrays,
    state_to_arrays,
    unpack_arrays,
)
from .graph import (
    CONTINUOUS,
    DISCRETE,
    AttributedGraph,
    ConfigError,
    GraphStatistics,
    InjectionPlan,
    TargetSet,
    compute_statistics,
    k_hop_neighbors,
)
from .gumbel import annealed, gumbel_top_k, stable_topk_indices

logger = logging.getLogger(__name__)

ATTACK_MAGIC = b"GFATK1"


@dataclass
class AttackConfig:
    K: int = 2
    n_c: int = 128
    L: int = 6
    n_h: int = 4
    D_H: int = 64
    ffn_dim: int = 512
    dropout: float = 0.0
    mask_attack_nodes: bool = False
    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    epochs: int = 100
    patience: int = 10
    tau_start: float = 10.0
    tau_end: float = 0.01
    epsilon_start: float = 10.0
    epsilon_end: float = 0.01
    decay_rate: float = 0.63
    straight_through: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.D_H % self.n_h:
            raise ConfigError("D_H must be divisible by n_h")
        if self.tau_end <= 0 or self.tau_start <= 0:
            raise ConfigError("temperatures must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.K < 1 or self.n_c < 0 or self.L < 0 or self.epochs < 0 or self.patience < 0:
            raise ConfigError("K >= 1 and non-negative n_c, L, epochs, patience required")
        if not 0 < self.decay_rate <= 1:
            raise ConfigError("decay_rate must be in (0, 1]")

    def tau(self, epoch: int) -> float:
        return annealed(self.tau_start, self.tau_end, self.decay_rate, epoch)

    def epsilon(self, epoch: int) -> float:
        return annealed(self.epsilon_start, self.epsilon_end, self.decay_rate, epoch)


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def mlp(in_dim: int, hidden: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim))


class NodeEncoder(nn.Module):
    """Projects raw attributes, degree and surrogate representation into one vector."""

    def __init__(self, attr_dim: int, rep_dim: int, hidden: int):
        super().__init__()
        self.attr_proj = nn.Linear(attr_dim, hidden)
        self.degree_proj = nn.Linear(1, hidden)
        self.mlp = mlp(2 * hidden + rep_dim, hidden, hidden)

    def forward(self, x, degree, h, use_degree: bool = True):
        d = self.degree_proj(degree.unsqueeze(1))
        if not use_degree:
            d = torch.zeros_like(d)
        return self.mlp(F.relu(torch.cat([self.attr_proj(x), d, h], dim=1)))


class CandidateScorer(nn.Module):
    def __init__(self, attr_dim: int, rep_dim: int, hidden: int):
        super().__init__()
        self.attr_mlp = mlp(attr_dim, hidden, hidden)
        self.struct_mlp = mlp(2, hidden, hidden)
        self.out = mlp(2 * hidden + 2 * rep_dim, hidden, 1)

    def forward(self, x, degree, beta, h, h_targets):
        q = self.attr_mlp(x)
        m = self.struct_mlp(torch.stack([degree, beta], dim=1))
        ht = h_targets.expand(h.shape[0], -1)
        return self.out(F.relu(torch.cat([q, m, h, ht], dim=1))).squeeze(1)


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, z, blocked=None):
        M, dim = z.shape
        dh = dim // self.heads
        q, k, v = self.qkv(z).view(M, 3, self.heads, dh).permute(1, 2, 0, 3)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if blocked is not None:
            logits = logits.masked_fill(blocked, float("-inf"))
        attn = torch.softmax(logits, dim=-1)
        mixed = (self.dropout(attn) @ v).transpose(0, 1).reshape(M, dim)
        return self.out(mixed), attn


class EncoderLayer(nn.Module):
    """Post-norm transformer encoder layer."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float):
        super().__init__()
        self.attention = SelfAttention(dim, heads, dropout)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_dim), nn.ReLU(), nn.Dropout(dropout), nn.Linear(ffn_dim, dim))
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, z, blocked=None):
        a, attn = self.attention(z, blocked)
        z = self.norm1(z + self.dropout(a))
        z = self.norm2(z + self.dropout(self.ffn(z)))
        return z, attn


@dataclass
class EncodedSequence:
    target_block: torch.Tensor
    candidate_block: torch.Tensor
    attack_block: torch.Tensor
    layer: int = 0
    attention: list[torch.Tensor] = field(default_factory=list)

    @property
    def m(self) -> int:
        return self.target_block.shape[0]

    @property
    def alpha(self) -> int:
        return self.candidate_block.shape[0]

    @property
    def delta(self) -> int:
        return self.attack_block.shape[0]

    @property
    def M(self) -> int:
        return self.m + self.alpha + self.delta

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.target_block, self.candidate_block, self.attack_block], dim=0)

    def split(self, z: torch.Tensor, layer: int, attention=None) -> "EncodedSequence":
        m, a = self.m, self.alpha
        return EncodedSequence(z[:m], z[m:m + a], z[m + a:], layer, attention or [])


@dataclass
class GraphContext:
    """Per-graph tensors reused across target sets: features, degrees, surrogate encodings."""

    graph: AttributedGraph
    tensors: GraphTensors
    degrees: torch.Tensor
    representations: torch.Tensor

    @classmethod
    def build(cls, graph: AttributedGraph, surrogate: DetectorModel) -> "GraphContext":
        dtype = next(surrogate.parameters()).dtype
        gt = GraphTensors.from_graph(graph, dtype)
        with torch.no_grad():
            h = surrogate.encode(gt)
        return cls(graph, gt, torch.as_tensor(np.array(graph.degrees), dtype=dtype), h)


@dataclass
class CandidateSelection:
    nodes: list[int]
    weights: torch.Tensor
    scores: torch.Tensor | None = None


@dataclass
class EdgeSelection:
    """Relaxed edge weights over the Delta x M score matrix and the hard choice."""

    weights: torch.Tensor
    chosen: torch.Tensor
    scores: torch.Tensor


@dataclass
class AttackOutput:
    plan: InjectionPlan
    loss: torch.Tensor
    target_scores: torch.Tensor
    candidates: list[int]
    sequence: EncodedSequence
    edges: EdgeSelection


class AttackModel(nn.Module):
    """All learnable attack parameters; the surrogate is held frozen and unregistered."""

    def __init__(
        self,
        config: AttackConfig,
        surrogate: DetectorModel,
        ablation: AblationConfig | None = None,
    ):
        super().__init__()
        self.config = config
        D, H, R = surrogate.in_dim, config.D_H, surrogate.config.hidden_dim
        self.attr_dim = D
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            self.scorer = CandidateScorer(D, R, H)
            self.target_encoder = NodeEncoder(D, R, H)
            self.candidate_encoder = NodeEncoder(D, R, H)
            self.pos_target = nn.Parameter(0.1 * torch.randn(H))
            self.pos_candidate = nn.Parameter(0.1 * torch.randn(H))
            self.pos_attack = nn.Parameter(0.1 * torch.randn(H))
            self.layers = nn.ModuleList(
                EncoderLayer(H, config.n_h, config.ffn_dim, config.dropout) for _ in range(config.L)
            )
            self.attr_head = nn.Linear(H, D)
            self.edge_head = nn.Linear(H, H)
        # kept out of the module registry: never trained, never saved with the attack
        object.__setattr__(self, "surrogate", surrogate.freeze())
        self._context: GraphContext | None = None
        self.history: list[dict] = []
        apply_ablation(self, ablation or AblationConfig())

    def context(self, graph: AttributedGraph) -> GraphContext:
        if self._context is None or self._context.graph is not graph:
            self._context = GraphContext.build(graph, self.surrogate)
        return self._context

    def to_dtype(self, dtype) -> "AttackModel":
        self.to(dtype)
        self.surrogate.to(dtype)
        self._context = None
        return self


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

def _dtype(model: nn.Module):
    return model.attr_head.weight.dtype


def select_candidates(
    model: AttackModel,
    graph: AttributedGraph,
    targets: TargetSet,
    training: bool,
    tau: float = 1.0,
    epsilon: float = 0.0,
    generator: torch.Generator | None = None,
) -> CandidateSelection:
    """Pick at most n_c candidates from the targets' K-hop neighborhood."""
    ctx = model.context(graph)
    cfg, ab = model.config, model.ablation
    dtype = _dtype(model)
    if ab.no_candidates:
        return CandidateSelection([], torch.ones(0, dtype=dtype))
    neigh = np.asarray(sorted(k_hop_neighbors(graph, targets.members, cfg.K)), dtype=np.int64)
    if len(neigh) <= cfg.n_c:
        return CandidateSelection(neigh.tolist(), torch.ones(len(neigh), dtype=dtype))
    if ab.random_candidates:
        pick = torch.randperm(len(neigh), generator=generator)[: cfg.n_c].numpy()
        return CandidateSelection(sorted(neigh[pick].tolist()), torch.ones(cfg.n_c, dtype=dtype))

    idx = torch.as_tensor(neigh)
    members = torch.as_tensor(targets.members)
    adj = graph.adjacency
    beta = np.asarray(adj[neigh][:, list(targets.members)].astype(np.int64).sum(axis=1)).ravel()
    scores = model.scorer(
        ctx.tensors.x[idx],
        ctx.degrees[idx],
        torch.as_tensor(beta, dtype=dtype),
        ctx.representations[idx],
        ctx.representations[members].mean(dim=0, keepdim=True),
    )
    weights, top = gumbel_top_k(
        scores, cfg.n_c, tau, epsilon if training else 0.0, generator,
        straight_through=cfg.straight_through,
    )
    order = torch.sort(top).values
    return CandidateSelection(neigh[order.numpy()].tolist(), weights[order], scores)


def build_input_sequence(
    model: AttackModel,
    graph: AttributedGraph,
    targets: TargetSet,
    candidates: CandidateSelection | list[int],
    generator: torch.Generator | None = None,
) -> EncodedSequence:
    ctx = model.context(graph)
    dtype = _dtype(model)
    if not isinstance(candidates, CandidateSelection):
        candidates = CandidateSelection(list(candidates), torch.ones(len(candidates), dtype=dtype))
    use_degree = not model.ablation.no_degree
    t_idx = torch.as_tensor(targets.members)
    c_idx = torch.as_tensor(candidates.nodes, dtype=torch.long)

    def encode(encoder, idx):
        return encoder(ctx.tensors.x[idx], ctx.degrees[idx], ctx.representations[idx], use_degree)

    z_t = encode(model.target_encoder, t_idx) + model.pos_target
    if len(c_idx):
        z_c = encode(model.candidate_encoder, c_idx) * candidates.weights.unsqueeze(1) + model.pos_candidate
    else:
        z_c = torch.zeros(0, model.config.D_H, dtype=dtype)
    delta = targets.node_budget
    if delta == 1:
        z_a = torch.zeros(1, model.config.D_H, dtype=dtype)
    else:
        z_a = torch.randn(delta, model.config.D_H, generator=generator, dtype=dtype)
    return EncodedSequence(z_t, z_c, z_a + model.pos_attack, layer=0)


def attention_mask(seq: EncodedSequence, mask_attack_nodes: bool) -> torch.Tensor | None:
    """Boolean (M, M) mask; True blocks target/candidate rows from attending to attack columns."""
    if not mask_attack_nodes:
        return None
    blocked = torch.zeros(seq.M, seq.M, dtype=torch.bool)
    blocked[: seq.m + seq.alpha, seq.m + seq.alpha:] = True
    return blocked


def run_structure_encoder(model: AttackModel, seq: EncodedSequence) -> EncodedSequence:
    if seq.layer != 0:
        raise ValueError("structure encoder expects a layer-0 sequence")
    blocked = attention_mask(seq, model.config.mask_attack_nodes)
    z = seq.stacked()
    maps = []
    for layer in model.layers:
        z, attn = layer(z, blocked)
        maps.append(attn)
    return seq.split(z, model.config.L, maps)


def attribute_probabilities(model: AttackModel, seq_L: EncodedSequence) -> torch.Tensor:
    return torch.sigmoid(model.attr_head(seq_L.attack_block))


def generate_attributes(
    model: AttackModel,
    seq_L: EncodedSequence,
    stats: GraphStatistics,
    kind: str,
    tau: float,
    epsilon: float,
    training: bool,
    generator: torch.Generator | None = None,
    graph: AttributedGraph | None = None,
) -> torch.Tensor:
    """Attack attribute matrix (Delta x D)."""
    dtype = _dtype(model)
    if model.ablation.random_attributes:
        return torch.as_tensor(copied_attributes(graph, seq_L.delta, generator), dtype=dtype)
    probs = attribute_probabilities(model, seq_L)
    if kind == CONTINUOUS:
        lo = torch.as_tensor(np.array(stats.attr_min), dtype=dtype)
        hi = torch.as_tensor(np.array(stats.attr_max), dtype=dtype)
        return probs * (hi - lo) + lo
    if kind != DISCRETE:
        raise ConfigError(f"unknown attribute kind {kind!r}")
    lam = min(stats.mean_nonzero_attrs, probs.shape[1])
    weights, _ = gumbel_top_k(
        probs, lam, tau, epsilon if training else 0.0, generator,
        straight_through=model.config.straight_through,
    )
    return weights


def copied_attributes(graph: AttributedGraph | None, delta: int, generator=None) -> np.ndarray:
    """Attribute rows of ``delta`` original nodes drawn uniformly with replacement."""
    if graph is None:
        raise ConfigError("random_attributes needs the original graph to copy rows from")
    rows = torch.randint(0, graph.num_nodes, (delta,), generator=generator).numpy()
    return graph.attributes[rows].copy()


def cosine_scores(model: AttackModel, seq_L: EncodedSequence) -> torch.Tensor:
    """Delta x M cosine similarities between attack rows and all rows of the projected sequence."""
    r = model.edge_head(seq_L.stacked())
    r_attack = r[seq_L.m + seq_L.alpha:]
    return F.normalize(r_attack, dim=1, eps=1e-12) @ F.normalize(r, dim=1, eps=1e-12).t()


def _allowed_mask(seq_L: EncodedSequence, fixed_budget: bool) -> torch.Tensor:
    delta, off = seq_L.delta, seq_L.m + seq_L.alpha
    allowed = torch.ones(delta, seq_L.M, dtype=torch.bool)
    block = torch.ones(delta, delta, dtype=torch.bool).triu(diagonal=1)
    # attack-attack pairs are kept in one orientation only (i < j); the diagonal is a self-loop
    allowed[:, off:] = torch.zeros_like(block) if fixed_budget else block
    return allowed


def _fixed_quota(eta: int, delta: int) -> list[int]:
    base, extra = divmod(eta, delta)
    return [base + (1 if i < extra else 0) for i in range(delta)]


def generate_edges(
    model: AttackModel,
    seq_L: EncodedSequence,
    targets: TargetSet,
    candidates: list[int],
    tau: float,
    epsilon: float,
    training: bool,
    generator: torch.Generator | None = None,
) -> EdgeSelection:
    """Choose all adversarial edges at once.

    Step 1 gives every attack node one edge to a target column; step 2 runs a
    single Gumbel-Top-k over the whole remaining score matrix with
    k = eta - delta, after masking self-pairs, the step-1 picks and the
    reverse orientation of attack-attack pairs.
    """
    delta, eta, m = targets.node_budget, targets.edge_budget, seq_L.m
    if eta < delta:
        raise ConfigError("edge budget below node budget")
    if seq_L.delta != delta:
        raise ValueError("sequence attack block does not match the node budget")
    ab, st = model.ablation, model.config.straight_through
    eps = epsilon if training else 0.0
    scores = cosine_scores(model, seq_L)
    if ab.random_edges:
        logits = torch.rand(scores.shape, generator=generator, dtype=scores.dtype)
        eps, st = 0.0, True
    else:
        logits = scores

    w1, first = gumbel_top_k(logits[:, :m], 1, tau, eps, generator, straight_through=st)
    weights = F.pad(w1, (0, seq_L.M - m))
    allowed = _allowed_mask(seq_L, ab.fixed_budget)
    allowed[torch.arange(delta), first.squeeze(1)] = False
    masked = logits.masked_fill(~allowed, float("-inf"))

    if ab.fixed_budget:
        for i, quota in enumerate(_fixed_quota(eta, delta)):
            k = min(quota - 1, int(allowed[i].sum()))
            if k > 0:
                w_row, _ = gumbel_top_k(masked[i], k, tau, eps, generator, straight_through=st)
                weights = weights + F.pad(w_row.unsqueeze(0), (0, 0, i, delta - i - 1))
    else:
        k = min(eta - delta, int(allowed.sum()))
        if k > 0:
            w2, _ = gumbel_top_k(masked.reshape(-1), k, tau, eps, generator, straight_through=st)
            weights = weights + w2.view(delta, seq_L.M)
    if ab.random_edges:
        weights = weights.detach()
    chosen = weights.detach().round() == 1 if st else _hard_from_soft(weights, first, allowed, eta, delta)
    return EdgeSelection(weights, chosen, scores)


def _hard_from_soft(weights, first, allowed, eta, delta):
    # in pure-soft mode the plan still uses the top entries of the relaxed weights
    chosen = torch.zeros_like(weights, dtype=torch.bool)
    chosen[torch.arange(delta), first.squeeze(1)] = True
    k = min(eta - delta, int(allowed.sum()))
    if k > 0:
        flat = weights.detach().masked_fill(~allowed, float("-inf")).reshape(-1)
        chosen.view(-1)[stable_topk_indices(flat, k)] = True
    return chosen


def attack_loss(scores: torch.Tensor) -> torch.Tensor:
    """Mean hinge max(fraud - benign, 0) over target rows of a (|T|, 2) score matrix."""
    if scores.ndim != 2 or scores.shape[0] == 0:
        raise ValueError("attack loss needs a nonempty (|T|, 2) score matrix")
    return torch.clamp(scores[:, 1] - scores[:, 0], min=0).mean()


def _edge_pairs(n: int, delta: int, columns: torch.Tensor, m_alpha: int) -> torch.Tensor:
    """Global endpoint pairs for every entry of the Delta x M weight matrix."""
    attack = torch.arange(n, n + delta).unsqueeze(1)
    cols = torch.cat([columns, torch.arange(n, n + delta)])
    a = attack.expand(delta, cols.numel())
    b = cols.unsqueeze(0).expand(delta, cols.numel())
    return torch.stack([a.reshape(-1), b.reshape(-1)], dim=1)


def plan_from_selection(
    attributes: torch.Tensor,
    chosen: torch.Tensor,
    column_nodes: list[int],
    kind: str,
) -> InjectionPlan:
    if isinstance(attributes, torch.Tensor):
        attributes = attributes.detach().cpu().numpy()
    x = np.asarray(attributes, dtype=np.float64)
    if kind == DISCRETE:
        x = np.rint(x)
    m_alpha = len(column_nodes)
    to_orig, between = [], []
    for i, j in torch.nonzero(chosen).tolist():
        if j < m_alpha:
            to_orig.append((i, column_nodes[j]))
        else:
            between.append((i, j - m_alpha))
    return InjectionPlan(x, to_orig, between)


def attack_forward(
    model: AttackModel,
    graph: AttributedGraph,
    targets: TargetSet,
    tau: float,
    epsilon: float,
    training: bool,
    generator: torch.Generator | None = None,
    stats: GraphStatistics | None = None,
) -> AttackOutput:
    """Run the whole pipeline and score the perturbed graph with the surrogate."""
    ctx = model.context(graph)
    if stats is None:
        stats = compute_statistics(graph, [targets])
    cand = select_candidates(model, graph, targets, training, tau, epsilon, generator)
    seq0 = build_input_sequence(model, graph, targets, cand, generator)
    seq_L = run_structure_encoder(model, seq0)
    if model.ablation.random_attributes:
        # keep the copied rows in full precision for the plan
        exact = copied_attributes(graph, seq_L.delta, generator)
        x_in = torch.as_tensor(exact, dtype=_dtype(model))
    else:
        exact = None
        x_in = generate_attributes(model, seq_L, stats, graph.attribute_kind, tau, epsilon, training, generator)
    edges = generate_edges(model, seq_L, targets, cand.nodes, tau, epsilon, training, generator)

    n, delta = graph.num_nodes, targets.node_budget
    column_nodes = list(targets.members) + cand.nodes
    pairs = _edge_pairs(n, delta, torch.as_tensor(column_nodes, dtype=torch.long), len(column_nodes))
    keep = torch.ones(delta, seq_L.M, dtype=torch.bool)
    keep[:, len(column_nodes):] = torch.ones(delta, delta, dtype=torch.bool).triu(diagonal=1)
    flat_keep = keep.reshape(-1)
    perturbed = ctx.tensors.extend(x_in, pairs[flat_keep], edges.weights.reshape(-1)[flat_keep])
    scores = model.surrogate(perturbed)[torch.as_tensor(targets.members)]
    loss = attack_loss(scores)
    plan = plan_from_selection(x_in if exact is None else exact, edges.chosen, column_nodes, graph.attribute_kind)
    return AttackOutput(plan, loss, scores, cand.nodes, seq_L, edges)


def inference_generator(model: AttackModel, targets: TargetSet) -> torch.Generator:
    return torch.Generator().manual_seed(model.config.seed * 1_000_003 + targets.set_id)


@torch.no_grad()
def run_attack(model: AttackModel, graph: AttributedGraph, targets: TargetSet,
               stats: GraphStatistics | None = None) -> InjectionPlan:
    """Deterministic inference pass (no exploration noise, hard selections)."""
    was_training = model.training
    model.eval()
    try:
        tau = model.config.tau_end
        out = attack_forward(model, graph, targets, tau, 0.0, False, inference_generator(model, targets), stats)
    finally:
        model.train(was_training)
    return out.plan


@torch.no_grad()
def evaluate_loss(model: AttackModel, graph, target_sets, tau: float, stats=None) -> float:
    model.eval()
    losses = [
        float(attack_forward(model, graph, t, tau, 0.0, False, inference_generator(model, t), stats).loss)
        for t in target_sets
    ]
    return float(np.mean(losses))


def train_attack(model: AttackModel, bundle, config: AttackConfig | None = None) -> AttackModel:
    """Train on the bundle's training target sets with annealed tau/epsilon and early stopping."""
    config = config or model.config
    graph = bundle.graph
    train_sets = bundle.sets_in("train")
    if not train_sets:
        raise ConfigError("no training target sets")
    val_sets = bundle.sets_in("val") or train_sets
    stats = compute_statistics(graph, bundle.target_sets)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    generator = torch.Generator().manual_seed(config.seed)
    order_rng = np.random.default_rng(config.seed)

    best_loss, best_state, bad = math.inf, copy.deepcopy(model.state_dict()), 0
    history = []
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        for epoch in range(config.epochs):
            tau, eps = config.tau(epoch), config.epsilon(epoch)
            model.train()
            train_losses = []
            for k in order_rng.permutation(len(train_sets)):
                optimizer.zero_grad()
                out = attack_forward(model, graph, train_sets[k], tau, eps, True, generator, stats)
                out.loss.backward()
                optimizer.step()
                train_losses.append(float(out.loss.detach()))
            val_loss = evaluate_loss(model, graph, val_sets, tau, stats)
            history.append({"epoch": epoch, "tau": tau, "epsilon": eps,
                            "train_loss": float(np.mean(train_losses)), "val_loss": val_loss})
            logger.info("epoch %d tau=%.4f train=%.4f val=%.4f", epoch, tau, history[-1]["train_loss"], val_loss)
            if val_loss <= best_loss:
                best_loss, bad = val_loss, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                bad += 1
                if bad > config.patience:
                    break
    model.load_state_dict(best_state)
    model.eval()
    model.history = history
    return model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_attack(model: AttackModel, path: str | Path, surrogate_path: str | Path) -> None:
    meta = {
        "config": asdict(model.config),
        "ablation": asdict(model.ablation),
        "history": model.history,
        "surrogate": {"path": str(surrogate_path), "sha256": file_sha256(surrogate_path)},
    }
    arrays = state_to_arrays(model)
    Path(path).write_bytes(pack_arrays(ATTACK_MAGIC, meta, arrays))


class CheckpointMismatch(RuntimeError):
    pass


def load_attack(path: str | Path, surrogate_path: str | Path | None = None) -> AttackModel:
    meta, arrays = unpack_arrays(Path(path).read_bytes(), ATTACK_MAGIC)
    ref = meta["surrogate"]
    surrogate_path = Path(surrogate_path or ref["path"])
    if not surrogate_path.is_file():
        raise FileNotFoundError(f"surrogate checkpoint {surrogate_path} not found")
    if file_sha256(surrogate_path) != ref["sha256"]:
        raise CheckpointMismatch(f"surrogate {surrogate_path} does not match the hash recorded in {path}")
    surrogate = load_detector(surrogate_path)
    model = AttackModel(AttackConfig(**meta["config"]), surrogate, AblationConfig(**meta["ablation"]))
    model.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    model.history = meta["history"]
    model.eval()
    return model
