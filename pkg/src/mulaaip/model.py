"""Full predictor, its two losses and the training loop.

Data flow for one antibody/antigen pair::

    structure graph --3 GAT stacks (residue/backbone/side-chain), summed--> readout -> g
    pooled PLM embedding --dropout, residual FC, FC--> relation-graph GCN -> h
    SMLP(g || h) per entity (shared weights) -> head MLP -> prediction

Relation graphs are dataset-level (one node per distinct antibody/antigen),
rebuilt from the current sequence pipeline once per epoch and treated as
constants inside a step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Parameter, Rng, Tensor, xavier_uniform
from .basis import BasisConfig
from .data import PairRecord
from .graphs import NUM_AA_CLASSES, StructuralGraph, build_relation_graph
from .layers import (LEAKY_SLOPE, GatBlock, Linear, NormAdaptiveGcn, gat_forward, gcn_forward,
                     normalized_adjacency)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class MissingModalityError(ValueError):
    pass


class EmptySplitError(ValueError):
    pass


@dataclass
class ModelConfig:
    task: str = "affinity"  # or "neutralization"
    plm_dim: int = 32
    hidden: int = 128
    aa_embed_dim: int = 64
    gat_layers: int = 2
    gcn_layers: int = 2
    norm_scale: float = 1.0
    dropout: float = 0.1
    knn_k: int = 32
    basis: BasisConfig = field(default_factory=BasisConfig)
    use_structure: bool = True
    use_sequence: bool = True
    use_smlp: bool = True
    use_backbone: bool = True
    use_side_chain: bool = True
    allow_missing_structure: bool = False

    def __post_init__(self):
        if self.task not in ("affinity", "neutralization"):
            raise ValueError(f"unknown task {self.task!r}")


@dataclass
class LossConfig:
    lam: float = 5e-4      # weight decay on weight matrices
    lam_ab: float = 5e-4   # L1 of the antibody relation adjacency
    lam_ag: float = 5e-4   # L1 of the antigen relation adjacency

    def __post_init__(self):
        if min(self.lam, self.lam_ab, self.lam_ag) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    epochs: int = 200
    batch_size: int = 32
    patience: int = 5
    loss: LossConfig = field(default_factory=LossConfig)


# -- dataset -------------------------------------------------------------------

@dataclass
class EntityTable:
    keys: list
    graphs: list                 # StructuralGraph or None
    pooled: dict[str, np.ndarray]  # chain role -> (n_entities, plm_dim)

    @property
    def n(self) -> int:
        return len(self.keys)


@dataclass
class PairData:
    records: list[PairRecord]
    ab: EntityTable
    ag: EntityTable
    ab_index: np.ndarray
    ag_index: np.ndarray
    labels: np.ndarray

    @property
    def ids(self) -> list[str]:
        return [r.pair_id for r in self.records]

    def positions(self, ids) -> np.ndarray:
        where = {pid: k for k, pid in enumerate(self.ids)}
        return np.array([where[i] for i in ids], dtype=np.int64)


def _pooled(store, seq: str, cfg: ModelConfig, what: str) -> np.ndarray:
    if store is not None and seq in store:
        return store.pooled(seq)
    if cfg.use_sequence:
        raise MissingModalityError(f"no embedding for {what} sequence {seq[:20]}...")
    return np.ones(cfg.plm_dim)


def build_pair_data(records: list[PairRecord], graphs: dict, embeddings, cfg: ModelConfig) -> PairData:
    """Group records into distinct antibody/antigen entities.

    ``graphs`` maps ``record.antibody_key`` / ``record.antigen_key`` to a
    :class:`StructuralGraph` (or ``None`` when unavailable). ``embeddings``
    maps a sequence string to its per-residue PLM matrix.
    """
    ab_keys, ag_keys = {}, {}
    for r in records:
        ab_keys.setdefault(r.antibody_key, r)
        ag_keys.setdefault(r.antigen_key, r)

    def graph_for(key, pid):
        g = graphs.get(key)
        if g is None and cfg.use_structure and not cfg.allow_missing_structure:
            raise MissingModalityError(f"pair {pid}: no structure for {key[0]} entity")
        return g

    ab_list = list(ab_keys)
    ag_list = list(ag_keys)
    heavy = np.stack([_pooled(embeddings, ab_keys[k].ab_heavy_seq, cfg, "heavy") for k in ab_list])
    light = np.stack([
        _pooled(embeddings, ab_keys[k].ab_light_seq, cfg, "light") if ab_keys[k].ab_light_seq
        else _pooled(embeddings, ab_keys[k].ab_heavy_seq, cfg, "heavy")
        for k in ab_list
    ])
    antigen = np.stack([_pooled(embeddings, ag_keys[k].ag_seq, cfg, "antigen") for k in ag_list])
    ab = EntityTable(ab_list, [graph_for(k, ab_keys[k].pair_id) for k in ab_list],
                     {"heavy": heavy, "light": light})
    ag = EntityTable(ag_list, [graph_for(k, ag_keys[k].pair_id) for k in ag_list], {"antigen": antigen})
    ab_pos = {k: i for i, k in enumerate(ab_list)}
    ag_pos = {k: i for i, k in enumerate(ag_list)}
    return PairData(
        records=list(records), ab=ab, ag=ag,
        ab_index=np.array([ab_pos[r.antibody_key] for r in records], dtype=np.int64),
        ag_index=np.array([ag_pos[r.antigen_key] for r in records], dtype=np.int64),
        labels=np.array([r.label for r in records], dtype=np.float64),
    )


# -- model ---------------------------------------------------------------------

class SequencePipeline:
    """Pooled embedding -> dropout -> residual FC -> FC."""

    def __init__(self, dim: int, hidden: int, rng: Rng, name: str):
        self.res = Linear(dim, dim, rng, f"{name}.res")
        self.fc = Linear(dim, hidden, rng, f"{name}.fc")

    def __call__(self, pooled, dropout: float, training: bool, rng) -> Tensor:
        x = ad.dropout(ad.as_tensor(pooled), dropout, rng, training)
        x = ad.add(x, ad.leaky_relu(self.res(x), LEAKY_SLOPE))
        return self.fc(x)

    def parameters(self):
        return self.res.parameters() + self.fc.parameters()


class MulaaipModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = Rng(seed)
        H, E, b = cfg.hidden, cfg.aa_embed_dim, cfg.basis
        self.aa_embed = Parameter(xavier_uniform((NUM_AA_CLASSES, E), rng.fork(1)), "aa_embed")

        def stack(name, in_dim, edge_dim, r):
            dims = [in_dim] + [H] * cfg.gat_layers
            return [GatBlock(a, o, edge_dim, r, f"{name}{k}") for k, (a, o) in enumerate(zip(dims[:-1], dims[1:]))]

        self.levels = {
            "residue": stack("gat_residue", E, b.tbf_dim + b.sbf_dim, rng.fork(2)),
            "backbone": stack("gat_backbone", E, 3 * b.sbf_dim, rng.fork(3)),
            "side": stack("gat_side", E + 8, b.rbf_dim, rng.fork(4)),
        }
        self.seq_ab = SequencePipeline(cfg.plm_dim, H, rng.fork(5), "seq_ab")
        self.seq_ag = SequencePipeline(cfg.plm_dim, H, rng.fork(6), "seq_ag")
        self.gcn_ab = NormAdaptiveGcn([H] * (cfg.gcn_layers + 1), rng.fork(7), "gcn_ab", cfg.norm_scale, cfg.dropout)
        self.gcn_ag = NormAdaptiveGcn([H] * (cfg.gcn_layers + 1), rng.fork(8), "gcn_ag", cfg.norm_scale, cfg.dropout)
        entity_dim = 3 * H + (1 if cfg.allow_missing_structure else 0)
        self.smlp = [Linear(entity_dim, H, rng.fork(9), "smlp0"), Linear(H, H, rng.fork(10), "smlp1")]
        fused = H if cfg.use_smlp else entity_dim
        self.head = [Linear(2 * fused, H, rng.fork(11), "head0"), Linear(H, 1, rng.fork(12), "head1")]
        self.label_mean = 0.0
        self.label_std = 1.0

    # parameters ---------------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        ps = [self.aa_embed]
        for name in ("residue", "backbone", "side"):
            for blk in self.levels[name]:
                ps += blk.parameters()
        ps += self.seq_ab.parameters() + self.seq_ag.parameters()
        ps += self.gcn_ab.parameters() + self.gcn_ag.parameters()
        for lin in self.smlp + self.head:
            ps += lin.parameters()
        return ps

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        out["buffer.label_mean"] = np.array(self.label_mean)
        out["buffer.label_std"] = np.array(self.label_std)
        return out

    def load_state_dict(self, state: dict) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"checkpoint lacks parameter {p.name!r}")
            if state[p.name].shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {state[p.name].shape} != {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)
        self.label_mean = float(state.get("buffer.label_mean", 0.0))
        self.label_std = float(state.get("buffer.label_std", 1.0))

    def weight_penalty(self) -> Tensor:
        terms = [ad.sum_(ad.square(p)) for p in self.parameters() if p.kind == "weight"]
        out = terms[0]
        for t in terms[1:]:
            out = ad.add(out, t)
        return out

    # branches ----------------------------------------------------------------

    def structural_embed(self, graphs: list, training: bool = False, rng=None) -> Tensor:
        """Graph-level vectors g, one row per entry of ``graphs`` (None -> zero row)."""
        H = self.cfg.hidden
        present = [k for k, g in enumerate(graphs) if g is not None]
        if not self.cfg.use_structure or not present:
            return ad.Tensor(np.zeros((len(graphs), H)))
        sel = [graphs[k] for k in present]
        sizes = np.array([g.n for g in sel])
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        node_graph = np.repeat(np.arange(len(sel)), sizes)
        node_class = np.concatenate([g.node_class for g in sel])
        side_feat = np.concatenate([g.side_chain_feat for g in sel])
        edges = np.concatenate([g.edges + off for g, off in zip(sel, offsets)]).reshape(-1, 2)

        v0 = ad.gather_rows(self.aa_embed, node_class)
        inputs = {
            "residue": (v0, np.concatenate([g.edge_feat_residue for g in sel])),
            "backbone": (v0, np.concatenate([g.edge_feat_backbone for g in sel])),
            "side": (ad.concat([v0, side_feat], axis=1), np.concatenate([g.edge_feat_side for g in sel])),
        }
        active = ["residue"]
        if self.cfg.use_backbone:
            active.append("backbone")
        if self.cfg.use_side_chain:
            active.append("side")
        total = None
        for name in active:
            v, efeat = inputs[name]
            blocks = self.levels[name]
            for k, blk in enumerate(blocks):
                v = gat_forward(blk, v, edges, efeat)
                if k < len(blocks) - 1:
                    v = ad.dropout(ad.leaky_relu(v, LEAKY_SLOPE), self.cfg.dropout, rng, training)
            total = v if total is None else ad.add(total, v)
        g = ad.segment_sum(total, node_graph, len(sel))
        if len(present) == len(graphs):
            return g
        # scatter present rows back into place; absent ones stay zero
        return ad.segment_sum(g, np.array(present), len(graphs))

    def sequence_embed(self, table: EntityTable, role: str, training: bool = False, rng=None) -> Tensor:
        pipe = self.seq_ag if role == "antigen" else self.seq_ab
        return pipe(table.pooled[role], self.cfg.dropout, training, rng)


# -- relation graphs -------------------------------------------------------------

@dataclass
class RelationState:
    graphs: dict       # role -> RelationGraph
    norm_adj: dict     # role -> normalised dense adjacency

    @property
    def l1_ab(self) -> float:
        return self.graphs["heavy"].l1() + self.graphs["light"].l1()

    @property
    def l1_ag(self) -> float:
        return self.graphs["antigen"].l1()


def _safe_rows(x: np.ndarray) -> np.ndarray:
    # a row that is exactly zero has no cosine; nudge it to a constant direction
    x = x.copy()
    zero = np.linalg.norm(x, axis=1) == 0
    x[zero] = 1.0
    return x


def refresh_relations(model: MulaaipModel, data: PairData) -> RelationState:
    """Rebuild the three relation graphs from the current sequence pipeline (eval mode)."""
    graphs, norm = {}, {}
    for role, table in (("heavy", data.ab), ("light", data.ab), ("antigen", data.ag)):
        emb = _safe_rows(model.sequence_embed(table, role).data)
        rg = build_relation_graph(list(zip(range(table.n), emb)), model.cfg.knn_k)
        graphs[role] = rg
        norm[role] = normalized_adjacency(rg.adjacency)
    return RelationState(graphs, norm)


# -- forward and losses --------------------------------------------------------------

def forward_pairs(model: MulaaipModel, data: PairData, rel: RelationState, pair_idx,
                  training: bool = False, rng=None) -> Tensor:
    """Raw head outputs for ``pair_idx`` (z-scored affinity or neutralization logit)."""
    cfg = model.cfg
    pair_idx = np.asarray(pair_idx, dtype=np.int64)
    ab_rows = data.ab_index[pair_idx]
    ag_rows = data.ag_index[pair_idx]
    ab_u, ab_inv = np.unique(ab_rows, return_inverse=True)
    ag_u, ag_inv = np.unique(ag_rows, return_inverse=True)

    g_ab = ad.gather_rows(model.structural_embed([data.ab.graphs[k] for k in ab_u], training, rng), ab_inv)
    g_ag = ad.gather_rows(model.structural_embed([data.ag.graphs[k] for k in ag_u], training, rng), ag_inv)

    H = cfg.hidden
    if cfg.use_sequence:
        heavy = gcn_forward(model.gcn_ab, rel.norm_adj["heavy"], model.sequence_embed(data.ab, "heavy", training, rng),
                            training, rng)
        light = gcn_forward(model.gcn_ab, rel.norm_adj["light"], model.sequence_embed(data.ab, "light", training, rng),
                            training, rng)
        agn = gcn_forward(model.gcn_ag, rel.norm_adj["antigen"],
                          model.sequence_embed(data.ag, "antigen", training, rng), training, rng)
        h_ab = ad.concat([ad.gather_rows(heavy, ab_rows), ad.gather_rows(light, ab_rows)], axis=1)
        ag_h = ad.gather_rows(agn, ag_rows)
        h_ag = ad.concat([ag_h, ag_h], axis=1)
    else:
        h_ab = ad.Tensor(np.zeros((len(pair_idx), 2 * H)))
        h_ag = ad.Tensor(np.zeros((len(pair_idx), 2 * H)))

    parts_ab, parts_ag = [g_ab, h_ab], [g_ag, h_ag]
    if cfg.allow_missing_structure:
        flag = lambda table, rows: np.array([[0.0 if table.graphs[k] is None or not cfg.use_structure else 1.0]
                                             for k in rows])
        parts_ab.append(flag(data.ab, ab_rows))
        parts_ag.append(flag(data.ag, ag_rows))
    z_ab = ad.concat(parts_ab, axis=1)
    z_ag = ad.concat(parts_ag, axis=1)
    if cfg.use_smlp:
        z_ab = _mlp(model.smlp, z_ab)
        z_ag = _mlp(model.smlp, z_ag)
    out = _mlp(model.head, ad.concat([z_ab, z_ag], axis=1))
    return ad.reshape(out, (-1,))


def _mlp(layers, x):
    for k, lin in enumerate(layers):
        x = lin(x)
        if k < len(layers) - 1:
            x = ad.leaky_relu(x, LEAKY_SLOPE)
    return x


def _check_len(preds, labels):
    if preds.shape[0] != len(labels) or len(labels) == 0:
        from .data import LengthMismatchError
        raise LengthMismatchError(f"{preds.shape[0]} predictions vs {len(labels)} labels")


def penalties(model: MulaaipModel, rel: RelationState, cfg: LossConfig) -> Tensor:
    reg = ad.mul(model.weight_penalty(), cfg.lam)
    return ad.add(reg, cfg.lam_ab * rel.l1_ab + cfg.lam_ag * rel.l1_ag)


def affinity_data_loss(preds, labels) -> Tensor:
    preds = ad.as_tensor(preds)
    _check_len(preds, labels)
    return ad.sum_(ad.square(ad.sub(np.asarray(labels, dtype=np.float64), preds)))


def neutralization_data_loss(probs, labels) -> Tensor:
    p = ad.clip(ad.as_tensor(probs), PROB_CLAMP, 1.0 - PROB_CLAMP)
    _check_len(p, labels)
    y = np.asarray(labels, dtype=np.float64)
    ll = ad.add(ad.mul(ad.log(p), y), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - y))
    return ad.mul(ad.sum_(ll), -1.0)


def loss_affinity(preds, labels, model: MulaaipModel, rel: RelationState, cfg: LossConfig) -> Tensor:
    """Sum of squared errors plus adjacency-L1 and weight-decay penalties."""
    return ad.add(affinity_data_loss(preds, labels), penalties(model, rel, cfg))


def loss_neutralization(probs, labels, model: MulaaipModel, rel: RelationState, cfg: LossConfig) -> Tensor:
    """Binary cross-entropy on clamped probabilities plus the same penalties."""
    return ad.add(neutralization_data_loss(probs, labels), penalties(model, rel, cfg))


def batch_loss(model, data, rel, idx, cfg: LossConfig, training=False, rng=None, with_penalty=True):
    raw = forward_pairs(model, data, rel, idx, training, rng)
    labels = data.labels[idx]
    if model.cfg.task == "affinity":
        y = (labels - model.label_mean) / model.label_std
        data_term = affinity_data_loss(raw, y)
    else:
        data_term = neutralization_data_loss(ad.sigmoid(raw), labels)
    return ad.add(data_term, penalties(model, rel, cfg)) if with_penalty else data_term


# -- inference and training -----------------------------------------------------------

def predict(model: MulaaipModel, data: PairData, rel: RelationState, idx, batch_size: int = 32) -> np.ndarray:
    """Predictions in label units (affinity) or probabilities (neutralization)."""
    idx = np.asarray(idx, dtype=np.int64)
    out = []
    for start in range(0, len(idx), batch_size):
        raw = forward_pairs(model, data, rel, idx[start:start + batch_size]).data
        if model.cfg.task == "affinity":
            out.append(raw * model.label_std + model.label_mean)
        else:
            out.append(1.0 / (1.0 + np.exp(-raw)))
    return np.concatenate(out) if out else np.zeros(0)


def mean_data_loss(model, data, rel, idx, batch_size: int = 32) -> float:
    idx = np.asarray(idx, dtype=np.int64)
    total = 0.0
    for start in range(0, len(idx), batch_size):
        total += float(batch_loss(model, data, rel, idx[start:start + batch_size], LossConfig(0, 0, 0),
                                  with_penalty=False).data)
    return total / len(idx)


@dataclass
class History:
    rows: list = field(default_factory=list)  # (epoch, train_loss, val_metric)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_metric"]
        lines += [f"{e},{t!r},{v!r}" for e, t, v in self.rows]
        return "\n".join(lines) + "\n"


def fit_label_scaler(model: MulaaipModel, labels: np.ndarray) -> None:
    if model.cfg.task == "affinity":
        model.label_mean = float(np.mean(labels))
        std = float(np.std(labels))
        model.label_std = std if std > 1e-12 else 1.0
    else:
        model.label_mean, model.label_std = 0.0, 1.0


def train(model: MulaaipModel, data: PairData, train_idx, val_idx, hp: TrainConfig, seed: int = 0):
    """Mini-batch Adam with early stopping on mean validation data loss.

    Returns ``(rel, history)``; the model is left holding the best-validation
    parameters and ``rel`` is the relation state built from them.
    """
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise EmptySplitError("train and validation splits must be non-empty")
    fit_label_scaler(model, data.labels[train_idx])
    rng = Rng(seed)
    shuffle_rng, drop_rng = rng.fork(1), rng.fork(2)
    params = model.parameters()
    opt = Adam(params, lr=hp.lr)
    rel = refresh_relations(model, data)
    hist = History()
    best, best_state, wait = math.inf, None, 0
    for epoch in range(hp.epochs):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        running = 0.0
        for start in range(0, len(order), hp.batch_size):
            batch = order[start:start + hp.batch_size]
            opt.zero_grad()
            loss = batch_loss(model, data, rel, batch, hp.loss, training=True, rng=drop_rng)
            ad.backward(loss)
            opt.step()
            running += float(loss.data)
        rel = refresh_relations(model, data)
        val = mean_data_loss(model, data, rel, val_idx, hp.batch_size)
        hist.rows.append((epoch, running / len(order), val))
        log.debug("epoch %d train %.5f val %.5f", epoch, running / len(order), val)
        if val < best:
            best, wait, hist.best_epoch = val, 0, epoch
            best_state = {k: np.array(v) for k, v in model.state_dict().items()}
        else:
            wait += 1
            if wait >= hp.patience:
                hist.stopped_early = True
                break
    model.load_state_dict(best_state)
    return refresh_relations(model, data), hist
