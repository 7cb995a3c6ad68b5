"""Per-protein structural graphs and dataset-level relation graphs."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import geometry, kernels
from .basis import BasisConfig, encode_rbf, encode_sbf, encode_tbf
from .structure_io import ProteinStructure

AMINO_ACIDS = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
)
UNKNOWN_CLASS = len(AMINO_ACIDS)
NUM_AA_CLASSES = len(AMINO_ACIDS) + 1
_AA_INDEX = {name: k for k, name in enumerate(AMINO_ACIDS)}


class EmptyGraphError(ValueError):
    pass


class ZeroVectorError(ValueError):
    pass


class EmbeddingFormatError(ValueError):
    pass


class BadMagicError(EmbeddingFormatError):
    pass


class VersionMismatchError(EmbeddingFormatError):
    pass


class TruncatedRecordError(EmbeddingFormatError):
    pass


class DuplicateIdError(EmbeddingFormatError):
    pass


class DimMismatchError(EmbeddingFormatError):
    pass


def aa_class(name: str) -> int:
    return _AA_INDEX.get(name, UNKNOWN_CLASS)


@dataclass
class StructuralGraph:
    n: int
    node_class: np.ndarray        # (n,) int
    side_chain_feat: np.ndarray   # (n, 8)
    edges: np.ndarray             # (E, 2) rows (i, j): j is a neighbour of target i
    edge_feat_residue: np.ndarray   # (E, tbf_dim + sbf_dim)
    edge_feat_backbone: np.ndarray  # (E, 3 * sbf_dim)
    edge_feat_side: np.ndarray      # (E, rbf_dim)
    degenerate_frames: int = 0

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])

    def to_arrays(self) -> dict:
        return dict(
            n=np.array(self.n), node_class=self.node_class, side_chain_feat=self.side_chain_feat,
            edges=self.edges, edge_feat_residue=self.edge_feat_residue,
            edge_feat_backbone=self.edge_feat_backbone, edge_feat_side=self.edge_feat_side,
            degenerate_frames=np.array(self.degenerate_frames),
        )

    @classmethod
    def from_arrays(cls, arrs) -> "StructuralGraph":
        return cls(
            n=int(arrs["n"]), node_class=np.asarray(arrs["node_class"]),
            side_chain_feat=np.asarray(arrs["side_chain_feat"]), edges=np.asarray(arrs["edges"]),
            edge_feat_residue=np.asarray(arrs["edge_feat_residue"]),
            edge_feat_backbone=np.asarray(arrs["edge_feat_backbone"]),
            edge_feat_side=np.asarray(arrs["edge_feat_side"]),
            degenerate_frames=int(arrs["degenerate_frames"]),
        )


def radius_edges(anchors: np.ndarray, cutoff: float) -> np.ndarray:
    i, j = kernels.radius_pairs(anchors, cutoff)
    return np.stack([i, j], axis=1).reshape(-1, 2)


def build_structural_graph(structure: ProteinStructure, cfg: BasisConfig = BasisConfig()) -> StructuralGraph:
    residues = structure.residues
    if not residues:
        raise EmptyGraphError(f"{structure.id}: no residues")
    frames = geometry.structure_frames(structure)
    origins, rot, degenerate = geometry.frame_arrays(frames)
    edges = radius_edges(origins, cfg.cutoff)

    node_class = np.array([aa_class(r.name) for r in residues], dtype=np.int64)
    side = np.stack([geometry.torus_embed(geometry.side_chain_torsions(r)) for r in residues])

    if len(edges):
        g = geometry.edge_geometry(origins, rot, edges[:, 0], edges[:, 1])
        d = g["d"]
        feat_res = np.concatenate([encode_tbf(d, g["theta"], g["phi"], cfg), encode_sbf(d, g["tau"], cfg)], axis=1)
        feat_bb = np.concatenate([encode_sbf(d, g[k], cfg) for k in ("alpha", "beta", "gamma")], axis=1)
        feat_side = encode_rbf(d, cfg)
    else:
        feat_res = np.zeros((0, cfg.tbf_dim + cfg.sbf_dim))
        feat_bb = np.zeros((0, 3 * cfg.sbf_dim))
        feat_side = np.zeros((0, cfg.rbf_dim))
    return StructuralGraph(len(residues), node_class, side, edges, feat_res, feat_bb, feat_side,
                           int(degenerate.sum()))


# -- relation graph ------------------------------------------------------------

def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ZeroVectorError("cosine of a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise ZeroVectorError(f"zero embedding at row(s) {np.flatnonzero(norms == 0).tolist()}")
    unit = x / norms[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    sim = 0.5 * (sim + sim.T)
    np.fill_diagonal(sim, 1.0)
    return sim


@dataclass
class RelationGraph:
    node_ids: list
    node_emb: np.ndarray
    adjacency: np.ndarray  # dense (n, n), zeros where pruned
    knn_k: int

    @property
    def n(self) -> int:
        return len(self.node_ids)

    def l1(self) -> float:
        return float(np.abs(self.adjacency).sum())


def knn_mask(sim: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask keeping each row's k largest off-diagonal entries, symmetrised by union."""
    n = sim.shape[0]
    keep = np.eye(n, dtype=bool)
    if n > 1 and k > 0:
        off = sim.copy()
        np.fill_diagonal(off, -np.inf)
        kk = min(k, n - 1)
        order = np.argsort(-off, axis=1, kind="stable")[:, :kk]
        rows = np.repeat(np.arange(n), kk)
        keep[rows, order.ravel()] = True
    return keep | keep.T


def build_relation_graph(entities, knn_k: int = 32) -> RelationGraph:
    """Cosine-similarity graph over ``(id, embedding)`` pairs with kNN pruning."""
    if not entities:
        raise ValueError("relation graph needs at least one entity")
    ids = [e[0] for e in entities]
    emb = np.stack([np.asarray(e[1], dtype=np.float64) for e in entities])
    sim = cosine_matrix(emb)
    adj = np.where(knn_mask(sim, knn_k), sim, 0.0)
    return RelationGraph(ids, emb, adj, knn_k)


# -- embedding store -----------------------------------------------------------

EMB_MAGIC = b"PLMB"
EMB_VERSION = 1


class EmbeddingStore(dict):
    """Protein id -> (rows, dim) float matrix; dim is uniform."""

    @property
    def dim(self) -> int | None:
        for v in self.values():
            return int(v.shape[1])
        return None

    def add(self, key: str, matrix) -> None:
        m = np.asarray(matrix, dtype=np.float32)
        if m.ndim != 2 or m.shape[0] < 1:
            raise ValueError(f"{key!r}: embedding must be a non-empty 2-D matrix")
        if key in self:
            raise DuplicateIdError(f"duplicate embedding id {key!r}")
        if self.dim is not None and m.shape[1] != self.dim:
            raise DimMismatchError(f"{key!r}: dim {m.shape[1]} != {self.dim}")
        self[key] = m

    def pooled(self, key: str) -> np.ndarray:
        return self[key].astype(np.float64).mean(axis=0)


def read_embeddings(data: bytes) -> EmbeddingStore:
    buf = memoryview(data)
    if len(buf) < 12:
        raise TruncatedRecordError("header truncated")
    if bytes(buf[:4]) != EMB_MAGIC:
        raise BadMagicError("not a PLMB embedding file")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != EMB_VERSION:
        raise VersionMismatchError(f"unsupported embedding file version {version}")
    pos = 12
    store = EmbeddingStore()

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncatedRecordError(f"record {len(store)} truncated")
        out = buf[pos:pos + nbytes]
        pos += nbytes
        return out

    for _ in range(count):
        (id_len,) = struct.unpack("<I", take(4))
        key = bytes(take(id_len)).decode("utf-8")
        rows, dim = struct.unpack("<II", take(8))
        vals = np.frombuffer(take(4 * rows * dim), dtype="<f4").reshape(rows, dim)
        if key in store:
            raise DuplicateIdError(f"duplicate embedding id {key!r}")
        if store.dim is not None and dim != store.dim:
            raise DimMismatchError(f"{key!r}: dim {dim} != {store.dim}")
        if rows < 1:
            raise EmbeddingFormatError(f"{key!r}: zero rows")
        store[key] = vals.astype(np.float32)
    if pos != len(buf):
        raise EmbeddingFormatError(f"{len(buf) - pos} trailing bytes after last record")
    return store


def write_embeddings(store) -> bytes:
    out = io.BytesIO()
    out.write(EMB_MAGIC)
    out.write(struct.pack("<II", EMB_VERSION, len(store)))
    dim = None
    for key, mat in store.items():
        m = np.asarray(mat, dtype="<f4")
        if dim is not None and m.shape[1] != dim:
            raise DimMismatchError(f"{key!r}: dim {m.shape[1]} != {dim}")
        dim = m.shape[1]
        kb = key.encode("utf-8")
        out.write(struct.pack("<I", len(kb)))
        out.write(kb)
        out.write(struct.pack("<II", m.shape[0], m.shape[1]))
        out.write(np.ascontiguousarray(m).tobytes())
    return out.getvalue()


def load_embeddings(path) -> EmbeddingStore:
    with open(path, "rb") as fh:
        return read_embeddings(fh.read())
