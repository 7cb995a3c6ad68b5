"""Programmatic proteins and a small labelled pair set for tests and demos."""
from __future__ import annotations

import os

import numpy as np

from .autodiff import Rng
from .data import PairRecord, format_manifest
from .geometry import CHI_ATOMS
from .graphs import AMINO_ACIDS, EmbeddingStore, write_embeddings
from .structure_io import Atom, ProteinStructure, Residue, format_pdb

ONE_LETTER = dict(zip(AMINO_ACIDS, "ARNDCQEGHILKMFPSTWYV"))


def _unit(v):
    return v / np.linalg.norm(v)


def random_protein(rng: Rng, n_residues: int = 16, chain_ids=("A",), id: str = "synthetic") -> ProteinStructure:
    """Self-avoiding-ish CA random walk with N, C and full chi side-chain atoms.

    Residues are split over ``chain_ids`` in contiguous blocks.
    """
    per_chain = np.array_split(np.arange(n_residues), len(chain_ids))
    chains, k = [], 0
    pos = rng.normal(0.0, 5.0, 3)
    direction = _unit(rng.normal(0.0, 1.0, 3))
    for cid, block in zip(chain_ids, per_chain):
        residues = []
        for local, _ in enumerate(block):
            direction = _unit(direction + 0.6 * rng.normal(0.0, 1.0, 3))
            pos = pos + 3.8 * direction
            name = AMINO_ACIDS[int(rng.random() * len(AMINO_ACIDS))]
            ca = pos.copy()
            n = ca + 1.46 * _unit(-direction + 0.5 * rng.normal(0.0, 1.0, 3))
            c = ca + 1.52 * _unit(direction + 0.5 * rng.normal(0.0, 1.0, 3))
            atoms = {"N": n, "CA": ca, "C": c}
            if name != "GLY":
                atoms["CB"] = ca + 1.53 * _unit(rng.normal(0.0, 1.0, 3))
            # each chi quad ends in one new atom bonded to the quad's third atom
            for quad in CHI_ATOMS.get(name, []):
                if quad[3] not in atoms:
                    atoms[quad[3]] = atoms[quad[2]] + 1.5 * _unit(rng.normal(0.0, 1.0, 3))
            atom_objs = tuple(Atom(a, np.round(p, 3), a[0]) for a, p in atoms.items())
            residues.append(Residue(k, name, atom_objs, np.round(ca, 3), cid, local + 1, ""))
            k += 1
        chains.append((cid, tuple(residues)))
    return ProteinStructure(id, tuple(chains))


def sequence_of(structure: ProteinStructure, chain_id: str | None = None) -> str:
    rs = structure.residues if chain_id is None else [r for c, rr in structure.chains if c == chain_id for r in rr]
    return "".join(ONE_LETTER.get(r.name, "X") for r in rs)


def _embedding(rng: Rng, length: int, mean: np.ndarray, noise: float) -> np.ndarray:
    rows = mean[None, :] + rng.normal(0.0, noise, (length, mean.size))
    # re-centre so the pooled vector is exactly ``mean`` plus a tiny jitter
    return rows - rows.mean(axis=0) + mean


def make_dataset(task: str = "affinity", n_pairs: int = 20, n_antigens: int = 4, seed: int = 0,
                 plm_dim: int = 32, n_residues: int = 14, out_dir=None):
    """Distinct antibodies (heavy+light chains) paired round-robin with a few antigens.

    Labels: affinity draws ΔG uniformly from [-13, -7] kcal/mol; neutralization
    alternates classes. Antibody embeddings are shifted along a fixed direction
    in proportion to the (standardised) label, so the set is linearly separable.

    Returns ``(records, structures, store)`` where ``structures`` maps pair-side
    keys (``record.antibody_key`` / ``record.antigen_key``) to structures. When
    ``out_dir`` is given, PDB files, ``manifest.csv`` and ``embeddings.plmb``
    are written there and the records carry real paths.
    """
    rng = Rng(seed)
    srng, erng, lrng = rng.fork(1), rng.fork(2), rng.fork(3)
    if task == "affinity":
        labels = np.round(lrng.uniform(-13.0, -7.0, n_pairs), 4)
        signal = (labels - labels.mean()) / labels.std()
    else:
        labels = np.array([k % 2 for k in range(n_pairs)], dtype=np.float64)
        signal = 2.0 * labels - 1.0
    direction = _unit(erng.normal(0.0, 1.0, plm_dim))
    offset = erng.normal(0.0, 1.0, plm_dim)
    offset -= (offset @ direction) * direction
    offset = 3.0 * _unit(offset)

    antigens = [random_protein(srng, n_residues, ("A",), f"ag{g}") for g in range(n_antigens)]
    store = EmbeddingStore()
    for ag in antigens:
        seq = sequence_of(ag)
        if seq not in store:
            store.add(seq, _embedding(erng, len(seq), erng.normal(0.0, 1.0, plm_dim), 0.3))

    records, structures = [], {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    for k in range(n_pairs):
        ab = random_protein(srng, n_residues, ("H", "L"), f"ab{k}")
        ag = antigens[k % n_antigens]
        heavy, light = sequence_of(ab, "H"), sequence_of(ab, "L")
        for seq in (heavy, light):
            if seq not in store:
                mean = offset + 1.5 * signal[k] * direction + 0.05 * erng.normal(0.0, 1.0, plm_dim)
                store.add(seq, _embedding(erng, len(seq), mean, 0.3))
        ab_path = ag_path = None
        if out_dir is not None:
            ab_path = os.path.join(out_dir, f"ab{k}.pdb")
            ag_path = os.path.join(out_dir, f"ag{k % n_antigens}.pdb")
            with open(ab_path, "w") as fh:
                fh.write(format_pdb(ab))
            if not os.path.exists(ag_path):
                with open(ag_path, "w") as fh:
                    fh.write(format_pdb(ag))
            ab_path, ag_path = os.path.basename(ab_path), os.path.basename(ag_path)
        rec = PairRecord(
            pair_id=f"p{k:02d}", ab_heavy_seq=heavy, ab_light_seq=light, ag_seq=sequence_of(ag),
            ab_structure_path=ab_path, ag_structure_path=ag_path, ab_chains=("H", "L"), ag_chains=("A",),
            label=float(labels[k]), label_kind="dG" if task == "affinity" else "neutralization",
        )
        records.append(rec)
        structures[rec.antibody_key] = ab
        structures[rec.antigen_key] = ag
    if out_dir is not None:
        with open(os.path.join(out_dir, "manifest.csv"), "w", encoding="utf-8") as fh:
            fh.write(format_manifest(records))
        with open(os.path.join(out_dir, "embeddings.plmb"), "wb") as fh:
            fh.write(write_embeddings(store))
    return records, structures, store
