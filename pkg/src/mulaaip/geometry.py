"""Residue-, backbone- and side-chain-level geometry in local residue frames.

Every quantity here is invariant under rigid motions of the whole protein:
edge tuples are expressed in the owning residue's N/CA/C frame and torsions
are dihedrals.

Conventions worth knowing:

* frame axes: ``x = unit(N - CA)``, ``z = unit(x x (C - CA))``, ``y = z x x``
  (right-handed).
* edge azimuth ``theta`` is measured in the local xy-plane and is 0 when the
  offset lies on the z-axis; ``phi`` is the angle from local +z.
* edge rotation ``tau`` is the dihedral N_i, CA_i, CA_j, N_j.
* Euler angles use the line ``n = z_i x z_j``; when z-axes are parallel
  ``n`` falls back to ``x_i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .structure_io import ProteinStructure, Residue

COLLINEAR_TOL = 1e-8
COINCIDENT_TOL = 1e-8


class DegenerateFrameError(ValueError):
    pass


class CoincidentAnchorsError(ValueError):
    pass


class DegenerateDihedralError(ValueError):
    pass


@dataclass(frozen=True)
class LocalFrame:
    origin: np.ndarray
    x_axis: np.ndarray
    y_axis: np.ndarray
    z_axis: np.ndarray
    degenerate: bool = False

    @property
    def rotation(self) -> np.ndarray:
        """3x3 matrix whose columns are the x, y, z axes."""
        return np.stack([self.x_axis, self.y_axis, self.z_axis], axis=1)


@dataclass(frozen=True)
class ResidueEdgeGeom:
    d: float
    theta: float
    phi: float
    tau: float


@dataclass(frozen=True)
class BackboneEdgeGeom:
    alpha: float
    beta: float
    gamma: float
    degenerate: bool = False


@dataclass(frozen=True)
class SideChainGeom:
    chi: np.ndarray
    mask: np.ndarray


_GLOBAL_AXES = np.eye(3)


def _frame_from_vectors(origin, x_raw, t_raw):
    nx = np.linalg.norm(x_raw)
    nt = np.linalg.norm(t_raw)
    if nx < COINCIDENT_TOL or nt < COINCIDENT_TOL:
        return None
    x = x_raw / nx
    z_raw = np.cross(x, t_raw / nt)
    nz = np.linalg.norm(z_raw)
    if nz < COLLINEAR_TOL:
        return None
    z = z_raw / nz
    y = np.cross(z, x)
    return LocalFrame(np.asarray(origin, dtype=np.float64), x, y / np.linalg.norm(y), z)


def build_frame(residue: Residue, next_anchor=None, strict: bool = False) -> LocalFrame:
    """Local frame centred on the residue anchor.

    Missing C falls back to the direction of ``next_anchor``. If no frame can
    be built, ``strict`` raises :class:`DegenerateFrameError`; otherwise the
    global axes are returned with ``degenerate=True``.
    """
    n = residue.atom("N")
    ca = residue.atom("CA")
    c = residue.atom("C")
    origin = residue.anchor
    frame = None
    if n is not None and ca is not None:
        if c is not None:
            frame = _frame_from_vectors(origin, n - ca, c - ca)
        elif next_anchor is not None:
            frame = _frame_from_vectors(origin, n - ca, np.asarray(next_anchor) - ca)
    if frame is None:
        if strict:
            raise DegenerateFrameError(f"residue {residue.index} ({residue.name}): cannot build frame")
        frame = LocalFrame(np.asarray(origin, dtype=np.float64), *_GLOBAL_AXES, degenerate=True)
    return frame


def structure_frames(structure: ProteinStructure) -> list[LocalFrame]:
    frames = []
    for _, residues in structure.chains:
        for k, r in enumerate(residues):
            nxt = residues[k + 1].anchor if k + 1 < len(residues) else None
            frames.append(build_frame(r, next_anchor=nxt))
    return frames


def dihedral(p1, p2, p3, p4) -> float:
    """Signed dihedral in [-pi, pi] (atan2 form)."""
    b1 = np.asarray(p2, float) - np.asarray(p1, float)
    b2 = np.asarray(p3, float) - np.asarray(p2, float)
    b3 = np.asarray(p4, float) - np.asarray(p3, float)
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    nb2 = np.linalg.norm(b2)
    if nb2 < COINCIDENT_TOL or np.linalg.norm(n1) < COLLINEAR_TOL * nb2 * np.linalg.norm(b1) \
            or np.linalg.norm(n2) < COLLINEAR_TOL * nb2 * np.linalg.norm(b3):
        raise DegenerateDihedralError("collinear points")
    y = nb2 * np.dot(b1, n2)
    x = np.dot(n1, n2)
    return float(np.arctan2(y, x))


def residue_edge_geom(frame_i: LocalFrame, anchor_j, frame_j: LocalFrame) -> ResidueEdgeGeom:
    offset = np.asarray(anchor_j, dtype=np.float64) - frame_i.origin
    local = frame_i.rotation.T @ offset
    d = float(np.linalg.norm(local))
    if d < COINCIDENT_TOL:
        raise CoincidentAnchorsError("anchors coincide")
    phi = float(np.arccos(np.clip(local[2] / d, -1.0, 1.0)))
    rho = np.hypot(local[0], local[1])
    theta = 0.0 if rho <= 1e-12 * d else float(np.arctan2(local[1], local[0]))
    try:
        tau = dihedral(frame_i.origin + frame_i.x_axis, frame_i.origin,
                       frame_j.origin, frame_j.origin + frame_j.x_axis)
    except DegenerateDihedralError:
        tau = 0.0
    return ResidueEdgeGeom(d, theta, phi, tau)


def _signed_angle(u, v, axis):
    return float(np.arctan2(np.dot(np.cross(u, v), axis), np.dot(u, v)))


def backbone_edge_geom(frame_i: LocalFrame, frame_j: LocalFrame) -> BackboneEdgeGeom:
    zi, zj = frame_i.z_axis, frame_j.z_axis
    n = np.cross(zi, zj)
    nn = np.linalg.norm(n)
    degenerate = nn < COLLINEAR_TOL
    n = frame_i.x_axis if degenerate else n / nn
    alpha = _signed_angle(frame_i.x_axis, n, zi)
    beta = float(np.arccos(np.clip(np.dot(zi, zj), -1.0, 1.0)))
    gamma = _signed_angle(n, frame_j.x_axis, zj)
    return BackboneEdgeGeom(alpha, beta, gamma, bool(degenerate))


# standard chi-defining atom quadruples
CHI_ATOMS: dict[str, list[tuple[str, str, str, str]]] = {
    "ARG": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "NE"), ("CG", "CD", "NE", "CZ")],
    "ASN": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "OD1")],
    "ASP": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "OD1")],
    "CYS": [("N", "CA", "CB", "SG")],
    "GLN": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "OE1")],
    "GLU": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "OE1")],
    "HIS": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "ND1")],
    "ILE": [("N", "CA", "CB", "CG1"), ("CA", "CB", "CG1", "CD1")],
    "LEU": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    "LYS": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD"), ("CB", "CG", "CD", "CE"), ("CG", "CD", "CE", "NZ")],
    "MET": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "SD"), ("CB", "CG", "SD", "CE")],
    "PHE": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    "PRO": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD")],
    "SER": [("N", "CA", "CB", "OG")],
    "THR": [("N", "CA", "CB", "OG1")],
    "TRP": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    "TYR": [("N", "CA", "CB", "CG"), ("CA", "CB", "CG", "CD1")],
    "VAL": [("N", "CA", "CB", "CG1")],
    "ALA": [],
    "GLY": [],
}


def side_chain_torsions(residue: Residue) -> SideChainGeom:
    chi = np.zeros(4)
    mask = np.zeros(4, dtype=bool)
    for k, quad in enumerate(CHI_ATOMS.get(residue.name, [])):
        pts = [residue.atom(a) for a in quad]
        if any(p is None for p in pts):
            continue
        try:
            chi[k] = dihedral(*pts)
        except DegenerateDihedralError:
            continue
        mask[k] = True
    return SideChainGeom(chi, mask)


def torus_embed(geom: SideChainGeom) -> np.ndarray:
    """(sin chi1, cos chi1, ..., sin chi4, cos chi4); masked slots are (0, 0)."""
    out = np.zeros(8)
    out[0::2] = np.where(geom.mask, np.sin(geom.chi), 0.0)
    out[1::2] = np.where(geom.mask, np.cos(geom.chi), 0.0)
    return out


# -- batched versions used by graph construction ------------------------------

def frame_arrays(frames: list[LocalFrame]):
    origins = np.array([f.origin for f in frames], dtype=np.float64).reshape(-1, 3)
    rot = np.array([f.rotation for f in frames], dtype=np.float64).reshape(-1, 3, 3)
    degenerate = np.array([f.degenerate for f in frames], dtype=bool)
    return origins, rot, degenerate


def _batched_dihedral(p1, p2, p3, p4):
    b1, b2, b3 = p2 - p1, p3 - p2, p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    nb2 = np.linalg.norm(b2, axis=-1)
    y = nb2 * np.einsum("ij,ij->i", b1, n2)
    x = np.einsum("ij,ij->i", n1, n2)
    bad = (nb2 < COINCIDENT_TOL) \
        | (np.linalg.norm(n1, axis=-1) < COLLINEAR_TOL * nb2 * np.linalg.norm(b1, axis=-1)) \
        | (np.linalg.norm(n2, axis=-1) < COLLINEAR_TOL * nb2 * np.linalg.norm(b3, axis=-1))
    return np.where(bad, 0.0, np.arctan2(y, x))


def edge_geometry(origins, rot, i_idx, j_idx):
    """Vectorised edge tuples for edges i <- j (geometry of j seen from i).

    Returns a dict of 1-D arrays: d, theta, phi, tau, alpha, beta, gamma.
    """
    xi, zi = rot[i_idx, :, 0], rot[i_idx, :, 2]
    xj, zj = rot[j_idx, :, 0], rot[j_idx, :, 2]
    offset = origins[j_idx] - origins[i_idx]
    local = np.einsum("eab,ea->eb", rot[i_idx], offset)
    d = np.linalg.norm(local, axis=-1)
    if np.any(d < COINCIDENT_TOL):
        raise CoincidentAnchorsError("two residue anchors coincide")
    phi = np.arccos(np.clip(local[:, 2] / d, -1.0, 1.0))
    rho = np.hypot(local[:, 0], local[:, 1])
    theta = np.where(rho <= 1e-12 * d, 0.0, np.arctan2(local[:, 1], local[:, 0]))
    tau = _batched_dihedral(origins[i_idx] + xi, origins[i_idx], origins[j_idx], origins[j_idx] + xj)

    n = np.cross(zi, zj)
    nn = np.linalg.norm(n, axis=-1)
    par = nn < COLLINEAR_TOL
    n = np.where(par[:, None], xi, n / np.where(par, 1.0, nn)[:, None])
    alpha = np.arctan2(np.einsum("ij,ij->i", np.cross(xi, n), zi), np.einsum("ij,ij->i", xi, n))
    beta = np.arccos(np.clip(np.einsum("ij,ij->i", zi, zj), -1.0, 1.0))
    gamma = np.arctan2(np.einsum("ij,ij->i", np.cross(n, xj), zj), np.einsum("ij,ij->i", n, xj))
    return dict(d=d, theta=theta, phi=phi, tau=tau, alpha=alpha, beta=beta, gamma=gamma)
