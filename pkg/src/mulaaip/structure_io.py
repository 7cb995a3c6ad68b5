"""PDB (fixed-column ``ATOM`` records) and FASTA readers."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class StructureParseError(ValueError):
    pass


class NoAtomsError(StructureParseError):
    pass


class MalformedRecordError(StructureParseError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyRecordError(ValueError):
    def __init__(self, record_id: str):
        super().__init__(f"FASTA record {record_id!r} has no sequence")
        self.record_id = record_id


@dataclass(frozen=True)
class Atom:
    name: str
    position: np.ndarray
    element: str = ""


@dataclass(frozen=True)
class Residue:
    index: int
    name: str
    atoms: tuple[Atom, ...]
    anchor: np.ndarray
    chain_id: str = ""
    res_seq: int = 0
    icode: str = ""

    def atom(self, name: str) -> np.ndarray | None:
        for a in self.atoms:
            if a.name == name:
                return a.position
        return None

    @property
    def atom_names(self) -> list[str]:
        return [a.name for a in self.atoms]


@dataclass(frozen=True)
class ProteinStructure:
    id: str
    chains: tuple[tuple[str, tuple[Residue, ...]], ...]
    dropped_residues: int = 0

    @property
    def residues(self) -> list[Residue]:
        return [r for _, rs in self.chains for r in rs]

    @property
    def n(self) -> int:
        return sum(len(rs) for _, rs in self.chains)

    def anchors(self) -> np.ndarray:
        return np.array([r.anchor for r in self.residues], dtype=np.float64).reshape(-1, 3)

    def select_chains(self, chain_ids) -> "ProteinStructure":
        """Keep only ``chain_ids``, in the order given (empty = keep all)."""
        if not chain_ids:
            return self
        by_id = dict(self.chains)
        missing = [c for c in chain_ids if c not in by_id]
        if missing:
            raise StructureParseError(f"{self.id}: chains not found: {','.join(missing)}")
        picked = [(c, by_id[c]) for c in chain_ids]
        # re-number so index stays a 0-based ordinal over the kept residues
        out, k = [], 0
        for cid, rs in picked:
            new = []
            for r in rs:
                new.append(Residue(k, r.name, r.atoms, r.anchor, r.chain_id, r.res_seq, r.icode))
                k += 1
            out.append((cid, tuple(new)))
        return ProteinStructure(self.id, tuple(out), self.dropped_residues)


def _field(line: str, start: int, stop: int) -> str:
    # PDB columns are 1-based inclusive
    return line[start - 1:stop]


def parse_pdb(data: bytes | str, id: str = "") -> ProteinStructure:
    """Parse ``ATOM`` records into a :class:`ProteinStructure`.

    Residues are grouped by (chain, resSeq, iCode) in file order. Alternate
    locations other than blank/``A`` are skipped. A residue's anchor is its CA
    position, or N when CA is absent; residues with neither are dropped and
    counted in ``dropped_residues``.
    """
    text = data.decode("utf-8", errors="replace") if isinstance(data, (bytes, bytearray)) else data

    chains: dict[str, list[tuple[tuple, str, list[Atom]]]] = {}
    chain_order: list[str] = []
    current_key = None
    seen_atom = False

    for line_no, line in enumerate(text.splitlines(), start=1):
        if line.startswith("ENDMDL"):
            break  # first model only
        if not line.startswith("ATOM  "):
            continue
        seen_atom = True
        altloc = _field(line, 17, 17)
        if altloc not in (" ", "", "A"):
            continue
        name = _field(line, 13, 16).strip()
        res_name = _field(line, 18, 20).strip()
        chain_id = _field(line, 22, 22)
        res_seq_raw = _field(line, 23, 26).strip()
        icode = _field(line, 27, 27).strip()
        if res_name == "HOH":
            continue
        if not name:
            raise MalformedRecordError(line_no, "empty atom name")
        try:
            xyz = np.array([float(_field(line, 31, 38)), float(_field(line, 39, 46)), float(_field(line, 47, 54))])
        except ValueError:
            raise MalformedRecordError(line_no, "unparseable coordinate field") from None
        if not np.all(np.isfinite(xyz)):
            raise MalformedRecordError(line_no, "non-finite coordinate")
        try:
            res_seq = int(res_seq_raw)
        except ValueError:
            raise MalformedRecordError(line_no, f"bad residue number {res_seq_raw!r}") from None
        element = _field(line, 77, 78).strip() if len(line) >= 78 else ""
        if not element:
            element = name.lstrip("0123456789")[:1]

        key = (chain_id, res_seq, icode)
        if chain_id not in chains:
            chains[chain_id] = []
            chain_order.append(chain_id)
        if key != current_key:
            # a key seen before but not contiguous still gets a new residue
            chains[chain_id].append((key, res_name, []))
            current_key = key
        atoms = chains[chain_id][-1][2]
        if any(a.name == name for a in atoms):
            continue
        atoms.append(Atom(name, xyz, element))

    if not seen_atom:
        raise NoAtomsError(f"{id or '<input>'}: no ATOM records")

    dropped = 0
    built = []
    index = 0
    for cid in chain_order:
        residues = []
        for (chain_id, res_seq, icode), res_name, atoms in chains[cid]:
            pos = {a.name: a.position for a in atoms}
            anchor = pos.get("CA", pos.get("N"))
            if anchor is None:
                dropped += 1
                continue
            residues.append(Residue(index, res_name, tuple(atoms), anchor, chain_id, res_seq, icode))
            index += 1
        if residues:
            built.append((cid, tuple(residues)))
    if dropped:
        log.warning("%s: dropped %d residue(s) lacking both CA and N", id or "<input>", dropped)
    if not built:
        raise NoAtomsError(f"{id or '<input>'}: no residue with a CA or N atom")
    return ProteinStructure(id, tuple(built), dropped)


def read_pdb(path, chains=None) -> ProteinStructure:
    with open(path, "rb") as fh:
        s = parse_pdb(fh.read(), id=str(path))
    return s.select_chains(chains or [])


def parse_fasta(data: bytes | str) -> list[tuple[str, str]]:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    records: list[tuple[str, list[str]]] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            records.append((line[1:].strip(), []))
        elif not records:
            raise ValueError("FASTA input must start with a '>' header")
        else:
            records[-1][1].append("".join(line.split()).upper())
    if not records:
        raise ValueError("no FASTA header found")
    out = []
    for rid, parts in records:
        seq = "".join(parts)
        if not seq:
            raise EmptyRecordError(rid)
        out.append((rid, seq))
    return out


def format_pdb(structure: ProteinStructure) -> str:
    """Write ``ATOM`` records (used for synthetic fixtures and round trips)."""
    lines = []
    serial = 1
    for cid, residues in structure.chains:
        for r in residues:
            for a in r.atoms:
                name = a.name if len(a.name) == 4 else f" {a.name:<3}"
                x, y, z = a.position
                lines.append(
                    f"ATOM  {serial:>5} {name:<4} {r.name:>3} {cid[:1] or ' '}{r.res_seq:>4}{(r.icode or ' ')[:1]}   "
                    f"{x:>8.3f}{y:>8.3f}{z:>8.3f}  1.00  0.00          {(a.element or a.name[0]):>2}"
                )
                serial += 1
    lines.append("END")
    return "\n".join(lines) + "\n"
