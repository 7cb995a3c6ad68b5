"""Pair manifests, label conversions, fold assignment and evaluation metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Rng

GAS_CONSTANT_KCAL = 1.9872e-3  # kcal / (mol K)
DEFAULT_TEMPERATURE_K = 298.0

LABEL_KINDS = ("dG", "dG_from_ddG", "alphaseq", "neutralization")
MANIFEST_COLUMNS = (
    "pair_id", "ab_heavy_seq", "ab_light_seq", "ag_seq", "ab_structure_path", "ag_structure_path",
    "ab_chains", "ag_chains", "label", "label_kind", "temperature_k",
)


class ManifestError(ValueError):
    pass


class NonPositiveKdError(ValueError):
    pass


class TooFewRecordsError(ValueError):
    pass


class LengthMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    ab_heavy_seq: str
    ab_light_seq: str
    ag_seq: str
    ab_structure_path: str | None = None
    ag_structure_path: str | None = None
    ab_chains: tuple[str, ...] = ()
    ag_chains: tuple[str, ...] = ()
    label: float = float("nan")
    label_kind: str = "dG"
    temperature_k: float = DEFAULT_TEMPERATURE_K

    @property
    def antibody_key(self) -> tuple:
        return ("ab", self.ab_heavy_seq, self.ab_light_seq, self.ab_structure_path or "", self.ab_chains)

    @property
    def antigen_key(self) -> tuple:
        return ("ag", self.ag_seq, self.ag_structure_path or "", self.ag_chains)


def _chains(text: str) -> tuple[str, ...]:
    return tuple(c for c in (s.strip() for s in text.split(";")) if c)


def parse_manifest(text: str, require_label: bool = True) -> list[PairRecord]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise ManifestError("manifest is empty (header row required)")
    header = [h.strip() for h in reader.fieldnames]
    unknown = [h for h in header if h not in MANIFEST_COLUMNS]
    missing = [h for h in MANIFEST_COLUMNS if h not in header and h != "temperature_k"]
    if unknown:
        raise ManifestError(f"unknown manifest column(s): {', '.join(unknown)}")
    if missing:
        raise ManifestError(f"missing manifest column(s): {', '.join(missing)}")
    records, seen = [], set()
    for line_no, row in enumerate(reader, start=2):
        row = {k.strip(): (v or "").strip() for k, v in row.items() if k is not None}
        pid = row["pair_id"]
        if not pid:
            raise ManifestError(f"line {line_no}: empty pair_id")
        if pid in seen:
            raise ManifestError(f"line {line_no}: duplicate pair_id {pid!r}")
        seen.add(pid)
        kind = row["label_kind"] or "dG"
        if kind not in LABEL_KINDS:
            raise ManifestError(f"line {line_no}: unknown label_kind {kind!r}")
        label_raw = row["label"]
        if label_raw:
            try:
                label = float(label_raw)
            except ValueError:
                raise ManifestError(f"line {line_no}: bad label {label_raw!r}") from None
            if not math.isfinite(label):
                raise ManifestError(f"line {line_no}: non-finite label")
            if kind == "neutralization" and label not in (0.0, 1.0):
                raise ManifestError(f"line {line_no}: neutralization label must be 0 or 1")
        elif require_label:
            raise ManifestError(f"line {line_no}: missing label")
        else:
            label = float("nan")
        temp = row.get("temperature_k", "")
        try:
            temperature = float(temp) if temp else DEFAULT_TEMPERATURE_K
        except ValueError:
            raise ManifestError(f"line {line_no}: bad temperature_k {temp!r}") from None
        if not row["ab_heavy_seq"] or not row["ag_seq"]:
            raise ManifestError(f"line {line_no}: ab_heavy_seq and ag_seq are required")
        records.append(PairRecord(
            pair_id=pid,
            ab_heavy_seq=row["ab_heavy_seq"].upper(),
            ab_light_seq=row["ab_light_seq"].upper(),
            ag_seq=row["ag_seq"].upper(),
            ab_structure_path=row["ab_structure_path"] or None,
            ag_structure_path=row["ag_structure_path"] or None,
            ab_chains=_chains(row["ab_chains"]),
            ag_chains=_chains(row["ag_chains"]),
            label=label,
            label_kind=kind,
            temperature_k=temperature,
        ))
    return records


def read_manifest(path, require_label: bool = True) -> list[PairRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_manifest(fh.read(), require_label=require_label)


def format_manifest(records) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(MANIFEST_COLUMNS)
    for r in records:
        w.writerow([
            r.pair_id, r.ab_heavy_seq, r.ab_light_seq, r.ag_seq, r.ab_structure_path or "",
            r.ag_structure_path or "", ";".join(r.ab_chains), ";".join(r.ag_chains),
            "" if math.isnan(r.label) else repr(float(r.label)), r.label_kind, repr(float(r.temperature_k)),
        ])
    return out.getvalue()


# -- thermodynamics -------------------------------------------------------------

def dg_from_kd(kd: float, temperature_k: float = DEFAULT_TEMPERATURE_K) -> float:
    """Binding free energy (kcal/mol) from a dissociation constant in molar."""
    if not kd > 0:
        raise NonPositiveKdError(f"K_D must be positive, got {kd}")
    if not temperature_k > 0:
        raise ValueError("temperature must be positive")
    return GAS_CONSTANT_KCAL * temperature_k * math.log(kd)


def dg_from_ddg(ddg: float, dg_wild: float) -> float:
    return ddg + dg_wild


def ddg_from_dg(dg_mut: float, dg_wild: float) -> float:
    return dg_mut - dg_wild


# -- folds --------------------------------------------------------------------

def kfold_split(ids, k: int = 10, seed: int = 0, groups=None) -> list[tuple[list, list]]:
    """Seeded shuffle then contiguous partition into ``k`` test folds.

    With ``groups`` (one key per id) whole groups are shuffled and partitioned
    so members of a group never straddle train and test.
    """
    ids = list(ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    units = list(dict.fromkeys(groups)) if groups is not None else ids
    if len(units) < k:
        raise TooFewRecordsError(f"{len(units)} {'groups' if groups is not None else 'records'} for {k} folds")
    perm = Rng(seed).permutation(len(units))
    shuffled = [units[p] for p in perm]
    base, extra = divmod(len(shuffled), k)
    parts, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        parts.append(shuffled[start:start + size])
        start += size
    if groups is not None:
        members: dict = {}
        for i, g in zip(ids, groups):
            members.setdefault(g, []).append(i)
        parts = [[i for g in part for i in members[g]] for part in parts]
    folds = []
    for part in parts:
        test = set(part)
        folds.append(([i for i in ids if i not in test], list(part)))
    return folds


# -- metrics ------------------------------------------------------------------

@dataclass
class MetricReport:
    fold_id: str = ""
    mae: float | None = None
    pcc: float | None = None
    acc: float | None = None
    f1: float | None = None
    roc_auc: float | None = None
    g_mean: float | None = None
    mcc: float | None = None
    flags: list[str] = field(default_factory=list)

    REGRESSION = ("mae", "pcc")
    CLASSIFICATION = ("acc", "f1", "roc_auc", "g_mean", "mcc")


def _check_lengths(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise LengthMismatchError(f"{a.size} predictions vs {b.size} labels")
    if a.size == 0:
        raise LengthMismatchError("empty inputs")
    return a, b


def regression_metrics(preds, labels) -> MetricReport:
    p, y = _check_lengths(preds, labels)
    rep = MetricReport(mae=float(np.mean(np.abs(y - p))))
    dp, dy = p - p.mean(), y - y.mean()
    denom = math.sqrt(float(dp @ dp) * float(dy @ dy))
    if denom == 0.0:
        rep.pcc = 0.0
        rep.flags.append("pcc_zero_variance")
    else:
        rep.pcc = float(np.clip((dp @ dy) / denom, -1.0, 1.0))
    return rep


def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(x.size)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def roc_auc(probs, labels) -> tuple[float, bool]:
    """Mann-Whitney AUC; returns (0.5, False) when a class is missing."""
    p, y = _check_lengths(probs, labels)
    pos = y == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5, False
    r = average_ranks(p)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)), True


def classification_metrics(probs, labels, threshold: float = 0.5) -> MetricReport:
    p, y = _check_lengths(probs, labels)
    pred = p >= threshold
    truth = y == 1
    tp = float(np.sum(pred & truth))
    tn = float(np.sum(~pred & ~truth))
    fp = float(np.sum(pred & ~truth))
    fn = float(np.sum(~pred & truth))
    rep = MetricReport()
    rep.acc = (tp + tn) / y.size
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    rep.f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    specificity = tn / (tn + fp) if tn + fp > 0 else 0.0
    rep.g_mean = math.sqrt(recall * specificity)
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        rep.mcc = 0.0
        rep.flags.append("mcc_zero_denominator")
    else:
        rep.mcc = (tp * tn - fp * fn) / math.sqrt(denom)
    rep.roc_auc, defined = roc_auc(p, y)
    if not defined:
        rep.flags.append("roc_auc_single_class")
    return rep


def metric_names(task: str) -> tuple[str, ...]:
    return MetricReport.REGRESSION if task == "affinity" else MetricReport.CLASSIFICATION


def format_metrics_csv(reports: list[MetricReport], task: str) -> str:
    """Per-fold rows then a ``mean±std`` summary row (population std)."""
    names = metric_names(task)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(("fold",) + names)
    for r in reports:
        w.writerow([r.fold_id] + [f"{getattr(r, n):.6f}" for n in names])
    summary = ["mean±std"]
    for n in names:
        vals = np.array([getattr(r, n) for r in reports], dtype=np.float64)
        summary.append(f"{vals.mean():.6f}±{vals.std():.6f}")
    w.writerow(summary)
    return out.getvalue()


def parse_metrics_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
