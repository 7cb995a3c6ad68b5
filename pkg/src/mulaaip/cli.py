"""``mulaaip`` command line: featurize, split, train, evaluate, predict.

Every run is driven by one flat JSON config; each key also exists as a
``--flag`` (underscores become dashes) and flags override the file.
Exit codes: 0 ok, 2 config error, 3 data error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import model as M
from .autodiff import CheckpointError, dump_checkpoint, load_checkpoint
from .basis import BasisConfig
from .data import (ManifestError, MetricReport, TooFewRecordsError, classification_metrics, format_metrics_csv,
                   kfold_split, read_manifest, regression_metrics)
from .graphs import EmbeddingFormatError, EmbeddingStore, StructuralGraph, build_structural_graph, load_embeddings
from .structure_io import StructureParseError, read_pdb

log = logging.getLogger("mulaaip")

CACHE_VERSION = 1
EXIT_CONFIG = 2
EXIT_DATA = 3


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


class MissingCheckpointError(DataError):
    pass


@dataclass
class RunConfig:
    task: str = "affinity"
    manifest: str = ""
    embeddings: str = ""
    out: str = "runs"
    cache_dir: str = ""
    seed: int = 0
    jobs: int = 1
    folds: int = 10
    group_by: str = "none"
    val_fraction: float = 0.1
    lr: float = 5e-5
    epochs: int = 200
    batch_size: int = 32
    patience: int = 5
    cutoff: float = 10.0
    knn_k: int = 32
    norm_scale: float = 1.0
    lam: float = 5e-4
    lam_ab: float = 5e-4
    lam_ag: float = 5e-4
    hidden: int = 128
    aa_embed_dim: int = 64
    gat_layers: int = 2
    gcn_layers: int = 2
    num_radial: int = 6
    num_spherical: int = 7
    envelope_exponent: int = 6
    dropout: float = 0.1
    sequence_only: bool = False
    use_structure: bool = True
    use_sequence: bool = True
    use_smlp: bool = True
    use_backbone: bool = True
    use_side_chain: bool = True

    POSITIVE = ("jobs", "folds", "lr", "epochs", "batch_size", "patience", "cutoff", "knn_k", "norm_scale",
                "hidden", "aa_embed_dim", "gat_layers", "gcn_layers", "num_radial", "num_spherical",
                "envelope_exponent")

    def validate(self) -> "RunConfig":
        for name in self.POSITIVE:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be positive, got {getattr(self, name)!r}")
        for name in ("lam", "lam_ab", "lam_ag"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be non-negative")
        if self.task not in ("affinity", "neutralization"):
            raise ConfigError(f"task: expected affinity or neutralization, got {self.task!r}")
        if self.group_by not in ("none", "antibody", "antigen"):
            raise ConfigError(f"group_by: expected none, antibody or antigen, got {self.group_by!r}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction: must lie in (0, 1)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout: must lie in [0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed: must be an unsigned 64-bit integer")
        return self

    @property
    def basis(self) -> BasisConfig:
        return BasisConfig(self.cutoff, self.num_radial, self.num_spherical, self.envelope_exponent)

    def model_config(self, plm_dim: int) -> M.ModelConfig:
        return M.ModelConfig(
            task=self.task, plm_dim=plm_dim, hidden=self.hidden, aa_embed_dim=self.aa_embed_dim,
            gat_layers=self.gat_layers, gcn_layers=self.gcn_layers, norm_scale=self.norm_scale,
            dropout=self.dropout, knn_k=self.knn_k, basis=self.basis, use_structure=self.use_structure,
            use_sequence=self.use_sequence, use_smlp=self.use_smlp, use_backbone=self.use_backbone,
            use_side_chain=self.use_side_chain, allow_missing_structure=self.sequence_only,
        )

    def train_config(self) -> M.TrainConfig:
        return M.TrainConfig(self.lr, self.epochs, self.batch_size, self.patience,
                             M.LossConfig(self.lam, self.lam_ab, self.lam_ag))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value):
    kind = type(getattr(RunConfig, name))
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected true/false, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        base = os.path.dirname(os.path.abspath(path))
        for key in ("manifest", "embeddings", "out", "cache_dir"):
            if isinstance(raw.get(key), str) and raw[key] and not os.path.isabs(raw[key]):
                raw[key] = os.path.join(base, raw[key])
    unknown = [k for k in raw if k not in _FIELDS]
    if unknown:
        raise ConfigError(f"unknown config key: {unknown[0]}")
    values = {k: _coerce(k, v) for k, v in raw.items()}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values).validate()


# -- featurization ------------------------------------------------------------------

def _structure_jobs(records, manifest_dir):
    """Distinct (entity key, path, chains) structure inputs, in first-seen order."""
    jobs = {}
    for r in records:
        for key, path, chains in ((r.antibody_key, r.ab_structure_path, r.ab_chains),
                                  (r.antigen_key, r.ag_structure_path, r.ag_chains)):
            if path and key not in jobs:
                full = path if os.path.isabs(path) else os.path.join(manifest_dir, path)
                jobs[key] = (full, chains, r.pair_id)
    return jobs


def cache_key(structure_bytes: bytes, chains, basis: BasisConfig) -> str:
    h = hashlib.sha256()
    h.update(f"mulaaip-graph-v{CACHE_VERSION}\n".encode())
    h.update(json.dumps({"chains": list(chains), "basis": basis.to_dict()}, sort_keys=True).encode())
    h.update(b"\n")
    h.update(structure_bytes)
    return h.hexdigest()


def _featurize_one(args):
    path, chains, basis, cache_dir = args
    with open(path, "rb") as fh:
        raw = fh.read()
    target = os.path.join(cache_dir, cache_key(raw, chains, basis) + ".npz")
    if os.path.exists(target):
        return target, False
    structure = read_pdb(path, chains)
    graph = build_structural_graph(structure, basis)
    tmp = target + f".{os.getpid()}.tmp.npz"
    np.savez(tmp, version=np.array(CACHE_VERSION), **graph.to_arrays())
    os.replace(tmp, target)
    return target, True


def featurize(cfg: RunConfig, records, manifest_dir: str):
    """Build or reuse cached graphs. Returns ``(graphs, errors, counts)``."""
    cache_dir = cfg.cache_dir or os.path.join(cfg.out, "cache")
    os.makedirs(cache_dir, exist_ok=True)
    jobs = _structure_jobs(records, manifest_dir)
    tasks = [(path, chains, cfg.basis, cache_dir) for path, chains, _ in jobs.values()]
    results = []
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(cfg.jobs) as pool:
            futures = [pool.submit(_featurize_one, t) for t in tasks]
            for fut in futures:
                try:
                    results.append(fut.result())
                except Exception as exc:  # noqa: BLE001 - reported per record
                    results.append(exc)
    else:
        for t in tasks:
            try:
                results.append(_featurize_one(t))
            except Exception as exc:  # noqa: BLE001 - reported per record
                results.append(exc)
    graphs, errors = {}, []
    counts = {"computed": 0, "cached": 0, "failed": 0}
    for (key, (path, _, pid)), res in zip(jobs.items(), results):
        if isinstance(res, Exception):
            errors.append((pid, path, f"{type(res).__name__}: {res}"))
            counts["failed"] += 1
            continue
        target, computed = res
        counts["computed" if computed else "cached"] += 1
        with np.load(target) as arrs:
            if int(arrs["version"]) != CACHE_VERSION:
                raise DataError(f"cache file {target} has version {int(arrs['version'])}")
            graphs[key] = StructuralGraph.from_arrays(arrs)
    return graphs, errors, counts


def _write_errors(out_dir: str, errors) -> str:
    path = os.path.join(out_dir, "featurize_errors.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("pair_id", "path", "error"))
        w.writerows(errors)
    return path


# -- shared plumbing -----------------------------------------------------------------

def _load_inputs(cfg: RunConfig, manifest: str | None = None, require_label: bool = True):
    manifest = manifest or cfg.manifest
    if not manifest:
        raise ConfigError("manifest: no manifest given")
    records = read_manifest(manifest, require_label=require_label)
    if cfg.embeddings:
        store = load_embeddings(cfg.embeddings)
    elif cfg.use_sequence:
        raise ConfigError("embeddings: required unless use_sequence is false")
    else:
        store = EmbeddingStore()
    return records, store, os.path.dirname(os.path.abspath(manifest))


def _prepare(cfg: RunConfig, records, store, manifest_dir):
    graphs = {}
    if cfg.use_structure:
        graphs, errors, _ = featurize(cfg, records, manifest_dir)
        if errors:
            _write_errors(cfg.out, errors)
            for pid, path, msg in errors:
                log.warning("pair %s: %s: %s", pid, path, msg)
    mcfg = cfg.model_config(store.dim or 1)
    return mcfg, M.build_pair_data(records, graphs, store, mcfg)


def _fold_seed(seed: int, fold: int) -> int:
    return (seed + 0x9E3779B97F4A7C15 * (fold + 1)) % 2**64


def _groups(cfg: RunConfig, records):
    if cfg.group_by == "antibody":
        return [r.antibody_key for r in records]
    if cfg.group_by == "antigen":
        return [r.antigen_key for r in records]
    return None


def _folds(cfg: RunConfig, records):
    ids = [r.pair_id for r in records]
    return kfold_split(ids, cfg.folds, cfg.seed, _groups(cfg, records))


def _val_split(train_ids, fraction: float, seed: int):
    from .autodiff import Rng
    perm = Rng(seed).fork(0xA1).permutation(len(train_ids))
    n_val = max(1, int(round(fraction * len(train_ids))))
    if n_val >= len(train_ids):
        raise M.EmptySplitError("training fold too small to hold out a validation set")
    val = sorted(perm[:n_val].tolist())
    fit = sorted(perm[n_val:].tolist())
    return [train_ids[k] for k in fit], [train_ids[k] for k in val]


def _metrics(task: str, preds, labels, fold_id: str) -> MetricReport:
    rep = regression_metrics(preds, labels) if task == "affinity" else classification_metrics(preds, labels)
    rep.fold_id = fold_id
    return rep


def _fold_dir(cfg: RunConfig, fold: int) -> str:
    return os.path.join(cfg.out, f"fold{fold}")


def _write(path: str, text: str):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _train_fold(args):
    cfg, mcfg, data, fold, train_ids, test_ids = args
    fit_ids, val_ids = _val_split(train_ids, cfg.val_fraction, _fold_seed(cfg.seed, fold))
    net = M.MulaaipModel(mcfg, seed=_fold_seed(cfg.seed, fold))
    rel, hist = M.train(net, data, data.positions(fit_ids), data.positions(val_ids), cfg.train_config(),
                        seed=_fold_seed(cfg.seed, fold) ^ 0x5A5A)
    preds = M.predict(net, data, rel, data.positions(test_ids), cfg.batch_size)
    labels = data.labels[data.positions(test_ids)]
    rep = _metrics(cfg.task, preds, labels, str(fold))
    d = _fold_dir(cfg, fold)
    os.makedirs(d, exist_ok=True)
    with open(os.path.join(d, "checkpoint.mlpk"), "wb") as fh:
        fh.write(dump_checkpoint(net.state_dict()))
    _write(os.path.join(d, "history.csv"), hist.to_csv())
    _write(os.path.join(d, "split.json"), json.dumps({"train": fit_ids, "val": val_ids, "test": list(test_ids)},
                                                     indent=1) + "\n")
    return rep


def _load_model(cfg: RunConfig, mcfg: M.ModelConfig, path: str) -> M.MulaaipModel:
    if not os.path.exists(path):
        raise MissingCheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        state = load_checkpoint(fh.read())
    net = M.MulaaipModel(mcfg, seed=cfg.seed)
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return net


# -- subcommands ------------------------------------------------------------------------

def cmd_featurize(cfg: RunConfig, args) -> int:
    records, _, manifest_dir = _load_inputs(cfg, require_label=False)
    os.makedirs(cfg.out, exist_ok=True)
    graphs, errors, counts = featurize(cfg, records, manifest_dir)
    print(f"graphs: {len(graphs)} ({counts['computed']} computed, {counts['cached']} cached), "
          f"failed: {counts['failed']}")
    if errors:
        path = _write_errors(cfg.out, errors)
        for pid, p, msg in errors:
            print(f"error: pair {pid}: {p}: {msg}", file=sys.stderr)
        print(f"error report: {path}", file=sys.stderr)
        if not graphs:
            return EXIT_DATA
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    records = read_manifest(cfg.manifest, require_label=False) if cfg.manifest else None
    if records is None:
        raise ConfigError("manifest: no manifest given")
    os.makedirs(cfg.out, exist_ok=True)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(("pair_id", "fold"))
    fold_of = {}
    for f, (_, test) in enumerate(_folds(cfg, records)):
        fold_of.update({pid: f for pid in test})
    for r in records:
        w.writerow((r.pair_id, fold_of[r.pair_id]))
    _write(os.path.join(cfg.out, "folds.csv"), out.getvalue())
    print(f"{cfg.folds} folds over {len(records)} records -> {os.path.join(cfg.out, 'folds.csv')}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    records, store, manifest_dir = _load_inputs(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    mcfg, data = _prepare(cfg, records, store, manifest_dir)
    folds = _folds(cfg, records)
    _write(os.path.join(cfg.out, "config.json"), cfg.to_json())
    tasks = [(cfg, mcfg, data, f, train, test) for f, (train, test) in enumerate(folds)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(min(cfg.jobs, len(tasks))) as pool:
            reports = list(pool.map(_train_fold, tasks))
    else:
        reports = [_train_fold(t) for t in tasks]
    text = format_metrics_csv(reports, cfg.task)
    _write(os.path.join(cfg.out, "metrics.csv"), text)
    sys.stdout.write(text)
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    records, store, manifest_dir = _load_inputs(cfg)
    mcfg, data = _prepare(cfg, records, store, manifest_dir)
    folds = range(cfg.folds) if args.fold is None else [args.fold]
    reports, val_losses = [], []
    for f in folds:
        d = _fold_dir(cfg, f)
        split_path = os.path.join(d, "split.json")
        if not os.path.exists(split_path):
            raise MissingCheckpointError(f"no trained fold at {d}")
        with open(split_path, encoding="utf-8") as fh:
            split = json.load(fh)
        net = _load_model(cfg, mcfg, args.checkpoint or os.path.join(d, "checkpoint.mlpk"))
        rel = M.refresh_relations(net, data)
        val = M.mean_data_loss(net, data, rel, data.positions(split["val"]), cfg.batch_size)
        test = data.positions(split["test"])
        reports.append(_metrics(cfg.task, M.predict(net, data, rel, test, cfg.batch_size), data.labels[test], str(f)))
        val_losses.append((f, val))
    text = format_metrics_csv(reports, cfg.task)
    name = "evaluate.csv" if args.fold is None else f"evaluate_fold{args.fold}.csv"
    _write(os.path.join(cfg.out, name), text)
    sys.stdout.write(text)
    for f, v in val_losses:
        print(f"fold {f} val_loss {v!r}")
    return 0


def cmd_predict(cfg: RunConfig, args) -> int:
    if not args.input:
        raise ConfigError("input: predict needs --input MANIFEST")
    context, store, manifest_dir = _load_inputs(cfg)
    originals = read_manifest(args.input, require_label=False)
    query_dir = os.path.dirname(os.path.abspath(args.input))
    # query ids may collide with context ids, and paths are relative to the query manifest
    queries = [dataclasses.replace(
        q, pair_id=f"\x00query{k}",
        ab_structure_path=_abs(q.ab_structure_path, query_dir), ag_structure_path=_abs(q.ag_structure_path, query_dir),
    ) for k, q in enumerate(originals)]
    mcfg, data = _prepare(cfg, context + queries, store, manifest_dir)
    fold = args.fold if args.fold is not None else 0
    path = args.checkpoint or os.path.join(_fold_dir(cfg, fold), "checkpoint.mlpk")
    net = _load_model(cfg, mcfg, path)
    rel = M.refresh_relations(net, data)
    preds = M.predict(net, data, rel, np.arange(len(context), len(context) + len(queries)), cfg.batch_size)
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(("pair_id", "prediction"))
    for rec, p in zip(originals, preds):
        w.writerow((rec.pair_id, repr(float(p))))
    os.makedirs(cfg.out, exist_ok=True)
    target = args.output or os.path.join(cfg.out, "predictions.csv")
    _write(target, out.getvalue())
    print(f"{len(preds)} predictions -> {target}")
    return 0


def _abs(path, base):
    if not path:
        return path
    return path if os.path.isabs(path) else os.path.join(base, path)


COMMANDS = {
    "featurize": cmd_featurize,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = type(getattr(RunConfig, f.name))
        if kind is bool:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mulaaip", description="Antibody-antigen interaction prediction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        _add_config_flags(p)
        if name in ("evaluate", "predict"):
            p.add_argument("--fold", type=int, default=None, help="fold index (default: all / fold 0)")
            p.add_argument("--checkpoint", default=None, help="explicit checkpoint path")
        if name == "predict":
            p.add_argument("--input", default=None, help="manifest of pairs to score (labels optional)")
            p.add_argument("--output", default=None, help="predictions CSV (default OUT/predictions.csv)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ManifestError, StructureParseError, EmbeddingFormatError, CheckpointError,
            M.MissingModalityError, M.EmptySplitError, TooFewRecordsError, OSError) as exc:
        print(f"data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
