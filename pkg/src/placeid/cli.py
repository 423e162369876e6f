"""Command-line front end: prepare, encode, train, retrieve, eval, bench.

Every subcommand reads a JSON run config (``--config``), applies
``--set section.key=value`` overrides and the ``--seed``/``--out`` flags,
and writes its artefacts into the run directory. Failures print a JSON
object on stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from placeid.dataset import (
    PoseFormat,
    Split,
    assign_split,
    dataset_from_files,
    load_dataset,
    merge_shift,
    save_dataset,
    synth_dataset,
)
from placeid.descindex import LshIndex
from placeid.docid import DocidTable, build_trie, encode_dataset
from placeid.evaluation import timing
from placeid.evaluation.metrics import evaluate, read_records, write_records, write_reports_csv
from placeid.gendec.losses import LossKind
from placeid.gendec.model import load_checkpoint, save_checkpoint
from placeid.gendec.train import TrainConfig, train
from placeid.plotting import f1_curve, plot_f1, plot_timing, plot_training
from placeid.retrieval import (
    build_lsh,
    reference_matrix,
    reference_trie,
    retrieve_exact,
    retrieve_generative,
    retrieve_lsh,
)
from placeid.seeding import subseed

log = logging.getLogger("placeid")

# Scene counts of the six merged sequences used for the KITTI-sized layout.
KITTI_SEQUENCE_SIZES = [4541, 4661, 2761, 1101, 1101, 4071]

DEFAULTS = {
    "seed": 0,
    "out": "run",
    "dataset": {
        "source": "synthetic",
        "n_scenes": 500,
        "loop_fraction": 0.3,
        "descriptor_dim": 256,
        "noise_sigma": 0.005,
        "sequences": None,
        "poses": [],
        "descriptors": [],
        "pose_format": PoseFormat.KITTI_ODOMETRY_3x4.value,
    },
    "docid": {"strategy": "HILBERT", "scale": 100.0, "hilbert_order": 17, "kmeans_k": 10, "leaf_size": 100},
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "retrieval": {"method": "generative", "beam_width": 10, "top_k": 10, "lsh_bits": 256},
    "eval": {"pos_radius": 3.0, "neg_radius": 20.0, "dt": 30.0, "hits_n": [1, 5, 10]},
    "bench": {
        "sizes": [1000, 5000, 20000, 50000],
        "repeats": 20,
        "warmup": 3,
        "methods": ["exact", "lsh256", "generative"],
        "descriptor_dim": 256,
    },
}


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in out:
            raise CliError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _parse_set(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise CliError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.split("."), value


def build_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        cfg = _merge(cfg, json.loads(path.read_text()))
    for item in args.set or []:
        keys, value = _parse_set(item)
        nested = value
        for k in reversed(keys):
            nested = {k: nested}
        cfg = _merge(cfg, nested)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    return cfg


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["seed"], **cfg["train"])


# ---------------------------------------------------------------------------
# run directory layout


def _paths(out: Path) -> dict:
    return {
        "dataset": out / "dataset",
        "docids": out / "docids.csv",
        "codec_meta": out / "codec_meta.json",
        "encode_report": out / "encode_report.json",
        "checkpoint": out / "decoder.ckpt",
        "train_log": out / "train_log.csv",
        "train_figure": out / "train_curve.png",
        "lsh": out / "lsh.idx",
        "eval_json": out / "eval_report.json",
        "eval_csv": out / "eval_report.csv",
        "eval_figure": out / "f1_curve.png",
        "bench_json": out / "timing_report.json",
        "bench_csv": out / "timing_report.csv",
        "bench_figure": out / "timing.png",
    }


def _records_path(out: Path, method: str) -> Path:
    return out / f"records_{method}.jsonl"


def _outdir(cfg) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_run(out: Path):
    p = _paths(out)
    dataset = load_dataset(_require(p["dataset"], "dataset directory (run prepare first)"))
    table = DocidTable.load(_require(p["docids"], "docid table (run encode first)"),
                            _require(p["codec_meta"], "codec metadata"))
    if len(table) != len(dataset):
        raise CliError(f"{len(table)} docids for {len(dataset)} scenes")
    return dataset, table


# ---------------------------------------------------------------------------
# subcommands


def make_dataset(cfg: dict):
    d, seed = cfg["dataset"], cfg["seed"]
    if d["source"] == "synthetic":
        sizes = d["sequences"] or [d["n_scenes"]]
        seqs = [synth_dataset(n, d["loop_fraction"], d["descriptor_dim"], d["noise_sigma"],
                              seed if len(sizes) == 1 else subseed(seed, f"sequence-{i}"), sequence_id=i)
                for i, n in enumerate(sizes)]
    elif d["source"] == "files":
        poses, descs = d["poses"], d["descriptors"]
        if not poses or len(poses) != len(descs):
            raise CliError("files source needs equally many pose and descriptor paths")
        for path in [*poses, *descs]:
            _require(Path(path), "input file")
        fmt = PoseFormat(d["pose_format"])
        seqs = [dataset_from_files(p, q, fmt, sequence_id=i) for i, (p, q) in enumerate(zip(poses, descs))]
    else:
        raise CliError(f"unknown dataset source {d['source']!r}")
    return assign_split(seqs[0] if len(seqs) == 1 else merge_shift(seqs))


def cmd_prepare(cfg: dict) -> dict:
    out = _outdir(cfg)
    dataset = make_dataset(cfg)
    target = _paths(out)["dataset"]
    target.mkdir(exist_ok=True)
    save_dataset(target, dataset)
    counts = {s.name: int((dataset.split == s).sum()) for s in Split}
    return {"scenes": len(dataset), "descriptor_dim": dataset.descriptor_dim, "splits": counts,
            "path": str(target)}


def cmd_encode(cfg: dict) -> dict:
    out = _outdir(cfg)
    p = _paths(out)
    dataset = load_dataset(_require(p["dataset"], "dataset directory (run prepare first)"))
    d = cfg["docid"]
    table = encode_dataset(dataset.xy, dataset.descriptors, d["strategy"], scale=d["scale"],
                           hilbert_order=d["hilbert_order"], kmeans_k=d["kmeans_k"],
                           kmeans_seed=subseed(cfg["seed"], "kmeans") % 2**32, leaf_size=d["leaf_size"])
    table.save(p["docids"], p["codec_meta"])
    trie = build_trie(table.docids)
    report = {
        "strategy": table.meta.strategy.value,
        "scenes": len(table),
        "docid_lengths": sorted(table.lengths),
        "collisions": table.collisions,
        "trie_nodes": trie.node_count,
    }
    _dump(p["encode_report"], report)
    return report


def cmd_train(cfg: dict) -> dict:
    out = _outdir(cfg)
    p = _paths(out)
    dataset, table = _load_run(out)
    config = _train_config(cfg)
    result = train(dataset, table.docids, config)
    save_checkpoint(p["checkpoint"], result.params,
                    {"train": config.to_dict(), "best_epoch": result.best_epoch,
                     "best_val_hits_at_1": result.best_val_hits_at_1, "strategy": table.meta.strategy.value})
    with open(p["train_log"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_hits_at_1"])
        for e in result.log:
            w.writerow([e.epoch, repr(e.train_loss), "" if e.val_hits_at_1 is None else repr(e.val_hits_at_1)])
    plot_training(result.log, p["train_figure"])
    return {"best_epoch": result.best_epoch, "best_val_hits_at_1": result.best_val_hits_at_1,
            "epochs": config.epochs, "checkpoint": str(p["checkpoint"])}


def cmd_retrieve(cfg: dict) -> dict:
    out = _outdir(cfg)
    p = _paths(out)
    r, dt = cfg["retrieval"], cfg["eval"]["dt"]
    method = r["method"]
    if method == "generative":
        dataset, table = _load_run(out)
        params, _ = load_checkpoint(_require(p["checkpoint"], "decoder checkpoint (run train first)"))
        records = retrieve_generative(params, reference_trie(dataset, table.docids), dataset,
                                      beam_width=r["beam_width"], top_k=r["top_k"], dt=dt)
    elif method == "exact":
        dataset = load_dataset(_require(p["dataset"], "dataset directory (run prepare first)"))
        records = retrieve_exact(reference_matrix(dataset), dataset, k=r["top_k"], dt=dt)
    elif method == "lsh":
        dataset = load_dataset(_require(p["dataset"], "dataset directory (run prepare first)"))
        if p["lsh"].exists():
            index = LshIndex.load(p["lsh"])
        else:
            index = build_lsh(dataset, r["lsh_bits"], subseed(cfg["seed"], "lsh"))
            index.save(p["lsh"])
        records = retrieve_lsh(index, dataset, k=r["top_k"], dt=dt)
    else:
        raise CliError(f"unknown retrieval method {method!r}")
    path = _records_path(out, method)
    write_records(path, records)
    return {"method": method, "queries": len(records), "records": str(path)}


def _check_records(records, dataset, source) -> None:
    expected = set(dataset.indices(Split.EVAL).tolist())
    got = [r.query_index for r in records]
    if len(set(got)) != len(got):
        raise CliError(f"{source}: duplicate query indices")
    if set(got) != expected:
        missing, extra = sorted(expected - set(got)), sorted(set(got) - expected)
        raise CliError(f"{source}: records do not match the EVAL queries "
                       f"(missing {missing[:5]}{'...' if len(missing) > 5 else ''}, "
                       f"unexpected {extra[:5]}{'...' if len(extra) > 5 else ''})")
    n = len(dataset)
    for r in records:
        for s, _ in r.candidates:
            if not 0 <= s < n:
                raise CliError(f"{source}: query {r.query_index} has out-of-range candidate {s}")


def cmd_eval(cfg: dict, record_paths=None) -> dict:
    out = _outdir(cfg)
    p = _paths(out)
    dataset = load_dataset(_require(p["dataset"], "dataset directory (run prepare first)"))
    if not record_paths:
        record_paths = sorted(out.glob("records_*.jsonl"))
        if not record_paths:
            raise CliError(f"no records_*.jsonl in {out} (run retrieve first)")
    e = cfg["eval"]
    reports, curves = [], {}
    for path in map(Path, record_paths):
        records = read_records(_require(path, "records file"))
        _check_records(records, dataset, path)
        method = path.stem.removeprefix("records_")
        reports.append(evaluate(records, dataset, method, e["hits_n"], e["pos_radius"], e["neg_radius"], e["dt"]))
        curves[method] = f1_curve(records, dataset, e["pos_radius"], e["neg_radius"], e["dt"])
    p["eval_json"].write_text(json.dumps([json.loads(r.to_json()) for r in reports], indent=2) + "\n")
    write_reports_csv(p["eval_csv"], reports)
    plot_f1(curves, p["eval_figure"])
    return {r.method: {"hits_at_1": r.hits_at_1, "f1_max": r.f1_max} for r in reports}


def bench_methods(cfg: dict) -> list[timing.BenchMethod]:
    b, seed = cfg["bench"], cfg["seed"]
    out = []
    for name in b["methods"]:
        if name == "exact":
            out.append(timing.exact_method(b["descriptor_dim"], seed))
        elif name.startswith("lsh"):
            out.append(timing.lsh_method(int(name[3:] or cfg["retrieval"]["lsh_bits"]), b["descriptor_dim"], seed))
        elif name == "generative":
            t = cfg["train"]
            out.append(timing.generative_method(b["descriptor_dim"], seed, cfg["retrieval"]["beam_width"],
                                                cfg["docid"]["hilbert_order"], t["embed_dim"], t["width"]))
        else:
            raise CliError(f"unknown bench method {name!r}")
    return out


def cmd_bench(cfg: dict) -> dict:
    out = _outdir(cfg)
    p = _paths(out)
    b = cfg["bench"]
    try:
        report = timing.timing_bench(bench_methods(cfg), b["sizes"], b["repeats"], b["warmup"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    report.write(p["bench_json"], p["bench_csv"])
    plot_timing(report, p["bench_figure"])
    return {"crossover_n": report.crossover_n,
            "spread": {m.name: m.spread for m in report.methods},
            "r2": {m.name: m.fit.r2 for m in report.methods}}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", help="run directory (overrides config)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set train.epochs=20")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="placeid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="build or ingest a dataset and its split manifest")
    enc = sub.add_parser("encode", parents=[common], help="assign docids to every scene")
    enc.add_argument("--strategy", choices=["LABEL", "SEMANTIC", "GPS", "HILBERT"])
    tr = sub.add_parser("train", parents=[common], help="fit the decoder")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--loss", choices=[k.value for k in LossKind])
    ret = sub.add_parser("retrieve", parents=[common], help="rank references for every EVAL query")
    ret.add_argument("--method", choices=["generative", "exact", "lsh"])
    ev = sub.add_parser("eval", parents=[common], help="Hits@N and F1max reports")
    ev.add_argument("--records", nargs="+", help="records files (default: every records_*.jsonl in the run)")
    sub.add_parser("bench", parents=[common], help="retrieval time versus reference size")
    return parser


def _apply_shortcuts(args, cfg):
    if getattr(args, "strategy", None):
        cfg["docid"]["strategy"] = args.strategy
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
    if getattr(args, "loss", None):
        cfg["train"]["loss_kind"] = args.loss
    if getattr(args, "method", None):
        cfg["retrieval"]["method"] = args.method


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    cfg = build_config(args)
    _apply_shortcuts(args, cfg)
    if args.command == "eval":
        return cmd_eval(cfg, args.records)
    return {"prepare": cmd_prepare, "encode": cmd_encode, "train": cmd_train,
            "retrieve": cmd_retrieve, "bench": cmd_bench}[args.command](cfg)


def main(argv=None) -> int:
    try:
        result = run(argv)
    except (CliError, OSError, ValueError, KeyError, TypeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True, default=_json_default))
    return 0


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


if __name__ == "__main__":
    sys.exit(main())
