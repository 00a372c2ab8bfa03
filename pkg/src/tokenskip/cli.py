"""Command-line entry point.

Every subcommand reads JSON inputs, writes JSON/CSV outputs and a run record
``<primary output>.run.json`` listing input and output hashes. Exit status is
0 on success, 1 on usage errors (bad flags, missing or malformed files,
invalid configs) and 2 on numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

from . import __version__
from .calibrator import SearchConfig, calibrate_threshold
from .metrics import evaluate, model_size_bits
from .model import ModelConfig, dumps_checkpoint, forward_infer, init_model, model_from_dict
from .numcore import RngState
from .quantizer import NO_OP_BITS, QuantConfig, magnitude_prune, quantize_model
from .taskgen import Dataset, TaskConfig, generate_dataset
from .trainer import TrainConfig, TrainingDiverged, TrainingLog, train

BIT_CHOICES = (2, 3, 4, 8)
RUN_FORMAT_VERSION = 1
TIMESTAMP_KEYS = ("timestamp_elapsed_s",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sha256_log(path) -> str:
    # training logs carry wall-clock fields; hash them with those removed
    h = hashlib.sha256()
    for line in Path(path).read_text().splitlines():
        rec = {k: v for k, v in json.loads(line).items() if k not in TIMESTAMP_KEYS}
        h.update(json.dumps(rec, sort_keys=True).encode() + b"\n")
    return h.hexdigest()


def _read_json(path: str, flag: str):
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: file not found: {path}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{flag}: malformed JSON in {path}: {exc}") from exc


def _load_dataset(path: str) -> Dataset:
    doc = _read_json(path, "--data")
    try:
        return Dataset.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"--data: invalid dataset {path}: {exc}") from exc


def _load_checkpoint(path: str, flag: str = "--ckpt"):
    doc = _read_json(path, flag)
    try:
        return model_from_dict(doc), doc
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{flag}: invalid checkpoint {path}: {exc}") from exc


def _write(path: str, text: str) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(text)


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _check_outputs(inputs: list[str], outputs: list[str]) -> None:
    ins = {Path(p).resolve() for p in inputs}
    for o in outputs:
        if Path(o).resolve() in ins:
            raise UsageError(f"output {o} would overwrite an input file")


def _write_run_record(primary: str, args: argparse.Namespace, inputs: list[str],
                      outputs: list[str], seed=None, logs: tuple[str, ...] = ()) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    record = {
        "format_version": RUN_FORMAT_VERSION,
        "command": args.command,
        "args": flags,
        "seed": seed,
        "tool_version": __version__,
        "inputs": {p: sha256_file(p) for p in inputs},
        "outputs": {p: (_sha256_log(p) if p in logs else sha256_file(p)) for p in outputs},
        "hash_notes": {p: "sha256 with timestamp fields removed" for p in logs},
    }
    _write(primary + ".run.json", _dump_json(record))


def _config_error(flag: str, exc: Exception) -> UsageError:
    return UsageError(f"{flag}: {exc}")


def cmd_gen_data(args) -> None:
    doc = _read_json(args.config, "--config")
    try:
        cfg = TaskConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise _config_error("--config", exc) from exc
    _check_outputs([args.config], [args.out])
    _write(args.out, generate_dataset(cfg).dumps())
    _write_run_record(args.out, args, [args.config], [args.out], seed=cfg.seed)


def _model_config(section: dict, dataset: Dataset) -> ModelConfig:
    section = dict(section)
    section.setdefault("num_classes", dataset.config.num_classes)
    if section.get("embed_dim", ModelConfig.embed_dim) != dataset.inputs.shape[1]:
        section.setdefault("input_dim", int(dataset.inputs.shape[1]))
    return ModelConfig.from_dict(section)


def cmd_train(args) -> None:
    dataset = _load_dataset(args.data)
    doc = _read_json(args.config, "--config")
    if not isinstance(doc, dict):
        raise UsageError("--config: expected a JSON object")
    try:
        cfg = TrainConfig.from_dict(doc)
        mcfg = _model_config(doc.get("model", {}), dataset)
    except (TypeError, ValueError) as exc:
        raise _config_error("--config", exc) from exc
    _check_outputs([args.data, args.config], [args.out, args.log])
    try:
        model, log = train(init_model(mcfg, RngState(cfg.seed)), dataset, cfg)
    except ValueError as exc:
        raise _config_error("--config", exc) from exc
    _write(args.out, dumps_checkpoint(model, {"training": cfg.to_dict()}))
    _write(args.log, log.to_jsonl())
    _write_run_record(args.out, args, [args.data, args.config], [args.out, args.log],
                      seed=cfg.seed, logs=(args.log,))


def cmd_quantize(args) -> None:
    model, _ = _load_checkpoint(args.ckpt)
    inputs = [args.ckpt]
    per_layer = None
    if args.mixed:
        doc = _read_json(args.mixed, "--mixed")
        per_layer = doc.get("per_layer_bits") if isinstance(doc, dict) else None
        if not isinstance(per_layer, list):
            raise UsageError("--mixed: schedule must be an object with a per_layer_bits list")
        bad = [b for b in per_layer if b not in BIT_CHOICES + (NO_OP_BITS,)]
        if bad:
            raise UsageError(f"--mixed: per_layer_bits entries must be in {BIT_CHOICES} or {NO_OP_BITS}, got {bad}")
        if len(per_layer) != model.config.num_layers:
            raise UsageError(f"--mixed: per_layer_bits has {len(per_layer)} entries, "
                             f"model has {model.config.num_layers} layers")
        inputs.append(args.mixed)
    if args.group_size < 1:
        raise UsageError("--group-size: must be >= 1")
    qcfg = QuantConfig(bits=args.bits, group_size=args.group_size, per_layer_bits=per_layer)
    _check_outputs(inputs, [args.out, args.manifest])
    qmodel, manifest = quantize_model(model, qcfg)
    meta = {"quantization": {"bits": args.bits, "group_size": args.group_size,
                             "per_layer_bits": list(per_layer) if per_layer else None}}
    _write(args.out, dumps_checkpoint(qmodel, meta))
    _write(args.manifest, _dump_json({"format_version": 1, "tensors": manifest}))
    _write_run_record(args.out, args, inputs, [args.out, args.manifest])


def cmd_prune(args) -> None:
    if not 0.0 <= args.sparsity < 1.0:
        raise UsageError("--sparsity: must lie in [0, 1)")
    model, _ = _load_checkpoint(args.ckpt)
    _check_outputs([args.ckpt], [args.out])
    pruned = magnitude_prune(model, args.sparsity)
    _write(args.out, dumps_checkpoint(pruned, {"pruning": {"sparsity": args.sparsity}}))
    _write_run_record(args.out, args, [args.ckpt], [args.out])


def cmd_calibrate(args) -> None:
    model, _ = _load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data)
    _check_model_data(model, dataset)
    x, y = dataset.split(args.split)
    _check_outputs([args.ckpt, args.data], [args.out])
    try:
        report = calibrate_threshold(model, x, y, SearchConfig())
    except ValueError as exc:
        raise UsageError(f"--split: {exc}") from exc
    _write(args.out, _dump_json(report.to_dict()))
    _write_run_record(args.out, args, [args.ckpt, args.data], [args.out])


def _check_model_data(model, dataset: Dataset) -> None:
    if model.config.in_dim != dataset.inputs.shape[1]:
        raise UsageError(f"--data: inputs have dimension {dataset.inputs.shape[1]}, "
                         f"checkpoint expects {model.config.in_dim}")


def _block_bits(doc: dict):
    q = doc.get("quantization")
    if not q:
        return 32
    if q.get("per_layer_bits"):
        return [32 if b >= NO_OP_BITS else b for b in q["per_layer_bits"]]
    return q["bits"]


def cmd_eval(args) -> None:
    if not 0.0 < args.theta < 1.0:
        raise UsageError("--theta: must lie in (0, 1)")
    if args.rule == "argmax" and args.theta != 0.5:
        raise UsageError("--theta: the argmax rule is the theta = 0.5 case; leave --theta at 0.5")
    if args.draws < 1 or args.bins < 1:
        raise UsageError("--draws and --bins must be >= 1")
    model, doc = _load_checkpoint(args.ckpt)
    dataset = _load_dataset(args.data)
    _check_model_data(model, dataset)
    inputs = [args.ckpt, args.data]
    reference = None
    if args.reference:
        ref_model, _ = _load_checkpoint(args.reference, "--reference")
        if ref_model.config.num_layers != model.config.num_layers:
            raise UsageError("--reference: layer count differs from --ckpt")
        inputs.append(args.reference)
    x, y = dataset.split(args.split)
    if args.reference:
        _, reference = forward_infer(ref_model, x, args.theta, rule=args.rule)
    _check_outputs(inputs, [args.report])
    rng = RngState(dataset.config.seed)
    report, _ = evaluate(model, x, y, args.theta, rng, n_draws=args.draws, bins=args.bins,
                         rule=args.rule, reference=reference)
    report.extra = {"split": args.split,
                    "model_size_bits": model_size_bits(model.config, _block_bits(doc)),
                    "quantization": doc.get("quantization"), "pruning": doc.get("pruning")}
    _write(args.report, _dump_json(report.to_dict()))
    _write_run_record(args.report, args, inputs, [args.report], seed=dataset.config.seed)


def _classify(path: str):
    if path.endswith(".jsonl"):
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"--inputs: file not found: {path}")
        try:
            return "log", TrainingLog.from_jsonl(p.read_text())
        except (json.JSONDecodeError, KeyError) as exc:
            raise UsageError(f"--inputs: malformed training log {path}: {exc}") from exc
    doc = _read_json(path, "--inputs")
    if isinstance(doc, dict) and "per_layer_exec_ratio" in doc:
        return "metrics", doc
    if isinstance(doc, dict) and "candidates" in doc:
        return "calibration", doc
    raise UsageError(f"--inputs: {path} is neither a metrics report, a calibration report nor a training log")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_report(args) -> None:
    out = Path(args.out_dir)
    kinds = {"metrics": [], "calibration": [], "log": []}
    for p in args.inputs:
        kind, doc = _classify(p)
        kinds[kind].append((p, doc))
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def emit(name, header, rows):
        path = out / name
        _write_csv(path, header, rows)
        written.append(str(path))

    if kinds["metrics"]:
        emit("layer_exec_ratio.csv", ["source", "layer", "exec_ratio", "flipping_ratio"],
             [[src, l, r, f] for src, d in kinds["metrics"]
              for l, (r, f) in enumerate(zip(d["per_layer_exec_ratio"], d["flipping_ratio"]))])
        rows = []
        for src, d in kinds["metrics"]:
            h = d["logit_gap_histogram"]
            edges = h["edges"]
            for i, c in enumerate(h["pooled"]):
                rows.append([src, "all", edges[i], edges[i + 1], c])
            for l, counts in enumerate(h["per_layer"]):
                for i, c in enumerate(counts):
                    rows.append([src, l, edges[i], edges[i + 1], c])
        emit("logit_gap_hist.csv", ["source", "layer", "bin_lo", "bin_hi", "count"], rows)
        emit("efficiency.csv",
             ["source", "accuracy", "theta", "avg_exec_ratio", "flops_full", "flops_adaptive",
              "normalized_flops", "model_size_bits", "path_change_rate"],
             [[src, d["accuracy"], d["theta"], d["avg_exec_ratio"], d["flops_full"], d["flops_adaptive"],
               d["flops_adaptive"] / d["flops_full"], d.get("extra", {}).get("model_size_bits"),
               d.get("path_change_rate")] for src, d in kinds["metrics"]])
    if kinds["log"]:
        emit("training_dynamics.csv", ["source", "epoch", "layer", "exec_ratio", "flip_ratio"],
             [[src, e["epoch"], l, r, f] for src, log in kinds["log"] for e in log.epochs
              for l, (r, f) in enumerate(zip(e["layer_exec_ratio"], e["layer_flip_ratio"]))])
    if kinds["calibration"]:
        emit("threshold_sweep.csv", ["source", "phase", "theta", "accuracy", "exec_ratio"],
             [[src, c["phase"], c["theta"], c["accuracy"], c["exec_ratio"]]
              for src, d in kinds["calibration"] for c in d["candidates"]])
    _write_run_record(str(out / "report"), args, list(args.inputs), written)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tokenskip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--config", required=True, help="task config JSON")
    p.add_argument("--out", required=True, help="dataset JSON to write")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a routed model (lambda2 = 0 is the baseline)")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--config", required=True, help="train config JSON, optional 'model' section")
    p.add_argument("--out", required=True, help="checkpoint JSON to write")
    p.add_argument("--log", required=True, help="training log JSON lines to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("quantize", help="groupwise round-to-nearest weight quantization")
    p.add_argument("--ckpt", required=True, help="input checkpoint")
    p.add_argument("--bits", required=True, type=int, choices=BIT_CHOICES, help="bit width")
    p.add_argument("--group-size", type=int, default=128, help="weights per group (default 128)")
    p.add_argument("--mixed", help="schedule JSON {\"per_layer_bits\": [...]}; 16 leaves a layer unquantized")
    p.add_argument("--out", required=True, help="quantized checkpoint to write")
    p.add_argument("--manifest", required=True, help="per-tensor quantization manifest to write")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("prune", help="unstructured magnitude pruning of block weights")
    p.add_argument("--ckpt", required=True, help="input checkpoint")
    p.add_argument("--sparsity", type=float, required=True, help="fraction in [0, 1)")
    p.add_argument("--out", required=True, help="pruned checkpoint to write")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("calibrate", help="grid search for the execution threshold")
    p.add_argument("--ckpt", required=True, help="input checkpoint")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--split", default="calib", choices=("train", "calib", "test"), help="default calib")
    p.add_argument("--out", required=True, help="calibration report to write")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval", help="accuracy and routing diagnostics on one split")
    p.add_argument("--ckpt", required=True, help="input checkpoint")
    p.add_argument("--data", required=True, help="dataset JSON")
    p.add_argument("--theta", type=float, default=0.5, help="execution threshold in (0, 1)")
    p.add_argument("--rule", default="threshold", choices=("threshold", "argmax"), help="routing rule")
    p.add_argument("--split", default="test", choices=("train", "calib", "test"), help="default test")
    p.add_argument("--reference", help="checkpoint whose routing the path change rate is measured against")
    p.add_argument("--draws", type=int, default=16, help="Gumbel draws per decision for the flipping ratio")
    p.add_argument("--bins", type=int, default=20, help="logit-gap histogram bins")
    p.add_argument("--report", required=True, help="metrics report to write")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="figure CSVs and the efficiency table")
    p.add_argument("--inputs", nargs="+", required=True,
                   help="metrics reports, calibration reports and training logs (.jsonl)")
    p.add_argument("--out-dir", required=True, help="directory for the CSV files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
