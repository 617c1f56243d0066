"""Single entry point for the whole pipeline.

Subcommands: make-scenarios, gen-data, split, make-synthetic, train,
predict, eval, report, inspect-quant.

Exit codes (stable contract): 0 success, 2 usage or validation failure,
3 external-service failure, 4 numeric failure. Errors print a single
line "error: <kind>: <message>" on stderr.

Given identical inputs and seeds (mock backend), every data artifact a
subcommand writes is byte-identical across runs; run summaries addition-
ally carry wall-clock timing, which is the one non-reproducible field.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import re
import sys

import numpy as np

from . import config as cfgmod
from . import evalharness as ev
from . import qagen
from . import tasks
from .errors import (ConfigError, InputError, NumericError, QAParseError,
                     ShapeError, TransportError)
from .lora import load_adapters, save_adapters
from .model import init_adapters, init_model_params, quantize_base
from .quant import dequantize_4bit, footprint_report, quantize_4bit
from .trainer import evaluate_accuracy, train, write_trace_csv

CORPUS_FILE = "corpus.jsonl"
REJECTS_FILE = "rejects.jsonl"
LABELS_DIR = "labels"
TRAIN_IDS = "train_ids.txt"
TEST_IDS = "test_ids.txt"
ADAPTERS_FILE = "adapters.bin"
TRACE_FILE = "trace.csv"
SUMMARY_FILE = "summary.json"

_MODEL_NAME_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9_.-]*$")


def _err(message: str) -> None:
    print("error: " + " ".join(str(message).split()), file=sys.stderr)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_cfg(args, **flag_overrides) -> cfgmod.RunConfig:
    overrides = cfgmod.parse_set_overrides(getattr(args, "set", None))
    for key, value in flag_overrides.items():
        if value is not None:
            overrides[key] = value
    return cfgmod.load_config(getattr(args, "config", None), overrides)


def _require_file(path, what: str):
    if not os.path.exists(path):
        raise InputError(f"{what} not found: {path}")
    return path


# ---- subcommand handlers ----

def cmd_make_scenarios(args) -> int:
    cfg = _load_cfg(args, seed=args.seed)
    scenarios = tasks.synthetic_scenarios(
        args.n, cfgmod.derive_seed(cfg.seed, "scenarios"))
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    qagen.write_scenarios_jsonl(args.out, scenarios)
    print(f"make-scenarios: wrote {len(scenarios)} scenarios to {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args, seed=args.seed, backend=args.backend)
    scenarios = qagen.read_scenarios_jsonl(_require_file(args.scenarios,
                                                         "scenarios file"))
    client_spec = cfgmod.client_spec_from(cfg)
    client = qagen.make_client(client_spec, seed=cfgmod.derive_seed(cfg.seed, "qagen"))
    result = qagen.generate_dataset(scenarios, client,
                                    max_retries=cfg.max_retries,
                                    max_concurrency=cfg.max_concurrency)
    os.makedirs(args.out, exist_ok=True)
    qagen.write_records_jsonl(os.path.join(args.out, CORPUS_FILE), result.records)
    qagen.write_rejects_jsonl(os.path.join(args.out, REJECTS_FILE), result.rejects)
    ev.write_label_files(os.path.join(args.out, LABELS_DIR), tasks.DEFAULT_LABEL_SETS)
    _write_json(os.path.join(args.out, "gen_summary.json"),
                {"stats": result.stats, "config": cfgmod.config_dict(cfg)})
    print(f"gen-data: {result.stats['records']} records, "
          f"{result.stats['rejected']} rejected -> {args.out}")
    return 0


def cmd_split(args) -> int:
    cfg = _load_cfg(args, seed=args.seed, test_fraction=args.test_fraction)
    records = qagen.read_records_jsonl(_require_file(args.corpus, "corpus file"))
    train_ids, test_ids = qagen.split_dataset(
        records, cfg.test_fraction, cfgmod.derive_seed(cfg.seed, "split"))
    os.makedirs(args.out, exist_ok=True)
    qagen.write_manifest(os.path.join(args.out, TRAIN_IDS), train_ids)
    qagen.write_manifest(os.path.join(args.out, TEST_IDS), test_ids)
    print(f"split: {len(train_ids)} train / {len(test_ids)} test scenarios -> {args.out}")
    return 0


def cmd_make_synthetic(args) -> int:
    cfg = _load_cfg(args, seed=args.seed)
    train_set, test_set = tasks.synthetic_token_task(
        n_train=args.n_train, n_test=args.n_test, vocab_size=cfg.vocab_size,
        n_classes=cfg.n_classes, seq_len=args.seq_len, purity=args.purity,
        seed=cfgmod.derive_seed(cfg.seed, "task"))
    os.makedirs(args.out, exist_ok=True)
    tasks.write_token_examples(os.path.join(args.out, "train.jsonl"), train_set)
    tasks.write_token_examples(os.path.join(args.out, "test.jsonl"), test_set)
    _write_json(os.path.join(args.out, "task.json"), {
        "vocab_size": cfg.vocab_size,
        "n_classes": cfg.n_classes,
        "seq_len": args.seq_len,
        "n_train": args.n_train,
        "n_test": args.n_test,
        "purity": args.purity,
        "seed": cfg.seed,
    })
    print(f"make-synthetic: {args.n_train} train / {args.n_test} test -> {args.out}")
    return 0


def _aggregate_footprint(params) -> dict:
    from .quant import Q4BlockMatrix

    dense = payload = total = 0
    for value in params.weights.values():
        if isinstance(value, Q4BlockMatrix):
            rep = footprint_report(value)
            dense += rep["dense_bytes"]
            payload += rep["code_bytes"] + rep["scale_bytes"]
            total += rep["total_bytes"]
    return {
        "dense_bytes": dense,
        "quant_payload_bytes": payload,
        "quant_total_bytes": total,
        "payload_ratio": dense / payload if payload else 0.0,
        "total_ratio": dense / total if total else 0.0,
    }


def cmd_train(args) -> int:
    cfg = _load_cfg(args, seed=args.seed,
                    qlora=("true" if args.qlora else None))
    data = args.data
    corpus_path = os.path.join(data, CORPUS_FILE)
    token_path = os.path.join(data, "train.jsonl")
    labels = None
    if os.path.exists(corpus_path):
        mode = "corpus"
        records = qagen.read_records_jsonl(corpus_path)
        label_sets = ev.read_label_dir(os.path.join(data, LABELS_DIR))
        union = tasks.union_labels(label_sets)
        manifest_path = os.path.join(data, TRAIN_IDS)
        if os.path.exists(manifest_path):
            keep = set(qagen.read_manifest(manifest_path))
            records = [r for r in records if r.scenario_id in keep]
        if not records:
            raise InputError(f"no training records in {corpus_path}")
        examples, skipped = tasks.corpus_to_examples(
            records, label_sets, union, cfg.vocab_size, cfg.max_seq_len)
        if skipped:
            print(f"train: skipped {skipped} records with unmappable answers")
        spec = cfgmod.model_spec_from(cfg, n_classes=len(union))
        labels = list(union)
        test_examples = None
    elif os.path.exists(token_path):
        mode = "token"
        with open(os.path.join(data, "task.json"), encoding="utf-8") as fh:
            task = json.load(fh)
        cfg = dataclasses.replace(cfg, vocab_size=int(task["vocab_size"]),
                                  n_classes=int(task["n_classes"]))
        spec = cfgmod.model_spec_from(cfg)
        examples = tasks.read_token_examples(token_path)
        test_path = os.path.join(data, "test.jsonl")
        test_examples = (tasks.read_token_examples(test_path)
                         if os.path.exists(test_path) else None)
    else:
        raise InputError(f"{data} holds neither {CORPUS_FILE} nor train.jsonl")

    params = init_model_params(spec, cfgmod.derive_seed(cfg.seed, "model"),
                               cfg.init_profile)
    footprint = None
    if cfg.qlora:
        params = quantize_base(params, spec, cfg.block_size)
        footprint = _aggregate_footprint(params)
    adapters = init_adapters(spec, cfg.rank, cfg.alpha,
                             cfgmod.derive_seed(cfg.seed, "adapters"))
    tcfg = cfgmod.train_config_from(cfg)
    result = train(examples, params, spec, adapters, tcfg)

    os.makedirs(args.out, exist_ok=True)
    save_adapters(os.path.join(args.out, ADAPTERS_FILE), result.adapters, meta={
        "config": cfgmod.config_dict(cfg),
        "mode": mode,
        "labels": labels,
        "n_classes": spec.n_classes,
    })
    write_trace_csv(result.trace, os.path.join(args.out, TRACE_FILE))
    summary = dict(result.summary)
    summary["config"] = cfgmod.config_dict(cfg)
    summary["mode"] = mode
    summary["labels"] = labels
    if footprint is not None:
        summary["base_footprint"] = footprint
    if mode == "token" and test_examples:
        summary["test_accuracy"] = evaluate_accuracy(params, spec, adapters,
                                                     test_examples)
    _write_json(os.path.join(args.out, SUMMARY_FILE), summary)
    msg = (f"train: {result.summary['optimizer_steps']} steps, "
           f"loss {result.summary['initial_loss']:.4f} -> "
           f"{result.summary['final_mean_loss']:.4f}")
    if "test_accuracy" in summary:
        msg += f", test acc {summary['test_accuracy']:.3f}"
    print(msg + f" -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    adapters, meta = load_adapters(
        _require_file(os.path.join(args.run, ADAPTERS_FILE), "adapter checkpoint"))
    if meta.get("mode") != "corpus" or not meta.get("labels"):
        raise InputError("predict needs a checkpoint trained on a QA corpus")
    cfg = cfgmod.load_config(overrides=meta["config"])
    union = tuple(meta["labels"])
    spec = cfgmod.model_spec_from(cfg, n_classes=int(meta["n_classes"]))
    params = init_model_params(spec, cfgmod.derive_seed(cfg.seed, "model"),
                               cfg.init_profile)
    if cfg.qlora:
        params = quantize_base(params, spec, cfg.block_size)
    records = qagen.read_records_jsonl(
        _require_file(os.path.join(args.data, CORPUS_FILE), "corpus file"))
    if args.split != "all":
        manifest = os.path.join(
            args.data, TEST_IDS if args.split == "test" else TRAIN_IDS)
        keep = set(qagen.read_manifest(_require_file(manifest, "split manifest")))
        records = [r for r in records if r.scenario_id in keep]
    if not records:
        raise InputError(f"no records selected for split {args.split!r}")
    rows = tasks.predict_answers(params, spec, adapters, records, union)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    ev.write_predictions_jsonl(args.out, rows)
    print(f"predict: wrote {len(rows)} predictions to {args.out}")
    return 0


def cmd_eval(args) -> int:
    if not _MODEL_NAME_RE.match(args.model_name):
        raise ConfigError(f"bad model name {args.model_name!r}")
    preds = ev.read_predictions_jsonl(_require_file(args.preds, "predictions file"))
    gold = qagen.read_records_jsonl(_require_file(args.gold, "gold records file"))
    if args.manifest:
        keep = set(qagen.read_manifest(_require_file(args.manifest, "manifest")))
        gold = [r for r in gold if r.scenario_id in keep]
    if not gold:
        raise InputError("no gold records to evaluate")
    gold.sort(key=lambda r: (r.scenario_id, r.pair_index))
    n = args.n if args.n is not None else min(500, len(gold))
    sampled = ev.sample_eval_set(gold, n, args.seed)
    label_sets = ev.read_label_dir(args.labels)

    by_cat: dict[str, tuple[list, list]] = {}
    for record in sampled:
        key = (record.scenario_id, record.pair_index)
        if key not in preds:
            raise InputError(
                f"no prediction for scenario {record.scenario_id} "
                f"pair {record.pair_index}"
            )
        ls = label_sets[record.category]
        golds, guesses = by_cat.setdefault(record.category, ([], []))
        golds.append(ev.normalize_answer(record.answer, ls))
        guesses.append(ev.normalize_answer(preds[key], ls))

    reports = {}
    for category, (golds, guesses) in sorted(by_cat.items()):
        cm = ev.build_confusion(guesses, golds, label_sets[category])
        reports[category] = ev.compute_metrics(cm, args.mode)
    results = {args.model_name: reports}

    os.makedirs(args.out, exist_ok=True)
    table = ev.render_report(results)
    csv_text = ev.render_report_csv(results)
    with open(os.path.join(args.out, f"metrics_{args.model_name}.csv"), "w",
              encoding="utf-8") as fh:
        fh.write(csv_text)
    with open(os.path.join(args.out, f"report_{args.model_name}.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(table)
    _write_json(os.path.join(args.out, f"eval_summary_{args.model_name}.json"), {
        "model_name": args.model_name,
        "preds": args.preds,
        "gold": args.gold,
        "labels": args.labels,
        "manifest": args.manifest,
        "n": n,
        "seed": args.seed,
        "mode": args.mode,
        "metrics": {
            cat: {"accuracy": r.accuracy, "precision": r.precision,
                  "recall": r.recall, "f1": r.f1, "sample_count": r.sample_count}
            for cat, r in reports.items()
        },
    })
    print(table, end="")
    return 0


def _render_merged(cells: dict) -> tuple[str, str]:
    """Rebuild combined text/CSV tables from per-model formatted cells."""
    models = sorted(cells)
    tasks_order = [ev.TASK_DISPLAY[c] for c in ev.CATEGORIES]
    present = [t for t in tasks_order
               if any(t in cells[m] for m in models)]
    if not present:
        raise InputError("metric CSVs contain no tasks")
    rows = []
    for task in present:
        for metric in ev.METRIC_ROWS:
            row_cells = [cells[m].get(task, {}).get(metric, "-") for m in models]
            rows.append((task, metric, row_cells))
    task_w = max(len("Task"), max(len(r[0]) for r in rows))
    metric_w = max(len("Metric"), max(len(r[1]) for r in rows))
    model_w = [max(len(m), 6) for m in models]
    header = f"{'Task':<{task_w}}  {'Metric':<{metric_w}}"
    for m, w in zip(models, model_w):
        header += f"  {m:>{w}}"
    text_lines = [header, "-" * len(header)]
    csv_lines = [",".join(["task", "metric"] + models)]
    last = None
    for task, metric, row_cells in rows:
        shown = task if task != last else ""
        last = task
        line = f"{shown:<{task_w}}  {metric:<{metric_w}}"
        for cell, w in zip(row_cells, model_w):
            line += f"  {cell:>{w}}"
        text_lines.append(line)
        csv_lines.append(",".join([task, metric] + row_cells))
    return "\n".join(text_lines) + "\n", "\n".join(csv_lines) + "\n"


def cmd_report(args) -> int:
    paths = sorted(glob.glob(os.path.join(args.in_dir, "metrics_*.csv")))
    if not paths:
        raise InputError(f"no metrics_*.csv files in {args.in_dir}")
    merged: dict = {}
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            parsed = ev.parse_report_csv(fh.read())
        for model, per_task in parsed.items():
            if model in merged:
                raise InputError(f"duplicate model column {model!r} in {path}")
            merged[model] = per_task
    text, csv_text = _render_merged(merged)
    with open(os.path.join(args.in_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    with open(os.path.join(args.in_dir, "report.csv"), "w", encoding="utf-8") as fh:
        fh.write(csv_text)
    print(text, end="")
    return 0


def _load_weight_matrix(path) -> np.ndarray:
    _require_file(path, "weights file")
    if path.endswith(".npy"):
        arr = np.load(path)
    else:
        arr = np.loadtxt(path, dtype=np.float64, ndmin=2)
    from .matrix import as_matrix

    return as_matrix(arr, "weights")


def cmd_inspect_quant(args) -> int:
    w = _load_weight_matrix(args.weights)
    q = quantize_4bit(w, args.block)
    deq = dequantize_4bit(q)
    max_err = float(np.max(np.abs(deq - w)))
    scales = q.scales.astype(np.float64)
    rep = footprint_report(q)
    pairs = [
        ("rows", q.rows),
        ("cols", q.cols),
        ("block_size", q.block_size),
        ("n_blocks", q.n_blocks),
        ("scale_min", float(scales.min())),
        ("scale_mean", float(scales.mean())),
        ("scale_max", float(scales.max())),
        ("max_roundtrip_error", max_err),
        ("error_bound_half_max_scale", float(scales.max()) / 2.0),
        ("code_bytes", rep["code_bytes"]),
        ("scale_bytes", rep["scale_bytes"]),
        ("header_bytes", rep["header_bytes"]),
        ("total_bytes", rep["total_bytes"]),
        ("dense_bytes", rep["dense_bytes"]),
        ("payload_ratio", rep["payload_ratio"]),
        ("total_ratio", rep["total_ratio"]),
    ]
    if args.format == "csv":
        print("key,value")
        for key, value in pairs:
            print(f"{key},{value!r}" if isinstance(value, float) else f"{key},{value}")
    else:
        print(f"matrix: {q.rows}x{q.cols}  block_size: {q.block_size}  "
              f"blocks: {q.n_blocks}")
        print(f"scales: min={scales.min()!r} mean={scales.mean()!r} "
              f"max={scales.max()!r}")
        print(f"max round-trip error: {max_err!r}")
        print(f"error bound (max scale / 2): {scales.max() / 2.0!r}")
        print(f"bytes: codes={rep['code_bytes']} scales={rep['scale_bytes']} "
              f"header={rep['header_bytes']} total={rep['total_bytes']}")
        print(f"dense 32-bit bytes: {rep['dense_bytes']}")
        print(f"reduction (payload): {rep['payload_ratio']:.2f}x")
        print(f"reduction (total): {rep['total_ratio']:.2f}x")
    return 0


# ---- parser ----

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qlorakit",
        description="LoRA/QLoRA fine-tuning pipeline: data generation, "
                    "training, evaluation, reporting, quantization inspection.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, seed_default=None):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override (repeatable, wins over file)")
        p.add_argument("--seed", type=int, default=seed_default,
                       help="run seed (overrides config)")

    p = sub.add_parser("make-scenarios", help="write a mock scenario JSONL")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=cmd_make_scenarios)

    p = sub.add_parser("gen-data", help="scenarios -> QA corpus")
    p.add_argument("--scenarios", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--backend", choices=["mock", "http"], default=None)
    add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="scenario-level train/test manifests")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--test-fraction", type=float, default=None)
    add_common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("make-synthetic", help="write the token-classification task")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--seq-len", type=int, default=16)
    p.add_argument("--purity", type=float, default=0.85)
    add_common(p)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", help="train adapters on a corpus or token task")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--qlora", action="store_true",
                   help="4-bit quantize the base before training")
    add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="run a trained checkpoint over a corpus")
    p.add_argument("--run", required=True, help="directory written by train")
    p.add_argument("--data", required=True, help="directory holding corpus + manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=["train", "test", "all"], default="test")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against gold records")
    p.add_argument("--preds", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None,
                   help="restrict gold to the scenario ids in this manifest")
    p.add_argument("--n", type=int, default=None,
                   help="evaluation sample size (default min(500, available))")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=list(ev.MODES), default="macro")
    p.add_argument("--model-name", default="model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge metrics_*.csv into one table")
    p.add_argument("--in", dest="in_dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inspect-quant", help="quantization stats for a weight matrix")
    p.add_argument("--weights", required=True, help=".npy or whitespace text matrix")
    p.add_argument("--block", type=int, default=64)
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(func=cmd_inspect_quant)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"config: {exc}")
        return 2
    except (InputError, ShapeError) as exc:
        _err(f"input: {exc}")
        return 2
    except QAParseError as exc:
        _err(f"parse: {exc}")
        return 2
    except FileNotFoundError as exc:
        _err(f"missing file: {exc.filename or exc}")
        return 2
    except TransportError as exc:
        _err(f"transport: {exc}")
        return 3
    except NumericError as exc:
        _err(f"numeric: {exc}")
        return 4


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
