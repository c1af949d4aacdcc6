"""Command-line interface: synthesize datasets, train, evaluate, and dump
corpus statistics. Exit codes: 0 ok, 2 usage/config error, 3 data or
checkpoint corruption, 4 internal invariant violation."""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter, defaultdict
from pathlib import Path
from typing import get_type_hints

import numpy as np

from .ingest import (
    DatasetError,
    SynthSpec,
    generate_synthetic_dataset,
    load_dataset,
    load_dataset_with_meta,
    write_dataset,
)
from .trainer import (
    CheckpointError,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .types import ModelConfig

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

DEFAULT_IMAGE_SIZE = (640, 360)


class ConfigError(Exception):
    """Bad command usage or an unreadable/invalid config file."""


def parse_config_file(path: str | Path) -> ModelConfig:
    """Read a flat ``key = value`` file mirroring :class:`ModelConfig`."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    hints = get_type_hints(ModelConfig)
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key or not raw:
            raise ConfigError(f"{path.name} line {lineno}: expected 'key = value'")
        if key not in hints:
            raise ConfigError(f"{path.name} line {lineno}: unknown config key '{key}'")
        try:
            values[key] = int(raw) if hints[key] is int else float(raw)
        except ValueError as e:
            raise ConfigError(f"{path.name} line {lineno}: {e}") from e
    try:
        return ModelConfig(**values)
    except ValueError as e:
        raise ConfigError(f"{path.name}: {e}") from e


def _dataset_paths(root: str | Path) -> tuple[Path, Path]:
    root = Path(root)
    return root / "annotations.jsonl", root / "features"


def _write_json(path: str | Path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2)
        f.write("\n")


def cmd_synth(args) -> int:
    if args.n <= 0:
        raise ConfigError(f"--n must be positive, got {args.n}")
    try:
        spec = SynthSpec(
            n_examples=args.n,
            frames_range=(args.frames, args.frames),
            objects_range=(args.objects, args.objects),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e
    examples = generate_synthetic_dataset(spec, args.seed)
    ann_path = write_dataset(
        examples, args.out, image_size=(spec.image_width, spec.image_height)
    )
    print(
        f"wrote {len(examples)} examples "
        f"(T={args.frames}, objects/frame={args.objects}, seed={args.seed}) "
        f"to {ann_path.parent}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    config = parse_config_file(args.config)
    train_ann, train_feat = _dataset_paths(args.data)
    val_ann, val_feat = _dataset_paths(args.val)
    train_ds = load_dataset(train_ann, train_feat, config)
    val_ds = load_dataset(val_ann, val_feat, config)
    if not train_ds or not val_ds:
        raise DatasetError("train/val datasets must be non-empty")

    best_state, history = train(train_ds, val_ds, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "best.ckpt"
    save_checkpoint(best_state, config, ckpt_path)
    with open(out / "history.jsonl", "w") as f:
        for entry in history:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    report = evaluate(val_ds, best_state, config)
    _write_json(out / "report.json", report.to_dict())

    best = max(history, key=lambda h: h["val_qa_acc"])
    print(
        f"trained {len(history)} epochs; best val QA acc {best['val_qa_acc']:.4f} "
        f"at epoch {best['epoch']}"
    )
    print(
        f"final val: qa_acc={report.qa_acc:.4f} temp_miou={report.temp_miou:.4f} "
        f"asa={report.asa:.4f} grd_map={report.grd_map:.4f}"
    )
    print(f"checkpoint: {ckpt_path}")
    return EXIT_OK


def _accuracy_by_type(per_question: list[dict]) -> dict[str, float]:
    grouped = defaultdict(list)
    for q in per_question:
        grouped[q.get("question_type") or "unknown"].append(q["answer_correct"])
    return {k: sum(v) / len(v) for k, v in sorted(grouped.items())}


def cmd_eval(args) -> int:
    state, config = load_checkpoint(args.ckpt)
    ann, feat = _dataset_paths(args.data)
    dataset = load_dataset(ann, feat, config)
    report = evaluate(dataset, state, config)
    payload = report.to_dict()
    payload["qa_acc_by_question_type"] = _accuracy_by_type(report.per_question)
    _write_json(args.report, payload)
    print(
        f"evaluated {len(dataset)} questions: qa_acc={report.qa_acc:.4f} "
        f"temp_miou={report.temp_miou:.4f} asa={report.asa:.4f} "
        f"grd_map={report.grd_map:.4f}"
    )
    print(f"report: {args.report}")
    return EXIT_OK


def cmd_stats(args) -> int:
    ann, feat = _dataset_paths(args.data)
    examples, meta = load_dataset_with_meta(ann, feat)

    ratios = []
    category_counts: Counter[str] = Counter()
    span_lengths: Counter[int] = Counter()
    for ex in examples:
        m = meta.get(ex.qid, {})
        width = m.get("width") or DEFAULT_IMAGE_SIZE[0]
        height = m.get("height") or DEFAULT_IMAGE_SIZE[1]
        image_area = float(width * height)
        tokens = ex.hypothesis(ex.gt_answer_idx).tokens
        span_lengths[ex.gt_span.length] += 1
        for annot in ex.concept_annotations:
            word = tokens[annot.word_index] if annot.word_index < len(tokens) else "?"
            for box in annot.gt_boxes:
                ratios.append(min(max(box.area / image_area, 0.0), 1.0))
                category_counts[word] += 1

    edges = np.linspace(0.0, 1.0, 11)
    counts, _ = np.histogram(ratios, bins=edges)
    payload = {
        "n_examples": len(examples),
        "n_boxes": len(ratios),
        "box_area_ratio_hist": {
            "bin_edges": [float(e) for e in edges],
            "counts": [int(c) for c in counts],
        },
        "span_length_counts": {str(k): v for k, v in sorted(span_lengths.items())},
        "box_counts_by_category": dict(sorted(category_counts.items())),
    }
    _write_json(args.out, payload)
    print(
        f"{len(examples)} examples, {len(ratios)} boxes, "
        f"{len(category_counts)} categories -> {args.out}"
    )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stagevqa",
        description="Spatio-temporal video QA: answer, span, and grounding prediction.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-signal dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of examples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=12, help="frames per clip")
    p.add_argument("--objects", type=int, default=4, help="objects per frame")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoint/history")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val", required=True, help="validation dataset directory")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--report", required=True, help="where to write the report JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="dump corpus statistics")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="where to write the statistics JSON")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits 2 on usage errors, 0 on --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # anything else is a broken internal invariant
        print(f"internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
