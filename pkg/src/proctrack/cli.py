"""Command-line entry point: ``python -m proctrack <command>``.

Exit codes: 0 ok, 2 validation failure, 3 numeric failure, 4 I/O failure.
Errors are printed to stderr as one JSON object ``{"code", "message"}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from . import checkpoint, gradchecks, metrics
from .encoder import Ablations, EncoderConfig
from .errors import ConfigError, IOFailure, ProctrackError, ValidationError
from .ingest import (
    DatasetSplit,
    dump_grid_tsv,
    dump_procedural,
    dump_story,
    file_sha256,
    load_any,
    load_procedural,
)
from .synthetic import STORY_ATTRIBUTES, synthesize, synthesize_stories
from .trainer import ProceduralModel, TrainConfig, augment, config_hash, predict_split, self_train, train

log = logging.getLogger("proctrack")

OUTPUT_ROOT_ENV = "PROCTRACK_OUTPUT_ROOT"

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"ablations"}
_ENCODER_KEYS = {f.name for f in fields(EncoderConfig)}
_ABLATION_KEYS = {f.name for f in fields(Ablations)}
_RUN_KEYS = {"task", "train", "dev", "test", "pool", "output_dir", "no_crf", "augment", "retrain_epochs"}
CONFIG_KEYS = _TRAIN_KEYS | _ENCODER_KEYS | _ABLATION_KEYS | _RUN_KEYS


# ---------------------------------------------------------------------------
# config


def parse_config(obj: dict) -> dict:
    """Validate a flat run config. Unknown keys are rejected."""
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(obj) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    task = obj.get("task", "procedural")
    if task not in ("procedural", "story"):
        raise ConfigError(f"task must be 'procedural' or 'story', got {task!r}")
    if "train" not in obj:
        raise ConfigError("config needs a 'train' path")
    try:
        ablations = Ablations(**{k: bool(obj[k]) for k in _ABLATION_KEYS if k in obj})
        train_cfg = TrainConfig(ablations=ablations, **{k: obj[k] for k in _TRAIN_KEYS if k in obj})
        enc = EncoderConfig(**{k: obj[k] for k in _ENCODER_KEYS if k in obj})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return {
        "task": task,
        "train_config": train_cfg,
        "encoder": enc,
        "paths": {k: obj.get(k) for k in ("train", "dev", "test", "pool")},
        "output_dir": obj.get("output_dir", "runs"),
        "no_crf": bool(obj.get("no_crf", True)),
        "augment": bool(obj.get("augment", False)),
        "retrain_epochs": obj.get("retrain_epochs"),
    }


def read_json(path: str | Path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON: {exc.msg}") from None


def write_text(path: str | Path, text: str) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    split = load_any(args.check) if args.format is None else load_procedural(args.check, args.format)
    if split.is_story:
        for pair in split.examples:
            pair.validate(split.attributes)
    info = {"path": str(args.check), "task": "story" if split.is_story else "procedural", "stats": split.stats}
    if not split.is_story:
        info["annotated"] = sum(1 for ex in split.examples if ex.annotated)
        info["pool"] = len(split.pool)
    print(json.dumps(info, sort_keys=True))
    return 0


def _predict_story_split(model, split: DatasetSplit) -> str:
    from .story import story_predict

    return "".join(json.dumps(story_predict(model, pair)[1].to_json(), sort_keys=True) + "\n" for pair in split.examples)


def _evaluate(gold: DatasetSplit, pred_text: str) -> dict:
    lines = pred_text.splitlines()
    if gold.is_story:
        records = []
        for i, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                records.append(metrics.StoryPredictionRecord.from_json(json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"predictions line {i}: invalid JSON: {exc.msg}") from None
        return {"story": metrics.story_metrics(gold.examples, records, gold.attributes).to_dict()}
    from .ingest import parse_procedural_jsonl

    pred = parse_procedural_jsonl(lines, "<predictions>", recreation="warn")
    return metrics.procedural_report(gold.annotated, pred)


def cmd_train(args) -> int:
    raw = read_json(args.config)
    cfg = parse_config(raw)
    root = os.environ.get(OUTPUT_ROOT_ENV) or cfg["output_dir"]
    train_split = load_any(cfg["paths"]["train"])
    if train_split.is_story != (cfg["task"] == "story"):
        raise ConfigError(f"train file does not match task {cfg['task']!r}")
    run_hash = config_hash({"config": raw, "data": file_sha256(cfg["paths"]["train"])})
    run_dir = Path(args.run_dir) if args.run_dir else Path(root) / f"{cfg['task']}-{run_hash[:12]}"
    write_text(run_dir / "config.json", dump_json(raw))
    tc, enc = cfg["train_config"], cfg["encoder"]
    dev = load_any(cfg["paths"]["dev"]) if cfg["paths"]["dev"] else None

    stages = []
    if cfg["task"] == "story":
        from .story import train_story

        result = train_story(train_split, tc, enc, no_crf=cfg["no_crf"])
        model, history = result.model, result.history
        stages.append(result.manifest)
    elif cfg["augment"]:
        if not cfg["paths"]["pool"]:
            raise ConfigError("augment needs a 'pool' path")
        pool = load_procedural(cfg["paths"]["pool"])
        first, mixed, second, stages = self_train(train_split, pool, tc, enc, dev, cfg["retrain_epochs"])
        first.model.save(run_dir / "checkpoint_gold.json")
        write_text(run_dir / "pseudo_labeled.jsonl", dump_procedural(mixed.examples))
        model, history = second.model, first.history + second.history
    else:
        result = train(train_split, tc, enc, dev)
        model, history = result.model, result.history
        stages.append(result.manifest)

    ckpt_hash = model.save(run_dir / "checkpoint.json")
    write_text(run_dir / "history.jsonl", "".join(json.dumps(h, sort_keys=True) + "\n" for h in history))
    manifest = {
        "task": cfg["task"],
        "config_hash": config_hash(raw),
        "train_data_sha256": file_sha256(cfg["paths"]["train"]),
        "checkpoint": "checkpoint.json",
        "checkpoint_sha256": ckpt_hash,
        "stages": stages,
    }
    if cfg["paths"]["test"]:
        test = load_any(cfg["paths"]["test"])
        if test.is_story:
            pred_text = _predict_story_split(model, test)
        else:
            pred_text = dump_procedural(predict_split(model, test).examples)
        write_text(run_dir / "predictions.jsonl", pred_text)
        report = _evaluate(test, pred_text)
        write_text(run_dir / "report.json", dump_json(report))
        manifest["final_metrics"] = report
    write_text(run_dir / "manifest.json", dump_json(manifest))
    print(json.dumps({"run_dir": str(run_dir), "checkpoint_sha256": ckpt_hash}))
    return 0


def load_model(path):
    obj = checkpoint.read(path)
    if obj["task"] == "story":
        from .story import StoryModel

        return StoryModel.from_checkpoint(obj)
    return ProceduralModel.from_checkpoint(obj)


def cmd_predict(args) -> int:
    model = load_model(args.model)
    data = load_any(args.data)
    if data.is_story != (type(model).__name__ == "StoryModel"):
        raise ValidationError("checkpoint task does not match the data file")
    text = _predict_story_split(model, data) if data.is_story else dump_procedural(predict_split(model, data).examples)
    write_text(args.out, text)
    return 0


def cmd_eval(args) -> int:
    gold = load_any(args.gold)
    try:
        pred_text = Path(args.pred).read_text(encoding="utf-8")
    except OSError as exc:
        raise IOFailure(f"cannot read {args.pred}: {exc}") from exc
    report = _evaluate(gold, pred_text)
    render = {"json": dump_json, "table": metrics.to_table, "csv": metrics.to_csv}[args.format]
    text = render(report)
    if args.report:
        write_text(args.report, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_augment(args) -> int:
    model = load_model(args.model)
    if not isinstance(model, ProceduralModel):
        raise ValidationError("augmentation needs a procedural checkpoint")
    pool = load_procedural(args.pool)
    gold = load_procedural(args.gold) if args.gold else DatasetSplit([], "gold")
    mixed = augment(gold, pool, model)
    write_text(args.out, dump_procedural(mixed.examples))
    print(json.dumps({"pseudo_examples": sum(1 for ex in mixed.examples if ex.pseudo), "gold_examples": len(gold.annotated)}))
    return 0


def cmd_gradcheck(args) -> int:
    modules = [args.module] if args.module != "all" else list(gradchecks.SUITES)
    report = gradchecks.run(modules)
    print(dump_json(report), end="")
    return 0 if report["ok"] else 3


def cmd_synth(args) -> int:
    if args.story:
        split = synthesize_stories(args.paragraphs, args.seed)
        text = dump_story(STORY_ATTRIBUTES, split.examples)
    else:
        gold, pool = synthesize(args.paragraphs, args.seed, pool=args.pool)
        text = dump_grid_tsv(gold.examples) if args.format == "grid_tsv" else dump_procedural(gold.examples)
        if args.pool_out:
            write_text(args.pool_out, dump_procedural(pool.examples))
    if args.out:
        write_text(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="proctrack", description="Entity state tracking over procedural text and stories.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse and validate a data file")
    p.add_argument("--check", required=True, metavar="PATH")
    p.add_argument("--format", choices=["jsonl", "grid_tsv"])
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train from a flat JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--run-dir", help="explicit run directory (default: <output root>/<task>-<hash>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="decode timelines or story predictions")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against gold")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--report")
    p.add_argument("--format", choices=["json", "table", "csv"], default="json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("augment", help="pseudo-label an unannotated pool")
    p.add_argument("--model", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gold", help="gold file to prepend to the output")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--module", choices=["all", *gradchecks.SUITES], default="all")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="emit a synthetic corpus")
    p.add_argument("--paragraphs", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool", type=int, default=0, help="unannotated paragraphs to generate")
    p.add_argument("--pool-out")
    p.add_argument("--story", action="store_true", help="emit story pairs instead (count = --paragraphs)")
    p.add_argument("--format", choices=["jsonl", "grid_tsv"], default="jsonl")
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ProctrackError as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return exc.exit_status


if __name__ == "__main__":
    sys.exit(main())
