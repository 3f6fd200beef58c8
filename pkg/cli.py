"""
Command-line entry point.

Subcommands:
    gen-data   generate the synthetic clip corpus
    train-gen  train the attention map generator
    train-vlm  train the explainer with an attention source
    eval       generate explanations and score them
    visualize  write a keyframe attention overlay
    compare    tabulate the three attention variants
"""

import argparse
import os
import shutil
import sys
from typing import Any, Dict, List, Optional

from loguru import logger
from rich.console import Console
from rich.table import Table

from analytics_service import analytics_service
from attention_providers import ATTENTION_SOURCES, make_attention_provider
from attn_generator import load_generator, save_generator, significance_cases
from config import (load_config_file, overrides_from, resolve, scene_spec_from, train_config_from, vlm_config_from,
                    write_resolved)
from exceptions import CheckpointError, ConfigError, ExplainerError
from metrics import evaluate_records
from mini_vlm import load_vlm, save_vlm
from models import ACTION_CLASSES, EvalRecord, PatchAttentionMap
from scene_data import action_marginal, estimate_action_marginal, generate_corpus, split_clips
from storage import load_clip, load_dataset, load_manifest, read_json, save_dataset, write_json, write_jsonl
from training import generate_records, train_generator, train_vlm, vlm_validation_loss
from visualize import render_overlay, save_overlay
from vocabulary import Vocabulary

console = Console()

LOG_FORMAT = "{time:YYYY-MM-DD HH:mm:ss,SSS} - {name} - {level} - {message}"
SPLITS = ("validation", "train", "all")

# argparse dest -> config key, per command
FLAG_KEYS: Dict[str, Dict[str, str]] = {
    "gen-data": {"clips": "data.clips", "seed": "data.seed", "out": "data.out"},
    "train-gen": {"data": "data.path", "seed": "train.seed", "epochs": "train.epochs", "lr": "train.lr",
                  "batch_size": "train.batch_size", "out": "out"},
    "train-vlm": {"data": "data.path", "seed": "train.seed", "epochs": "train.epochs", "lr": "train.lr",
                  "batch_size": "train.batch_size", "attention": "train.attention_source",
                  "generator": "generator.checkpoint", "out": "out"},
    "eval": {"data": "data.path", "checkpoint": "vlm.checkpoint", "generator": "generator.checkpoint",
             "attention": "eval.attention_source", "split": "eval.split", "self_check": "eval.self_check",
             "out": "out"},
    "visualize": {"data": "data.path", "checkpoint": "vlm.checkpoint", "generator": "generator.checkpoint",
                  "attention": "eval.attention_source", "clip_id": "clip_id", "scale": "visualize.scale",
                  "out": "out"},
    "compare": {"none": "compare.none", "oracle_object": "compare.oracle_object",
                "predicted_patch": "compare.predicted_patch", "out": "out"},
}


def configure_logging(verbose: bool = False):
    logger.remove()
    logger.add(sys.stderr, level="DEBUG" if verbose else "INFO", format=LOG_FORMAT)


def _prepare_output(directory: str, force: bool):
    """Create an output directory; a non-empty one is replaced only with --force"""
    if os.path.isdir(directory) and os.listdir(directory):
        if not force:
            raise ConfigError(f"Output directory {directory} is not empty (use --force to overwrite)")
        logger.warning(f"Replacing contents of {directory}")
        shutil.rmtree(directory)
    os.makedirs(directory, exist_ok=True)


def _table(title: str, columns: List[str], rows: List[List[Any]]) -> Table:
    table = Table(title=title)
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row))
    return table


def _write_history(history, directory: str):
    history.save(directory)
    analytics_service.write_chart(analytics_service.generate_history_chart(history.to_dict()),
                                  os.path.join(directory, "history.html"))
    summary = analytics_service.summarize_history(history.to_dict())
    console.print(_table("Training summary", ["field", "value"], [[k, v] for k, v in summary.items()]))


def _generator_or_none(path: str):
    return load_generator(path) if path else None


def cmd_gen_data(config: Dict[str, Any], force: bool = False) -> str:
    """Generate the corpus and print its action marginals"""
    count = config["data.clips"]
    if count < 1:
        raise ConfigError(f"--clips must be at least 1, got {count}")
    spec = scene_spec_from(config)
    out = config["data.out"]
    _prepare_output(out, force)

    clips = generate_corpus(spec, count)
    observed = action_marginal(clips)
    estimated = estimate_action_marginal(spec, samples=config["data.marginal_samples"])
    _, validation = split_clips(clips)
    save_dataset(clips, out, spec, extra={
        "action_marginal": observed,
        "estimated_action_marginal": estimated,
        "validation_clips": [c.clip_id for c in validation],
    })
    write_resolved(config, out, "gen-data")

    console.print(f"Generated {len(clips)} clips ({len(validation)} validation) in {out}")
    console.print(_table("Action marginals", ["action", "observed", "rule-table estimate"],
                         [[a, observed[a], estimated[a]] for a in ACTION_CLASSES]))
    return out


def cmd_train_gen(config: Dict[str, Any], force: bool = False) -> str:
    train_config = train_config_from(config)
    clips = load_dataset(config["data.path"])
    out = config["out"]
    _prepare_output(out, force)

    model, history = train_generator(train_config, clips)
    save_generator(model, out, step=len(history.epochs), seed=train_config.seed,
                   extra={"best_epoch": history.best_epoch})
    _write_history(history, out)
    write_resolved(config, out, "train-gen")
    return out


def cmd_train_vlm(config: Dict[str, Any], force: bool = False) -> str:
    train_config = train_config_from(config)
    source = train_config.attention_source
    data_path = config["data.path"]
    manifest = load_manifest(data_path)
    generator = _generator_or_none(config["generator.checkpoint"]) if source == "predicted-patch" else None
    provider = make_attention_provider(source, manifest["patch_size"], generator,
                                       config["selection.tau"], config["selection.k"])
    clips = load_dataset(data_path)
    out = config["out"]
    _prepare_output(out, force)

    model_config = vlm_config_from(config, height=manifest["height"], width=manifest["width"],
                                   patch_size=manifest["patch_size"], num_frames=manifest["num_frames"],
                                   vocab_size=len(Vocabulary()))
    model, history = train_vlm(train_config, clips, provider, model_config)
    save_vlm(model, out, step=len(history.epochs), seed=train_config.seed,
             extra={"attention_source": source, "best_epoch": history.best_epoch})
    _write_history(history, out)
    write_resolved(config, out, "train-vlm")
    return out


def _select_split(clips, split: str):
    if split not in SPLITS:
        raise ConfigError(f"Unknown split '{split}', expected one of {SPLITS}")
    if split == "all":
        return list(clips)
    train, validation = split_clips(clips)
    chosen = validation if split == "validation" else train
    if not chosen:
        logger.warning(f"The {split} split is empty, evaluating every clip")
        return list(clips)
    return chosen


def cmd_eval(config: Dict[str, Any], force: bool = False) -> str:
    """Generate over a split, score the generations and write report.json"""
    if not config["vlm.checkpoint"]:
        raise CheckpointError("eval needs an explainer checkpoint (--checkpoint)")
    model = load_vlm(config["vlm.checkpoint"])
    data_path = config["data.path"]
    manifest = load_manifest(data_path)
    generator = _generator_or_none(config["generator.checkpoint"])
    source = config["eval.attention_source"]
    provider = make_attention_provider(source, manifest["patch_size"], generator,
                                       config["selection.tau"], config["selection.k"])
    clips = _select_split(load_dataset(data_path), config["eval.split"])
    out = config["out"]
    _prepare_output(out, force)

    batch_size = config["eval.batch_size"]
    if config["eval.self_check"]:
        records = [EvalRecord(clip_id=c.clip_id, candidate=c.gt_explanation, reference=c.gt_explanation,
                              attention_source=source) for c in clips]
    else:
        logger.info(f"Processing {len(clips)} clips with {source} attention")
        records = generate_records(model, clips, provider, batch_size=batch_size)

    ce_loss = vlm_validation_loss(model, clips, provider, batch_size=batch_size)
    cases = significance_cases(generator, clips) if generator is not None else None
    report = evaluate_records(records, cases=cases, ce_loss=ce_loss, attention_source=source)

    write_jsonl(os.path.join(out, "generations.jsonl"), [r.to_dict() for r in records])
    write_json(os.path.join(out, "report.json"), {
        **report.to_dict(),
        "split": config["eval.split"],
        "self_check": config["eval.self_check"],
        "checkpoint": config["vlm.checkpoint"],
    })
    write_resolved(config, out, "eval")

    console.print(_table(f"Evaluation ({source}, {len(records)} clips)", ["metric", "value"],
                         [[k, v] for k, v in report.scores().items() if v is not None]
                         + [["parse_rate", report.parse_rate]]))
    return out


def cmd_visualize(config: Dict[str, Any], force: bool = False) -> str:
    """Write the keyframe overlay of one clip"""
    clip_id = config["clip_id"]
    if not clip_id:
        raise ConfigError("visualize needs --clip-id")
    out = config["out"]
    if os.path.exists(out) and not force:
        raise ConfigError(f"{out} already exists (use --force to overwrite)")

    data_path = config["data.path"]
    manifest = load_manifest(data_path)
    clip = load_clip(data_path, clip_id)
    generator = _generator_or_none(config["generator.checkpoint"])
    source = config["eval.attention_source"]
    provider = make_attention_provider(source, manifest["patch_size"], generator,
                                       config["selection.tau"], config["selection.k"])

    height, width = clip.keyframe.pixels.shape[:2]
    patch_map = provider.map_for(clip) or PatchAttentionMap.full(height, width, manifest["patch_size"])
    boxes, scores = [], None
    if source == "oracle-object":
        boxes = [clip.gt_box]
    elif source == "predicted-patch":
        a_sig = generator.score_clip(clip).a_sig
        selected = provider.selected(clip)
        boxes = [clip.detections[i].box for i in selected]
        scores = [float(a_sig[i]) for i in selected]

    generated = ""
    if config["vlm.checkpoint"]:
        model = load_vlm(config["vlm.checkpoint"])
        maps = provider.maps([clip])
        generated = model.explain(clip.pixel_stack()[None], maps)[0]

    image = render_overlay(clip.keyframe.pixels, patch_map, boxes, scores, generated, clip.gt_explanation,
                           scale=config["visualize.scale"])
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    save_overlay(image, out)
    write_json(os.path.splitext(out)[0] + ".config.json", {"command": "visualize", **config})
    return out


def _read_report(path: str, variant: str) -> Dict[str, Any]:
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    if not os.path.exists(path):
        raise ConfigError(f"No report for variant {variant} at {path}")
    return read_json(path)


def cmd_compare(config: Dict[str, Any], force: bool = False) -> str:
    """Ablation table over the three attention variants"""
    paths = {
        "none": config["compare.none"],
        "oracle-object": config["compare.oracle_object"],
        "predicted-patch": config["compare.predicted_patch"],
    }
    reports = {variant: _read_report(path, variant) for variant, path in paths.items() if path}
    if not reports:
        raise ConfigError("compare needs at least one report (--none, --oracle-object, --predicted-patch)")
    out = config["out"]
    _prepare_output(out, force)

    ablation = analytics_service.build_ablation(reports, margin=config["compare.margin"])
    write_json(os.path.join(out, "ablation.json"), ablation)
    analytics_service.write_chart(analytics_service.generate_ablation_chart(ablation),
                                  os.path.join(out, "ablation.html"))
    write_resolved(config, out, "compare")

    columns = ablation["columns"]
    console.print(_table("Attention variants", ["attention"] + columns,
                         [[row["attention_source"]] + ["-" if row[c] is None else row[c] for c in columns]
                          for row in ablation["rows"]]))
    console.print(f"Directional ordering holds: {ablation['ordering_holds']} {ablation['ordering']}")
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-gen": cmd_train_gen,
    "train-vlm": cmd_train_vlm,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "compare": cmd_compare,
}


def _common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="flat JSON config file with dotted keys")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    parser.add_argument("--force", action="store_true", help="overwrite existing outputs")
    parser.add_argument("--out", help="output directory (visualize: output PNG)")


def _training_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--data", help="dataset directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", dest="batch_size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scene-explainer",
                                     description="Attention-guided driving scene explanations")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic clip corpus")
    _common(p)
    p.add_argument("--clips", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train-gen", help="train the attention map generator")
    _common(p)
    _training_flags(p)

    p = sub.add_parser("train-vlm", help="train the explainer")
    _common(p)
    _training_flags(p)
    p.add_argument("--attention", choices=ATTENTION_SOURCES)
    p.add_argument("--generator", help="generator checkpoint (predicted-patch)")

    p = sub.add_parser("eval", help="generate and score explanations")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="explainer checkpoint")
    p.add_argument("--generator", help="generator checkpoint, enables top-k accuracy")
    p.add_argument("--attention", choices=ATTENTION_SOURCES)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--self-check", dest="self_check", action="store_true", default=None,
                   help="score references against themselves")

    p = sub.add_parser("visualize", help="write an attention overlay PNG")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", help="explainer checkpoint, adds the generated text")
    p.add_argument("--generator")
    p.add_argument("--attention", choices=ATTENTION_SOURCES)
    p.add_argument("--clip-id", dest="clip_id")
    p.add_argument("--scale", type=int)

    p = sub.add_parser("compare", help="compare the three attention variants")
    _common(p)
    p.add_argument("--none", help="report of the none variant")
    p.add_argument("--oracle-object", dest="oracle_object")
    p.add_argument("--predicted-patch", dest="predicted_patch")
    return parser


def resolve_args(args: argparse.Namespace) -> Dict[str, Any]:
    file_config = load_config_file(args.config, args.command) if args.config else None
    flags = {
        key: getattr(args, dest)
        for dest, key in FLAG_KEYS[args.command].items()
        if getattr(args, dest, None) is not None
    }
    return resolve(args.command, file_config, flags, overrides_from(args.set))


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = resolve_args(args)
        COMMANDS[args.command](config, force=args.force)
    except ExplainerError as e:
        logger.error(f"{args.command} failed: {str(e)}")
        console.print(f"[red]error:[/red] {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error in {args.command}: {str(e)}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
