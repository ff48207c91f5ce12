"""Command-line entry point.

Exit status: 0 on success, 1 on usage errors (help text is printed), 2 on
runtime errors (one ``error: <kind>: <reason>`` line on stderr).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import torch

DEVICE_ENV = "HOMOSYNTH_DEVICE"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every random number consumer")
    p.add_argument("--workers", type=int, default=1, help="parallel workers (default 1)")
    p.add_argument("--device", default=os.environ.get(DEVICE_ENV, "cpu"),
                   help=f"torch device (default ${DEVICE_ENV} or cpu)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="homosynth", description="Cross-modal homography estimation: synthesize, train, evaluate.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)
    parser.set_defaults(subparsers=sub.choices)

    p = sub.add_parser("synth", help="generate a synthetic training dataset")
    _common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory (default: synthesize on the fly)")
    p.add_argument("--out", type=Path, required=True, help="run directory for checkpoints and logs")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory or pair-list CSV")
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--protocol", choices=["within", "cross", "zero-shot"], default="within")
    p.add_argument("--dataset-id")
    p.add_argument("--resize", action="store_true", help="resize pair-list images instead of centre-cropping")

    p = sub.add_parser("viz", help="write quadrilateral overlays")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--limit", type=int)
    p.add_argument("--margin", type=int, default=0)

    p = sub.add_parser("inspect", help="print a sample's offsets and provenance")
    p.add_argument("--sample", type=Path, required=True)
    return parser


def _config(args):
    from .config import load_config

    cfg = load_config(args.config, args.overrides)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _refuse_nonempty(path: Path, force: bool):
    if path.exists() and (path.is_file() or any(path.iterdir())) and not force:
        raise FileExistsError(f"{path} exists and is not empty (pass --force to overwrite)")


def _sources(cfg, device):
    from .render import FolderSource, ProceduralSource, build_renderer

    seed = cfg.synth.rng_seed
    s = cfg.sources
    contents = (ProceduralSource("scene", s.content_count, s.content_size, seed=seed + 1)
                if s.content == "procedural" else FolderSource(s.content))
    templates = (ProceduralSource("template", s.template_count, s.template_size, seed=seed + 2)
                 if s.templates == "procedural" else FolderSource(s.templates))
    return contents, templates, build_renderer(s.renderer, seed=seed, device=device)


def cmd_synth(args) -> int:
    from .config import dump_config
    from .dataset import generate_dataset

    cfg = _config(args)
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    _refuse_nonempty(args.out, args.force)
    contents, templates, renderer = _sources(cfg, args.device)
    manifest = generate_dataset(args.out, args.count, cfg.synth, contents, templates, renderer,
                                workers=args.workers, force=args.force,
                                extra={"sources": asdict(cfg.sources)})
    (args.out / "config.ini").write_text(dump_config(cfg))
    print(f"wrote {manifest['count']} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .config import dump_config
    from .dataset import SampleDataset
    from .model import CCNet
    from .training import IndexedSource, SynthSource, train

    cfg = _config(args)
    if args.resume is None:
        _refuse_nonempty(args.out, args.force)
    if args.data is not None:
        data = SampleDataset(args.data)
        if len(data) == 0:
            raise ValueError(f"dataset {args.data} is empty")
        source = IndexedSource(data, cfg.train.batch_size, seed=cfg.train.rng_seed)
        size = data[0].patch_size
    else:
        contents, templates, renderer = _sources(cfg, args.device)
        source = SynthSource(cfg.synth, contents, templates, renderer, cfg.train.batch_size,
                             workers=args.workers)
        size = cfg.synth.patch_size
    torch.manual_seed(cfg.train.rng_seed)
    model = CCNet(cfg.model, image_size=size).to(args.device)
    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "config.ini").write_text(dump_config(cfg))
    result = train(model, source, cfg.train, out_dir=args.out, resume_from=args.resume)
    last = result.history[-1] if result.history else None
    print(f"trained to step {result.step}" + (f", train MACE {last['train_mace']:.4f}" if last else ""))
    return 0


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .training import load_model

    _refuse_nonempty(args.report, args.force)
    model = load_model(args.checkpoint).to(args.device)
    report = evaluate(model, args.data, protocol=args.protocol, dataset_id=args.dataset_id or str(args.data),
                      checkpoint_id=str(args.checkpoint), resize=args.resize)
    report.save(args.report)
    print(f"{report.count} pairs, mean MACE {report.mean_mace:.4f}, median {report.median_mace:.4f}")
    return 0


def cmd_viz(args) -> int:
    from .evaluation import visualize_batch
    from .training import load_model

    _refuse_nonempty(args.out, args.force)
    model = load_model(args.checkpoint).to(args.device)
    paths = visualize_batch(model, args.data, args.out, limit=args.limit, margin=args.margin)
    print(f"wrote {len(paths)} overlays to {args.out}")
    return 0


def cmd_inspect(args) -> int:
    from .dataset import read_gt

    record = read_gt(args.sample / "gt.json")
    print(json.dumps({"offsets": record["offsets"], "provenance": record.get("provenance", {})}, indent=1))
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "viz": cmd_viz, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args, extra = parser.parse_known_args(argv)
        if extra:
            # Report leftovers against the subcommand so its own help is shown.
            args.subparsers[args.command].error(f"unrecognized arguments: {' '.join(extra)}")
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    from .config import ConfigError

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        parser.print_help(sys.stderr)
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        reason = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {reason}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
