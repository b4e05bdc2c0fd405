"""Command-line entry point.

Exit codes: 0 success, 1 usage or input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import torch

from difa.backbones import BackboneUnavailable, generator_from_checkpoint, load_backbones
from difa.core import (
    ONE_SHOT,
    ZERO_SHOT,
    AdaptConfig,
    CheckpointFormatError,
    ConfigError,
    DegenerateError,
    ShapeError,
    load_checkpoint,
)
from difa.evaluation import (
    InceptionFeatureExtractor,
    PolynomialKernel,
    SampleSizeError,
    ToyFeatureExtractor,
    fid,
    images_to_features,
    kid,
    metric_report,
    sample_to_features,
)
from difa.images import list_images, load_reference, save_png
from difa.trainer import AdaptSession, EditDirection, EditFileError, apply_edit, load_direction, run, sample_z

log = logging.getLogger("difa")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# extra spellings accepted next to the kebab-case field name
_ALIASES = {"total_iters": ["--iters"], "warmup_iters": ["--warmup"], "n_vocab_words": ["--n-words"]}


def _add_config_flags(p: argparse.ArgumentParser, zero_shot: bool = False) -> None:
    p.add_argument("--config", type=Path, help="JSON file with AdaptConfig fields")
    group = p.add_argument_group("adaptation config (flag > config file > default)")
    for f in dataclasses.fields(AdaptConfig):
        if f.name == "mode":
            continue
        flags = [f"--{f.name.replace('_', '-')}"] + _ALIASES.get(f.name, [])
        if zero_shot and f.name == "lambda_scc_max":
            flags.append("--lambda-scc")
        kind = f.type if isinstance(f.type, str) else f.type.__name__
        if kind == "bool":
            group.add_argument(*flags, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            conv = int if kind == "int" else float
            group.add_argument(*flags, dest=f.name, type=conv, default=None)


def _resolve_config(args, mode: str) -> AdaptConfig:
    data = {}
    if args.config is not None:
        try:
            data = AdaptConfig.from_json(args.config).to_dict()
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e.strerror}") from e
        except json.JSONDecodeError as e:
            raise UsageError(f"config {args.config} is not valid JSON: {e}") from e
    for name in AdaptConfig.field_names():
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    data["mode"] = mode
    return AdaptConfig.from_dict(data)


def _source(name: str, seed: int):
    """Backbones plus the source generator; ``name`` is a registry name or a checkpoint path."""
    path = Path(name)
    if path.is_file():
        ckpt = load_checkpoint(path)
        backbones = load_backbones(ckpt.backbone, ckpt.backbone_seed)
        return backbones, generator_from_checkpoint(ckpt)
    backbones = load_backbones(name, seed)
    return backbones, backbones.generator


def _adapt(args, mode: str) -> int:
    cfg = _resolve_config(args, mode)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    backbones, source = _source(args.source, cfg.seed)
    reference = prompt = None
    if mode == ONE_SHOT:
        try:
            reference = load_reference(args.reference, backbones.embedder.input_size)
        except OSError as e:
            raise UsageError(f"cannot read reference image {args.reference}: {e}") from e
    else:
        prompt = args.prompt
        if not prompt.strip():
            raise UsageError("--prompt must not be empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    session = AdaptSession.create(
        source, backbones.encoder, backbones.embedder, cfg, reference=reference, prompt=prompt,
        backbone=backbones.name, backbone_seed=backbones.seed, debug_dir=out if args.verbose else None,
    )

    def report(s, b):
        log.info("iter %d: %s", s.iteration - 1, json.dumps(b.as_record()))

    try:
        ckpt = run(session, out, on_step=report)
    except Exception as e:
        print(f"training aborted at iteration {session.iteration}: {e}; "
              f"partial checkpoint in {out / 'checkpoint.bin'}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"checkpoint": str(out / "checkpoint.bin"), "iterations": ckpt.iteration}))
    return EXIT_OK


def cmd_adapt(args) -> int:
    return _adapt(args, ONE_SHOT)


def cmd_adapt_text(args) -> int:
    return _adapt(args, ZERO_SHOT)


def _extractor(name: str, ckpt, weights: Path | None):
    if name == "toy":
        return ToyFeatureExtractor(load_backbones(ckpt.backbone, ckpt.backbone_seed).embedder)
    return InceptionFeatureExtractor(weights)


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metric.split(",") if m.strip()]
    unknown = sorted(set(metrics) - {"fid", "kid"})
    if unknown or not metrics:
        raise UsageError(f"unknown metric(s): {', '.join(unknown) or '(none)'}; choose from fid,kid")
    if args.n < 2:
        raise UsageError("--n must be >= 2")
    real_paths = list_images(args.real) if Path(args.real).is_dir() else []
    if len(real_paths) < 2:
        raise UsageError(f"--real {args.real} must contain at least 2 images, found {len(real_paths)}")
    ckpt = load_checkpoint(args.ckpt)
    extractor = _extractor(args.extractor, ckpt, args.inception_weights)
    real = images_to_features(real_paths, extractor)
    fake = sample_to_features(ckpt, args.n, extractor, args.seed)
    kernel = PolynomialKernel()
    reports = {}
    for metric in metrics:
        if metric == "fid":
            reports["fid"] = metric_report("fid", fid(fake, real), real.count, fake.count, real.extractor_id)
        else:
            value = kid(fake, real, kernel, n_subsets=args.kid_subsets, subset_size=args.kid_subset_size,
                        seed=args.seed)
            reports["kid"] = metric_report("kid", value, real.count, fake.count, real.extractor_id,
                                           kernel.describe())
    text = json.dumps(reports, indent=2)
    print(text)
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / "report.json").write_text(text + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_edit(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    backbones = load_backbones(ckpt.backbone, ckpt.backbone_seed)
    generator = generator_from_checkpoint(ckpt)
    try:
        values = load_direction(args.direction)
    except OSError as e:
        raise UsageError(f"cannot read direction file {args.direction}: {e.strerror}") from e
    try:
        image = load_reference(args.image, generator.image_shape[1])
    except OSError as e:
        raise UsageError(f"cannot read image {args.image}: {e}") from e
    edited = apply_edit(generator, backbones.encoder, image, EditDirection(values, args.strength))
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_png(args.out, edited[0])
    return EXIT_OK


def cmd_sample(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    generator = generator_from_checkpoint(load_checkpoint(args.ckpt))
    z = sample_z(args.seed, args.n, generator.z_dim)
    args.out.mkdir(parents=True, exist_ok=True)
    with torch.no_grad():
        for i in range(0, args.n, 64):
            for j, img in enumerate(generator.generate(z[i:i + 64])):
                save_png(args.out / f"{i + j:05d}.png", img)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="difa", description="One-shot / zero-shot generator domain adaptation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("adapt", help="adapt a source generator to one reference image")
    p.add_argument("--source", required=True, help="backbone name (e.g. toy) or checkpoint path")
    p.add_argument("--reference", required=True, type=Path, help="reference image")
    p.add_argument("--out", required=True, type=Path, help="output directory")
    p.add_argument("--verbose", action="store_true", help="log every step and dump mask.csv")
    _add_config_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("adapt-text", help="adapt a source generator to a text prompt")
    p.add_argument("--source", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--verbose", action="store_true")
    _add_config_flags(p, zero_shot=True)
    p.set_defaults(func=cmd_adapt_text)

    p = sub.add_parser("eval", help="FID/KID of a checkpoint against a directory of real images")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--real", required=True, type=Path)
    p.add_argument("--n", type=int, default=5000, help="number of synthesized samples")
    p.add_argument("--metric", default="fid,kid")
    p.add_argument("--extractor", choices=("toy", "inception"), default="toy")
    p.add_argument("--inception-weights", type=Path, help="state dict for the inception extractor")
    p.add_argument("--kid-subsets", type=int, default=None, help="average KID over this many subsets")
    p.add_argument("--kid-subset-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="directory for report.json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("edit", help="edit a real image in the adapted generator's latent space")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--image", required=True, type=Path)
    p.add_argument("--direction", required=True, type=Path)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--out", required=True, type=Path, help="output PNG")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("sample", help="write seeded samples of a checkpoint as PNGs")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError, DegenerateError, EditFileError, ShapeError, SampleSizeError,
            BackboneUnavailable, CheckpointFormatError, FileNotFoundError) as e:
        print(f"difa {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001 - the exit-code contract needs a catch-all
        print(f"difa {args.command}: runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
