"""Command-line entry point.

Subcommands:

* ``synth``    — generate a phantom dataset + manifest
* ``train``    — train on a manifest, writing checkpoints and history
* ``evaluate`` — score a checkpoint over a manifest, writing a CSV
* ``generate`` — run full-volume inference on one structural volume

Exit codes: 0 success, 1 input/configuration error, 2 numerical failure.
The ``DINOBOLD_WEIGHTS`` environment variable points at the optional
pretrained encoder weight file.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .data import load_manifest
from .encoder import EncoderWeightsError
from .metrics import evaluate_dataset, write_metrics_csv
from .model import generate_volume
from .synth_data import PhantomSpec, generate_dataset
from .training import (
    AblationConfig,
    CheckpointMismatch,
    TrainingDivergence,
    config_from_dict,
    load_checkpoint,
    load_config_file,
    make_encoder,
    restore_model,
    train,
)
from .volume_io import VolumeError, load_volume, normalize_volume, save_volume

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERICAL = 2


class CliError(Exception):
    """Input/configuration problem; maps to exit code 1."""


def _parse_shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        parts = ()
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise CliError(f"--shape expects three comma-separated positive integers, got {text!r}")
    return parts


def _parse_overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key] = value
    return out


def _parse_ablation(text: str | None) -> dict:
    """``sa=off,sc=on,loss=l1`` style flags."""
    if not text:
        return {}
    flags = {}
    for item in text.split(","):
        if "=" not in item:
            raise CliError(f"--ablation expects name=value items, got {item!r}")
        name, value = item.split("=", 1)
        name, value = name.strip().lower(), value.strip().lower()
        if name in ("sa", "slice_attention"):
            flags["slice_attention"] = value in ("on", "true", "1")
        elif name in ("sc", "skip_connections"):
            flags["skip_connections"] = value in ("on", "true", "1")
        elif name == "loss":
            flags["loss_set"] = value
        else:
            raise CliError(f"unknown ablation flag {name!r}")
    return flags


def cmd_synth(args) -> int:
    spec = PhantomSpec(
        shape=_parse_shape(args.shape),
        t=args.frames,
        n_blobs=args.blobs,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    manifest = generate_dataset(args.subjects, spec, args.out)
    print(f"wrote {args.subjects} subject(s); manifest: {manifest}")
    return EXIT_OK


def _resolve_encoder_weights(config):
    if config.encoder_backend == "pretrained" and not config.encoder_weights:
        env = os.environ.get("DINOBOLD_WEIGHTS")
        if env:
            return replace(config, encoder_weights=env)
    return config


def cmd_train(args) -> int:
    overrides = _parse_overrides(args.set or [])
    config = load_config_file(args.config, overrides)
    ablation_flags = _parse_ablation(args.ablation)
    if ablation_flags:
        config = replace(config, ablation=AblationConfig(**{
            **config.ablation.__dict__, **ablation_flags,
        }))
    config = _resolve_encoder_weights(config)
    subjects = load_manifest(args.manifest)
    encoder = make_encoder(config)
    result = train(config, subjects, encoder, args.out, resume_from=args.resume)
    print(f"trained {len(result.history)} epoch(s); best: {result.best}")
    print(f"checkpoints: {result.best_path} (best), {result.last_path} (last)")
    return EXIT_OK


def _checkpoint_config(ckpt: dict):
    return _resolve_encoder_weights(config_from_dict(ckpt["config"]))


def cmd_evaluate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder = make_encoder(_checkpoint_config(ckpt))
    model, model_config = restore_model(ckpt, encoder)
    subjects = load_manifest(args.manifest)
    result = evaluate_dataset(
        lambda vol: generate_volume(encoder, model, vol, model_config.window_size), subjects
    )
    write_metrics_csv(result, args.out)
    print(result.summary())
    print(f"per-subject metrics: {args.out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    encoder = make_encoder(_checkpoint_config(ckpt))
    model, config = restore_model(ckpt, encoder)
    volume = load_volume(args.input)
    if volume.data.ndim != 3:
        raise CliError(f"{args.input}: expected a 3D structural volume")
    generated = generate_volume(encoder, model, normalize_volume(volume), config.window_size)
    save_volume(generated, args.output)
    print(f"wrote {args.output} with shape {generated.shape}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dinobold",
        description="Structural-to-functional MRI synthesis: phantom data, "
        "training, evaluation, and volume generation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--subjects", type=int, default=4)
    p.add_argument("--shape", default="32,32,12", help="H,W,Z (default 32,32,12)")
    p.add_argument("--frames", type=int, default=16, help="time points per series")
    p.add_argument("--blobs", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train fusion + decoder on a manifest")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--ablation", default=None, help="e.g. sa=off,sc=off,loss=l1")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="config override, e.g. training.epochs=3 (repeatable)",
    )
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint over a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("generate", help="generate a functional volume from a structural one")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="structural volume file")
    p.add_argument("--output", required=True, help="generated volume file")
    p.set_defaults(fn=cmd_generate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (CliError, VolumeError, EncoderWeightsError, CheckpointMismatch,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TrainingDivergence as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
