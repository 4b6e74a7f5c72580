"""Optimization loop: frozen encoder, trainable fusion + decoder.

AdamW with a per-epoch cosine schedule, subject-level train/val split,
JSONL history, best/last checkpoints, and ablation switches (slice
attention on/off, skip connections on/off, loss subset).  Checkpoints
never contain encoder parameters; the encoder digest is stored instead so
resumes can verify they run against the same frozen weights.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import yaml

from .data import Subject
from .decoder import make_decoder_config
from .encoder import (
    EncoderWeightsError,
    StructuralEncoder,
    load_pretrained,
    parameter_digest,
    tiny_config,
    vit_b16_config,
)
from .fusion import FusionConfig
from .losses import LossWeights, default_perceptual_taps, total_loss
from .metrics import ms_ssim_metric, psnr
from .model import BoldGenerator, SliceFeatureCache, predict_volume_cached
from .slicing import resample_slice

__all__ = [
    "AblationConfig",
    "TrainConfig",
    "TrainingDivergence",
    "CheckpointMismatch",
    "TrainResult",
    "cosine_lr",
    "split_subjects",
    "apply_ablation",
    "ModelWiring",
    "build_model",
    "make_encoder",
    "train",
    "restore_model",
    "load_checkpoint",
    "config_from_dict",
    "config_to_dict",
    "load_config_file",
    "config_digest",
]

LOSS_SETS = ("l1", "l1_ssim", "l1_ssim_grad", "full")


class TrainingDivergence(RuntimeError):
    """Non-finite loss encountered; carries step diagnostics in the message."""


class CheckpointMismatch(RuntimeError):
    """Checkpoint does not match the requested configuration."""


@dataclass(frozen=True)
class AblationConfig:
    slice_attention: bool = True
    skip_connections: bool = True
    loss_set: str = "full"

    def __post_init__(self):
        if self.loss_set not in LOSS_SETS:
            raise ValueError(f"loss_set must be one of {LOSS_SETS}, got {self.loss_set!r}")


@dataclass(frozen=True)
class TrainConfig:
    # training settings
    lr: float = 2e-4
    weight_decay: float = 1e-4
    min_lr: float = 1e-6
    batch_size: int = 32
    epochs: int = 100
    train_split: float = 0.8
    seed: int = 0
    # input format
    window_size: int = 5  # K
    # architecture
    encoder_backend: str = "tiny"  # "tiny" or "pretrained"
    encoder_seed: int = 0
    encoder_weights: str | None = None  # pretrained backend only
    attention_heads: int = 4
    attention_layers: int = 2
    dropout: float = 0.1
    decoder_base_channels: int = 512
    slice_pos_embedding: bool = True
    # objective
    loss_weights: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        if not 0.0 < self.train_split < 1.0:
            raise ValueError(f"train split must lie in (0, 1), got {self.train_split}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError(f"window size must be odd, got {self.window_size}")
        if self.encoder_backend not in ("tiny", "pretrained"):
            raise ValueError(f"unknown encoder backend {self.encoder_backend!r}")


@dataclass(frozen=True)
class ModelWiring:
    """Model construction plan after applying the ablation switches."""

    fusion: FusionConfig | None
    skip_layers: tuple[int, ...]
    loss_weights: LossWeights


@dataclass
class TrainResult:
    best_path: Path
    last_path: Path
    history: list[dict]
    best: dict
    step_losses: list[float] = field(default_factory=list)


def cosine_lr(step: int, total_steps: int, lr: float, min_lr: float) -> float:
    """Cosine annealing from ``lr`` (step 0) down to ``min_lr`` (final step)."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


def split_subjects(
    subjects: Sequence[Subject], fraction: float, seed: int
) -> tuple[list[Subject], list[Subject]]:
    """Deterministic subject-level split; both sides nonempty.

    The training count is floor(n * fraction), clamped so at least one
    subject lands on each side.
    """
    if len(subjects) < 2:
        raise ValueError(f"need at least 2 subjects to split, got {len(subjects)}")
    order = np.random.default_rng(seed).permutation(len(subjects))
    n_train = min(max(int(len(subjects) * fraction), 1), len(subjects) - 1)
    train = [subjects[i] for i in order[:n_train]]
    val = [subjects[i] for i in order[n_train:]]
    return train, val


def apply_ablation(config: TrainConfig, encoder: StructuralEncoder) -> ModelWiring:
    """Resolve the ablation switches into a concrete wiring plan.

    Slice attention off replaces both fusion stacks with identity; skip
    connections off leaves the decoder without skip stages; the loss set
    zeroes the weights of disabled terms (enabled terms keep their
    configured values).
    """
    ab = config.ablation
    fusion = (
        FusionConfig(
            dim=encoder.cfg.dim,
            heads=config.attention_heads,
            layers=config.attention_layers,
            dropout=config.dropout,
            use_slice_pos_embedding=config.slice_pos_embedding,
            num_slices=config.window_size,
        )
        if ab.slice_attention
        else None
    )
    if ab.skip_connections:
        # deeper taps pair with coarser decoder stages
        skip_layers = tuple(
            sorted((l for l in encoder.cfg.tap_layers if l != encoder.cfg.depth), reverse=True)
        )
    else:
        skip_layers = ()
    w = config.loss_weights
    enabled = {
        "l1": (w.lambda_l1, 0.0, 0.0, 0.0),
        "l1_ssim": (w.lambda_l1, w.lambda_ssim, 0.0, 0.0),
        "l1_ssim_grad": (w.lambda_l1, w.lambda_ssim, w.lambda_grad, 0.0),
        "full": (w.lambda_l1, w.lambda_ssim, w.lambda_grad, w.lambda_perc),
    }[ab.loss_set]
    return ModelWiring(fusion, skip_layers, LossWeights(*enabled))


def build_model(config: TrainConfig, encoder: StructuralEncoder) -> tuple[BoldGenerator, ModelWiring]:
    wiring = apply_ablation(config, encoder)
    decoder_cfg = make_decoder_config(
        grid=encoder.cfg.grid,
        out_size=encoder.cfg.image_size,
        token_dim=encoder.cfg.dim,
        base_channels=config.decoder_base_channels,
        skip_layers=wiring.skip_layers,
    )
    return BoldGenerator(wiring.fusion, decoder_cfg), wiring


def make_encoder(config: TrainConfig) -> StructuralEncoder:
    if config.encoder_backend == "tiny":
        return StructuralEncoder(tiny_config(seed=config.encoder_seed))
    if not config.encoder_weights:
        raise EncoderWeightsError(
            "pretrained backend needs a weight file (config encoder_weights "
            "or the DINOBOLD_WEIGHTS environment variable)"
        )
    return load_pretrained(config.encoder_weights, vit_b16_config())


# ---------------------------------------------------------------------------
# Config serialization (YAML sections mirror the hyperparameter table)
# ---------------------------------------------------------------------------


def config_to_dict(config: TrainConfig) -> dict:
    return {
        "training": {
            "optimizer": "adamw",
            "lr": config.lr,
            "weight_decay": config.weight_decay,
            "scheduler": "cosine",
            "min_lr": config.min_lr,
            "batch_size": config.batch_size,
            "epochs": config.epochs,
            "train_split": config.train_split,
            "seed": config.seed,
        },
        "input": {"window_size": config.window_size},
        "model": {
            "encoder_backend": config.encoder_backend,
            "encoder_seed": config.encoder_seed,
            "encoder_weights": config.encoder_weights,
            "attention_heads": config.attention_heads,
            "attention_layers": config.attention_layers,
            "dropout": config.dropout,
            "decoder_base_channels": config.decoder_base_channels,
            "slice_pos_embedding": config.slice_pos_embedding,
        },
        "loss": {
            "l1": config.loss_weights.lambda_l1,
            "ms_ssim": config.loss_weights.lambda_ssim,
            "grad": config.loss_weights.lambda_grad,
            "perceptual": config.loss_weights.lambda_perc,
        },
        "ablation": {
            "slice_attention": config.ablation.slice_attention,
            "skip_connections": config.ablation.skip_connections,
            "loss_set": config.ablation.loss_set,
        },
    }


def config_from_dict(data: dict) -> TrainConfig:
    tr = data.get("training", {})
    inp = data.get("input", {})
    model = data.get("model", {})
    loss = data.get("loss", {})
    ab = data.get("ablation", {})
    optimizer = tr.get("optimizer", "adamw")
    scheduler = tr.get("scheduler", "cosine")
    if optimizer != "adamw":
        raise ValueError(f"only the adamw optimizer is supported, got {optimizer!r}")
    if scheduler != "cosine":
        raise ValueError(f"only the cosine scheduler is supported, got {scheduler!r}")
    defaults = TrainConfig()
    return TrainConfig(
        lr=float(tr.get("lr", defaults.lr)),
        weight_decay=float(tr.get("weight_decay", defaults.weight_decay)),
        min_lr=float(tr.get("min_lr", defaults.min_lr)),
        batch_size=int(tr.get("batch_size", defaults.batch_size)),
        epochs=int(tr.get("epochs", defaults.epochs)),
        train_split=float(tr.get("train_split", defaults.train_split)),
        seed=int(tr.get("seed", defaults.seed)),
        window_size=int(inp.get("window_size", defaults.window_size)),
        encoder_backend=str(model.get("encoder_backend", defaults.encoder_backend)),
        encoder_seed=int(model.get("encoder_seed", defaults.encoder_seed)),
        encoder_weights=model.get("encoder_weights"),
        attention_heads=int(model.get("attention_heads", defaults.attention_heads)),
        attention_layers=int(model.get("attention_layers", defaults.attention_layers)),
        dropout=float(model.get("dropout", defaults.dropout)),
        decoder_base_channels=int(
            model.get("decoder_base_channels", defaults.decoder_base_channels)
        ),
        slice_pos_embedding=bool(model.get("slice_pos_embedding", defaults.slice_pos_embedding)),
        loss_weights=LossWeights(
            lambda_l1=float(loss.get("l1", 1.0)),
            lambda_ssim=float(loss.get("ms_ssim", 0.5)),
            lambda_grad=float(loss.get("grad", 0.1)),
            lambda_perc=float(loss.get("perceptual", 0.05)),
        ),
        ablation=AblationConfig(
            slice_attention=bool(ab.get("slice_attention", True)),
            skip_connections=bool(ab.get("skip_connections", True)),
            loss_set=str(ab.get("loss_set", "full")),
        ),
    )


def _apply_override(data: dict, dotted_key: str, raw: str) -> None:
    keys = dotted_key.split(".")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = yaml.safe_load(raw)


def load_config_file(path=None, overrides: dict[str, str] | None = None) -> TrainConfig:
    """Read a YAML config (all fields optional) and apply dotted overrides,
    e.g. ``training.lr=1e-3``; overrides win over the file."""
    data: dict = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is not None:
            if not isinstance(loaded, dict):
                raise ValueError(f"{path}: config must be a mapping of sections")
            data = loaded
    for key, raw in (overrides or {}).items():
        _apply_override(data, key, raw)
    return config_from_dict(data)


def config_digest(config: TrainConfig) -> str:
    canonical = json.dumps(config_to_dict(config), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _target_slices(subject: Subject, size: int) -> torch.Tensor:
    """Target volume resampled to model resolution, one row per axial slice."""
    depth = subject.target.shape[2]
    planes = np.stack(
        [resample_slice(subject.target.data[:, :, z], size) for z in range(depth)]
    )
    return torch.from_numpy(planes)


def _mean_losses(rows: list[dict[str, float]]) -> dict[str, float]:
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


def _save_checkpoint(path, model, optimizer, config, epoch, best, sample_rng, encoder_digest):
    torch.save(
        {
            "model_state": model.state_dict(),
            "optimizer_state": optimizer.state_dict(),
            "epoch": epoch,
            "config": config_to_dict(config),
            "config_digest": config_digest(config),
            "encoder_digest": encoder_digest,
            "best": best,
            "rng_torch": torch.get_rng_state(),
            "rng_numpy": sample_rng.bit_generator.state,
        },
        path,
    )


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def train(
    config: TrainConfig,
    subjects: Sequence[Subject],
    encoder: StructuralEncoder,
    out_dir,
    resume_from=None,
    max_steps: int | None = None,
) -> TrainResult:
    """Run the full optimization loop and return checkpoint paths + history.

    ``max_steps`` optionally caps total optimizer steps (used by the
    desk-scale convergence checks); epochs still delimit validation.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / "history.jsonl"
    best_path = out_dir / "best.pt"
    last_path = out_dir / "last.pt"

    torch.manual_seed(config.seed)
    sample_rng = np.random.default_rng(config.seed)

    model, wiring = build_model(config, encoder)
    encoder_params = {id(p) for p in encoder.parameters()}
    trainable = [p for p in model.parameters() if p.requires_grad]
    assert not encoder_params & {id(p) for p in trainable}, "optimizer would touch encoder"
    optimizer = torch.optim.AdamW(trainable, lr=config.lr, weight_decay=config.weight_decay)
    encoder_digest = parameter_digest(encoder)

    train_subjects, val_subjects = split_subjects(subjects, config.train_split, config.seed)
    size = encoder.cfg.image_size
    k = config.window_size
    mask = torch.ones(size, size)
    taps = default_perceptual_taps(encoder)

    caches = {s.subject_id: SliceFeatureCache(encoder, s.t1) for s in subjects}
    targets = {s.subject_id: _target_slices(s, size) for s in subjects}

    train_pairs = [(s, z) for s in train_subjects for z in range(s.t1.shape[2])]
    val_pairs = [(s, z) for s in val_subjects for z in range(s.t1.shape[2])]

    start_epoch = 0
    best = {"epoch": -1, "val_msssim": -math.inf, "val_psnr": -math.inf, "val_loss": math.inf}
    history: list[dict] = []
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        if ckpt["config_digest"] != config_digest(config):
            raise CheckpointMismatch(
                "checkpoint was written with a different configuration "
                f"({ckpt['config_digest'][:12]} != {config_digest(config)[:12]})"
            )
        if ckpt["encoder_digest"] != encoder_digest:
            raise CheckpointMismatch("checkpoint was trained against different encoder weights")
        model.load_state_dict(ckpt["model_state"])
        optimizer.load_state_dict(ckpt["optimizer_state"])
        start_epoch = ckpt["epoch"]
        best = ckpt["best"]
        torch.set_rng_state(ckpt["rng_torch"])
        sample_rng = np.random.default_rng()
        sample_rng.bit_generator.state = ckpt["rng_numpy"]
        if history_path.exists():
            history = [json.loads(line) for line in history_path.read_text().splitlines()]

    def batch_forward(pairs_chunk):
        tokens = torch.stack([caches[s.subject_id].window_tokens(z, k)[0] for s, z in pairs_chunk])
        skips: dict[int, torch.Tensor] = {}
        if wiring.skip_layers:
            per_pair = [caches[s.subject_id].window_tokens(z, k)[1] for s, z in pairs_chunk]
            skips = {l: torch.stack([d[l] for d in per_pair]) for l in wiring.skip_layers}
        target = torch.stack([targets[s.subject_id][z] for s, z in pairs_chunk])
        pred = model(tokens, skips)
        return pred, target

    steps_done = 0
    step_losses: list[float] = []
    mode = "a" if start_epoch and history else "w"
    with history_path.open(mode) as hist_fh:
        for epoch in range(start_epoch, config.epochs):
            lr = cosine_lr(epoch, config.epochs, config.lr, config.min_lr)
            for group in optimizer.param_groups:
                group["lr"] = lr

            model.train()
            order = sample_rng.permutation(len(train_pairs))
            epoch_rows = []
            for start in range(0, len(order), config.batch_size):
                if max_steps is not None and steps_done >= max_steps:
                    break
                chunk = [train_pairs[i] for i in order[start : start + config.batch_size]]
                pred, target = batch_forward(chunk)
                report = total_loss(
                    pred, target, mask, wiring.loss_weights, encoder=encoder, perceptual_taps=taps
                )
                if not torch.isfinite(report.total):
                    raise TrainingDivergence(
                        f"non-finite loss at epoch {epoch} step {steps_done}: "
                        f"{report.to_dict()}"
                    )
                optimizer.zero_grad()
                report.total.backward()
                optimizer.step()
                epoch_rows.append(report.to_dict())
                step_losses.append(float(report.total.detach()))
                steps_done += 1

            model.eval()
            val_rows = []
            with torch.no_grad():
                for start in range(0, len(val_pairs), config.batch_size):
                    chunk = val_pairs[start : start + config.batch_size]
                    pred, target = batch_forward(chunk)
                    report = total_loss(
                        pred, target, mask, wiring.loss_weights,
                        encoder=encoder, perceptual_taps=taps,
                    )
                    val_rows.append(report.to_dict())

            val_psnrs, val_msssims = [], []
            for s in val_subjects:
                generated = predict_volume_cached(model, caches[s.subject_id], k)
                val_psnrs.append(psnr(generated, s.target))
                val_msssims.append(ms_ssim_metric(generated, s.target))

            row = {
                "epoch": epoch,
                "lr": lr,
                "train_losses": _mean_losses(epoch_rows) if epoch_rows else {},
                "val_losses": _mean_losses(val_rows),
                "val_psnr": float(np.mean(val_psnrs)),
                "val_msssim": float(np.mean(val_msssims)),
            }
            history.append(row)
            hist_fh.write(json.dumps(row) + "\n")
            hist_fh.flush()

            if row["val_msssim"] >= best["val_msssim"]:
                best = {
                    "epoch": epoch,
                    "val_msssim": row["val_msssim"],
                    "val_psnr": row["val_psnr"],
                    "val_loss": row["val_losses"]["total"],
                }
                _save_checkpoint(
                    best_path, model, optimizer, config, epoch + 1, best, sample_rng,
                    encoder_digest,
                )
            _save_checkpoint(
                last_path, model, optimizer, config, epoch + 1, best, sample_rng, encoder_digest
            )
            if max_steps is not None and steps_done >= max_steps:
                break

    return TrainResult(best_path, last_path, history, best, step_losses)


def restore_model(checkpoint: dict, encoder: StructuralEncoder) -> tuple[BoldGenerator, TrainConfig]:
    """Rebuild the trained generator head from a checkpoint dict."""
    config = config_from_dict(checkpoint["config"])
    model, _ = build_model(config, encoder)
    model.load_state_dict(checkpoint["model_state"])
    model.eval()
    return model, config
