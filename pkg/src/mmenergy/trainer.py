"""Adversarial-plus-energy training for the image tower.

Each step combines two objectives on a paired batch: the contrastive loss
at PGD-crafted worst-case pixels, and a contrastive energy loss whose
negatives are freshly sampled in pixel space against the captions of a
sub-batch.  Only the image tower trains; the text tower and the temperature
stay frozen.  LR follows linear warmup into a cosine decay, evaluated in
closed form per step.

Everything that draws randomness derives its seed from the master seed plus
a purpose tag and the step index, so a run is a pure function of its config
and checkpoint resume is bit-exact without serializing RNG state.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch

from mmenergy import adversarial, sampler
from mmenergy.adversarial import AdvBudget
from mmenergy.data import PairedDataset
from mmenergy.encoders import (
    TextTokens,
    TowerPair,
    ToyTowerConfig,
    make_toy_towers,
    _tower_meta,
    _tower_tensors,
    _load_tower_tensors,
    save_checkpoint,
)
from mmenergy.energy import build_energy_matrix, contrastive_energy_loss
from mmenergy.errors import CheckpointError, ConfigError, NumericsError
from mmenergy.sampler import SamplerConfig
from mmenergy.seeding import derive_seed, make_generator
from mmenergy.serialize import load_container, save_container

ABLATION_FULL = "full"
ABLATION_ADV_ONLY = "adv_only"
ABLATION_ENERGY_ONLY = "energy_only"

_KIND_STATE = "train_state"


@dataclass
class TrainConfig:
    gamma: float = 0.1                 # weight of the energy loss term
    batch_disc: int = 32               # discriminative (adversarial) batch
    batch_gen: int = 8                 # generative sub-batch, first items of the step batch
    total_steps: int = 2000
    lr: float = 1e-3
    weight_decay: float = 1e-4
    schedule: str = "cosine"
    warmup_steps: int = 200
    grad_clip_norm: float = 1.0        # 0 disables clipping
    adv: AdvBudget = field(default_factory=AdvBudget)
    neg_sampler: SamplerConfig = field(
        default_factory=lambda: SamplerConfig(
            steps=50,
            step_size=0.025,
            momentum_beta1=0.9,
            adaptive_beta2=0.999,
            noise_scale=0.01,
        )
    )
    model: ToyTowerConfig = field(default_factory=ToyTowerConfig)
    seed: int = 0
    ablation: str = ABLATION_FULL
    train_logit_scale: bool = False
    checkpoint_every: int = 500

    def __post_init__(self) -> None:
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if self.batch_disc < 1 or self.batch_gen < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.batch_gen > self.batch_disc:
            raise ConfigError("batch_gen cannot exceed batch_disc")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule != "cosine":
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if not (0 <= self.warmup_steps <= max(self.total_steps, 1)):
            raise ConfigError("warmup_steps must lie in [0, total_steps]")
        if self.grad_clip_norm < 0:
            raise ConfigError("grad_clip_norm must be >= 0")
        if self.ablation not in (ABLATION_FULL, ABLATION_ADV_ONLY, ABLATION_ENERGY_ONLY):
            raise ConfigError(f"unknown ablation {self.ablation!r}")
        if self.ablation == ABLATION_ENERGY_ONLY and self.gamma == 0:
            raise ConfigError("energy_only ablation with gamma=0 trains nothing")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float
    loss_adv: float
    loss_energy: float
    pos_energy: float
    neg_energy: float

    CSV_FIELDS = ("step", "lr", "loss", "loss_adv", "loss_energy", "pos_energy", "neg_energy")

    def as_row(self) -> list:
        return [getattr(self, name) for name in self.CSV_FIELDS]


@dataclass
class TrainState:
    pair: TowerPair
    optimizer: torch.optim.AdamW
    step: int
    seed: int
    last_metrics: StepMetrics | None = None


def lr_at(config: TrainConfig, step: int) -> float:
    """Closed-form LR: linear warmup to peak, then cosine decay toward zero."""
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    span = max(config.total_steps - config.warmup_steps, 1)
    progress = (step - config.warmup_steps) / span
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def trainable_parameters(state: TrainState, config: TrainConfig) -> list[torch.Tensor]:
    params = [p for p in state.pair.vision_tower.parameters()]
    if config.train_logit_scale:
        params.append(state.pair.logit_scale)
    return params


def init_train_state(config: TrainConfig) -> TrainState:
    model_config = replace(config.model, seed=derive_seed(config.seed, "model"))
    pair = make_toy_towers(model_config)
    if config.train_logit_scale:
        pair.logit_scale.requires_grad_(True)
    state = TrainState(pair=pair, optimizer=None, step=0, seed=config.seed)  # type: ignore[arg-type]
    state.optimizer = torch.optim.AdamW(
        trainable_parameters(state, config),
        lr=config.lr,
        weight_decay=config.weight_decay,
    )
    return state


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> torch.Tensor:
    """Deterministic epoch-shuffled batch for a global step, O(1) from cold."""
    per_epoch = n // batch_size
    if per_epoch < 1:
        raise ConfigError(f"dataset of {n} records cannot fill a batch of {batch_size}")
    epoch, slot = divmod(step, per_epoch)
    perm = torch.randperm(n, generator=make_generator(seed, "data", epoch))
    return perm[slot * batch_size : (slot + 1) * batch_size]


def train_step(
    state: TrainState,
    batch: tuple[torch.Tensor, TextTokens],
    config: TrainConfig,
) -> TrainState:
    """One optimization step; metrics reflect the pre-update parameters."""
    images, texts = batch
    if images.shape[0] != len(texts):
        raise ConfigError("batch images and texts disagree")
    step = state.step
    pair = state.pair
    zero = torch.zeros(())

    loss_adv = zero
    if config.ablation != ABLATION_ENERGY_ONLY:
        loss_adv = adversarial.adversarial_loss(
            pair, images, texts, config.adv, seed=derive_seed(config.seed, "adv", step)
        )

    loss_energy = zero
    pos_energy = float("nan")
    neg_energy = float("nan")
    run_energy = config.ablation != ABLATION_ADV_ONLY and config.gamma != 0
    if run_energy:
        sub_images = images[: config.batch_gen]
        sub_texts = texts.take(slice(0, config.batch_gen))
        neg_config = replace(
            config.neg_sampler,
            init=sampler.INIT_UNIFORM,
            seed=derive_seed(config.seed, "neg", step),
        )
        trace = sampler.generate(
            pair, sub_texts, neg_config, objective=sampler.OBJECTIVE_CONTRASTIVE
        )
        matrix = build_energy_matrix(pair, sub_images, trace.final, sub_texts)
        loss_energy = contrastive_energy_loss(matrix, pair.logit_scale)
        pos_energy = float(matrix.positive_energies().detach().mean())
        neg_energy = float(matrix.matched_negative_energies().detach().mean())

    loss = loss_adv + config.gamma * loss_energy
    if not torch.isfinite(loss):
        raise NumericsError(
            f"non-finite loss at step {step}: adv={float(loss_adv.detach())}, "
            f"energy={float(loss_energy.detach())}"
        )

    lr = lr_at(config, step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if config.grad_clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(
            trainable_parameters(state, config), config.grad_clip_norm
        )
    state.optimizer.step()

    state.step = step + 1
    state.last_metrics = StepMetrics(
        step=step,
        lr=lr,
        loss=float(loss.detach()),
        loss_adv=float(loss_adv.detach()),
        loss_energy=float(loss_energy.detach()),
        pos_energy=pos_energy,
        neg_energy=neg_energy,
    )
    return state


def fit(
    config: TrainConfig,
    dataset: PairedDataset,
    run_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[TrainState, list[StepMetrics]]:
    """Run (or resume) training to ``config.total_steps``.

    Writes per-step metrics, periodic state checkpoints, and a final
    towers-only checkpoint under ``run_dir`` when given.  On a non-finite
    loss the current state is checkpointed before the error propagates.
    """
    if len(dataset) < config.batch_disc:
        raise ConfigError(
            f"dataset of {len(dataset)} records cannot fill batch_disc={config.batch_disc}"
        )
    if resume_from is not None:
        state, stored = load_train_state(resume_from)
        _check_resume_config(config, stored)
    else:
        state = init_train_state(config)

    run_dir = Path(run_dir) if run_dir is not None else None
    writer = None
    csv_file = None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        csv_path = run_dir / "metrics.csv"
        fresh = state.step == 0 or not csv_path.exists()
        csv_file = open(csv_path, "w" if fresh else "a", newline="")
        writer = csv.writer(csv_file)
        if fresh:
            writer.writerow(StepMetrics.CSV_FIELDS)

    log: list[StepMetrics] = []
    try:
        for step in range(state.step, config.total_steps):
            indices = batch_indices(len(dataset), config.batch_disc, config.seed, step)
            images, captions = dataset.batch(indices)
            texts = state.pair.vocab.encode(captions)
            try:
                state = train_step(state, (images, texts), config)
            except NumericsError:
                if run_dir is not None:
                    save_train_state(state, config, run_dir / "crash_state.ckpt")
                raise
            log.append(state.last_metrics)
            if writer is not None:
                writer.writerow(state.last_metrics.as_row())
                csv_file.flush()
            if run_dir is not None and state.step % config.checkpoint_every == 0:
                save_train_state(state, config, run_dir / f"state_{state.step:06d}.ckpt")
    finally:
        if csv_file is not None:
            csv_file.close()

    if run_dir is not None:
        save_train_state(state, config, run_dir / "state_final.ckpt")
        save_checkpoint(state.pair, run_dir / "towers.ckpt")
    return state, log


def evaluate_energy_gap(
    state: TrainState,
    dataset: PairedDataset,
    config: TrainConfig,
    seed: int = 0,
    batches: int = 4,
) -> float:
    """Mean real-pair energy minus mean fresh-negative energy.

    Negatives are sampled exactly the way training samples them.  Negative
    values mean real pairs sit lower in energy than sampled negatives.
    """
    gaps = []
    gen = make_generator(seed, "gap-eval")
    for b in range(batches):
        indices = torch.randperm(len(dataset), generator=gen)[: config.batch_gen]
        images, captions = dataset.batch(indices)
        texts = state.pair.vocab.encode(captions)
        neg_config = replace(
            config.neg_sampler,
            init=sampler.INIT_UNIFORM,
            seed=derive_seed(seed, "gap-neg", b),
        )
        trace = sampler.generate(
            state.pair, texts, neg_config, objective=sampler.OBJECTIVE_CONTRASTIVE
        )
        with torch.no_grad():
            matrix = build_energy_matrix(state.pair, images, trace.final, texts)
            gaps.append(
                float(
                    matrix.positive_energies().mean()
                    - matrix.matched_negative_energies().mean()
                )
            )
    return sum(gaps) / len(gaps)


# ---------------------------------------------------------------------------
# config and state serialization


def config_to_dict(config: TrainConfig) -> dict:
    return asdict(config)


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data)
    if "adv" in data and isinstance(data["adv"], dict):
        data["adv"] = AdvBudget(**data["adv"])
    if "neg_sampler" in data and isinstance(data["neg_sampler"], dict):
        data["neg_sampler"] = SamplerConfig(**data["neg_sampler"])
    if "model" in data and isinstance(data["model"], dict):
        data["model"] = ToyTowerConfig(**data["model"])
    try:
        return TrainConfig(**data)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _check_resume_config(config: TrainConfig, stored: TrainConfig) -> None:
    ours = config_to_dict(config)
    theirs = config_to_dict(stored)
    for skippable in ("total_steps", "checkpoint_every"):
        ours.pop(skippable)
        theirs.pop(skippable)
    if ours != theirs:
        raise ConfigError(
            "resume config differs from the checkpointed config "
            "(only total_steps and checkpoint_every may change)"
        )


def save_train_state(state: TrainState, config: TrainConfig, path: str | Path) -> None:
    """Full resumable snapshot: towers, optimizer moments, step, config."""
    tensors = _tower_tensors(state.pair)
    params = trainable_parameters(state, config)
    step_counts: list[int] = []
    for i, param in enumerate(params):
        slot = state.optimizer.state.get(param)
        if slot:
            tensors[f"opt.{i}.exp_avg"] = slot["exp_avg"]
            tensors[f"opt.{i}.exp_avg_sq"] = slot["exp_avg_sq"]
            step_counts.append(int(slot["step"]))
        else:
            step_counts.append(0)
    meta = {
        "towers": _tower_meta(state.pair),
        "config": config_to_dict(config),
        "step": state.step,
        "seed": state.seed,
        "opt_step_counts": step_counts,
    }
    save_container(path, _KIND_STATE, meta, tensors)


def load_train_state(path: str | Path) -> tuple[TrainState, TrainConfig]:
    meta, tensors = load_container(path, expect_kind=_KIND_STATE)
    config = config_from_dict(meta["config"])
    state = init_train_state(config)

    tower_tensors = {
        name: t for name, t in tensors.items() if not name.startswith("opt.")
    }
    _load_tower_tensors(state.pair, tower_tensors, source=str(path))
    if config.train_logit_scale:
        state.pair.logit_scale.requires_grad_(True)

    params = trainable_parameters(state, config)
    step_counts = meta["opt_step_counts"]
    if len(step_counts) != len(params):
        raise CheckpointError(f"{path}: optimizer state does not match parameter count")
    for i, param in enumerate(params):
        if step_counts[i] == 0:
            continue
        exp_avg = tensors.get(f"opt.{i}.exp_avg")
        exp_avg_sq = tensors.get(f"opt.{i}.exp_avg_sq")
        if exp_avg is None or exp_avg_sq is None:
            raise CheckpointError(f"{path}: missing optimizer moments for parameter {i}")
        state.optimizer.state[param] = {
            "step": torch.tensor(float(step_counts[i])),
            "exp_avg": exp_avg.clone(),
            "exp_avg_sq": exp_avg_sq.clone(),
        }

    state.step = int(meta["step"])
    state.seed = int(meta["seed"])
    return state, config
