"""Command-line front end.

Single-process batch commands over checkpoint and dataset files.  Every
command resolves its full configuration first, writes a run manifest
(resolved settings, seeds, input digests, package version) next to its
outputs before any heavy work starts, then runs.  Reruns with the same
manifest settings reproduce outputs exactly.

Exit codes: 0 success, 2 usage error (bad flags or config), 1 runtime
failure (missing file, corrupt checkpoint, numerical abort).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from mmenergy import __version__, classifier, guidance, metric, sampler, trainer
from mmenergy.adversarial import NORM_L2, NORM_LINF, AdvBudget
from mmenergy.data import DatasetSpec, load_dataset, make_synthetic_dataset, save_image
from mmenergy.encoders import load_checkpoint
from mmenergy.errors import CheckpointError, ConfigError, InputError, NumericsError
from mmenergy.seeding import derive_seed

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out_dir: Path, command: str, settings: dict, inputs: dict[str, Path]) -> Path:
    """Record everything needed to reproduce the command, before running it."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "created": _utc_now(),
        "settings": settings,
        "inputs": {
            name: {"path": str(p), "sha256": _sha256(p)} for name, p in inputs.items() if p.is_file()
        },
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def parse_fraction(text: str) -> float:
    """Float flag value accepting 'a/b' fractions like 2/255."""
    if "/" in text:
        num, _, den = text.partition("/")
        try:
            return float(num) / float(den)
        except (ValueError, ZeroDivisionError) as exc:
            raise argparse.ArgumentTypeError(f"bad fraction {text!r}") from exc
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number {text!r}") from exc


def parse_lambda_grid(text: str) -> list[float]:
    """Blend grid: 'start:stop:step' inclusive, or a comma list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise argparse.ArgumentTypeError("grid must be start:stop:step")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"bad grid {text!r}") from exc
        if step <= 0 or stop < start:
            raise argparse.ArgumentTypeError("grid needs step > 0 and stop >= start")
        count = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}") from exc


def load_train_config(path: Path | None, overrides: dict) -> trainer.TrainConfig:
    """TOML sections mirror the config dataclasses; flat flags override."""
    data: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        known = {"train", "adv", "neg_sampler", "model"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        for section in ("adv", "neg_sampler", "model"):
            if section in raw:
                if not isinstance(raw[section], dict):
                    raise ConfigError(f"config section [{section}] must be a table")
                data[section] = raw[section]
        train_block = raw.get("train", {})
        if not isinstance(train_block, dict):
            raise ConfigError("config section [train] must be a table")
        data.update(train_block)
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return trainer.config_from_dict(data)


def _slug(text: str) -> str:
    return "".join(c if c.isalnum() else "-" for c in text.lower()).strip("-")


# ---------------------------------------------------------------------------
# commands


def cmd_make_dataset(args: argparse.Namespace) -> int:
    out = Path(args.out)
    spec = DatasetSpec(count=args.n, resolution=args.resolution, seed=args.seed)
    write_run_manifest(out, "make-dataset", dataclasses.asdict(spec), {})
    dataset = make_synthetic_dataset(spec, out)
    print(f"wrote {len(dataset)} records under {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "total_steps": args.steps,
        "gamma": args.gamma,
        "lr": args.lr,
        "seed": args.seed,
        "batch_disc": args.batch_disc,
        "batch_gen": args.batch_gen,
        "ablation": args.ablation.replace("-", "_") if args.ablation else None,
    }
    config = load_train_config(Path(args.config) if args.config else None, overrides)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    inputs = {"dataset_manifest": Path(args.data) / "manifest.tsv"}
    if args.resume:
        inputs["resume_checkpoint"] = Path(args.resume)
    write_run_manifest(out, "train", trainer.config_to_dict(config), inputs)
    state, log = trainer.fit(config, dataset, run_dir=out, resume_from=args.resume)
    last = log[-1] if log else state.last_metrics
    if last is not None:
        print(
            f"finished at step {state.step}: loss={last.loss:.4f} "
            f"adv={last.loss_adv:.4f} energy={last.loss_energy:.4f}"
        )
    else:
        print(f"finished at step {state.step}")
    print(f"checkpoint: {out / 'towers.ckpt'}")
    return 0


def cmd_generate(args: argparse.Namespace) -> int:
    pair = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    config = sampler.SamplerConfig(
        steps=args.steps,
        step_size=args.step_size,
        momentum_beta1=args.momentum,
        noise_scale=args.noise,
        seed=args.seed,
    )
    settings = {
        "prompts": args.prompt,
        "seeds_per_prompt": args.seeds,
        **dataclasses.asdict(config),
    }
    write_run_manifest(out, "generate", settings, {"checkpoint": Path(args.checkpoint)})
    for prompt in args.prompt:
        tokens = pair.vocab.encode([prompt])
        for k in range(args.seeds):
            run_config = dataclasses.replace(
                config, seed=derive_seed(args.seed, prompt, k)
            )
            trace = sampler.generate(pair, tokens, run_config)
            name = f"{_slug(prompt)}_seed{k}"
            save_image(trace.final[0], out / f"{name}.png")
            if args.trace:
                trace_path = out / f"{name}_trace.csv"
                with open(trace_path, "w") as fh:
                    fh.write("step,energy\n")
                    for i, e in enumerate(trace.energy_trace):
                        fh.write(f"{i},{e:.8f}\n")
            print(f"{name}.png energy={trace.energy_trace[-1]:.4f}")
    return 0


def cmd_train_denoiser(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    out = Path(args.out)
    settings = {"steps": args.steps, "seed": args.seed, "timesteps": args.timesteps}
    write_run_manifest(out.parent, "train-denoiser", settings, {"dataset_manifest": Path(args.data) / "manifest.tsv"})
    images = dataset.images(range(len(dataset)))
    handle = guidance.train_toy_denoiser(
        images, timesteps=args.timesteps, steps=args.steps, seed=args.seed
    )
    guidance.save_denoiser(handle, out)
    print(f"denoiser written to {out}")
    return 0


def cmd_guide(args: argparse.Namespace) -> int:
    pair = load_checkpoint(args.checkpoint)
    handle = guidance.load_denoiser(args.denoiser)
    out = Path(args.out)
    config = guidance.GuidanceConfig(
        scale=args.scale, ddim_steps=args.ddim_steps, seed=args.seed
    )
    settings = {
        "prompts": args.prompt,
        "seeds_per_prompt": args.seeds,
        **dataclasses.asdict(config),
    }
    write_run_manifest(
        out,
        "guide",
        settings,
        {"checkpoint": Path(args.checkpoint), "denoiser": Path(args.denoiser)},
    )
    for prompt in args.prompt:
        for k in range(args.seeds):
            run_config = dataclasses.replace(
                config, seed=derive_seed(args.seed, prompt, k)
            )
            tokens = pair.vocab.encode([prompt])
            image = guidance.guided_ddim_sample(handle, pair, tokens, run_config)
            name = f"{_slug(prompt)}_s{args.scale:g}_seed{k}"
            save_image(image[0].clamp(0, 1), out / f"{name}.png")
            final_score = metric.score(pair, image.clamp(0, 1), tokens).mean
            print(f"{name}.png score={final_score:.4f}")
    return 0


def _load_scoring_inputs(args: argparse.Namespace):
    pair = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    limit = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    images, captions = dataset.batch(range(limit))
    tokens = pair.vocab.encode(captions)
    return pair, images, tokens


def cmd_score(args: argparse.Namespace) -> int:
    pair, images, tokens = _load_scoring_inputs(args)
    out = Path(args.out)
    write_run_manifest(
        out.parent if out.suffix else out,
        "score",
        {"pairs": int(images.shape[0])},
        {"checkpoint": Path(args.checkpoint), "dataset_manifest": Path(args.data) / "manifest.tsv"},
    )
    report = metric.score(pair, images, tokens)
    metric.write_score_csv(report, out)
    print(f"mean score {report.mean:.4f} over {len(report.per_pair)} pairs -> {out}")
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    pair, images, tokens = _load_scoring_inputs(args)
    budget = AdvBudget(
        norm=args.norm, epsilon=args.eps, step_size=args.alpha, steps=args.steps
    )
    out = Path(args.out)
    write_run_manifest(
        out.parent if out.suffix else out,
        "attack",
        {
            "pairs": int(images.shape[0]),
            "direction": args.direction,
            **dataclasses.asdict(budget),
        },
        {"checkpoint": Path(args.checkpoint), "dataset_manifest": Path(args.data) / "manifest.tsv"},
    )
    clean = metric.score(pair, images, tokens)
    attacked = metric.attacked_score(pair, images, tokens, direction=args.direction, budget=budget)
    metric.write_score_csv(attacked, out)
    shift = sum(abs(a - c) for a, c in zip(attacked.per_pair, clean.per_pair)) / len(clean.per_pair)
    print(
        f"clean mean {clean.mean:.4f}, attacked mean {attacked.mean:.4f}, "
        f"mean |shift| {shift:.4f} -> {out}"
    )
    return 0


def cmd_blend(args: argparse.Namespace) -> int:
    pair, images, tokens = _load_scoring_inputs(args)
    out = Path(args.out)
    write_run_manifest(
        out.parent if out.suffix else out,
        "blend",
        {"pairs": int(images.shape[0]), "lambdas": args.lambdas, "seed": args.seed},
        {"checkpoint": Path(args.checkpoint), "dataset_manifest": Path(args.data) / "manifest.tsv"},
    )
    curve = metric.blend_curve(pair, images, tokens, args.lambdas, seed=args.seed)
    metric.write_blend_csv(curve, {"pairs": int(images.shape[0])}, out)
    print(f"blend curve over {len(curve.lambdas)} weights -> {out}")
    return 0


def cmd_classify(args: argparse.Namespace) -> int:
    clf = classifier.load_classifier(args.classifier)
    dataset = load_dataset(args.data)
    images, captions = dataset.batch(range(len(dataset)))
    acc = clf.agreement(images, captions)
    print(f"caption agreement {acc:.4f} over {len(captions)} images")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mmenergy",
        description="Energy-based training and inference for two-tower image-text encoders",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="render the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=320)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_dataset)

    p = sub.add_parser("train", help="train the image tower")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TOML config file; flags override")
    p.add_argument("--steps", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-disc", type=int, dest="batch_disc")
    p.add_argument("--batch-gen", type=int, dest="batch_gen")
    p.add_argument("--ablation", choices=["full", "adv-only", "energy-only"])
    p.add_argument("--resume", help="state checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample images by energy descent")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompt", action="append", required=True)
    p.add_argument("--seeds", type=int, default=1, help="samples per prompt")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--step-size", type=float, default=0.025, dest="step_size")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", action="store_true", help="write per-step energy CSVs")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train-denoiser", help="fit the toy diffusion fixture")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--timesteps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser("guide", help="diffusion sampling with similarity guidance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--denoiser", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prompt", action="append", required=True)
    p.add_argument("--scale", type=float, default=5.0)
    p.add_argument("--ddim-steps", type=int, default=25, dest="ddim_steps")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_guide)

    for name, help_text in (
        ("score", "cosine alignment scores for a paired dataset"),
        ("attack", "scores under a score-targeted pixel attack"),
        ("blend", "score curve along image-noise blends"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--limit", type=int, help="score only the first N pairs")
        if name == "attack":
            p.add_argument("--eps", type=parse_fraction, default=2.0 / 255.0)
            p.add_argument("--alpha", type=float, default=0.25, help="step size in radius units")
            p.add_argument("--steps", type=int, default=10)
            p.add_argument("--norm", choices=[NORM_L2, NORM_LINF], default=NORM_LINF)
            p.add_argument(
                "--direction",
                choices=[metric.DIRECTION_INCREASE, metric.DIRECTION_DECREASE],
                default=metric.DIRECTION_DECREASE,
            )
            p.set_defaults(func=cmd_attack)
        elif name == "blend":
            p.add_argument("--lambdas", type=parse_lambda_grid, default="0:1:0.05")
            p.add_argument("--seed", type=int, default=0)
            p.set_defaults(func=cmd_blend)
        else:
            p.set_defaults(func=cmd_score)

    p = sub.add_parser("classify", help="judge a dataset with a frozen classifier")
    p.add_argument("--classifier", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_classify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if isinstance(getattr(args, "lambdas", None), str):
        args.lambdas = parse_lambda_grid(args.lambdas)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (InputError, CheckpointError, NumericsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:  # console_scripts target
    sys.exit(main())
