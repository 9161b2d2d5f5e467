"""Command-line entry point: ``diffsep {train,separate,eval,schedule,make-toy}``.

Settings resolve in this order (later wins): built-in profile, ``--config``
file, command-line flags. Every command that writes files also writes a JSON
manifest with the fully resolved configuration next to its outputs; passing
that manifest back with ``--from-manifest`` reruns the command identically.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__, dsp
from .data import synth_toy_dataset, scan_dataset, write_dataset
from .diffusion import karras_schedule
from .metrics import eval_run, report_json, write_sweep
from .model import PAPER_CONFIG, TINY_CONFIG, ModelConfig
from .separate import SeparationParams, separate_track
from .train import PROFILES, TrainConfig, estimate_sigma_data, load_denoiser_net, train

log = logging.getLogger("diffsep")

MODEL_PRESETS = {"paper": PAPER_CONFIG, "tiny": TINY_CONFIG}
PROFILE_MODEL = {"paper": "paper", "desk": "tiny"}
# desk data rarely matches the default data scale, so measure it
PROFILE_SIGMA_DATA = {"paper": None, "desk": "auto"}

# arguments of the running command, recorded in manifests
_CURRENT_ARGV: list[str] = []


class UsageError(Exception):
    pass


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("DIFFSEP_SEED")
    return int(env) if env else 0


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _coerce(value: str, current):
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if isinstance(current, tuple):
        return tuple(type(current[0])(v) for v in value.split(","))
    if current is None:
        return None if value.lower() == "none" else int(value)
    return value


def _sigma_data(text: str):
    if text == "auto":
        return text
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive number or 'auto', got {text!r}")
    if not value > 0:
        raise argparse.ArgumentTypeError(f"sigma_data must be positive, got {text!r}")
    return value


def read_config(path: str | Path, model: ModelConfig, train_cfg: TrainConfig):
    """Apply an INI-style file with ``[model]`` and ``[train]`` sections.

    Returns the updated configs and the ``(section, key)`` pairs the file set.
    """
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise UsageError(f"cannot read config file {path}")
    sections = {"model": model, "train": train_cfg}
    explicit = set()
    for section in parser.sections():
        if section not in sections:
            raise UsageError(f"unknown config section [{section}]; valid: {sorted(sections)}")
        obj = sections[section]
        valid = {f.name: getattr(obj, f.name) for f in fields(obj)}
        updates = {}
        for key, value in parser.items(section):
            if key not in valid:
                raise UsageError(
                    f"unknown key {key!r} in [{section}]; valid keys: {', '.join(sorted(valid))}"
                )
            updates[key] = _coerce(value, valid[key])
            explicit.add((section, key))
        sections[section] = replace(obj, **updates)
    return sections["model"], sections["train"], explicit


def write_manifest(path: Path, command: str, config: dict, seed: int, artifacts: list[str]) -> Path:
    manifest = {
        "subcommand": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "argv": list(_CURRENT_ARGV),
        "tool_version": __version__,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    profile = PROFILES[args.profile]
    model = MODEL_PRESETS[args.model or PROFILE_MODEL[args.profile]]
    train_cfg = profile
    explicit = set()
    if args.config:
        model, train_cfg, explicit = read_config(args.config, model, train_cfg)
    overrides = {
        "total_steps": args.total_steps,
        "batch_size": args.batch_size,
        "lr_init": args.lr,
        "warmup_steps": args.warmup_steps,
        "checkpoint_every": args.checkpoint_every,
        "excerpt_seconds": args.excerpt_seconds,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if args.total_steps is not None and "warmup_steps" not in overrides:
        if train_cfg.warmup_steps >= args.total_steps:
            overrides["warmup_steps"] = max(0, args.total_steps // 10)
    train_cfg = replace(train_cfg, seed=_seed(args), **overrides)
    tracks = scan_dataset(args.data)
    sigma_data = args.sigma_data
    if sigma_data is None and ("model", "sigma_data") not in explicit:
        sigma_data = PROFILE_SIGMA_DATA[args.profile]
    if sigma_data == "auto":
        sigma_data = estimate_sigma_data(tracks, train_cfg.excerpt_seconds, seed=train_cfg.seed)
        log.info("estimated sigma_data %.6g", sigma_data)
    if sigma_data is not None:
        model = replace(model, sigma_data=float(sigma_data))
    out = Path(args.out)
    state = train(tracks, model, train_cfg, checkpoint_path=out)
    write_manifest(
        out.with_name(out.name + ".manifest.json"),
        "train",
        {"model": model.to_dict(), "train": train_cfg.to_dict(), "data": str(args.data),
         "steps_completed": state.step},
        train_cfg.seed,
        [str(out)],
    )
    print(f"trained {state.step} steps, final loss {state.losses[-1]:.4f}; wrote {out}")
    return 0


def _separation_params(args, **extra) -> SeparationParams:
    return SeparationParams(
        steps=args.steps,
        rho=args.rho,
        sampler=args.sampler,
        seed=_seed(args),
        **extra,
    )


def cmd_separate(args) -> int:
    params = _separation_params(args, emit_accompaniment=args.accompaniment)
    mixture = dsp.read_wav(args.input)
    net = load_denoiser_net(args.checkpoint)
    result = separate_track(mixture, net, params)
    src = Path(args.input)
    out_dir = Path(args.out_dir) if args.out_dir else src.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    vocals_path = out_dir / f"{src.stem}.vocals.wav"
    dsp.write_wav(vocals_path, result.vocals, "float64")
    written.append(str(vocals_path))
    if result.accompaniment is not None:
        acc_path = out_dir / f"{src.stem}.accomp.wav"
        dsp.write_wav(acc_path, result.accompaniment, "float64")
        written.append(str(acc_path))
    write_manifest(
        out_dir / f"{src.stem}.separate.manifest.json",
        "separate",
        {"params": params.to_dict(), "input": str(src), "checkpoint": str(args.checkpoint)},
        params.seed,
        written,
    )
    print("\n".join(written))
    return 0


def cmd_eval(args) -> int:
    tracks = scan_dataset(args.data)
    rhos = _float_list(args.rho_list) if args.rho_list else [args.rho]
    steps_list = _int_list(args.steps_list) if args.steps_list else [args.steps]
    if args.oracle:
        net = None
    elif args.checkpoint:
        net = load_denoiser_net(args.checkpoint)
    else:
        raise UsageError("eval needs --checkpoint or --oracle")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, written = [], []
    for rho in rhos:
        for steps in steps_list:
            params = SeparationParams(steps=steps, rho=rho, sampler=args.sampler, seed=_seed(args))
            report = eval_run(net, tracks, params, oracle=args.oracle)
            cell = out / f"report_rho{rho:g}_steps{steps}"
            written += [str(p) for p in report.write(cell)]
            cell.with_suffix(".json").write_text(report_json(report) + "\n")
            rows.append({"rho": rho, "steps": steps, "csdr_db": report.csdr})
            print(f"rho={rho:g} steps={steps}: cSDR {report.csdr:.4f} dB")
    written.append(str(write_sweep(rows, out / "sweep.csv")))
    write_manifest(
        out / "eval.manifest.json",
        "eval",
        {"rho_list": rhos, "steps_list": steps_list, "sampler": args.sampler,
         "data": str(args.data), "checkpoint": args.checkpoint, "oracle": args.oracle},
        _seed(args),
        written,
    )
    return 0


def cmd_schedule(args) -> int:
    sched = karras_schedule(args.n, args.sigma_min, args.sigma_max, args.rho)
    for s in sched.sigmas:
        print(f"{s:.9g}")
    return 0


def cmd_make_toy(args) -> int:
    if args.tracks < 1:
        raise UsageError("--tracks must be at least 1")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise UsageError(f"cannot create {out}: {err}") from err
    tracks = synth_toy_dataset(args.tracks, args.seconds, seed=_seed(args))
    write_dataset(tracks, out)
    write_manifest(
        out / "make-toy.manifest.json",
        "make-toy",
        {"tracks": args.tracks, "seconds": args.seconds},
        _seed(args),
        [str(out / t.identifier) for t in tracks],
    )
    print(f"wrote {len(tracks)} tracks to {out}")
    return 0


# -- parser --------------------------------------------------------------------


def _sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=7, help="sampling steps (default 7)")
    p.add_argument("--rho", type=float, default=2.0, help="schedule exponent (default 2)")
    p.add_argument("--sampler", choices=["euler", "heun"], default="euler")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffsep", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"diffsep {__version__}")
    parser.add_argument("--jobs", type=int, default=None, help="cap on worker threads")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="defaults to $DIFFSEP_SEED or 0")
    common.add_argument("--from-manifest", default=None, help="rerun with a manifest's arguments")

    p = sub.add_parser("train", parents=[common], help="train a separation model")
    p.add_argument("--data", required=True, help="dataset root <root>/<track>/<stem>.wav")
    p.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    p.add_argument("--model", choices=sorted(MODEL_PRESETS), default=None)
    p.add_argument("--config", default=None, help="INI file with [model] and [train] sections")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--total-steps", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-steps", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--excerpt-seconds", type=float, default=None)
    p.add_argument("--sigma-data", type=_sigma_data, default=None,
                   help="data scale for preconditioning, or 'auto' to measure it (desk default)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("separate", parents=[common], help="separate vocals from a WAV file")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--accompaniment", action="store_true", help="also write mixture - vocals")
    _sampling_flags(p)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("eval", parents=[common], help="cSDR evaluation and (rho, steps) sweeps")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--oracle", action="store_true", help="ground-truth denoiser instead of a model")
    p.add_argument("--out", default="eval")
    p.add_argument("--rho-list", default="", help="comma-separated, e.g. 2,3,7")
    p.add_argument("--steps-list", default="", help="comma-separated, e.g. 4,7,10")
    _sampling_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("schedule", help="print the sampling noise levels")
    p.add_argument("--n", type=int, default=7)
    p.add_argument("--rho", type=float, default=7.0)
    p.add_argument("--sigma-min", type=float, default=0.002)
    p.add_argument("--sigma-max", type=float, default=80.0)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("make-toy", parents=[common], help="write a synthetic four-stem dataset")
    p.add_argument("--tracks", type=int, default=4)
    p.add_argument("--seconds", type=float, default=30.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_toy)
    return parser


def _apply_manifest(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    manifest = json.loads(Path(args.from_manifest).read_text())
    if manifest.get("subcommand") != args.command:
        raise UsageError(
            f"manifest is for {manifest.get('subcommand')!r}, not {args.command!r}"
        )
    recorded = manifest.get("argv")
    if not recorded:
        raise UsageError("manifest carries no recorded arguments")
    return parser.parse_args(recorded), list(recorded)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    if args.jobs:
        torch.set_num_threads(args.jobs)
    try:
        if getattr(args, "from_manifest", None):
            args, argv = _apply_manifest(parser, args)
        _CURRENT_ARGV[:] = argv
        return args.func(args)
    except (UsageError, ValueError, FileNotFoundError, FloatingPointError) as err:
        print(f"diffsep {args.command}: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
