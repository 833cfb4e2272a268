"""Command line entry point.

Subcommands cover the full loop: ``forge`` writes a dataset, ``train``
fits a model on it, ``sample`` draws one image from a checkpoint,
``eval`` scores checkpoints against a held-out split, and ``reformulate``
rewrites plain edit instructions into multimodal ones.

Configuration precedence is flags > config file > built-in defaults:
``--config`` loads a YAML/JSON file, ``--set section.key=value`` patches
single keys, and dedicated flags like ``--steps`` win over both. Every
command is a pure function of (config, seed, input files); rerunning one
reproduces its artifacts byte for byte.

The only environment variable honored is SHAPEDIFF_OUT: when set,
relative output paths resolve under it. Inputs are never rerooted.

Exit codes:
  0  success
  1  unexpected internal error
  2  bad usage, unknown config key, or malformed config file
  3  instruction arity does not match the supplied reference images
  4  missing or invalid input (dataset, checkpoint, image file)
  5  non-finite numbers in training or sampling
  6  instruction does not parse or cannot be reformulated
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_ARITY = 3
EXIT_INPUT = 4
EXIT_NONFINITE = 5
EXIT_GRAMMAR = 6

ENV_OUT = "SHAPEDIFF_OUT"


def resolve_out(path) -> Path:
    """Relative output paths land under $SHAPEDIFF_OUT when it is set."""
    p = Path(path)
    root = os.environ.get(ENV_OUT)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _read_image(path) -> np.ndarray:
    from PIL import Image

    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    return np.asarray(Image.open(p).convert("RGB"), dtype=np.uint8)


def _write_image(arr: np.ndarray, path):
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def build_config(args):
    from .config import ConfigError, RunConfig, apply_overrides, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


# ---------------------------------------------------------------------------
# forge
# ---------------------------------------------------------------------------


def _parse_counts(text: str) -> dict:
    from .config import ConfigError

    counts = {}
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise ConfigError(f"--counts expects task=n pairs, got {part!r}")
        task, n = part.split("=", 1)
        try:
            counts[task.strip()] = int(n)
        except ValueError as e:
            raise ConfigError(f"--counts {part!r}: {e}") from e
    if not counts:
        raise ConfigError("--counts was empty")
    return counts


def balanced_counts(cfg, total: int) -> dict:
    """Per-task counts in the same proportions the joint sampler draws."""
    t = cfg.train
    frac = {}
    for task in t.group_a:
        frac[task] = t.p_group_a / len(t.group_a)
    for task in t.group_b:
        frac[task] = (1.0 - t.p_group_a) / len(t.group_b)
    return {task: int(round(total * f)) for task, f in frac.items()}


def cmd_forge(args) -> int:
    from .forge import TASKS, forge_samples, write_dataset

    cfg = build_config(args)
    if args.counts:
        counts = _parse_counts(args.counts)
    elif args.balanced:
        counts = balanced_counts(cfg, args.n)
    else:
        counts = {t: args.n for t in TASKS}
    out = resolve_out(args.out)
    samples, stats = forge_samples(counts, cfg.forge, cfg.filters, seed=args.seed)
    manifest = write_dataset(samples, out, cfg.forge, cfg.filters, seed=args.seed, stats=stats)
    print(f"wrote {manifest['n_samples']} samples to {out}")
    for task in sorted(manifest["counts"]):
        print(f"  {task}: {manifest['counts'][task]}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_or_pretrain_backbones(cfg, run_dir: Path):
    from .backbones import load_backbones, pretrain_backbones, save_backbones

    if cfg.train.backbones:
        path = Path(cfg.train.backbones)
        if not path.exists():
            raise FileNotFoundError(f"backbone checkpoint not found: {path}")
        ae, sem, _ = load_backbones(path, cfg.backbone)
        return ae, sem
    print("pretraining frozen backbones (pass --backbones to reuse a saved pair)")
    ae, sem, stats = pretrain_backbones(cfg.backbone, cfg.forge, seed=cfg.train.seed)
    save_backbones(run_dir / "backbones.ckpt", ae, sem, cfg.backbone, stats)
    return ae, sem


def cmd_train(args) -> int:
    from .config import apply_overrides
    from .forge import dataset_hash, read_dataset
    from .model import build_model
    from .training import Trainer

    cfg = build_config(args)
    flag_keys = (
        ("mode", "train.mode"),
        ("steps", "train.steps"),
        ("lr", "train.lr"),
        ("seed", "train.seed"),
        ("backbones", "train.backbones"),
    )
    overrides = {key: getattr(args, flag) for flag, key in flag_keys if getattr(args, flag) is not None}
    if overrides:
        cfg = apply_overrides(cfg, overrides)

    samples, _ = read_dataset(args.data)
    run_dir = resolve_out(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)

    if args.resume:
        trainer = Trainer.resume(args.resume, samples, run_dir)
        # total step budget: an explicit --steps wins, else the plan the
        # checkpointed run was started with
        total = args.steps if args.steps is not None else trainer.cfg.train.steps
        remaining = max(0, total - trainer.step_num)
        print(f"resumed at step {trainer.step_num}; {remaining} steps remain")
    else:
        ae, sem = _load_or_pretrain_backbones(cfg, run_dir)
        model = build_model(cfg, ae, sem, seed=cfg.train.seed)
        trainer = Trainer(cfg, model, samples, run_dir)
        trainer.write_manifest(dataset_hash=dataset_hash(args.data))
        remaining = cfg.train.steps

    result = trainer.train(remaining, log=lambda step, loss: print(f"step {step}: loss {loss:.4f}"))
    print(f"final checkpoint: {result['checkpoint']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def cmd_sample(args) -> int:
    from .forge import to_uint8_hwc
    from .grammar import parse, validate_arity
    from .model import load_model_any

    instr = parse(args.instruction)
    refs = [_read_image(p) for p in args.ref or []]
    validate_arity(instr, len(refs))
    source = _read_image(args.source) if args.source else None

    model, _ = load_model_any(args.ckpt)
    img = model.sample(
        instr,
        refs,
        source,
        steps=args.steps,
        s_img=args.s_img,
        s_mm=args.s_mm,
        seed=args.seed,
    )
    out = resolve_out(args.out)
    _write_image(to_uint8_hwc(img), out)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _checkpoint_specs(items: list) -> list:
    """Each --ckpt is ``path`` or ``label=path``; labels default to the stem."""
    specs = []
    for item in items:
        if "=" in item:
            label, path = item.split("=", 1)
        else:
            path = item
            label = Path(item).stem
        specs.append((label, Path(path)))
    return specs


def cmd_eval(args) -> int:
    from .bench import io_sim_report, run_benchmark, write_reports
    from .forge import read_dataset
    from .model import load_model_any

    cfg = build_config(args)
    ecfg = dataclasses.replace(
        cfg.eval,
        **{
            k: v
            for k, v in (("seed", args.seed), ("best_of_k", args.best_of_k))
            if v is not None
        },
    )

    samples, _ = read_dataset(args.data)
    if args.limit:
        samples = samples[: args.limit]
    if not samples:
        raise ValueError(f"dataset at {args.data} has no samples")

    specs = _checkpoint_specs(args.ckpt)
    reports = []
    for i, (label, path) in enumerate(specs):
        if not path.exists():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        model, _ = load_model_any(path)
        if i == 0 and not args.no_baseline:
            if any(s.source is not None for s in samples):
                reports.append(io_sim_report(model, samples, ecfg))
            else:
                print("note: no sourceful samples, skipping the I-O sim baseline row", file=sys.stderr)
        print(f"evaluating {label} on {len(samples)} samples")
        reports.append(
            run_benchmark(
                model,
                samples,
                run_label=label,
                ecfg=ecfg,
                steps=args.steps,
                s_img=args.s_img,
                s_mm=args.s_mm,
            )
        )

    out = resolve_out(args.out)
    paths = write_reports(reports, out)
    from .bench import report_table

    print(report_table(reports))
    print(f"report: {paths['json']}")
    print(f"csv: {paths['csv']}")
    for fig in paths["figures"]:
        print(f"figure: {fig}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# reformulate
# ---------------------------------------------------------------------------


def cmd_reformulate(args) -> int:
    from .grammar import DEFAULT_RULES, read_rule_file, reformulate_edit_text

    src = Path(args.infile)
    if not src.exists():
        raise FileNotFoundError(f"corpus file not found: {src}")
    rules = read_rule_file(args.rules) if args.rules else DEFAULT_RULES

    out_lines = []
    for lineno, line in enumerate(src.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            out_lines.append(line)
            continue
        try:
            out_lines.append(reformulate_edit_text(text, args.scope, rules))
        except ValueError as e:
            raise type(e)(f"line {lineno}: {e}") from e

    body = "\n".join(out_lines) + "\n"
    if args.out:
        out = resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(body, encoding="utf-8")
        print(f"wrote {out}")
    else:
        sys.stdout.write(body)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch
# ---------------------------------------------------------------------------


def _add_config_flags(p):
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument(
        "--set",
        action="append",
        metavar="SECTION.KEY=VALUE",
        help="override one config key (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shapediff",
        description="Multimodal-instruction image generation and editing on the shape world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("forge", help="generate a dataset split with oracle ground truth")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="dataset directory to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=50, help="samples per task, or total with --balanced")
    p.add_argument("--counts", help="explicit per-task counts, e.g. edit=200,subject_gen=100")
    p.add_argument("--balanced", action="store_true", help="split --n by the joint sampling plan ratios")
    p.set_defaults(func=cmd_forge)

    p = sub.add_parser("train", help="train a model on a forged dataset")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="dataset directory from forge")
    p.add_argument("--out", required=True, help="run directory for checkpoints and the manifest")
    p.add_argument("--mode", choices=("joint", "only_subject", "only_edit", "only_compositional", "subject_plus_edit"))
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbones", help="reuse a saved frozen-backbone checkpoint")
    p.add_argument("--resume", help="trainer checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw one image from a checkpoint")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--instruction", required=True)
    p.add_argument("--ref", action="append", help="reference image per <imagehere> slot (repeatable)")
    p.add_argument("--source", help="source image for editing tasks")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--steps", type=int)
    p.add_argument("--s_img", type=float, help="image-condition guidance scale (1 disables)")
    p.add_argument("--s_mm", type=float, help="instruction guidance scale (1 disables)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score checkpoints on a held-out split")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", action="append", required=True, metavar="[LABEL=]PATH", help="repeatable")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--seed", type=int, help="generation seed (default 0)")
    p.add_argument("--best-of-k", dest="best_of_k", type=int, help="candidates per sample, best by adherence")
    p.add_argument("--steps", type=int)
    p.add_argument("--s_img", type=float)
    p.add_argument("--s_mm", type=float)
    p.add_argument("--limit", type=int, help="evaluate only the first N samples")
    p.add_argument("--no-baseline", action="store_true", help="skip the I-O sim baseline rows")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reformulate", help="rewrite plain edit instructions as multimodal ones")
    p.add_argument("--in", dest="infile", required=True, help="text corpus, one instruction per line")
    p.add_argument("--out", help="output file (stdout when omitted)")
    p.add_argument("--scope", choices=("global", "local"), required=True)
    p.add_argument("--rules", help="tab-separated rule table overriding the built-in rules")
    p.set_defaults(func=cmd_reformulate)

    return parser


def main(argv=None) -> int:
    from .backbones import NonFinite
    from .checkpoints import CheckpointError
    from .config import ConfigError
    from .forge import ForgeError
    from .grammar import ArityMismatch, GrammarError
    from .training import NonFiniteLoss

    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ArityMismatch as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ARITY
    except GrammarError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_GRAMMAR
    except (NonFiniteLoss, NonFinite) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NONFINITE
    except (FileNotFoundError, IsADirectoryError, CheckpointError, ForgeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_UNEXPECTED
    except Exception as e:  # pragma: no cover - safety net
        import traceback

        traceback.print_exc()
        print(f"unexpected error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
