"""``mmtryon`` command line: datagen, train, tryon, eval, ablate.

Configuration precedence is defaults < ``--config`` JSON file < flags; the fully
resolved configuration is written next to every output.  Set
``MMTRYON_DETERMINISTIC=1`` to force deterministic kernels.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .errors import (BackendError, CheckpointFormatError, ConfigurationError, ContractViolation,
                     InvalidArgument, NumericalFailure)

EXPECTED_ERRORS = (InvalidArgument, ConfigurationError, CheckpointFormatError, ContractViolation,
                   NumericalFailure, BackendError, OSError)


def _read_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"config file {p} not found")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {p} is not valid JSON: {e}") from e


def _parse_value(v: str):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


def _apply_sets(d: dict, sets):
    """``--set a.b=1`` style overrides into a nested dict."""
    for item in sets or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        node = d
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = _parse_value(value)
    return d


def _write_resolved(path: Path, resolved: dict):
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------- subcommands

def cmd_datagen(args):
    from .datagen.backends import procedural_backends
    from .datagen.pipeline import DatagenConfig, build_dataset
    if args.backend != "procedural":
        raise ConfigurationError(f"backend {args.backend!r} is not available; only 'procedural' ships")
    conf = dataclasses.asdict(DatagenConfig())
    file_conf = _read_config(args.config)
    conf.update(file_conf.get("datagen", file_conf))
    if args.size is not None:
        conf["size"] = args.size
    if args.workers is not None:
        conf["workers"] = args.workers
    _apply_sets(conf, args.set)
    try:
        cfg = DatagenConfig(**conf)
    except TypeError as e:
        raise ConfigurationError(f"bad datagen config: {e}") from e
    manifest = build_dataset(args.n, args.seed, procedural_backends() if cfg.workers <= 1 else None,
                             args.out, cfg)
    _write_resolved(Path(args.out) / "config.json",
                    {"command": "datagen", "n": args.n, "seed": args.seed, "backend": args.backend,
                     "datagen": dataclasses.asdict(cfg)})
    emitted = sum(1 for r in manifest if r.get("skip_reason") is None)
    print(f"wrote {emitted} samples ({len(manifest) - emitted} skipped) to {args.out}")
    return 0


def resolve_train_config(args):
    from .training import ABLATION_FLAGS, TrainConfig
    base = TrainConfig(stage=args.stage).to_dict()
    file_conf = _read_config(args.config)
    file_conf = file_conf.get("train", file_conf)
    model_file = file_conf.pop("model", {})
    base.update(file_conf)
    base["model"].update(model_file)
    base["stage"] = args.stage
    flags = {"dataset": args.dataset, "init_checkpoint": args.init, "resume": args.resume, "out_dir": args.out,
             "steps": args.steps, "lr": args.lr, "batch_size": args.batch_size, "seed": args.seed}
    base.update({k: v for k, v in flags.items() if v is not None})
    for name in args.ablate or []:
        if name not in ABLATION_FLAGS:
            raise ConfigurationError(f"unknown ablation {name!r}; expected one of {sorted(ABLATION_FLAGS)}")
        base[ABLATION_FLAGS[name]] = True
    if args.no_pretrain:
        base["no_pretrain"] = True
    _apply_sets(base, args.set)
    return TrainConfig.from_dict(base)


def cmd_train(args):
    from .training import train_stage
    cfg = resolve_train_config(args)
    if cfg.out_dir is None:
        raise ConfigurationError("--out is required")
    result = train_stage(cfg)
    last = result.log[-1] if result.log else {}
    print(f"stage {cfg.stage}: {len(result.log)} steps, final l_dm {last.get('l_dm', float('nan')):.4f}, "
          f"checkpoint {result.checkpoint}")
    return 0


def cmd_tryon(args):
    import torch
    from .evaluate import load_image, save_image
    from .instruction import parse_instruction
    from .training import load_model
    prompt = parse_instruction(args.instruction)
    if prompt.n_placeholders != len(args.refs):
        raise InvalidArgument(f"instruction has {prompt.n_placeholders} placeholders but "
                              f"{len(args.refs)} reference images were given")
    if sorted(prompt.placeholder_refs) != list(range(1, len(args.refs) + 1)):
        raise InvalidArgument(f"placeholders must be [REF#1]..[REF#{len(args.refs)}], got {prompt.placeholder_refs}")
    model = load_model(args.checkpoint)
    size = model.config.image_size
    person = load_image(args.person, size)[None]
    refs_by_number = [load_image(r, size) for r in args.refs]
    # slot j holds the reference of subject j
    slots = torch.stack([refs_by_number[s.ref_index - 1] for s in prompt.subjects])[None]
    mask = torch.ones(1, slots.shape[1], dtype=torch.bool)
    out = model.generate([prompt], slots, mask, person, seed=args.seed, steps=args.steps,
                         guidance_scale=args.guidance)
    if not torch.isfinite(out).all():
        raise NumericalFailure("generated image is not finite")
    out_path = Path(args.out)
    save_image(out[0], out_path)
    _write_resolved(out_path.with_suffix(out_path.suffix + ".config.json"),
                    {"command": "tryon", "person": args.person, "refs": args.refs, "instruction": args.instruction,
                     "checkpoint": args.checkpoint, "seed": args.seed, "steps": args.steps,
                     "guidance": args.guidance})
    print(f"wrote {out_path}")
    return 0


def _dir_images(path: Path):
    files = sorted(p for p in path.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise InvalidArgument(f"no PNG images in {path}")
    return files


def cmd_eval(args):
    import torch
    from .evaluate import image_metrics, load_image, evaluate_model, masked_response_ratio
    from .training import TryonTensors, load_model
    out = Path(args.out)
    if args.pred_dir:
        truth_dir = Path(args.truth_dir or args.pred_dir)
        pred_dir = Path(args.pred_dir)
        for d in (pred_dir, truth_dir):
            if not d.is_dir():
                raise InvalidArgument(f"{d} is not a directory")
        preds = _dir_images(pred_dir)
        truths = [truth_dir / p.name for p in preds]
        missing = [str(t) for t in truths if not t.exists()]
        if missing:
            raise InvalidArgument(f"truth images missing: {missing[:3]}")
        p_t = [load_image(p) for p in preds]
        t_t = [load_image(t) for t in truths]
        masks = [torch.ones(t.shape[-2:], dtype=torch.bool) for t in t_t]
        report = image_metrics(p_t, t_t, masks, [p.stem for p in preds])
        resolved = {"command": "eval", "pred_dir": str(pred_dir), "truth_dir": str(truth_dir)}
    else:
        if args.checkpoint is None or args.dataset is None:
            raise InvalidArgument("eval needs --checkpoint and --dataset (or --pred-dir)")
        if not Path(args.dataset).exists():
            raise InvalidArgument(f"dataset {args.dataset} does not exist")
        model = load_model(args.checkpoint)
        data = TryonTensors.from_dir(args.dataset, model.config.image_size)
        report, _ = evaluate_model(model, data, seed=args.seed, steps=args.steps)
        _, _, ratio = masked_response_ratio(model, data)
        report.metrics["masked_response_ratio"] = ratio
        resolved = {"command": "eval", "checkpoint": args.checkpoint, "dataset": args.dataset,
                    "seed": args.seed, "steps": args.steps}
    from .training import config_hash
    report.config_hash = config_hash(resolved)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.table() + "\n")
    _write_resolved(out / "config.json", resolved)
    print(report.table().splitlines()[-1])
    return 0


def cmd_ablate(args):
    from .evaluate import ablation_report, ablation_table
    if not Path(args.dataset).exists():
        raise InvalidArgument(f"dataset {args.dataset} does not exist")
    checkpoints = {}
    for item in args.checkpoints:
        if "=" not in item:
            raise InvalidArgument(f"--checkpoints expects variant=path, got {item!r}")
        name, path = item.split("=", 1)
        checkpoints.setdefault(name, []).append(path)
    seeds = list(range(args.seed, args.seed + max(len(v) for v in checkpoints.values())))
    checkpoints = {k: v if len(v) == len(seeds) else [v[0]] * len(seeds) for k, v in checkpoints.items()}
    result = ablation_report(checkpoints, args.dataset, args.out, seeds=seeds, steps=args.steps)
    _write_resolved(Path(args.out) / "config.json",
                    {"command": "ablate", "checkpoints": checkpoints, "dataset": args.dataset, "seeds": seeds,
                     "steps": args.steps})
    print(ablation_table(result))
    return 0


# --------------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="mmtryon", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a procedural try-on dataset")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--backend", default="procedural")
    d.add_argument("--size", type=int)
    d.add_argument("--workers", type=int)
    d.add_argument("--config")
    d.add_argument("--set", action="append", metavar="KEY=VALUE")
    d.set_defaults(fn=cmd_datagen)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=["base", "encoder", "encoder_pretrain", "joint"])
    t.add_argument("--config")
    t.add_argument("--resume")
    t.add_argument("--init", help="checkpoint of the previous stage")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--ablate", action="append", metavar="NAME", help="no_pr | no_tql | no_mra (repeatable)")
    t.add_argument("--no-pretrain", action="store_true")
    t.add_argument("--set", action="append", metavar="KEY=VALUE")
    t.set_defaults(fn=cmd_train)

    y = sub.add_parser("tryon", help="dress a person image from reference garments")
    y.add_argument("--person", required=True)
    y.add_argument("--refs", nargs="+", required=True)
    y.add_argument("--instruction", required=True)
    y.add_argument("--checkpoint", required=True)
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--steps", type=int, default=50)
    y.add_argument("--guidance", type=float, default=1.0)
    y.add_argument("--out", required=True)
    y.set_defaults(fn=cmd_tryon)

    e = sub.add_parser("eval", help="score a checkpoint (or a prediction directory)")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    e.add_argument("--pred-dir")
    e.add_argument("--truth-dir")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="compare ablation variants")
    a.add_argument("--checkpoints", nargs="+", required=True, metavar="VARIANT=PATH")
    a.add_argument("--dataset", required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--steps", type=int, default=50)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if os.environ.get("MMTRYON_DETERMINISTIC") == "1":
        from .training import set_deterministic
        set_deterministic(True)
    try:
        return args.fn(args)
    except EXPECTED_ERRORS as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"mmtryon {args.command}: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
