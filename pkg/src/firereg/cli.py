"""``fire`` command line: gen-data, train, register, evaluate, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

log = logging.getLogger("firereg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _shape(text: str):
    try:
        shape = tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid shape {text!r}; expected H,W or H,W,D") from None
    if len(shape) not in (2, 3):
        raise argparse.ArgumentTypeError("shape must have 2 or 3 comma-separated sizes")
    return shape


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fire", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--shape", type=_shape, default=(64, 64))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--affine-deg", type=float, default=15.0, help="max rotation in degrees")
    g.add_argument("--affine-trans", type=float, default=0.25, help="max translation (normalized units)")
    g.add_argument("--affine-scale", type=float, default=0.1)
    g.add_argument("--affine-shear", type=float, default=0.05)
    g.add_argument("--nr-mag", type=float, default=0.1)
    g.add_argument("--nr-sigma", type=float, default=8.0)
    g.add_argument("--noise", type=float, default=0.02)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="JSON training config; flags override its values")
    t.add_argument("--data", help="dataset directory written by gen-data")
    t.add_argument("--out", default="run")
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--base-width", type=int)
    t.add_argument("--lr-taf", type=float)
    t.add_argument("--lr-tnr", type=float)
    t.add_argument("--lr-gf", type=float)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--smooth-lambda", type=float)
    t.add_argument("--no-reg-ic", action="store_true", help="drop the inverse-consistency loss (ablation)")
    t.add_argument("--no-clip", action="store_true", help="disable gradient-norm clipping")
    t.add_argument("--resume", help="checkpoint directory to continue from")

    r = sub.add_parser("register", help="register image pairs with a trained checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", help="dataset directory; every sample is registered")
    r.add_argument("--xa", help=".npy image of modality A")
    r.add_argument("--xb", help=".npy image of modality B")
    r.add_argument("--out", required=True, help="output .npz (single pair) or directory (dataset)")

    e = sub.add_parser("evaluate", help="Dice / inverse-consistency evaluation")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", default="eval")

    rp = sub.add_parser("report", help="render figures from a training log and evaluation")
    rp.add_argument("--out", required=True)
    rp.add_argument("--log", help="train_log.csv")
    rp.add_argument("--eval", help="eval_report.csv")
    rp.add_argument("--checkpoint", help="checkpoint for qualitative panels (needs --data)")
    rp.add_argument("--data", help="dataset for qualitative panels")
    rp.add_argument("--panels", type=int, default=4)
    return p


def _ranges(args):
    from .data import CorruptionRanges
    return CorruptionRanges(
        rotation_deg=args.affine_deg, scale=args.affine_scale, translation=args.affine_trans,
        shear=args.affine_shear, nr_mag=args.nr_mag, nr_sigma=args.nr_sigma, noise=args.noise,
    )


def cmd_gen_data(args) -> int:
    from .data import make_dataset, save_samples
    ranges = _ranges(args)
    samples = make_dataset(args.seed, args.count, args.shape, ranges)
    save_samples(args.out, samples, ranges=ranges, seed=args.seed)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _load_dataset(spec, default_shape, seed):
    """A dataset directory, a dict of synthetic-generation settings, or None."""
    from .data import CorruptionRanges, load_samples, make_dataset
    if isinstance(spec, str):
        return load_samples(spec)
    spec = dict(spec or {})
    count = spec.pop("count", 200)
    shape = tuple(spec.pop("shape", default_shape))
    data_seed = spec.pop("seed", seed)
    return make_dataset(data_seed, count, shape, CorruptionRanges(**spec))


def cmd_train(args) -> int:
    from .training import TrainConfig, load_checkpoint, train
    cfg = {}
    if args.config:
        cfg = json.loads(Path(args.config).read_text())
    overrides = {
        "iterations": args.iters, "seed": args.seed, "batch_size": args.batch_size,
        "lr_taf": args.lr_taf, "lr_tnr": args.lr_tnr, "lr_gf": args.lr_gf,
        "checkpoint_every": args.checkpoint_every, "smooth_lambda": args.smooth_lambda,
        "data": args.data,
    }
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_reg_ic:
        cfg["use_reg_ic"] = False
    if args.no_clip:
        cfg["clip_grad_norm"] = None
    if args.base_width is not None:
        cfg.setdefault("model", {})["base_width"] = args.base_width
    config = TrainConfig.from_dict(cfg)
    dataset = _load_dataset(config.data, config.model.image_shape, config.seed)
    trainer = None
    if args.resume:
        trainer = load_checkpoint(args.resume, config.model)
        trainer.config = config
    trainer, rows = train(config, dataset, out_dir=args.out, trainer=trainer, log_every=100)
    print(f"trained {len(rows)} iterations; final total loss {rows[-1]['total']:.4f}; outputs in {args.out}")
    return 0


def _load_image(path) -> torch.Tensor:
    x = np.load(path).astype(np.float32)
    return torch.from_numpy(x)[None, None]


def cmd_register(args) -> int:
    from .training import load_checkpoint, register_pair
    trainer = load_checkpoint(args.checkpoint)
    if args.data:
        from .data import load_samples, to_tensors
        samples = load_samples(args.data)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            xa, xb = to_tensors([s])
            _save_registration(out / f"registration_{i:05d}.npz", register_pair(trainer, xa, xb))
        print(f"registered {len(samples)} pairs into {out}")
        return 0
    if not (args.xa and args.xb):
        raise UsageError("register needs either --data or both --xa and --xb")
    reg = register_pair(trainer, _load_image(args.xa), _load_image(args.xb))
    _save_registration(Path(args.out), reg)
    print(f"wrote {args.out}")
    return 0


def _save_registration(path: Path, reg) -> None:
    np.savez(
        path,
        affine_ab=reg.affine_ab[0].numpy(), field_ab=reg.field_ab[0].numpy(),
        affine_ba=reg.affine_ba[0].numpy(), field_ba=reg.field_ba[0].numpy(),
        xa_warped=reg.xa_warped[0, 0].numpy(), xb_warped=reg.xb_warped[0, 0].numpy(),
    )


def cmd_evaluate(args) -> int:
    from .data import load_samples
    from .evaluation import evaluate
    from .training import load_checkpoint
    report = evaluate(load_checkpoint(args.checkpoint), load_samples(args.data), out_dir=args.out)
    print(report.summary())
    return 0


def cmd_report(args) -> int:
    from .evaluation import EvalReport
    from .plotting import emit_plots
    panels = []
    if args.checkpoint and args.data:
        from .data import load_samples, to_tensors
        from .training import load_checkpoint, register_pair
        trainer = load_checkpoint(args.checkpoint)
        samples = load_samples(args.data)[: args.panels]
        if samples:
            xa, xb = to_tensors(samples)
            reg = register_pair(trainer, xa, xb)
            for i in range(len(samples)):
                panels.append({
                    "moving": xa[i, 0].numpy(), "target": xb[i, 0].numpy(),
                    "warped": reg.xa_warped[i, 0].numpy(), "field": reg.field_ab[i].numpy(),
                    "title": f"sample {i}: A -> B",
                })
    elif args.checkpoint or args.data:
        raise UsageError("qualitative panels need both --checkpoint and --data")
    report = EvalReport.read_csv(args.eval) if args.eval else None
    written = emit_plots(args.out, log_path=args.log, report=report, panels=panels)
    if not written:
        raise UsageError("nothing to plot; pass --log, --eval or --checkpoint with --data")
    for w in written:
        print(w)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    """Exit codes: 0 success, 1 usage error, 2 runtime failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage() + "fire: error: a subcommand is required")
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"fire {args.command}: error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        log.debug("failure", exc_info=True)
        print(f"fire {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
