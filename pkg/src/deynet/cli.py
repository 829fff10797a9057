"""Command line entry points: synth, pretrain, train, adapt-eval, report."""

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .config import adapt_config, load_config, train_config
from .data import generate_phantom, load_dir, phantom_spec_from_dict, preprocess_ct, save_volume
from .errors import DeyNetError
from .evaluation import EvalReport, evaluate, format_table, write_plots, write_table
from .network import build_deynet
from .training import (
    init_deynet_from_pretrain,
    load_checkpoint,
    pretrain_denoiser,
    save_checkpoint,
    train_joint,
)

log = logging.getLogger("deynet")

_GROUPS = {"bn": "encoder_bn_affine", "all": "encoder"}


def _config(path):
    return load_config(path) if path else {}


def _volumes(directory):
    # containers hold raw CT values; windowing happens on load
    return [preprocess_ct(v) for v in load_dir(directory)]


def _default_log(out, cfg):
    if cfg.log_path:
        return cfg
    return replace(cfg, log_path=str(Path(out).with_suffix(".log.jsonl")))


def cmd_synth(args):
    raw = yaml.safe_load(Path(args.spec).read_text()) or {}
    tag = raw.pop("domain_tag", "phantom")
    seed0 = int(raw.pop("seed", 0))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        spec = phantom_spec_from_dict({**raw, "seed": seed0 + i})
        vid = f"{tag}-{seed0 + i:04d}"
        save_volume(generate_phantom(spec, id=vid, domain_tag=tag), out / vid)
    log.info("wrote %d volumes to %s", args.count, out)


def cmd_pretrain(args):
    cfg = _default_log(args.out, train_config(_config(args.config), seed=args.seed))
    Path(cfg.log_path).unlink(missing_ok=True)
    ckpt = pretrain_denoiser(_volumes(args.data), cfg)
    save_checkpoint(ckpt, args.out)
    log.info("saved denoiser to %s", args.out)


def cmd_train(args):
    cfg = _default_log(args.out, train_config(_config(args.config), seed=args.seed))
    Path(cfg.log_path).unlink(missing_ok=True)
    if args.init == "none":
        model = build_deynet(cfg.arch, seed=cfg.seed, dtype=cfg.torch_dtype)
    else:
        pre = load_checkpoint(args.init)
        if pre.kind != "unet":
            raise DeyNetError(f"{args.init} is not a pretrained denoiser checkpoint")
        model = init_deynet_from_pretrain(pre, cfg.arch, seed=cfg.seed, variant=args.variant)
    labeled = _volumes(args.labeled)
    unlabeled = _volumes(args.unlabeled) if args.unlabeled else []
    ckpt = train_joint(model, labeled, unlabeled, cfg)
    save_checkpoint(ckpt, args.out)
    log.info("saved model to %s", args.out)


def cmd_adapt_eval(args):
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.kind != "deynet":
        raise DeyNetError(f"{args.ckpt} does not hold a Y-net")
    cfg = adapt_config(
        _config(args.config),
        lr=args.lr,
        steps=args.steps,
        optimized_group=_GROUPS[args.group] if args.group else None,
        K=args.k,
        seed=args.seed,
    )
    mode = args.mode or ("detta" if cfg.steps > 0 else ("masked_k" if cfg.K > 0 else "plain"))
    report = evaluate(ckpt.model, _volumes(args.data), mode, cfg, method=args.method or mode)
    report.config_hash = cfg.config_hash()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(out)
    print(f"{mode}: mean Dice {report.mean_dice():.2f} over {len(report.rows)} volumes")


def cmd_report(args):
    merged = EvalReport.merge([EvalReport.from_json(p) for p in args.inputs])
    write_table(merged, args.out)
    if args.plots:
        write_plots(merged, args.plots)
    print(format_table(merged))


def build_parser():
    p = argparse.ArgumentParser(prog="deynet", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate phantom volumes")
    s.add_argument("--spec", required=True, help="YAML/JSON phantom spec")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", parents=[common], help="blind-spot pretraining of a U-Net denoiser")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", parents=[common], help="joint segmentation and denoising training")
    s.add_argument("--config")
    s.add_argument("--labeled", required=True)
    s.add_argument("--unlabeled")
    s.add_argument("--init", default="none", help="pretrained denoiser checkpoint or 'none'")
    s.add_argument("--variant", type=int, default=3, choices=range(1, 9))
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("adapt-eval", parents=[common], help="test-time adaptation and Dice scoring")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--lr", type=float)
    s.add_argument("--steps", type=int)
    s.add_argument("--group", choices=sorted(_GROUPS))
    s.add_argument("--k", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--mode", choices=("plain", "masked_k", "detta"))
    s.add_argument("--method", help="method tag written into the report rows")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_adapt_eval)

    s = sub.add_parser("report", parents=[common], help="merge reports into a table and plots")
    s.add_argument("--in", dest="inputs", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--plots")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (DeyNetError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def _entry(command):
    def run():
        sys.exit(main([command, *sys.argv[1:]]))

    run.__name__ = f"main_{command.replace('-', '_')}"
    return run


# standalone commands, so `synth ...` and `deynet synth ...` are the same thing
main_synth = _entry("synth")
main_pretrain = _entry("pretrain")
main_train = _entry("train")
main_adapt_eval = _entry("adapt-eval")
main_report = _entry("report")


if __name__ == "__main__":
    sys.exit(main())
