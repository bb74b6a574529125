"""Command-line interface.

Exit status: 0 on success, 1 when a verification fails, 2 on usage or input
errors.
"""

import argparse
import sys

import numpy as np

from . import metrics as M
from .bench import cost_report, measure_latency
from .block import HPRFBConfig, HPRFBWeights, init_weights
from .checkpoint import read_checkpoint, write_checkpoint
from .reparam import MergedConv, reparameterize, verify_equivalence

BLOCK_TOL = 1e-5
NETWORK_TOL = 1e-4


class UsageError(Exception):
    pass


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _hw(text):
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _add_config_args(p, channels=1):
    p.add_argument("--scales", type=_int_list, default=(3, 5, 7), help="comma-separated odd scales (default 3,5,7)")
    p.add_argument("--types", default="VC,HC,VR,HR,S", help="comma-separated RF types (default all five)")
    p.add_argument("--channels", type=int, default=channels, help="input and output channels")
    p.add_argument("--groups", type=int, default=1)
    p.add_argument("--stride", type=int, default=1)


def _config_from(args):
    return HPRFBConfig(
        scales=args.scales,
        rf_types=args.types,
        in_channels=args.channels,
        out_channels=args.channels,
        groups=args.groups,
        stride=args.stride,
    )


def cmd_init(args, out):
    weights = init_weights(_config_from(args), seed=args.seed)
    write_checkpoint(args.out, weights, dtype=np.float32 if args.f32 else None)
    print(f"wrote {len(weights.branches)}-branch block to {args.out}", file=out)
    return 0


def cmd_merge(args, out):
    weights = read_checkpoint(args.inp)
    if not isinstance(weights, HPRFBWeights):
        raise UsageError(f"{args.inp} is already a merged checkpoint")
    merged = reparameterize(weights)
    write_checkpoint(args.out, merged)
    k = merged.kernel_size
    print(f"merged {len(weights.branches)} branches into one {k}x{k} conv -> {args.out}", file=out)
    return 0


def cmd_verify(args, out):
    if args.inp:
        weights = read_checkpoint(args.inp)
        if not isinstance(weights, HPRFBWeights):
            raise UsageError("verify --in needs a multi-branch checkpoint")
    else:
        weights = init_weights(_config_from(args), seed=args.seed)
    merged = None
    if args.merged:
        merged = read_checkpoint(args.merged)
        if not isinstance(merged, MergedConv):
            raise UsageError("verify --merged needs a merged checkpoint")
    dtype = np.float32 if args.f32 else np.float64
    tol = args.tol if args.tol is not None else (1e-4 if args.f32 else 1e-9)
    report = verify_equivalence(weights, trials=args.trials, seed=args.seed, tol=tol, merged=merged, dtype=dtype)
    print(str(report), file=out)
    return 0 if report.passed else 1


def cmd_bench(args, out):
    config = _config_from(args)
    report = cost_report(config, args.hw)
    if args.latency:
        report.latency_train, report.latency_inference = measure_latency(config, args.hw, runs=args.runs, seed=args.seed)
    print(
        f"scales {','.join(map(str, config.scales))}  types {','.join(t.value for t in config.rf_types)}  "
        f"channels {config.in_channels}  groups {config.groups}  stride {config.stride}  input {args.hw[0]}x{args.hw[1]}",
        file=out,
    )
    for line in report.lines():
        print(line, file=out)
    return 0


def _print_report(rep, out, indent=""):
    for name, value in (
        ("ACC", rep.acc),
        ("bACC", rep.bacc),
        ("mF1", rep.mf1),
        ("AUC", rep.auc),
        ("ECE", rep.ece),
        ("CECE", rep.cece),
        ("BS", rep.brier),
    ):
        shown = "n/a" if value is None else f"{value:.6g}"
        print(f"{indent}{name:<5} {shown}", file=out)


def cmd_metrics(args, out):
    ps = M.read_predictions(args.preds)
    cfg = M.CalibrationConfig(bins=args.bins)
    print(f"samples {ps.n_samples}  classes {ps.n_classes}  bins {cfg.bins}", file=out)
    _print_report(M.evaluate(ps, cfg, ties=args.auc_ties), out)
    grouping = M.read_groups(args.groups) if args.groups else ps.groups
    if grouping is not None:
        sub = M.subgroup_report(ps, grouping, cfg)
        for name, rep in sub.reports.items():
            print(f"[{name}] n={rep.n_samples}", file=out)
            _print_report(rep, out, indent="  ")
        for name in sub.empty:
            print(f"[{name}] empty", file=out)
        if sub.excluded:
            print(f"excluded (untagged) {sub.excluded}", file=out)
    if args.diagram:
        rows = M.reliability_diagram(ps.probs.max(axis=1), ps.predicted() == ps.labels, cfg)
        M.write_reliability_diagram(args.diagram, rows)
        print(f"reliability diagram -> {args.diagram}", file=out)
    return 0


def cmd_gradcheck(args, out):
    from .gradcheck import check_block, check_network, random_bn_weights

    rng = np.random.default_rng(args.seed)
    ok = True
    for groups in (1, 2):
        config = HPRFBConfig(scales=args.scales, rf_types=args.types, in_channels=2, out_channels=2, groups=groups)
        weights = random_bn_weights(init_weights(config, seed=args.seed), seed=args.seed)
        x = rng.uniform(-1, 1, size=(1, 2, 7, 7))
        delta = rng.normal(size=(1, 2, 7, 7))
        errs = check_block(weights, x, delta)
        print(f"block groups={groups}: " + "  ".join(f"{k} {v:.2e}" for k, v in errs.items()), file=out)
        ok &= all(v < BLOCK_TOL for v in errs.values())
    if args.network:
        from .demo import TrainConfig, init_network, network_params

        tc = TrainConfig(channels=2, scales=args.scales, rf_types=args.types, seed=args.seed)
        w, head_w, head_b = init_network(tc)
        w = random_bn_weights(w, seed=args.seed + 1)
        params = {k: v.copy() for k, v in network_params(w, head_w, head_b).items()}
        x = rng.uniform(-1, 1, size=(4, 1, 9, 9))
        labels = np.array([0, 1, 1, 0])
        errs = check_network(x, labels, tc.block_config(), params)
        print("network: " + "  ".join(f"{k} {v:.2e}" for k, v in errs.items()), file=out)
        ok &= all(v < NETWORK_TOL for k, v in errs.items() if k != "bias_abs") and errs["bias_abs"] < 1e-9
    print("PASS" if ok else "FAIL", file=out)
    return 0 if ok else 1


def cmd_demo_train(args, out):
    from .demo import TrainConfig, generate_dataset, merge_and_compare, train

    cfg = TrainConfig(epochs=args.epochs, seed=args.seed)
    ds = generate_dataset(n=args.n, noise=args.noise, seed=args.seed)
    model = train(cfg, ds, log=(lambda m: print(m, file=out)) if args.verbose else None)
    x, y = ds.split("test")
    print(f"loss  init {model.init_loss:.4f}  final {model.epoch_losses[-1] if model.epoch_losses else model.init_loss:.4f}", file=out)
    status = 0
    merged = None
    if args.merge_after:
        report = merge_and_compare(model, x, y)
        print(str(report), file=out)
        merged = reparameterize(model.weights)
        status = 0 if report.passed else 1
    else:
        acc = float(np.mean(model.logits(x).argmax(axis=1) == y))
        print(f"test accuracy (multi-branch) : {acc:.4f}", file=out)
    if args.preds:
        M.write_predictions(args.preds, model.predictions(x, y, merged))
        print(f"test predictions -> {args.preds}", file=out)
    if args.save:
        write_checkpoint(args.save, model.weights)
    return status


def build_parser():
    parser = argparse.ArgumentParser(prog="erohprf", description="Heterogeneous pyramid RF block tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a freshly initialised block checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--f32", action="store_true", help="store float32 tensors")
    _add_config_args(p)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("merge", help="reparameterize a block checkpoint into one conv")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("verify", help="check training and merged forms agree")
    p.add_argument("--in", dest="inp", help="block checkpoint (default: freshly initialised config)")
    p.add_argument("--merged", help="merged checkpoint to test instead of re-merging")
    p.add_argument("--trials", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=None, help="max-abs tolerance (default 1e-9, or 1e-4 with --f32)")
    p.add_argument("--f32", action="store_true", help="run both forms in float32")
    _add_config_args(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="parameter, MAC and latency accounting")
    _add_config_args(p, channels=8)
    p.add_argument("--hw", type=_hw, default=(32, 32), help="input size HxW")
    p.add_argument("--latency", action="store_true")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("metrics", help="classification and calibration metrics from a prediction CSV")
    p.add_argument("--preds", required=True)
    p.add_argument("--groups", help="file with a 'group' header and one tag per sample")
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--diagram", help="write reliability-diagram rows to this CSV")
    p.add_argument("--auc-ties", choices=("strict", "half"), default="strict")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scales", type=_int_list, default=(3, 5, 7))
    p.add_argument("--types", default="VC,HC,VR,HR,S")
    p.add_argument("--network", action="store_true", help="also check the demo network end to end")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("demo-train", help="train the bars demo, optionally merge and compare")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--merge-after", action="store_true")
    p.add_argument("--n", type=int, default=512, help="dataset size")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--preds", help="write test-set predictions CSV")
    p.add_argument("--save", help="write the trained block checkpoint")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_demo_train)
    return parser


def main(argv=None, out=None):
    out = sys.stdout if out is None else out
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, out)
    except (UsageError, ValueError, ArithmeticError, OSError) as exc:
        print(f"erohprf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
