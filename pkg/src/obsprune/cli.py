"""Command line interface.

Subcommands: ``prune`` (file to file), ``sweep`` (gradual schedule on the
built-in toy, one checkpoint per target), ``eval`` (quadratic-model
scoring and pattern compliance of a before/after pair), ``toy`` (full
train-prune-recover loop), plus an internal ``oracle`` helper for
reproducing brute-force reference numbers.

Exit codes: 0 success, 1 compliance-check failure, 2 usage error,
3 numerical or runtime failure. Every command is deterministic given its
flags and seed; repeated runs (and any ``--threads`` value) produce
byte-identical reports.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
import scipy.linalg

from . import oracle as oracle_mod
from . import pipeline, schedules
from .fisher import (
    DAMPENING_DEFAULTS,
    DEFAULT_BLOCK_SIZE,
    DEFAULT_NUM_GRADS,
    DegenerateCurvatureError,
    FisherConfig,
    build_fisher_inverse,
)
from .obs_core import NumericalError, loss_increase
from .pruners import PrunerSpec, prune_with_recompute, run_pruner
from .solver import nm_violations, solve_global
from .tensorstore import (
    ContainerError,
    GradientSet,
    TensorContainer,
    Tensor,
    grads_name,
    layer_ids,
    mask_name,
    prunable_name,
    read_container,
    weight_name,
    write_container,
)

_RUNTIME_ERRORS = (
    ContainerError,
    NumericalError,
    DegenerateCurvatureError,
    pipeline.DivergenceError,
    np.linalg.LinAlgError,
    scipy.linalg.LinAlgError,
    ValueError,
    OSError,
)


def _fmt(v: float) -> str:
    return f"{float(v):.12g}"


def _parse_nm(text: str) -> tuple[int, int]:
    try:
        n_s, m_s = text.split(":")
        n, m = int(n_s), int(m_s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N:M like 2:4, got {text!r}")
    if not 0 < n < m:
        raise argparse.ArgumentTypeError(f"need 0 < N < M, got {text!r}")
    return n, m


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}")
    if len(dims) not in (2, 3) or any(d < 1 for d in dims):
        raise argparse.ArgumentTypeError("dims must be 2 or 3 positive ints")
    return dims


def _parse_targets(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated floats, got {text!r}")


def _add_fisher_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--block-size", type=int, default=DEFAULT_BLOCK_SIZE,
                   help=f"Fisher block size (default {DEFAULT_BLOCK_SIZE})")
    p.add_argument("--damp", type=float, default=None,
                   help="dampening lambda (default 1e-8; 1e-6 for wf)")
    p.add_argument("--num-grads", type=int, default=DEFAULT_NUM_GRADS,
                   help=f"cap on gradient rows used (default {DEFAULT_NUM_GRADS})")
    p.add_argument("--recompute", type=int, default=1,
                   help="number of Fisher recomputation sub-steps per event")
    p.add_argument("--per-layer", action="store_true",
                   help="uniform per-layer sparsity instead of a global pool")
    p.add_argument("--threads", type=int, default=1,
                   help="worker cap for block-parallel solves")


def _add_schedule_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr-max", type=float, default=None)
    p.add_argument("--lr-min", type=float, default=None)
    p.add_argument("--period", type=int, default=None,
                   help="cycle length T (default: the sweep interval)")
    p.add_argument("--acyclic", action="store_true",
                   help="single linear decay instead of cycling")
    p.add_argument("--config", default=None,
                   help="key-value config file (lr.*, sweep.*); flags win")


def _add_toy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_parse_dims, default=(16, 32, 8),
                   help="toy shape, e.g. 16,32,8 (default) or 16,8")
    p.add_argument("--steps", type=int, default=300, help="training steps")
    p.add_argument("--lr", type=float, default=0.05, help="training learning rate")
    p.add_argument("--samples", type=int, default=256, help="dataset size")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--loss", choices=("mse", "logistic"), default="mse")


def _spec_from_args(args, method: str | None = None) -> PrunerSpec:
    method = method or args.method
    damp = args.damp if args.damp is not None else DAMPENING_DEFAULTS[method]
    return PrunerSpec(
        method=method,
        fisher=FisherConfig(block_size=args.block_size, dampening=damp,
                            num_grads=args.num_grads),
        nm=getattr(args, "nm", None),
        recomputations=args.recompute,
        per_layer=args.per_layer,
        threads=args.threads,
    )


def _resolve_schedule(args, interval: int | None) -> schedules.LrSchedule:
    cfg = schedules.load_config(args.config) if args.config else {}
    lr_max = args.lr_max if args.lr_max is not None else cfg.get("lr.max", schedules.DEFAULT_LR_MAX)
    lr_min = args.lr_min if args.lr_min is not None else cfg.get("lr.min", schedules.DEFAULT_LR_MIN)
    period = args.period if args.period is not None else cfg.get("lr.period", None)
    if period is None:
        period = interval if interval is not None else schedules.DEFAULT_PERIOD
    return schedules.LrSchedule(float(lr_max), float(lr_min), int(period))


def _load_weight_layers(path: str):
    box = read_container(path)
    ids = layer_ids(box)
    if not ids:
        raise ContainerError(f"{path}: no layer.<id>.weight entries")
    weights, prunable, dtypes = {}, {}, {}
    for lid in ids:
        t = box[weight_name(lid)]
        weights[lid] = t.array().astype(np.float64)
        dtypes[lid] = t.dtype
        pname = prunable_name(lid)
        if pname in box:
            prunable[lid] = box[pname].array().astype(bool)
    return box, ids, weights, (prunable or None), dtypes


def _load_grad_layers(path: str, ids) -> dict[str, GradientSet]:
    box = read_container(path)
    out = {}
    for lid in ids:
        name = grads_name(lid)
        if name not in box:
            raise ContainerError(f"{path}: missing {name}")
        out[lid] = GradientSet(lid, box[name].array())
    return out


def _write_pruned(path: str, ids, result, dtypes) -> None:
    from .pruners import split_by_layer

    weights = split_by_layer(result.new_weights, result.layout)
    masks = split_by_layer(result.mask, result.layout)
    box = TensorContainer()
    np_dtype = {"f32": np.float32, "f64": np.float64}
    for lid in ids:
        box.add(weight_name(lid), weights[lid].astype(np_dtype[dtypes[lid]]))
        box.add(mask_name(lid), Tensor.from_array(masks[lid].astype(np.uint8)))
    write_container(path, box)


def _print_prune_summary(out, ids, result) -> None:
    total_zeros = int(np.count_nonzero(result.mask == 0))
    for lid in ids:
        out.write(
            f"{weight_name(lid)}\tsparsity\t{_fmt(result.per_layer_sparsity[lid])}"
            f"\tpredicted\t{_fmt(result.per_layer_predicted.get(lid, 0.0))}\n"
        )
    out.write(
        f"total\tsparsity\t{_fmt(total_zeros / result.mask.size)}"
        f"\tpredicted\t{_fmt(result.predicted_loss_increase)}\n"
    )


# -- subcommands ---------------------------------------------------------------

def cmd_prune(args, out) -> int:
    _, ids, weights, prunable, dtypes = _load_weight_layers(args.weights)
    grads = _load_grad_layers(args.grads, ids) if args.grads else None
    spec = _spec_from_args(args)
    if spec.nm is not None:
        result = run_pruner(spec, weights, grads, prunable=prunable)
    elif spec.recomputations > 1:
        if grads is None:
            raise ContainerError("--recompute needs --grads")
        result = prune_with_recompute(
            spec, weights, lambda _w: grads, args.sparsity, prunable=prunable
        )
    else:
        result = run_pruner(spec, weights, grads, sparsity=args.sparsity,
                            prunable=prunable)
    _write_pruned(args.out, ids, result, dtypes)
    _print_prune_summary(out, ids, result)
    return 0


def cmd_eval(args, out) -> int:
    before_box = read_container(args.weights_before)
    after_box = read_container(args.weights_after)
    ids = layer_ids(before_box)
    if not ids:
        raise ContainerError(f"{args.weights_before}: no layer.<id>.weight entries")
    grads = _load_grad_layers(args.grads, ids)
    total_pred = 0.0
    total_zeros = 0
    total_size = 0
    violations = 0
    csv_rows = ["layer,predicted,sparsity"]
    for lid in ids:
        wb = before_box[weight_name(lid)].array().astype(np.float64)
        wname = weight_name(lid)
        if wname not in after_box:
            raise ContainerError(f"{args.weights_after}: missing {wname}")
        wa = after_box[wname].array().astype(np.float64)
        if wb.shape != wa.shape:
            raise ValueError(
                f"{wname}: shape {wb.shape} before vs {wa.shape} after"
            )
        pred = loss_increase(wb.reshape(-1), wa.reshape(-1), grads[lid], args.damp)
        mname = mask_name(lid)
        if mname in after_box:
            mask = after_box[mname].array().reshape(-1)
        else:
            mask = (wa.reshape(-1) != 0).astype(np.uint8)
        zeros = int(np.count_nonzero(mask == 0))
        sparsity = zeros / mask.size
        if args.nm is not None:
            violations += nm_violations(mask, args.nm[0], args.nm[1])
        out.write(f"{wname}\tpredicted\t{_fmt(pred)}\tsparsity\t{_fmt(sparsity)}\n")
        csv_rows.append(f"{wname},{_fmt(pred)},{_fmt(sparsity)}")
        total_pred += pred
        total_zeros += zeros
        total_size += mask.size
    out.write(
        f"total\tpredicted\t{_fmt(total_pred)}\tsparsity\t{_fmt(total_zeros / total_size)}\n"
    )
    if args.nm is not None:
        out.write(f"nm\tviolations\t{violations}\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write("\n".join(csv_rows) + "\n")
    return 1 if violations else 0


def _write_model_container(path: str, weights, masks) -> None:
    box = TensorContainer()
    for lid, w in weights.items():
        box.add(weight_name(lid), w.astype(np.float64))
        if masks and lid in masks:
            box.add(mask_name(lid), masks[lid].astype(np.uint8))
    write_container(path, box)


def _run_toy(args, out, require_targets: bool) -> tuple[int, object]:
    model = pipeline.toy_train(
        args.seed, args.dims, args.steps, args.lr,
        n_samples=args.samples, noise=args.noise, loss=args.loss,
    )
    out.write(f"train\tloss\t{_fmt(pipeline.model_loss(model))}\n")
    out.write(f"train\tgrad_norm\t{_fmt(pipeline.gradient_norm(model))}\n")

    cfg = schedules.load_config(args.config) if args.config else {}
    targets = args.targets if args.targets is not None else cfg.get("sweep.targets")
    interval = args.interval if args.interval is not None else cfg.get("sweep.interval")
    if require_targets and targets is None:
        raise ValueError("a sweep needs --targets")

    checkpoints = []
    if targets is not None:
        interval = int(interval) if interval is not None else schedules.DEFAULT_PERIOD
        plan = schedules.plan_sweep(targets, interval)
        spec = _spec_from_args(args)
        sched = _resolve_schedule(args, plan.interval)
        report, checkpoints = pipeline.run_gradual(
            model, spec, plan, sched, acyclic=args.acyclic
        )
    else:
        spec = _spec_from_args(args)
        sched = _resolve_schedule(args, None)
        sparsity = None if getattr(args, "nm", None) is not None else args.sparsity
        if sparsity is None and getattr(args, "nm", None) is None:
            raise ValueError("need --sparsity, --targets or --nm")
        report = pipeline.run_oneshot_finetune(
            model, spec, sparsity, args.recovery, sched, acyclic=args.acyclic
        )
    if args.extra_recovery:
        extra = (args.steps * 100) // 300
        if extra > 0:
            pipeline.train_model(
                model, extra, lambda t: schedules.lr_at(sched, t),
                masks=report.final_masks,
            )
            report.final_loss = pipeline.model_loss(model)
            report.final_weights = model.copy_weights()
    for line in pipeline.report_lines(report):
        out.write(line + "\n")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(pipeline.report_csv(report))
    return 0, (report, checkpoints)


def cmd_toy(args, out) -> int:
    code, (report, _) = _run_toy(args, out, require_targets=False)
    if args.out:
        _write_model_container(args.out, report.final_weights, report.final_masks)
    return code


def cmd_sweep(args, out) -> int:
    code, (report, checkpoints) = _run_toy(args, out, require_targets=True)
    for target, weights, masks in checkpoints:
        path = f"{args.out}.{target:g}.ovpt"
        _write_model_container(path, weights, masks)
        out.write(f"checkpoint\t{_fmt(target)}\t{path}\n")
    return code


def cmd_oracle(args, out) -> int:
    rng = np.random.default_rng(args.seed)
    rows = rng.standard_normal((args.num_grads, args.dim))
    w = rng.standard_normal(args.dim)
    fisher = args.damp * np.eye(args.dim) + rows.T @ rows / args.num_grads
    q, rho = oracle_mod.exhaustive_best_subset(w, fisher, args.k)
    z, _, obj = oracle_mod.sparse_regression_min(rows, w, args.k, args.damp)
    inv = build_fisher_inverse(
        rows, FisherConfig(block_size=args.dim, dampening=args.damp,
                           num_grads=args.num_grads)
    )
    greedy = solve_global(w, inv, args.k)
    out.write(f"exhaustive\t{list(q)}\t{_fmt(rho)}\n")
    out.write(f"regression\t{list(z)}\t{_fmt(obj)}\n")
    out.write(f"greedy\t{_fmt(greedy.predicted_loss_increase)}\n")
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obsprune",
        description="Correlation-aware second-order weight pruning.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("prune", help="prune a weight container against gradient rows")
    p.add_argument("--weights", required=True, help="container with layer.<id>.weight")
    p.add_argument("--grads", default=None, help="container with layer.<id>.grads")
    p.add_argument("--method", choices=("gm", "wf", "ovit"), required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--sparsity", type=float, default=None)
    group.add_argument("--nm", type=_parse_nm, default=None, metavar="N:M")
    _add_fisher_flags(p)
    p.add_argument("--out", required=True, help="output container path")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("eval", help="score a before/after pair under the quadratic model")
    p.add_argument("--weights-before", required=True)
    p.add_argument("--weights-after", required=True)
    p.add_argument("--grads", required=True)
    p.add_argument("--damp", type=float, default=DAMPENING_DEFAULTS["ovit"])
    p.add_argument("--nm", type=_parse_nm, default=None, metavar="N:M",
                   help="also check n:m mask compliance")
    p.add_argument("--csv", default=None)
    p.set_defaults(fn=cmd_eval)

    for name, help_text, fn, need_out in (
        ("toy", "train a toy, prune it, recover", cmd_toy, False),
        ("sweep", "gradual sparsity sweep on the toy; one checkpoint per target",
         cmd_sweep, True),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_toy_flags(p)
        p.add_argument("--method", choices=("gm", "wf", "ovit"), default="ovit")
        p.add_argument("--sparsity", type=float, default=None)
        p.add_argument("--targets", type=_parse_targets, default=None)
        p.add_argument("--interval", type=int, default=None,
                       help="steps between sweep events (default 20)")
        p.add_argument("--recovery", type=int, default=20,
                       help="recovery steps after a one-shot prune")
        if name == "toy":
            p.add_argument("--nm", type=_parse_nm, default=None, metavar="N:M")
        p.add_argument("--extra-recovery", action="store_true",
                       help="append steps*100/300 extra recovery steps")
        _add_fisher_flags(p)
        _add_schedule_flags(p)
        p.add_argument("--out", required=need_out,
                       default=None if not need_out else None,
                       help="output container path prefix" if need_out
                       else "write final weights+masks here")
        p.add_argument("--csv", default=None)
        p.set_defaults(fn=fn)

    p = sub.add_parser("oracle", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--num-grads", type=int, default=32)
    p.add_argument("--damp", type=float, default=1e-8)
    p.set_defaults(fn=cmd_oracle)

    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        # cross-flag validation that argparse groups cannot express
        if args.command in ("toy", "sweep"):
            chosen = [
                x is not None
                for x in (args.sparsity, args.targets, getattr(args, "nm", None))
            ]
            if sum(chosen) > 1:
                parser.error("--sparsity, --targets and --nm are mutually exclusive")
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return int(args.fn(args, out))
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except AssertionError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 3


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
