"""Command-line driver: ``kcprune {train,prune,eval,flops,report}``.

Exit codes: 0 success, 2 usage/config error, 3 data/format error, 4 NaN loss.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import ckptio
from .datasets import load_idx, synth_dataset
from .distill import DistillConfig
from .errors import FormatError, KCPError, UsageError
from .kcp import PruneConfig, run_schedule
from .metrics import (MetricsReport, config_hash, emit_report, flops_of_graph, flops_with_masks,
                      merge_reports, param_count, sparsity)
from .nncore.graph import ARCH_DIR, load_graph
from .nncore.model import init_state
from .nncore.train import TrainConfig, check_dataset, evaluate, train_epoch

log = logging.getLogger("kcprune")

DEFAULTS = {
    "seed": None,
    "arch": None,
    "data": None,
    "eval_data": None,
    "limit": None,
    "out": None,
    "checkpoint": None,
    "resume": None,
    "epochs": 10,
    "batch_size": 64,
    "lr": 0.05,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "lr_step": 0,
    "overfit_batch": False,
    "sparsity": 0.5,
    "mode": "soft",
    "criteria": "center",
    "adv_fraction": 0.0,
    "normalize_kernels": False,
    "guard_filters": False,
    "eligible": None,
    "distill": None,
    "alpha": 0.9,
    "temperature": 15.0,
    "tap": None,
    "t_squared": False,
}


class ConfigErrors(UsageError):
    def __init__(self, errors):
        super().__init__("\n".join(errors))
        self.errors = errors


def resolve(args, keys):
    """Merge defaults < config file < explicit flags for ``keys``."""
    cfg = {}
    if getattr(args, "config", None):
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"--config {args.config}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"--config {args.config}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise UsageError("--config must hold a JSON object")
        unknown = sorted(set(cfg) - set(DEFAULTS))
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
    out = {}
    for k in keys:
        v = getattr(args, k, None)
        if v is None or v is False:
            v = cfg.get(k, DEFAULTS[k])
        out[k] = v
    return out


def resolve_arch(ref):
    p = Path(ref)
    if not p.exists() and (ARCH_DIR / f"{ref}.json").exists():
        p = ARCH_DIR / f"{ref}.json"
    return load_graph(p)


def parse_data(spec, limit=None):
    """``idx:IMAGES,LABELS`` or ``synth:SEED,N,CLASSES,SIZE,SEP``."""
    kind, _, rest = str(spec).partition(":")
    parts = rest.split(",") if rest else []
    if kind == "idx":
        if len(parts) != 2:
            raise UsageError(f"--data idx expects IMAGES,LABELS, got {spec!r}")
        return load_idx(parts[0], parts[1], limit=limit)
    if kind == "synth":
        if len(parts) != 5:
            raise UsageError(f"--data synth expects SEED,N,CLASSES,SIZE,SEP, got {spec!r}")
        try:
            seed, n, classes, size = (int(x) for x in parts[:4])
            sep = float(parts[4])
        except ValueError:
            raise UsageError(f"--data synth: malformed numbers in {spec!r}") from None
        ds = synth_dataset(seed, n, classes, size, sep)
        return ds.take(limit) if limit is not None else ds
    raise UsageError(f"--data must start with 'idx:' or 'synth:', got {spec!r}")


def _check_paths(c, errs, keys):
    for k in keys:
        v = c.get(k)
        if v and not Path(v).exists():
            errs.append(f"--{k.replace('_', '-')}: {v} does not exist")


def _data_paths(spec, errs, flag):
    if spec and str(spec).startswith("idx:"):
        for p in str(spec)[4:].split(","):
            if p and not Path(p).exists():
                errs.append(f"{flag}: {p} does not exist")


def _train_config(c):
    return TrainConfig(epochs=int(c["epochs"]), batch_size=int(c["batch_size"]), lr=float(c["lr"]),
                       momentum=float(c["momentum"]), weight_decay=float(c["weight_decay"]),
                       lr_step=int(c["lr_step"] or 0))


def _common_errors(c, need):
    errs = []
    if c.get("seed") is None:
        errs.append("--seed is required")
    for k in need:
        if not c.get(k):
            errs.append(f"--{k.replace('_', '-')} is required")
    _data_paths(c.get("data"), errs, "--data")
    _data_paths(c.get("eval_data"), errs, "--eval-data")
    return errs


def _outdir(c):
    out = Path(c["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _recorded(c):
    # the output directory is where a run lands, not what it does
    return {k: v for k, v in c.items() if k != "out"}


def _write_reports(report, out):
    emit_report(report, "json", out / "report.json")
    emit_report(report, "csv", out / "report.csv")


def cmd_train(args):
    keys = ["seed", "arch", "data", "eval_data", "limit", "out", "resume", "epochs", "batch_size", "lr",
            "momentum", "weight_decay", "lr_step", "overfit_batch"]
    c = resolve(args, keys)
    errs = _common_errors(c, ["data", "out"])
    if not c["arch"] and not c["resume"]:
        errs.append("--arch or --resume is required")
    if c["arch"] and not Path(c["arch"]).exists() and not (ARCH_DIR / f"{c['arch']}.json").exists():
        errs.append(f"--arch: {c['arch']} does not exist")
    _check_paths(c, errs, ["resume"])
    tc = None
    try:
        tc = _train_config(c)
        errs += tc.validate()
    except (TypeError, ValueError) as exc:
        errs.append(f"training parameters: {exc}")
    if errs:
        raise ConfigErrors(errs)
    seed = int(c["seed"])
    if c["resume"]:
        graph, state, _ = ckptio.load_checkpoint(c["resume"])
    else:
        graph = resolve_arch(c["arch"])
        state = init_state(graph, seed)
    train = parse_data(c["data"], c["limit"])
    if c["overfit_batch"]:
        train = train.take(tc.batch_size)
    held = parse_data(c["eval_data"], c["limit"]) if c["eval_data"] else train
    check_dataset(graph, train)
    check_dataset(graph, held)
    out = _outdir(c)
    report = MetricsReport(meta={"command": "train", "graph": graph.name, "seed": seed,
                                 "config": _recorded(c), "config_hash": config_hash(_recorded(c))})
    flops = flops_of_graph(graph)
    for e in range(tc.epochs):
        stats = train_epoch(graph, state, train, tc, e, seed=seed)
        acc, eval_loss = evaluate(graph, state, held)
        sp = sparsity(graph, state=state)
        report.records.append({"epoch": e + 1, "phase": "train", "p": 0.0, **stats, "eval_accuracy": acc,
                               "eval_loss": eval_loss, "kernel_sparsity": sp["kernel_sparsity"],
                               "param_sparsity": sp["param_sparsity"], "flops": flops,
                               "fully_pruned_filters": sp["fully_pruned_filters"]})
        log.info("train epoch %d/%d loss=%.5f acc=%.4f", e + 1, tc.epochs, stats["train_loss"], acc)
    ckptio.save_checkpoint(graph, state, out / "model.ckpt", meta={"command": "train", "seed": seed})
    _write_reports(report, out)
    return 0


def cmd_prune(args):
    keys = ["seed", "data", "eval_data", "limit", "out", "checkpoint", "epochs", "batch_size", "lr",
            "momentum", "weight_decay", "lr_step", "sparsity", "mode", "criteria", "adv_fraction",
            "normalize_kernels", "guard_filters", "eligible", "distill", "alpha", "temperature", "tap",
            "t_squared"]
    c = resolve(args, keys)
    errs = _common_errors(c, ["data", "out", "checkpoint"])
    _check_paths(c, errs, ["checkpoint", "distill"])
    pc = tc = None
    try:
        eligible = c["eligible"]
        if isinstance(eligible, str):
            eligible = [int(x) for x in eligible.split(",") if x.strip()]
        pc = PruneConfig(target_sparsity=float(c["sparsity"]), epochs=int(c["epochs"]), criteria=c["criteria"],
                         adversarial_layer_fraction=float(c["adv_fraction"]),
                         normalize_kernels=bool(c["normalize_kernels"]), finetune_mode=c["mode"],
                         eligible_layers=eligible, seed=int(c["seed"]) if c["seed"] is not None else 0,
                         guard_full_filters=bool(c["guard_filters"]))
        errs += pc.validate()
        tc = _train_config(c)
        errs += tc.validate()
    except (TypeError, ValueError) as exc:
        errs.append(f"pruning parameters: {exc}")
    if c["distill"]:
        if c["tap"] is None:
            errs.append("--tap is required with --distill")
        if not 0 <= float(c["alpha"]) <= 1:
            errs.append("--alpha must lie in [0, 1]")
        if not float(c["temperature"]) > 0:
            errs.append("--temperature must be positive")
    if errs:
        raise ConfigErrors(errs)
    graph, state, _ = ckptio.load_checkpoint(c["checkpoint"])
    distill = None
    if c["distill"]:
        tgraph, tstate, _ = ckptio.load_checkpoint(c["distill"])
        distill = DistillConfig(tgraph, tstate, int(c["tap"]), float(c["alpha"]), float(c["temperature"]),
                                bool(c["t_squared"]))
        distill.validate(graph)
    train = parse_data(c["data"], c["limit"])
    held = parse_data(c["eval_data"], c["limit"]) if c["eval_data"] else train
    out = _outdir(c)
    base_acc, _ = evaluate(graph, state, held)
    report = MetricsReport(meta={"command": "prune", "graph": graph.name, "seed": pc.seed, "config": _recorded(c),
                                 "config_hash": config_hash(_recorded(c)), "baseline_accuracy": base_acc,
                                 "baseline_flops": flops_of_graph(graph)})
    state, report = run_schedule(graph, state, train, pc, tc, eval_dataset=held, distill=distill, report=report)
    ckptio.save_checkpoint(graph, state, out / "pruned.ckpt", meta={"command": "prune", "seed": pc.seed})
    _write_reports(report, out)
    return 0


def cmd_eval(args):
    c = resolve(args, ["checkpoint", "data", "limit"])
    errs = []
    for k in ("checkpoint", "data"):
        if not c[k]:
            errs.append(f"--{k} is required")
    _check_paths(c, errs, ["checkpoint"])
    _data_paths(c["data"], errs, "--data")
    if errs:
        raise ConfigErrors(errs)
    graph, state, _ = ckptio.load_checkpoint(c["checkpoint"])
    ds = parse_data(c["data"], c["limit"])
    acc, loss = evaluate(graph, state, ds, batch_size=args.batch_size or 256)
    print(json.dumps({"accuracy": acc, "loss": loss, "n": len(ds)}, sort_keys=True))
    return 0


def cmd_flops(args):
    target = args.target or args.arch or args.checkpoint
    if not target:
        raise ConfigErrors(["flops needs an architecture spec or checkpoint"])
    p = Path(target)
    masks = None
    if p.exists() and p.read_bytes()[:4] == ckptio.MAGIC:
        graph, state, masks = ckptio.load_checkpoint(p)
    elif p.exists() or (ARCH_DIR / f"{target}.json").exists():
        graph = resolve_arch(target)
    else:
        raise UsageError(f"{target} does not exist")
    res = {"graph": graph.name, "flops": flops_of_graph(graph), "params": param_count(graph)}
    if masks is not None:
        res["masked_flops"] = flops_with_masks(graph, masks)
        res["kernel_sparsity"] = sparsity(graph, masks=masks)["kernel_sparsity"]
    if args.json:
        print(json.dumps(res, sort_keys=True))
    else:
        print(f"{res['graph']}: FLOPs {res['flops']:.3E} ({res['flops']}), params {res['params']}")
        if masks is not None:
            print(f"masked FLOPs {res['masked_flops']:.3E} ({res['masked_flops']}), "
                  f"kernel sparsity {res['kernel_sparsity']:.4f}")
    return 0


def cmd_report(args):
    missing = [p for p in args.reports if not Path(p).exists()]
    if missing:
        raise ConfigErrors([f"{p} does not exist" for p in missing])
    n = merge_reports(args.reports, args.out)
    log.info("merged %d rows into %s", n, args.out)
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="kcprune", description="Kernel cluster pruning experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--data", metavar="SPEC", help="idx:IMAGES,LABELS | synth:SEED,N,CLASSES,SIZE,SEP")
        p.add_argument("--eval-data", metavar="SPEC")
        p.add_argument("--limit", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--momentum", type=float)
        p.add_argument("--weight-decay", type=float)
        p.add_argument("--lr-step", type=int)

    p = sub.add_parser("train", help="train from scratch or resume a checkpoint")
    common(p)
    p.add_argument("--arch", metavar="PATH")
    p.add_argument("--resume", metavar="CKPT")
    p.add_argument("--overfit-batch", action="store_true", help="train on a single batch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="iterative kernel cluster pruning of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--sparsity", type=float)
    p.add_argument("--mode", choices=("soft", "hard"))
    p.add_argument("--criteria", choices=("center", "adversarial"))
    p.add_argument("--adv-fraction", type=float)
    p.add_argument("--normalize-kernels", action="store_true")
    p.add_argument("--guard-filters", action="store_true", help="never prune every kernel of a filter")
    p.add_argument("--eligible", metavar="LAYERS", help="comma-separated conv layer indices")
    p.add_argument("--distill", metavar="TEACHER.ckpt")
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--tap", type=int, metavar="LAYER")
    p.add_argument("--t-squared", action="store_true")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--data", metavar="SPEC")
    p.add_argument("--limit", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="FLOPs and parameter counts")
    p.add_argument("target", nargs="?", help="architecture JSON, bundled name, or checkpoint")
    p.add_argument("--arch", metavar="PATH")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("report", help="merge run reports into one CSV")
    p.add_argument("reports", nargs="+", metavar="REPORT.json")
    p.add_argument("--out", required=True, metavar="CSV")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    # bind to the current stderr on every call so repeated in-process runs log correctly
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(message)s"))
    log.handlers[:] = [handler]
    log.propagate = False
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    try:
        return args.func(args)
    except ConfigErrors as exc:
        for e in exc.errors:
            print(f"kcprune: error: {e}", file=sys.stderr)
        return exc.exit_code
    except KCPError as exc:
        print(f"kcprune: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"kcprune: error: {exc}", file=sys.stderr)
        return FormatError.exit_code


if __name__ == "__main__":
    sys.exit(main())
