"""Command-line harness: data generation, the three training stages, evaluation and diagnostics.

Every training command writes into its ``--out`` directory:

* ``config.ini``   the fully resolved configuration (rerunning with it reproduces the run)
* ``metrics.jsonl`` one JSON record per epoch, also echoed to stdout
* ``checkpoint.gimp`` refreshed after every epoch, so ``--resume`` can continue
"""

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .attention import multi_head_attention_exact, nystrom_attention
from .autodiff import grad_check, no_grad
from .config import TrainConfig, format_value, parse_ini, profile_config, rng_stream, section_values
from .data import SynthConfig, generate_synthetic, load_dataset
from .errors import ConfigError, GimpError, MissingFileError
from .gradcheck import pretrain_objective_case, run_suite
from .head import evaluate
from .model import GiMPModel
from .training import (FinetuneState, finetune, make_finetune_optimizer, make_pretrain_optimizer,
                       pretrain, pretrain_genes)

log = logging.getLogger("gimp")

CHECKPOINT = "checkpoint.gimp"
CONFIG_ECHO = "config.ini"
METRICS = "metrics.jsonl"

EXIT_CODES = {
    0: "success",
    1: "unexpected internal error",
    2: "invalid command-line usage",
    3: "missing file",
    4: "invalid configuration or architecture mismatch",
    5: "numeric abort (non-finite loss or failed inversion)",
    6: "malformed data",
    7: "gradient check failed",
}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def load_config(path, seed=None, profile=None):
    """Resolve ``path`` (INI) over ``profile``; ``seed`` overrides the file."""
    if path is None:
        cfg = profile_config(profile or "desk")
    else:
        text = _read_text(path)
        cp = parse_ini(text)
        if profile is not None and not cp.has_option("run", "profile"):
            if not cp.has_section("run"):
                cp.add_section("run")
            cp.set("run", "profile", profile)
        cfg = TrainConfig.from_parser(cp)
    return cfg if seed is None else cfg.replace(seed=seed)


def _read_text(path):
    try:
        return Path(path).read_text()
    except FileNotFoundError:
        raise MissingFileError(f"file not found: {path}") from None


def synth_config(path, cfg):
    """Synthetic-data settings: config ``[synth]`` keys over the config's data shape and seed."""
    base = dict(num_classes=cfg.num_classes, n_genes=cfg.n_genes, embed_dim=cfg.embed_dim, seed=cfg.seed)
    if path is not None:
        base.update(section_values(parse_ini(_read_text(path)), "synth", SynthConfig))
        base["seed"] = cfg.seed
    return SynthConfig(**base)


def manifest_path(data):
    p = Path(data)
    return p / "manifest.json" if p.is_dir() else p


def load_data(data, cfg, model, splits=("train", "val", "test")):
    return load_dataset(manifest_path(data), cfg.n_genes, model.layout.n_genes, cfg.embed_dim, splits)


class Run:
    """Output directory of one command: config echo, metric stream and checkpoint."""

    def __init__(self, out, cfg, extra_ini=""):
        self.dir = Path(out)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / CONFIG_ECHO).write_text(cfg.to_ini() + extra_ini)
        self.metrics = self.dir / METRICS
        self.checkpoint = self.dir / CHECKPOINT

    def start(self, resume):
        if not resume and self.metrics.exists():
            self.metrics.unlink()

    def emit(self, record):
        line = json.dumps(record, sort_keys=True)
        print(line, flush=True)
        with open(self.metrics, "a") as fh:
            fh.write(line + "\n")


def emit(record):
    print(json.dumps(record, sort_keys=True), flush=True)


def _resume_point(run, stage, resume):
    if not resume or not run.checkpoint.exists():
        return None
    ck = ckpt.load(run.checkpoint)
    if ck.stage != stage:
        raise ConfigError(f"{run.checkpoint} holds a {ck.stage!r} checkpoint, cannot resume {stage!r}")
    return ck


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args):
    cfg = load_config(args.config, args.seed, args.profile)
    sc = synth_config(args.config, cfg)
    out = Path(args.out)
    ds = generate_synthetic(sc, out)
    synth_ini = "[synth]\n" + "".join(
        f"{k} = {format_value(getattr(sc, k))}\n" for k in SynthConfig.__dataclass_fields__ if k != "seed") + "\n"
    (out / CONFIG_ECHO).write_text(cfg.to_ini() + synth_ini)
    emit({"event": "gen-data", "out": str(out), "patients": len(ds.pairs), "split_sizes": ds.split_sizes()})
    return 0


def cmd_pretrain_gene(args):
    cfg = load_config(args.config, args.seed, args.profile)
    run = Run(args.out, cfg)
    run.start(False)
    model = GiMPModel.build(cfg)
    ds, _ = load_data(args.data, cfg, model, ("train",))
    acc = pretrain_genes(model, ds.split("train"), cfg)
    for epoch, a in enumerate(acc):
        run.emit({"stage": "gene", "epoch": epoch, "split": "train", "accuracy": a})
    ckpt.save(ckpt.Checkpoint.capture(model, cfg, "gene", len(acc)), run.checkpoint)
    return 0


def cmd_pretrain(args):
    cfg = load_config(args.config, args.seed, args.profile)
    run = Run(args.out, cfg)
    ck = _resume_point(run, "pretrain", args.resume)
    if ck is not None:
        cfg.check_compatible(ck.config)
        model = ck.build_model()
        optimizer = make_pretrain_optimizer(model, cfg)
        optimizer.load_state_dict(ck.optimizer)
        batch_rng, start = ck.generator("batching"), ck.epoch
    else:
        if args.gene_ckpt is None:
            raise ConfigError("pretrain needs --gene-ckpt (or --resume with an existing checkpoint)")
        src = ckpt.load(args.gene_ckpt)
        cfg.check_compatible(src.config)
        model = GiMPModel.build(cfg)
        model.gene_encoder.load_state_dict(src.params["gene_encoder"])
        model.freeze("gene_encoder")
        optimizer, batch_rng, start = None, None, 0
    run.start(ck is not None)
    ds, _ = load_data(args.data, cfg, model, ("train",))

    def on_epoch(rec, opt, rng):
        run.emit(rec | {"split": "train", "loss": rec["L_pre"]})
        ckpt.save(ckpt.Checkpoint.capture(model, cfg, "pretrain", rec["epoch"] + 1, opt,
                                          {"batching": rng}), run.checkpoint)

    pretrain(model, ds.split("train"), cfg, start, optimizer, batch_rng, on_epoch, args.stop_after)
    return 0


def cmd_finetune(args):
    cfg = load_config(args.config, args.seed, args.profile)
    run = Run(args.out, cfg)
    ck = _resume_point(run, "finetune", args.resume)
    if ck is not None:
        cfg.check_compatible(ck.config)
        model = ck.build_model()
        optimizer = make_finetune_optimizer(model, cfg)
        optimizer.load_state_dict(ck.optimizer)
        order_rng, start = ck.generator("finetune"), ck.epoch
        state = FinetuneState(ck.best_val_acc, ck.best_epoch, ck.best_params or {})
    else:
        if args.ckpt is None:
            raise ConfigError("finetune needs --ckpt (or --resume with an existing checkpoint)")
        src = ckpt.load(args.ckpt)
        cfg.check_compatible(src.config)
        model = src.build_model()
        model.freeze("gene_encoder")
        for g in ("aggregator", "head"):
            model.freeze(g, False)
        optimizer, order_rng, start, state = None, None, 0, None
    run.start(ck is not None)
    ds, _ = load_data(args.data, cfg, model, ("train", "val"))

    def on_epoch(rec, opt, rng, st):
        run.emit(rec | {"split": "val", "loss": rec["val_loss"], "accuracy": rec["val_accuracy"]})
        ckpt.save(ckpt.Checkpoint.capture(model, cfg, "finetune", rec["epoch"] + 1, opt,
                                          {"finetune": rng}, best=st), run.checkpoint)

    _, state = finetune(model, ds.split("train"), ds.split("val"), cfg, start, optimizer, order_rng,
                        state, on_epoch, args.stop_after)
    if args.stop_after is None or args.stop_after >= cfg.finetune_epochs:
        # The model now holds the validation-best parameters; that is the saved result.
        final = ckpt.Checkpoint.capture(model, cfg, "finetune", cfg.finetune_epochs, best=state,
                                        extra={"selected": "best_val"})
        ckpt.save(final, run.checkpoint)
        run.emit({"stage": "finetune", "event": "selected", "best_epoch": state.best_epoch,
                  "split": "val", "accuracy": state.best_acc})
    return 0


def cmd_eval(args):
    ck = ckpt.load(args.ckpt)
    cfg = ck.config
    model = ck.build_model()
    ds, manifest = load_data(args.data, cfg, model, (args.split,))
    report = evaluate(ds.split(args.split), model)
    emit({"event": "eval", "split": args.split, "split_sizes": manifest.split_sizes()} | report.as_record())
    if args.export_cls:
        with open(args.export_cls, "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for pid, label, row in zip(report.patient_ids, report.labels, report.cls_pat):
                w.writerow([pid, int(label)] + [repr(float(v)) for v in row])
    return 0


def cmd_grad_check(args):
    results = run_suite(args.seed or 0, max_coords=args.max_coords)
    if args.config is not None:
        cfg = load_config(args.config, args.seed, args.profile)
        rng = np.random.default_rng(cfg.seed)
        f, params = pretrain_objective_case(rng, cfg)
        results.append(("pretrain_objective[config]",
                        grad_check(f, params, eps=1e-5, tol=1e-4, max_coords=args.max_coords, rng=rng)))
    failed = 0
    for name, rep in results:
        emit({"check": name, "max_rel_err": rep.max_error, "tol": rep.tol, "passed": rep.passed})
        failed += not rep.passed
    emit({"event": "grad-check", "checks": len(results), "failed": failed})
    return 7 if failed else 0


def bench_inputs(rng, T, d, family):
    """Attention inputs; ``correlated`` keys (K = Q + noise) keep the kernel well conditioned."""
    X = rng.standard_normal((T, d))
    if family == "correlated":
        Q, K = X, X + 0.3 * rng.standard_normal((T, d))
    else:
        Q, K = X, rng.standard_normal((T, d))
    return Q, K, rng.uniform(-1.0, 1.0, (T, d))


def cmd_bench_nystrom(args):
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["T", "m", "seed", "max_abs_err", "wall_ms"])
        with no_grad():
            for T in args.t_list:
                for m in args.m_list:
                    for seed in range(args.seeds):
                        Q, K, V = bench_inputs(rng_stream(seed, "bench", T), T, args.d, args.family)
                        exact = multi_head_attention_exact(Q, K, V, args.heads).data
                        t0 = time.perf_counter()
                        approx = nystrom_attention(Q, K, V, m, args.heads, args.pinv_iters).data
                        ms = 1000.0 * (time.perf_counter() - t0)
                        w.writerow([T, m, seed, repr(float(np.max(np.abs(approx - exact)))), f"{ms:.3f}"])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    """Usage errors also get the structured stderr line."""

    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", f"{self.prog}: {message}", 2)
        self.exit(2)


def build_parser():
    codes = "\n".join(f"  {k}  {v}" for k, v in EXIT_CODES.items())
    p = _Parser(
        prog="gimp", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Image-omic pre-training pipeline on precomputed patch embeddings.",
        epilog=f"exit codes:\n{codes}\n\nErrors are also reported as one JSON line on stderr.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="INI config file (default: the desk profile)")
            sp.add_argument("--profile", choices=["desk", "paper"], help="base profile for unset keys")
        sp.add_argument("--seed", type=int, help="root seed; overrides the config")

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("pretrain-gene", help="supervised gene-encoder pre-training")
    common(sp)
    sp.add_argument("--data", required=True, help="dataset directory or manifest.json")
    sp.add_argument("--out", required=True, help="run directory")
    sp.set_defaults(func=cmd_pretrain_gene)

    for name, src, func, helptext in (
            ("pretrain", "--gene-ckpt", cmd_pretrain, "masked-patch plus triplet pre-training"),
            ("finetune", "--ckpt", cmd_finetune, "supervised fine-tuning with validation-best selection")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--data", required=True)
        sp.add_argument(src, help="checkpoint to start from")
        sp.add_argument("--out", required=True, help="run directory")
        sp.add_argument("--resume", action="store_true", help="continue from the run directory's checkpoint")
        sp.add_argument("--stop-after", type=int, metavar="EPOCHS",
                        help="stop once this many epochs are complete (resume later)")
        sp.set_defaults(func=func)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--export-cls", metavar="TSV", help="write patient_id, label and CLS_pat per row")
    sp.set_defaults(func=cmd_eval, seed=None)

    sp = sub.add_parser("grad-check", help="finite-difference check of every differentiable op")
    common(sp)
    sp.add_argument("--max-coords", type=int, default=8, help="coordinates sampled per large parameter")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("bench-nystrom", help="Nystrom approximation error and time versus exact attention")
    sp.add_argument("--d", type=int, default=16)
    sp.add_argument("--heads", type=int, default=1)
    sp.add_argument("--m-list", type=_int_list, default=[4, 8, 16, 32])
    sp.add_argument("--t-list", type=_int_list, default=[32, 64])
    sp.add_argument("--seeds", type=int, default=5, help="number of seeds, 0..N-1")
    sp.add_argument("--pinv-iters", type=int, default=15)
    sp.add_argument("--family", choices=["correlated", "independent"], default="correlated")
    sp.add_argument("--out", help="CSV path (default: stdout)")
    sp.set_defaults(func=cmd_bench_nystrom, seed=None)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except GimpError as exc:
        _report(exc.kind, str(exc), exc.exit_code)
        return exc.exit_code
    except Exception as exc:  # noqa: BLE001 - last-resort structured report
        log.debug("internal error", exc_info=True)
        _report("internal", f"{type(exc).__name__}: {exc}", 1)
        return 1


def _report(kind, message, code):
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr, flush=True)


if __name__ == "__main__":
    sys.exit(main())
