"""Command-line entry point: gen, train, predict, eval, sweep, gradcheck.

Every command that writes an output directory also stores its resolved
``run_config.json`` there; passing that file back through ``--config``
repeats the run. Flags given on the command line override the file.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import checkpoint
from .baselines import fit_elementwise, sum_model, training_pairs
from .data import (ContentionConfig, build_dataset, load_manifest, random_specs, save_trace_csv,
                   specs_from_json, specs_to_json)
from .evaluation import (CRITERIA, Report, bin_errors, clamp_pc, emit_report, experiment1,
                         experiment1_predictions, predict_runtime, sweep_length_multiplier)
from .features import METRICS, N_METRICS, DataError, Normalizer, make_example
from .model import ModelConfig, ResourceNet, TrainingConfig, train
from .numerics import NumericError, finite_diff_check

log = logging.getLogger("resourcenet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RUN_CONFIG = "run_config.json"
MODEL_FILE = "model.ckpt"
BASELINE_KINDS = ("linear", "mlp")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    paths: Dict[str, Optional[str]] = field(default_factory=dict)
    model: Dict[str, object] = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    ks: List[int] = field(default_factory=list)
    options: Dict[str, object] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        if self.subcommand not in COMMANDS:
            raise UsageError(f"unknown subcommand {self.subcommand!r}")
        if any(int(k) < 1 for k in self.ks):
            raise UsageError("k values must be >= 1")
        if self.model:
            try:
                ModelConfig.from_dict(self.model)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid model settings: {exc}") from None
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"


# -- helpers -----------------------------------------------------------


def _prepare_out(path: str, force: bool) -> None:
    if os.path.exists(path):
        if not os.path.isdir(path):
            raise UsageError(f"{path} exists and is not a directory")
        if os.listdir(path):
            if not force:
                raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
            shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _write_run_config(out_dir: str, rc: RunConfig) -> None:
    with open(os.path.join(out_dir, RUN_CONFIG), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(rc.to_json())


def _parse_ks(text: str) -> List[int]:
    try:
        ks = [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("k values must be integers >= 1")
    return ks


def _load_examples(manifest: str, norm: Normalizer):
    return [make_example(t, norm) for t in load_manifest(manifest)]


def _load_model(path: str):
    model, norm, meta = checkpoint.load_model(path)
    if norm is None:
        raise DataError(f"{path} has no stored normalizer")
    return model, norm


# -- subcommands -------------------------------------------------------


def cmd_gen(args) -> RunConfig:
    if args.specs:
        try:
            with open(args.specs, encoding="utf-8") as fh:
                specs, contention = specs_from_json(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read specs {args.specs}: {exc}") from None
    else:
        specs = random_specs(args.workloads, seed=args.seed)
        contention = ContentionConfig()
    rc = RunConfig("gen", paths={"specs": args.specs, "out": args.out}, seeds={"seed": args.seed},
                   options={"workloads": args.workloads, "test_fraction": args.test_fraction}).validate()
    _prepare_out(args.out, args.force)
    train_t, test_t = build_dataset(specs, args.out, cfg=contention, split_seed=args.seed,
                                    test_fraction=args.test_fraction)
    with open(os.path.join(args.out, "specs.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(specs_to_json(specs, contention), fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_run_config(args.out, rc)
    print(f"wrote {len(train_t)} train and {len(test_t)} test triplets to {args.out}")
    return rc


def _apply_train_config(args) -> None:
    """Fill train flags from a TrainingConfig JSON file; explicit flags win."""
    try:
        with open(args.train_config, encoding="utf-8") as fh:
            tc = TrainingConfig.from_json(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read training config: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid training config {args.train_config}: {exc}") from None
    for key in ("enc_hidden", "dec_hidden", "lr", "lr_decay", "epochs", "seed"):
        if key not in args.explicit:
            setattr(args, key, getattr(tc, key))


def cmd_train(args) -> RunConfig:
    if args.train_config:
        _apply_train_config(args)
    cfg = ModelConfig(enc_hidden=args.enc_hidden, dec_hidden=args.dec_hidden, seed=args.seed, lr=args.lr,
                      clip_norm=args.clip_norm)
    baselines = [] if args.baselines in ("", "none") else args.baselines.split(",")
    for b in baselines:
        if b not in BASELINE_KINDS:
            raise UsageError(f"unknown baseline {b!r}; choose from {', '.join(BASELINE_KINDS)} or none")
    if args.epochs < 0:
        raise UsageError("--epochs must be >= 0")
    if not 0 < args.lr_decay <= 1:
        raise UsageError("--lr-decay must lie in (0, 1]")
    rc = RunConfig("train", paths={"manifest": args.manifest, "out": args.out, "train_config": args.train_config},
                   model=cfg.to_dict(),
                   seeds={"seed": args.seed, "shuffle_seed": args.shuffle_seed},
                   options={"epochs": args.epochs, "lr_decay": args.lr_decay, "baselines": baselines}).validate()

    triplets = load_manifest(args.manifest)
    if not triplets:
        raise DataError(f"{args.manifest} lists no triplets")
    norm = Normalizer.fit([x for t in triplets for x in (t.a, t.b, t.colocated)])
    examples = [make_example(t, norm) for t in triplets]
    _prepare_out(args.out, args.force)

    model = ResourceNet(cfg)
    result = train(model, examples, args.epochs, seed=args.shuffle_seed, lr_decay=args.lr_decay,
                   callback=lambda ep, loss: log.info("epoch %d loss %.6g", ep, loss))
    checkpoint.save_model(os.path.join(args.out, MODEL_FILE), model, norm)
    with open(os.path.join(args.out, "loss_curve.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, loss in enumerate(result.losses, 1):
            w.writerow([i, repr(float(loss))])

    if baselines:
        X, Y = training_pairs(examples)
        for kind in baselines:
            m = fit_elementwise(kind, X, Y, seed=args.seed)
            checkpoint.save_elementwise(os.path.join(args.out, f"{kind}.ckpt"), m, norm)
    _write_run_config(args.out, rc)
    final = f"{result.losses[-1]:.6g}" if result.losses else "n/a"
    print(f"trained {result.steps} steps, final loss {final}; checkpoint in {args.out}")
    return rc


def cmd_predict(args) -> RunConfig:
    rc = RunConfig("predict", paths={"checkpoint": args.checkpoint, "manifest": args.manifest, "out": args.out},
                   ks=[args.k], options={"index": args.index, "criterion": args.criterion}).validate()
    if args.criterion not in CRITERIA:
        raise UsageError(f"unknown criterion {args.criterion!r}")
    model, norm = _load_model(args.checkpoint)
    triplets = load_manifest(args.manifest)
    if not 0 <= args.index < len(triplets):
        raise UsageError(f"--index must lie in [0, {len(triplets) - 1}]")
    ex = make_example(triplets[args.index], norm)
    gen = clamp_pc(model.generate(ex.inputs, steps=args.k * ex.x))
    runtime = predict_runtime(gen, args.criterion)
    _prepare_out(args.out, args.force)
    save_trace_csv(np.maximum(norm.invert(gen[:runtime, :N_METRICS]), 0.0),
                   os.path.join(args.out, f"{ex.id}.csv"))
    _write_run_config(args.out, rc)
    print(f"{ex.id}: predicted runtime {runtime} s (true {ex.length} s)")
    return rc


def _load_baselines(run_dir: Optional[str]):
    models = {"baseline": sum_model()}
    if run_dir:
        for kind in BASELINE_KINDS:
            p = os.path.join(run_dir, f"{kind}.ckpt")
            if os.path.exists(p):
                models[kind] = checkpoint.load_elementwise(p)
    return models


def cmd_eval(args) -> RunConfig:
    ckpt = args.checkpoint or os.path.join(args.run, MODEL_FILE)
    rc = RunConfig("eval", paths={"run": args.run, "checkpoint": ckpt, "manifest": args.manifest, "out": args.out},
                   options={"traces": args.traces}).validate()
    model, norm = _load_model(ckpt)
    examples = _load_examples(args.manifest, norm)
    elementwise = _load_baselines(args.run or os.path.dirname(ckpt))
    result = experiment1(examples, norm, resourcenet=model, elementwise=elementwise)
    traces = {}
    for ex in examples[:args.traces]:
        traces[ex.id] = (ex.colocated, experiment1_predictions(ex, norm, model, elementwise))
    summary = {
        "mean_mape": {m: result.mean_over_metrics(m) for m in result.table},
        "triplets_used": len(result.used),
        "triplets_excluded": result.excluded,
    }
    _prepare_out(args.out, args.force)
    emit_report(Report(mape_table=result.table, traces=traces, summary=summary), args.out)
    _write_run_config(args.out, rc)
    for m in result.table:
        cells = " ".join(f"{k}={result.table[m][k][0]:.2f}" for k in METRICS)
        print(f"{m:12s} mean={summary['mean_mape'][m]:.2f} {cells}")
    return rc


def cmd_sweep(args) -> RunConfig:
    ks = _parse_ks(args.ks)
    if args.bin_criterion not in CRITERIA:
        raise UsageError(f"unknown criterion {args.bin_criterion!r}")
    if args.bin_k not in ks:
        raise UsageError("--bin-k must be one of --ks")
    rc = RunConfig("sweep", paths={"checkpoint": args.checkpoint, "manifest": args.manifest, "out": args.out},
                   ks=ks, options={"bin_criterion": args.bin_criterion, "bin_k": args.bin_k,
                                   "clamp": not args.no_clamp}).validate()
    model, norm = _load_model(args.checkpoint)
    examples = _load_examples(args.manifest, norm)
    res = sweep_length_multiplier(model, examples, ks, clamp=not args.no_clamp)
    bins = bin_errors(res.predictions[(args.bin_criterion, args.bin_k)], res.true_lengths, res.xs)
    best = min(res.table, key=lambda key: res.table[key][0])
    summary = {"best": {"criterion": best[0], "k": best[1], "mape": res.table[best][0]},
               "bins_for": {"criterion": args.bin_criterion, "k": args.bin_k}}
    _prepare_out(args.out, args.force)
    emit_report(Report(runtime_table=res.table, bins=bins, summary=summary), args.out)
    _write_run_config(args.out, rc)
    for k in ks:
        print(f"k={k} " + " ".join(f"{c}={res.table[(c, k)][0]:.2f}" for c in CRITERIA))
    return rc


def toy_gradcheck(dims: int, seed: int, x: int = 4, T: int = 5, h: float = 1e-4) -> float:
    """Max relative gradient error of a small ResourceNet on a random triplet."""
    rng = np.random.default_rng(seed)
    model = ResourceNet(ModelConfig(enc_hidden=dims, dec_hidden=dims, seed=seed))
    inputs = rng.uniform(0, 1, size=(x, model.config.input_dim))
    target = rng.uniform(0, 1, size=(T, model.config.output_dim))

    def fwd():
        return model.loss_and_grad(inputs, target)

    return finite_diff_check(fwd, model.params, h=h)


def cmd_gradcheck(args) -> RunConfig:
    if args.dims < 1:
        raise UsageError("--dims must be >= 1")
    rc = RunConfig("gradcheck", seeds={"seed": args.seed},
                   options={"dims": args.dims, "tol": args.tol, "step": args.step}).validate()
    err = toy_gradcheck(args.dims, args.seed, h=args.step)
    print(f"max relative error {err:.3e} (tolerance {args.tol:g})")
    if not err <= args.tol:
        raise NumericError(f"gradient check failed: {err:.3e} > {args.tol:g}")
    return rc


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


# -- argument parsing ----------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors map to exit code 1."""

    def __init__(self, *a, **kw):
        kw.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
        kw.setdefault("allow_abbrev", False)
        super().__init__(*a, **kw)

    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="resourcenet", description="Predict co-located job resource traces.")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="subcommand", parser_class=_Parser, metavar="COMMAND")
    sub.required = True

    def common(sp, out=True):
        sp.add_argument("--config", help="run_config.json whose settings become the defaults")
        if out:
            sp.add_argument("--out", required=False, help="output directory")
            sp.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")

    g = sub.add_parser("gen", help="generate a synthetic co-location dataset")
    common(g)
    g.add_argument("--specs", help="workload specs JSON; random specs when omitted")
    g.add_argument("--workloads", type=int, default=20, help="number of random workloads without --specs")
    g.add_argument("--seed", type=int, default=0, help="seed for random specs and the pair split")
    g.add_argument("--test-fraction", type=float, default=0.2, help="fraction of workload pairs held out")

    t = sub.add_parser("train", help="train ResourceNet (and elementwise baselines)")
    common(t)
    t.add_argument("--manifest", help="training manifest JSON")
    t.add_argument("--epochs", type=int, default=20, help="training epochs")
    t.add_argument("--seed", type=int, default=0, help="parameter initialization seed")
    t.add_argument("--shuffle-seed", type=int, default=0, help="per-epoch shuffle seed")
    t.add_argument("--lr", type=float, default=1e-3, help="Adam learning rate")
    t.add_argument("--lr-decay", type=float, default=0.93, help="per-epoch learning rate factor")
    t.add_argument("--clip-norm", type=float, default=5.0, help="global gradient norm clip")
    t.add_argument("--enc-hidden", type=int, default=64, help="encoder hidden size")
    t.add_argument("--dec-hidden", type=int, default=64, help="decoder hidden size")
    t.add_argument("--baselines", default="linear,mlp", help="elementwise baselines to fit, or none")
    t.add_argument("--train-config", help="TrainingConfig JSON (dims, lr, lr_decay, epochs, seed, k)")

    pr = sub.add_parser("predict", help="predict the co-located trace of one manifest entry")
    common(pr)
    pr.add_argument("--checkpoint", help="ResourceNet checkpoint")
    pr.add_argument("--manifest", help="manifest JSON")
    pr.add_argument("--index", type=int, default=0, help="entry index in the manifest")
    pr.add_argument("--k", type=int, default=4, help="generate k times the longest input length")
    pr.add_argument("--criterion", default="argmax_pc_sum", help=f"stopping criterion: {', '.join(CRITERIA)}")

    e = sub.add_parser("eval", help="per-metric MAPE of all models on the overlap window")
    common(e)
    e.add_argument("--run", help="training output directory (model and baselines)")
    e.add_argument("--checkpoint", help="ResourceNet checkpoint, if not taken from --run")
    e.add_argument("--manifest", help="test manifest JSON")
    e.add_argument("--traces", type=int, default=3, help="number of per-triplet trace comparisons to write")

    s = sub.add_parser("sweep", help="runtime prediction error per stopping criterion and k")
    common(s)
    s.add_argument("--checkpoint", help="ResourceNet checkpoint")
    s.add_argument("--manifest", help="test manifest JSON")
    s.add_argument("--ks", default="1,2,3,4,5,6,7,8", help="comma-separated length multipliers")
    s.add_argument("--bin-criterion", default="argmax_pc_sum", help="criterion used for the length bins")
    s.add_argument("--bin-k", type=int, default=4, help="k used for the length bins")
    s.add_argument("--no-clamp", action="store_true", help="do not clamp PC channels to [0, 1]")

    gc = sub.add_parser("gradcheck", help="finite-difference check of a small ResourceNet")
    common(gc, out=False)
    gc.add_argument("--dims", type=int, default=3, help="hidden size of the toy model")
    gc.add_argument("--seed", type=int, default=1, help="seed for parameters and data")
    gc.add_argument("--tol", type=float, default=1e-4, help="maximum accepted relative error")
    gc.add_argument("--step", type=float, default=1e-4, help="central difference step")
    return p


REQUIRED = {
    "gen": ("out",),
    "train": ("manifest", "out"),
    "predict": ("checkpoint", "manifest", "out"),
    "eval": ("manifest", "out"),
    "sweep": ("checkpoint", "manifest", "out"),
    "gradcheck": (),
}


def _config_defaults(path: str, subcommand: str) -> dict:
    """Flatten a stored RunConfig into argparse destinations."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from None
    if doc.get("subcommand", subcommand) != subcommand:
        raise UsageError(f"{path} is a {doc['subcommand']!r} config, not {subcommand!r}")
    flat = {}
    flat.update(doc.get("paths") or {})
    flat.update(doc.get("seeds") or {})
    opts = dict(doc.get("options") or {})
    if isinstance(opts.get("baselines"), list):
        opts["baselines"] = ",".join(opts["baselines"]) or "none"
    if "clamp" in opts:
        opts["no_clamp"] = not opts.pop("clamp")
    flat.update(opts)
    model = doc.get("model") or {}
    for key in ("enc_hidden", "dec_hidden", "lr", "clip_norm"):
        if key in model:
            flat[key] = model[key]
    if doc.get("ks"):
        if subcommand == "predict":
            flat["k"] = doc["ks"][0]
        else:
            flat["ks"] = ",".join(str(k) for k in doc["ks"])
    return {k: v for k, v in flat.items() if v is not None}


def parse(argv: Sequence[str]):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = parser._subparsers._group_actions[0].choices[args.subcommand]
        defaults = _config_defaults(args.config, args.subcommand)
        known = {a.dest for a in sub._actions}
        sub.set_defaults(**{k: v for k, v in defaults.items() if k in known})
        args = parser.parse_args(argv)
    args.explicit = {a.lstrip("-").split("=")[0].replace("-", "_") for a in argv if a.startswith("--")}
    missing = [f"--{name}" for name in REQUIRED[args.subcommand] if not getattr(args, name, None)]
    if args.subcommand == "eval" and not (args.run or args.checkpoint):
        missing.append("--run or --checkpoint")
    if missing:
        raise UsageError(f"{args.subcommand}: missing required {', '.join(missing)}")
    return args


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        COMMANDS[args.subcommand](args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, checkpoint.CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
