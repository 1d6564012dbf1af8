"""Command-line entry point.

Every subcommand prints ``key=value`` lines on stdout and records a run
manifest (resolved config, input/output hashes, wall time).  Exit codes:
0 ok, 1 usage error, 2 data error, 3 numeric failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .errors import CoatError, DataError, NumericError

log = logging.getLogger("coatcbm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers ----------------------------------------------------------------------------

def hash_path(path):
    h = hashlib.sha256()
    if os.path.isdir(path):
        for root, dirs, files in os.walk(path):
            dirs.sort()
            for name in sorted(files):
                if name == "run_manifest.json":
                    continue
                full = os.path.join(root, name)
                h.update(os.path.relpath(full, path).encode())
                with open(full, "rb") as fh:
                    h.update(fh.read())
    else:
        with open(path, "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def _load_json(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from exc


def resolve_split(path, split):
    if os.path.isfile(os.path.join(path, "meta.json")):
        return path
    cand = os.path.join(path, split)
    if os.path.isfile(os.path.join(cand, "meta.json")):
        return cand
    raise DataError(f"{path} is neither a dataset nor a directory containing {split}/")


def resolve_bank(explicit, ckpt=None, data=None):
    from .tensorio import load_concept_bank

    cands = [explicit] if explicit else []
    if ckpt:
        cands.append(os.path.join(ckpt, "bank"))
    if data:
        cands += [os.path.join(data, "bank"), os.path.join(os.path.dirname(os.path.abspath(data)), "bank")]
    for c in cands:
        if c and os.path.isfile(os.path.join(c, "bank.json")):
            return c, load_concept_bank(c)
    raise DataError("no concept bank found; pass --bank")


def _load_ckpt(args):
    from .trainer import load_checkpoint

    ckpt, stored_bank = load_checkpoint(args.ckpt)
    return ckpt


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


class Run:
    """Collects stdout lines, inputs, outputs and config for the manifest."""

    def __init__(self, command):
        self.command = command
        self.lines = []
        self.inputs = {}
        self.outputs = []
        self.config = {}

    def emit(self, **kv):
        self.lines.append(" ".join(f"{k}={_fmt(v)}" for k, v in kv.items()))

    def add_input(self, path):
        if path and os.path.exists(path):
            self.inputs[path] = hash_path(path)


# -- commands --------------------------------------------------------------------------

def cmd_gen_synth(args, run):
    from .synth import SynthConfig, nearest_centroid_accuracy, write_synth

    data = _load_json(args.config)
    run.add_input(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = SynthConfig.from_dict(data)
    run.config = asdict(cfg)
    splits, bank, _ = write_synth(cfg, args.out)
    run.outputs.append(args.out)
    for name, ds in splits.items():
        run.emit(split=name, samples=len(ds))
    run.emit(n_concepts=bank.n_concepts, n_classes=bank.n_classes)
    if len(splits["train"]) and len(splits["test"]):
        run.emit(nearest_centroid_accuracy=nearest_centroid_accuracy(splits["train"], splits["test"]))


_TRAIN_FLAGS = ("seed", "epochs", "lr", "lam", "tau", "loss_mode", "group_ratio", "d_k", "eval_every",
                "batch_size", "precision")


def _train_config(args, run):
    from .trainer import TrainConfig

    data = _load_json(args.config)
    run.add_input(args.config)
    cfg = TrainConfig.from_dict(data)
    for name in _TRAIN_FLAGS:
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    cfg.validate()
    return cfg


def cmd_train(args, run):
    from .tensorio import load_dataset
    from .trainer import evaluate, save_checkpoint, train

    train_dir = resolve_split(args.data, "train")
    val_dir = resolve_split(args.val, "val") if args.val else None
    if val_dir is None:
        try:
            val_dir = resolve_split(args.data, "val")
        except DataError:
            log.warning("no validation split found; validating on the training set")
            val_dir = train_dir
    bank_dir, bank = resolve_bank(args.bank, data=args.data)
    for p in (train_dir, val_dir, bank_dir):
        run.add_input(p)
    cfg = _train_config(args, run)
    run.config = asdict(cfg)
    train_set, val_set = load_dataset(train_dir), load_dataset(val_dir)
    ckpt = train(train_set, val_set, bank, cfg)
    save_checkpoint(ckpt, args.out, bank=bank)
    run.outputs.append(args.out)
    res = evaluate(train_set, ckpt, bank)
    run.emit(best_epoch=ckpt.epoch, val_accuracy=ckpt.val_accuracy, train_accuracy=res.accuracy,
             final_train_loss=ckpt.history[-1].get("train_loss", float("nan")))
    run.emit(hash=ckpt.hash)


def _eval_inputs(args, run, split="test"):
    from .tensorio import check_compatible, load_dataset

    ckpt = _load_ckpt(args)
    data_dir = resolve_split(args.data, split)
    _, bank = resolve_bank(getattr(args, "bank", None), ckpt=args.ckpt, data=args.data)
    ds = load_dataset(data_dir)
    check_compatible(ds, bank)
    run.add_input(args.ckpt)
    run.add_input(data_dir)
    run.config = {"ckpt": args.ckpt, "data": data_dir, "train_config": asdict(ckpt.config)}
    return ckpt, ds, bank


def cmd_eval(args, run):
    from .trainer import evaluate

    ckpt, ds, bank = _eval_inputs(args, run, args.split)
    res = evaluate(ds, ckpt, bank)
    run.emit(accuracy=res.accuracy)
    run.emit(mean_pos_score=res.mean_pos_score, mean_neg_score=res.mean_neg_score, score_gap=res.score_gap)
    for y, acc in enumerate(res.per_class_accuracy):
        run.emit(**{"class": y, "class_accuracy": acc})


def cmd_explain(args, run):
    from .interp import build_eval_set
    from .scoring import top_k

    ckpt, ds, bank = _eval_inputs(args, run, args.split)
    es = build_eval_set(ds, ckpt, bank)
    limit = len(ds) if args.limit is None else min(args.limit, len(ds))
    k = min(args.k, bank.n_concepts)
    for i in range(limit):
        top = top_k(es.scores[i], bank, k)
        desc = ";".join(f"{c}:{text}:{score:.6f}" for c, text, score in top)
        run.emit(image=i, label=int(es.labels[i]), pred=int(es.preds[i]), top=desc)


def _parse_edits(items):
    edits = {}
    for item in items or []:
        try:
            idx, val = item.split("=", 1)
            edits[int(idx)] = float(val)
        except ValueError as exc:
            raise UsageError(f"--set expects IDX=VAL, got {item!r}") from exc
    return edits


def cmd_intervene(args, run):
    from .interp import build_eval_set
    from .scoring import intervene, predict

    edits = _parse_edits(args.set)
    ckpt, ds, bank = _eval_inputs(args, run, args.split)
    if not 0 <= args.index < len(ds):
        raise DataError(f"--index {args.index} outside [0, {len(ds)})")
    es = build_eval_set(ds.subset([args.index]), ckpt, bank)
    s = es.scores[0].astype(np.float64)
    head = ckpt.head.astype(np.float64)
    z0, y0 = predict(head, s)
    s1 = intervene(s, edits)
    z1, y1 = predict(head, s1)
    run.config["edits"] = {str(k): v for k, v in edits.items()}
    run.emit(image=args.index, label=int(ds.labels[args.index]), pred_before=int(y0), pred_after=int(y1))
    for c in sorted(edits):
        run.emit(concept=c, score_before=float(s[c]), score_after=float(s1[c]))
    run.emit(logits_after=",".join(repr(float(v)) for v in z1))


def cmd_metrics(args, run):
    from .interp import RelevanceOracle, build_eval_set, cc, cdr

    ckpt, ds, bank = _eval_inputs(args, run, args.split)
    es = build_eval_set(ds, ckpt, bank)
    if args.oracle:
        run.add_input(args.oracle)
        oracle = RelevanceOracle.from_csv(args.oracle)
    else:
        from .judge import JudgeEndpoint, RemoteJudge

        endpoint = JudgeEndpoint.from_json(args.judge)
        run.add_input(args.judge)
        if ds.descriptions is None:
            raise DataError("remote judging needs per-image descriptions in the dataset meta.json")
        subjects = {("image", str(i)): d for i, d in enumerate(ds.descriptions)}
        subjects.update({("class", str(y)): name for y, name in enumerate(bank.class_names)})
        oracle = RelevanceOracle(judge=RemoteJudge(endpoint), subject_text=subjects,
                                 concept_text=dict(enumerate(bank.concepts)))
    run.emit(cdr=cdr(es, bank, oracle), cc=cc(es, bank, oracle), images=len(es))


def cmd_assoc(args, run):
    from .interp import assoc_map, block_contrast, write_matrix_csv
    from .tensorio import write_bundle

    ckpt, ds, bank = _eval_inputs(args, run, args.split)
    matrix, empty = assoc_map(ds, ckpt, bank)
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(matrix, os.path.join(args.out, "assoc.csv"), range(bank.n_classes), range(bank.n_concepts))
    write_bundle({"assoc": matrix}, os.path.join(args.out, "assoc_bundle"))
    with open(os.path.join(args.out, "assoc_meta.json"), "w") as fh:
        json.dump({"empty_classes": empty, "shape": list(matrix.shape)}, fh)
        fh.write("\n")
    if not args.no_plot:
        from .plotting import heatmap

        heatmap(matrix, os.path.join(args.out, "assoc.png"), title="class-concept association")
    run.outputs.append(args.out)
    run.emit(classes=bank.n_classes, concepts=bank.n_concepts, empty_classes=len(empty))
    if len(empty) < bank.n_classes:
        run.emit(block_contrast=block_contrast(matrix, bank))


def cmd_export_head(args, run):
    from .interp import export_head, head_overlap

    ckpt = _load_ckpt(args)
    run.add_input(args.ckpt)
    run.config = {"ckpt": args.ckpt}
    export_head(ckpt, args.out)
    if not args.no_plot:
        from .plotting import heatmap

        heatmap(ckpt.head.W, os.path.join(args.out, "head_W.png"), title="classifier weights", center=True)
    run.outputs.append(args.out)
    run.emit(classes=ckpt.head.W.shape[0], concepts=ckpt.head.W.shape[1])
    try:
        _, bank = resolve_bank(None, ckpt=args.ckpt)
        run.emit(own_concept_overlap=head_overlap(ckpt.head.W, bank))
    except DataError:
        pass


def cmd_gradcheck(args, run):
    from . import gradcheck

    run.config = {"seed": args.seed, "dims": args.dims, "count": args.count, "lam": args.lam,
                  "tau": args.tau, "loss_mode": args.loss_mode, "step": gradcheck.STEP}
    errs = gradcheck.run(args.seed, args.count, args.dims, args.lam, args.tau, args.loss_mode)
    worst = max(errs)
    run.emit(instances=len(errs), max_rel_error=worst, tolerance=gradcheck.TOLERANCE,
             passed=int(worst < gradcheck.TOLERANCE))
    if not worst < gradcheck.TOLERANCE:
        raise NumericError(f"gradient check failed: max relative error {worst:.3e}")


_SWEEP_KEYS = {"lambda": "lam", "tau": "tau", "d_k": "d_k", "group_ratio": "group_ratio"}


def cmd_sweep(args, run):
    from .interp import RelevanceOracle, build_eval_set, cc, cdr, write_matrix_csv
    from .tensorio import load_dataset
    from .trainer import evaluate, train

    field = _SWEEP_KEYS[args.param]
    cast = int if field == "d_k" else float
    values = [cast(v) for v in args.values.split(",")]
    train_dir = resolve_split(args.data, "train")
    val_dir = resolve_split(args.data, "val")
    test_dir = resolve_split(args.data, "test")
    _, bank = resolve_bank(args.bank, data=args.data)
    for p in (train_dir, val_dir, test_dir):
        run.add_input(p)
    base = _train_config(args, run)
    oracle = None
    table = args.oracle or os.path.join(args.data, "relevance_test.csv")
    if os.path.isfile(table):
        run.add_input(table)
        oracle = RelevanceOracle.from_csv(table)
    tr, va, te = load_dataset(train_dir), load_dataset(val_dir), load_dataset(test_dir)
    rows = []
    for v in values:
        cfg = type(base).from_dict({**asdict(base), field: v})
        ckpt = train(tr, va, bank, cfg)
        acc = evaluate(te, ckpt, bank).accuracy
        row = [acc]
        if oracle is not None:
            es = build_eval_set(te, ckpt, bank)
            row += [cdr(es, bank, oracle), cc(es, bank, oracle)]
        rows.append(row)
        run.emit(**{args.param: v, "accuracy": acc}, **(
            {"cdr": row[1], "cc": row[2]} if oracle is not None else {}))
    run.config = {"base": asdict(base), "param": args.param, "values": values}
    cols = ["accuracy"] + (["cdr", "cc"] if oracle is not None else [])
    os.makedirs(args.out, exist_ok=True)
    write_matrix_csv(np.array(rows), os.path.join(args.out, "sweep.csv"), values, cols, corner=args.param)
    if not args.no_plot:
        from .plotting import sweep_plot

        series = {c: [r[i] for r in rows] for i, c in enumerate(cols)}
        sweep_plot(values, series, os.path.join(args.out, "sweep.png"), xlabel=args.param)
    run.outputs.append(args.out)


# -- parser ----------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="coatcbm", description="Concept-wise attention concept bottleneck models")
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    common.add_argument("--manifest", default=None, help="where to write the run manifest")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-synth", cmd_gen_synth, "generate a planted-concept synthetic dataset")
    sp.add_argument("--config")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True)

    def train_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--lambda", dest="lam", type=float)
        sp.add_argument("--tau", type=float)
        sp.add_argument("--loss-mode", choices=("cco", "bce", "none"))
        sp.add_argument("--group-ratio", type=float)
        sp.add_argument("--d-k", type=int)
        sp.add_argument("--eval-every", type=int)
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--precision", choices=("f32", "f64"))

    sp = add("train", cmd_train, "train a model and write the best-validation checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--val")
    sp.add_argument("--bank")
    sp.add_argument("--out", required=True)
    train_flags(sp)

    def eval_flags(sp, split="test"):
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--bank")
        sp.add_argument("--split", default=split)

    sp = add("eval", cmd_eval, "accuracy and score statistics")
    eval_flags(sp)
    sp = add("explain", cmd_explain, "top-k concepts per image")
    eval_flags(sp)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--limit", type=int)
    sp = add("intervene", cmd_intervene, "edit concept scores and re-predict")
    eval_flags(sp)
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--set", action="append", metavar="IDX=VAL")
    sp = add("metrics", cmd_metrics, "CDR and CC")
    eval_flags(sp)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--oracle", help="relevance table CSV")
    g.add_argument("--judge", help="judge endpoint JSON")
    sp = add("assoc", cmd_assoc, "class-concept association map")
    eval_flags(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-plot", action="store_true")
    sp = add("export-head", cmd_export_head, "export classifier weights")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-plot", action="store_true")
    sp = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--dims", choices=("small", "tiny"), default="small")
    sp.add_argument("--count", type=int, default=50)
    sp.add_argument("--lambda", dest="lam", type=float, default=0.5)
    sp.add_argument("--tau", type=float, default=0.07)
    sp.add_argument("--loss-mode", choices=("cco", "bce", "none"), default="cco")
    sp = add("sweep", cmd_sweep, "hyperparameter sensitivity sweep")
    sp.add_argument("--data", required=True)
    sp.add_argument("--bank")
    sp.add_argument("--oracle")
    sp.add_argument("--out", required=True)
    sp.add_argument("--param", choices=sorted(_SWEEP_KEYS), required=True)
    sp.add_argument("--values", required=True, help="comma separated")
    sp.add_argument("--no-plot", action="store_true")
    train_flags(sp)
    return p


def _write_manifest(run, args, started):
    out_hashes = {p: hash_path(p) for p in run.outputs if os.path.exists(p)}
    stdout_text = "\n".join(run.lines) + "\n"
    manifest = {
        "command": run.command,
        "config": run.config,
        "inputs": run.inputs,
        "outputs": out_hashes,
        "stdout_sha256": hashlib.sha256(stdout_text.encode()).hexdigest(),
        "wall_time_s": time.perf_counter() - started,
        "version": __version__,
    }
    target = args.manifest
    if target is None and getattr(args, "out", None) and os.path.isdir(args.out):
        target = os.path.join(args.out, "run_manifest.json")
    if target is None:
        print("run_manifest " + json.dumps(manifest, sort_keys=True), file=sys.stderr)
    else:
        with open(target, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    run = Run(args.command)
    started = time.perf_counter()
    code = EXIT_OK
    try:
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=max(1, args.threads)):
                args.func(args, run)
        else:
            args.func(args, run)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (CoatError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for line in run.lines:
        print(line)
    _write_manifest(run, args, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
