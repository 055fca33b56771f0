"""Command-line interface: ``mlakit <command> [options]``.

Exit codes: 0 success, 1 verification or metric failure, 2 usage error,
3 file-format error, 4 numerical error.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .conversion import ConversionSpec, convert_model
from .errors import ArgumentError, CheckpointFormatError, ConfigurationError, MlaError, NumericalError
from .memory import format_percent, mla_spec, reduction_ratio, sweep, to_csv, whisper_small_spec
from .model import BOS, ModelSpec, Seq2SeqModel
from .training import (
    DSO_FREEZE,
    TRACE_COLUMNS,
    Batch,
    SyntheticTask,
    TrainConfig,
    evaluate,
    finite_diff_check,
    train_on,
)
from .validation import check_tokens

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERICAL = 0, 1, 2, 3, 4
STRATEGY_FLAGS = {"full-compression": "full_compression", "uniform": "uniform", "2norm": "two_norm"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return values


class _Output:
    """Human lines to stdout (unless quiet) and records to ``--out``."""

    def __init__(self, args):
        self.quiet = args.quiet
        self.path = args.out

    def say(self, text=""):
        if not self.quiet:
            print(text)

    def write_jsonl(self, rows):
        if self.path:
            with open(self.path, "w") as fh:
                for row in rows:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")

    def write_text(self, text):
        if self.path:
            Path(self.path).write_text(text)


def _existing(path, flag):
    if not Path(path).is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return path


def _load(path, flag):
    return Checkpoint.load(_existing(path, flag))


def _read_pairs(path, vocab_size):
    pairs = []
    with open(_existing(path, "data file")) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                pairs.append((check_tokens(row["source"], vocab_size, "source"),
                              check_tokens(row["target"], vocab_size, "target")))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CheckpointFormatError(f"{path}:{lineno}", f"bad sample line ({exc})")
    if not pairs:
        raise CheckpointFormatError(path, "no samples")
    return pairs


def _task(args, vocab_size):
    return SyntheticTask(kind=args.task, vocab_size=vocab_size, sample_count=args.samples,
                         seed=args.seed, heldout_count=args.heldout)


# -- commands -----------------------------------------------------------


def cmd_init(args, out):
    spec = ModelSpec(d_model=args.d_model, n_heads=args.n_heads,
                     n_encoder_layers=args.encoder_layers, n_decoder_layers=args.decoder_layers,
                     d_ff=args.d_ff, vocab_size=args.vocab_size)
    model = Seq2SeqModel.initialize(spec, args.seed)
    Checkpoint.from_model(model, args.dtype).save(args.output)
    n = sum(a.size for a in model.params.values())
    out.say(f"seed={args.seed} wrote {args.output} ({n} parameters)")
    out.write_jsonl([{"seed": args.seed, "output": args.output, "parameters": int(n)}])
    return EXIT_OK


def cmd_dataset(args, out):
    task = _task(args, args.vocab_size)
    rows = [{"source": s.tolist(), "target": t.tolist()} for s, t in task.samples(args.split)]
    with open(args.output, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    out.say(f"seed={args.seed} wrote {len(rows)} {args.task} samples to {args.output}")
    return EXIT_OK


def cmd_convert(args, out):
    strategy = STRATEGY_FLAGS[args.strategy]
    if strategy == "two_norm" and not args.calib:
        raise UsageError("--strategy 2norm: calibration required (pass --calib PATH)")
    if strategy != "two_norm" and args.calib:
        raise UsageError("--calib is only used with --strategy 2norm")
    r = args.preserve_per_head
    if r is None:
        r = 0 if strategy == "full_compression" else 1
    elif strategy == "full_compression" and r:
        raise UsageError("--strategy full-compression preserves nothing; drop --preserve-per-head")
    ckpt = _load(args.input, "--input")
    model_spec = ModelSpec.from_dict(ckpt.model_spec)
    calibration = tuple(_read_pairs(args.calib, model_spec.vocab_size)) if args.calib else None
    spec = ConversionSpec(strategy, args.latent_dim, r, args.placement, calibration)
    n_preserved = 2 * r * model_spec.n_heads
    ratios = {}
    for basis in ("key_only", "key_value"):
        try:
            ratios[basis] = format_percent(
                reduction_ratio(basis, model_spec.d_model, args.latent_dim, n_preserved))
        except ArgumentError:
            ratios[basis] = None
    if ratios["key_value"] is None:
        raise UsageError(f"--latent-dim {args.latent_dim} with {n_preserved} preserved "
                         "dimensions caches more than full keys and values")
    result = convert_model(ckpt, spec, float_dtype=args.dtype)
    result.save(args.output)

    out.say(f"seed={args.seed} converted {args.input} -> {args.output} "
            f"({args.strategy}, placement={args.placement}, d_latent={args.latent_dim}, "
            f"preserved/head={2 * r})")
    for basis, text in ratios.items():
        out.say(f"kv cache reduction ({basis} basis): {text or 'n/a (not a compression)'}")
    rows = []
    for site, info in result.conversion["sites"].items():
        out.say(f"  {site}: relative svd reconstruction error {info['relative_error']:.3e}")
        rows.append({"site": site, "relative_error": info["relative_error"]})
    out.write_jsonl([{"seed": args.seed, "reduction": ratios, **result.conversion,
                      "sites": rows}])
    return EXIT_OK


def _trial_inputs(seed, trial, vocab_size, max_len):
    rng = np.random.default_rng([seed, trial])
    src = rng.integers(BOS + 2, vocab_size, int(rng.integers(1, max_len + 1)))
    tgt = np.concatenate([[BOS], rng.integers(BOS + 2, vocab_size, int(rng.integers(0, max_len)))])
    return src.astype(np.int64), tgt.astype(np.int64)


def _incremental_deviation(model, src, tgt, full):
    enc = model.encode(src)
    worst = 0.0
    for absorbed in (False, True):
        state = model.new_decoder_state()
        for pos, token in enumerate(tgt):
            step = model.decode_step(int(token), pos, enc, state, absorbed=absorbed)
            worst = max(worst, float(np.max(np.abs(step - full[pos]))))
    return worst


def cmd_verify(args, out):
    original = _load(args.original, "--original").to_model()
    converted = _load(args.converted, "--converted").to_model()
    a, b = original.spec, converted.spec
    if (a.d_model, a.vocab_size, a.n_encoder_layers, a.n_decoder_layers) != (
            b.d_model, b.vocab_size, b.n_encoder_layers, b.n_decoder_layers):
        raise UsageError("--original and --converted have different model shapes")
    rows = []
    for trial in range(args.trials):
        src, tgt = _trial_inputs(args.seed, trial, a.vocab_size, args.max_len)
        ref = original.forward(src, tgt)
        got = converted.forward(src, tgt)
        if not (np.all(np.isfinite(ref)) and np.all(np.isfinite(got))):
            raise NumericalError(f"non-finite logits for trial {trial}")
        logit_dev = float(np.max(np.abs(ref - got)))
        inc_dev = max(_incremental_deviation(original, src, tgt, ref),
                      _incremental_deviation(converted, src, tgt, got))
        rows.append({"seed": args.seed, "trial": trial, "logit_deviation": logit_dev,
                     "incremental_deviation": inc_dev})
    out.write_jsonl(rows)
    worst_logit = max(rows, key=lambda r: r["logit_deviation"])
    worst_inc = max(rows, key=lambda r: r["incremental_deviation"])
    out.say(f"seed={args.seed} trials={args.trials} tolerance={args.tolerance:g}")
    out.say(f"max logit deviation:       {worst_logit['logit_deviation']:.3e} "
            f"(trial {worst_logit['trial']})")
    out.say(f"max incremental deviation: {worst_inc['incremental_deviation']:.3e} "
            f"(trial {worst_inc['trial']})")
    failed = [r for r in rows
              if r["logit_deviation"] > args.tolerance
              or r["incremental_deviation"] > args.tolerance]
    if failed:
        worst = max(failed, key=lambda r: max(r["logit_deviation"], r["incremental_deviation"]))
        print(f"FAIL: tolerance exceeded; worst input seed=[{args.seed}, {worst['trial']}]",
              file=sys.stderr)
        return EXIT_FAILED
    out.say("OK")
    return EXIT_OK


def _freeze_groups(args, model):
    if args.freeze == "auto":
        converted = {s for s in model.spec.site_names() if model.spec.site_config(s).is_mla}
        dso = converted and all(model.spec.site_kind(s) == "decoder_self" for s in converted)
        return DSO_FREEZE if dso else frozenset()
    return DSO_FREEZE if args.freeze == "dso" else frozenset()


def cmd_finetune(args, out):
    model = _load(args.input, "--input").to_model()
    if args.data:
        train, heldout = _read_pairs(args.data, model.spec.vocab_size), None
    else:
        task = _task(args, model.spec.vocab_size)
        train, heldout = task.samples("train"), task.samples("heldout")
    cfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr, batch_size=args.batch_size,
                      optimizer=args.optimizer, seed=args.seed)
    freeze = _freeze_groups(args, model)
    out.say(f"seed={args.seed} epochs={args.epochs} lr={args.lr:g} "
            f"frozen={','.join(sorted(freeze)) or 'none'}")

    def log(row):
        out.say(f"epoch {row['epoch']:3d} {row['split']:8s} loss {row['loss']:.4f} "
                f"acc {row['token_accuracy']:.4f}")

    trained, trace = train_on(model, train, cfg, freeze, heldout, log)
    record = dict(trained.conversion or {})
    trained.conversion = record or None
    Checkpoint.from_model(trained, args.dtype).save(args.output)
    if out.path:
        out.write_text(
            ",".join(TRACE_COLUMNS) + "\n"
            + "".join(",".join(str(r[c]) for c in TRACE_COLUMNS) + "\n" for r in trace)
        )
    out.say(f"wrote {args.output}")
    return EXIT_OK


def cmd_eval(args, out):
    model = _load(args.input, "--input").to_model()
    if args.data:
        samples = _read_pairs(args.data, model.spec.vocab_size)
    else:
        samples = _task(args, model.spec.vocab_size).samples("heldout")
    loss, acc = evaluate(model, samples)
    out.say(f"seed={args.seed} samples={len(samples)} loss {loss:.4f} token_accuracy {acc:.4f}")
    out.write_jsonl([{"seed": args.seed, "samples": len(samples), "loss": loss,
                      "token_accuracy": acc}])
    if args.min_accuracy is not None and acc < args.min_accuracy:
        print(f"FAIL: token accuracy {acc:.4f} below {args.min_accuracy}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_mem_sweep(args, out):
    if args.input:
        base = ModelSpec.from_dict(_load(args.input, "--input").model_spec)
        if any(base.site_config(s).is_mla for s in base.site_names()):
            raise UsageError("--input must be an MHA checkpoint (the MLA side is derived)")
    else:
        base = whisper_small_spec()
    mla = mla_spec(base, args.placement, args.latent_dim, args.preserve_per_head)
    budget = None if args.budget_gib is None else int(args.budget_gib * 2**30)
    rows = sweep({"mha": base, "mla": mla}, args.batches, args.lengths, args.source_len,
                 args.bytes_per_entry, budget)
    text = to_csv(rows)
    if out.path:
        out.write_text(text)
    elif not out.quiet:
        sys.stdout.write(text)
    flagged = [r for r in rows if r["oom"]]
    if out.path:
        out.say(f"{len(rows)} rows written to {out.path}; {len(flagged)} over budget")
    return EXIT_OK


def _gradcheck_model(args):
    if args.input:
        return _load(args.input, "--input").to_model()
    spec = ModelSpec(d_model=16, n_heads=2, n_encoder_layers=1, n_decoder_layers=1, d_ff=32,
                     vocab_size=16)
    model = Seq2SeqModel.initialize(spec, args.seed)
    if args.variant == "mha":
        return model
    strategy = "full_compression" if args.variant == "mla_full" else "uniform"
    r = 0 if args.variant == "mla_full" else 1
    return convert_model(model, ConversionSpec(strategy, 4, r, "full")).to_model()


def cmd_gradcheck(args, out):
    model = _gradcheck_model(args)
    task = SyntheticTask(vocab_size=model.spec.vocab_size, seq_len_range=(2, 6),
                         sample_count=4, seed=args.seed)
    batch = Batch.from_pairs(task.samples("train"))
    report = finite_diff_check(model, batch, args.coordinates, args.seed,
                               threshold=args.threshold)
    out.write_jsonl([{"seed": args.seed, **row} for row in report.rows])
    out.say(f"seed={args.seed} coordinates={args.coordinates} "
            f"max relative error {report.max_relative_error:.3e} (threshold {args.threshold:g})")
    for name, err in sorted(report.per_tensor().items()):
        out.say(f"  {name}: {err:.3e}")
    if not report.passed:
        print(f"FAIL: {len(report.flagged)} coordinates above threshold", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def cmd_inspect(args, out):
    ckpt = _load(args.input, "--input")
    info = {
        "model_spec": ckpt.model_spec,
        "conversion": ckpt.conversion,
        "site_variants": ckpt.site_variants(),
        "selections": {
            name[: -len(".selection")]: arr.tolist()
            for name, arr in ckpt.tensors.items() if name.endswith(".selection")
        },
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": ckpt._dtype_of(n, a)}
                    for n, a in ckpt.tensors.items()],
    }
    out.write_jsonl([info])
    out.say(f"{args.input}: d_model={ckpt.model_spec['d_model']} "
            f"heads={ckpt.model_spec['n_heads']} tensors={len(ckpt.tensors)}")
    if ckpt.conversion:
        spec = {k: v for k, v in ckpt.conversion.items() if k != "sites"}
        out.say(f"conversion: {json.dumps(spec, sort_keys=True)}")
    for site, variant in info["site_variants"].items():
        line = f"  {site}: {variant}"
        if site in info["selections"]:
            line += f" preserved subspaces {info['selections'][site]}"
        out.say(line)
    return EXIT_OK


# -- parser ---------------------------------------------------------------


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--quiet", action="store_true", help="suppress human-readable output")
    common.add_argument("--out", help="write machine-readable records here")

    parser = _Parser(prog="mlakit", description="MHA to MLA conversion toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        p.set_defaults(func=func)
        return p

    def task_flags(p):
        p.add_argument("--task", choices=("copy", "reverse"), default="copy")
        p.add_argument("--samples", type=_positive_int, default=2000)
        p.add_argument("--heldout", type=_positive_int, default=200)

    p = add("init", cmd_init, "write a freshly initialised MHA checkpoint")
    p.add_argument("--output", required=True)
    p.add_argument("--d-model", type=_positive_int, default=64)
    p.add_argument("--n-heads", type=_positive_int, default=4)
    p.add_argument("--encoder-layers", type=_positive_int, default=2)
    p.add_argument("--decoder-layers", type=_positive_int, default=2)
    p.add_argument("--d-ff", type=_positive_int, default=256)
    p.add_argument("--vocab-size", type=_positive_int, default=64)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")

    p = add("dataset", cmd_dataset, "write synthetic samples as JSON lines")
    p.add_argument("--output", required=True)
    p.add_argument("--split", choices=("train", "heldout"), default="train")
    p.add_argument("--vocab-size", type=_positive_int, default=64)
    task_flags(p)

    p = add("convert", cmd_convert, "convert an MHA checkpoint to MLA")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--placement", choices=("full", "dso"), default="dso")
    p.add_argument("--strategy", choices=tuple(STRATEGY_FLAGS), default="uniform")
    p.add_argument("--latent-dim", type=_positive_int, default=8)
    p.add_argument("--preserve-per-head", type=int, default=None,
                   help="frequency subspaces kept per head (default 1, or 0 for "
                        "full-compression)")
    p.add_argument("--calib", help="JSON-lines calibration samples (2norm only)")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f64",
                   help="storage type of the new factor tensors (default f64)")

    p = add("verify", cmd_verify, "compare logits of two checkpoints")
    p.add_argument("--original", required=True)
    p.add_argument("--converted", required=True)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.add_argument("--trials", type=_positive_int, default=10)
    p.add_argument("--max-len", type=_positive_int, default=16)

    p = add("finetune", cmd_finetune, "fine-tune a checkpoint on a synthetic task")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--data", help="JSON-lines training samples instead of --task")
    task_flags(p)
    p.add_argument("--epochs", type=_positive_int, default=3)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=_positive_int, default=16)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--freeze", choices=("auto", "dso", "none"), default="auto",
                   help="auto freezes encoder and cross-attention for DSO checkpoints")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")

    p = add("eval", cmd_eval, "token accuracy on held-out samples")
    p.add_argument("--input", required=True)
    p.add_argument("--data", help="JSON-lines samples instead of --task")
    task_flags(p)
    p.add_argument("--min-accuracy", type=float, default=None)

    p = add("mem-sweep", cmd_mem_sweep, "analytic KV-cache memory sweep")
    p.add_argument("--input", help="MHA checkpoint (default: Whisper-small geometry)")
    p.add_argument("--batches", type=_int_list, default=[1, 4, 16, 64])
    p.add_argument("--lengths", type=_int_list, default=[256, 512, 1024, 2048, 4096])
    p.add_argument("--source-len", type=_positive_int, default=1500)
    p.add_argument("--bytes-per-entry", type=_positive_int, default=2)
    p.add_argument("--budget-gib", type=float, default=None)
    p.add_argument("--placement", choices=("full", "dso"), default="dso")
    p.add_argument("--latent-dim", type=_positive_int, default=96)
    p.add_argument("--preserve-per-head", type=int, default=2)

    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient check")
    p.add_argument("--input", help="checkpoint to check (default: fresh small model)")
    p.add_argument("--variant", choices=("mha", "mla_full", "mla_preserving"), default="mha")
    p.add_argument("--coordinates", type=_positive_int, default=50)
    p.add_argument("--threshold", type=float, default=1e-3)

    p = add("inspect", cmd_inspect, "dump a checkpoint header")
    p.add_argument("--input", required=True)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, _Output(args))
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointFormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, MlaError, ValueError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_FORMAT


if __name__ == "__main__":
    sys.exit(main())
