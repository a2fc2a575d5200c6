"""``pnnet`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Eval commands print
their summary scalar alone on stdout; everything else goes to stderr.
"""

import argparse
import contextlib
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import data, descfile, evaluation, model, trainer
from .errors import ConfigError, FormatError, PNNetError

log = logging.getLogger("pnnet")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _version_line(what):
    return f"pnnet {__version__} {what}"


# -- data sources ------------------------------------------------------------------

TOY_KEYS = {
    "toy_num_points": ("num_points", int),
    "toy_patches_per_point": ("patches_per_point", int),
    "toy_translation": ("translation", float),
    "toy_rotation": ("rotation", float),
    "toy_brightness": ("brightness", float),
    "toy_smoothness": ("smoothness", float),
    "toy_seed": ("seed", int),
}


def _toy_spec(values, prefix="toy_", **overrides):
    kwargs = {}
    for key, (name, kind) in TOY_KEYS.items():
        key = prefix + key[len("toy_"):]
        if key in values:
            try:
                kwargs[name] = kind(values[key])
            except ValueError:
                raise ConfigError(f"bad value for {key}: {values[key]!r}") from None
    kwargs.update(overrides)
    return data.ToyCorpusSpec(**kwargs)


def _resolve(base, value):
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_patches(source):
    """Raw ``(N, 64, 64)`` pixels or already-normalized ``(N, 1, 32, 32)`` input.

    ``source`` is a Photo-Tour directory or a ``.npy`` array.
    """
    source = Path(source)
    if source.is_dir():
        return data.load_phototour(source).normalized()
    if source.suffix == ".npy":
        arr = np.load(source)
        if arr.ndim == 4 and arr.shape[1:] == (1, model.PATCH_SIZE, model.PATCH_SIZE):
            return arr.astype(np.float32)
        if arr.shape[-2:] == (data.STORED_SIZE, data.STORED_SIZE) and arr.ndim in (3, 4):
            return data.normalize_patches(arr)
        raise FormatError(f"{source}: unsupported patch array shape {arr.shape}")
    raise UsageError(f"{source}: expected a Photo-Tour directory or a .npy file")


def _training_inputs(values, base):
    if "train_data" in values:
        corpus = data.load_phototour(_resolve(base, values["train_data"]))
    else:
        corpus = data.make_toy_corpus(_toy_spec(values))
    val = None
    if "val_data" in values:
        val_corpus = data.load_phototour(_resolve(base, values["val_data"]))
        if "val_pairs" not in values:
            raise ConfigError("val_data needs val_pairs")
        pairs = data.load_pairs_file(_resolve(base, values["val_pairs"]), len(val_corpus))
        val = trainer.ValidationSet(val_corpus, pairs)
    elif "val_toy_seed" in values:
        val_corpus = data.make_toy_corpus(_toy_spec(values, prefix="val_toy_"))
        count = int(values.get("val_pairs_count", 5000))
        fraction = float(values.get("val_positive_fraction", 0.5))
        seed = np.random.SeedSequence([int(values["val_toy_seed"]), 0])
        pairs = data.sample_pairs(val_corpus, count, seed, fraction)
        val = trainer.ValidationSet(val_corpus, pairs)
    return corpus, val


# -- subcommands ------------------------------------------------------------------

def cmd_train(args):
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    values = trainer.read_config(path)
    base = path.parent
    if args.single_thread:
        values["single_thread"] = "true"
    if "checkpoint_dir" in values:
        values["checkpoint_dir"] = str(_resolve(base, values["checkpoint_dir"]))
    if args.checkpoint_dir:
        values["checkpoint_dir"] = args.checkpoint_dir
    cfg = trainer.TrainConfig.from_dict(values)
    if cfg.checkpoint_dir is None:
        raise ConfigError("checkpoint_dir must be set")
    corpus, val = _training_inputs(values, base)
    _, _, logs = trainer.run_training(cfg, corpus, val, resume=args.resume)
    if logs:
        last = logs[-1]
        log.info("finished epoch %d, loss %.6f", last.epoch, last.mean_loss)
    return EXIT_OK


def cmd_extract(args):
    ckpt_path = Path(args.checkpoint)
    ckpt = model.load_checkpoint(ckpt_path)
    patches = load_patches(args.patches)
    limit = threadpool_limits(1) if args.single_thread else contextlib.nullcontext()
    with limit:
        desc = model.describe_batched(ckpt.params, patches, args.batch_size)
    descfile.write(args.out, desc, descfile.file_hash(ckpt_path))
    if args.dump:
        with open(args.dump, "w") as fh:
            descfile.dump_text(descfile.read(args.out), fh)
    log.info("wrote %d descriptors of dimension %d to %s", len(desc), ckpt.params.descriptor_dim,
             args.out)
    return EXIT_OK


def _is_descriptor_file(path):
    with open(path, "rb") as fh:
        return fh.read(len(descfile.MAGIC)) == descfile.MAGIC


def cmd_eval_roc(args):
    source = Path(args.descriptors)
    if _is_descriptor_file(source):
        desc = descfile.read(source).descriptors
    else:
        if not args.data:
            raise UsageError("a checkpoint input needs --data")
        ckpt = model.load_checkpoint(source)
        desc = model.describe_batched(ckpt.params, load_patches(args.data), args.batch_size)
    pairs = data.load_pairs_file(args.pairs, num_patches=len(desc))
    distances = evaluation.pair_distances(desc, pairs)
    curve = evaluation.roc_curve(distances, pairs.labels)
    if args.out:
        evaluation.write_curve_csv(curve, args.out, _version_line("roc"))
    print(repr(curve.summary))
    return EXIT_OK


def cmd_eval_match(args):
    left = descfile.read(args.left).descriptors
    right = descfile.read(args.right).descriptors
    gt = evaluation.load_overlap_gt(args.gt)
    index, dist = evaluation.nn_match(left, right)
    curve = evaluation.pr_curve(index, dist, gt, num_right=len(right))
    if args.out:
        evaluation.write_curve_csv(curve, args.out, _version_line(
                f"precision-recall; recall denominator: {evaluation.RECALL_DENOMINATOR}"))
    print(repr(curve.summary))
    return EXIT_OK


def bench(params, count, batch_sizes, seed=0, warmup=1):
    """Mean microseconds per descriptor and descriptors per second for each batch size."""
    rng = np.random.default_rng(seed)
    patches = rng.standard_normal((count, 1, model.PATCH_SIZE, model.PATCH_SIZE)).astype(np.float32)
    rows = []
    for bs in batch_sizes:
        for _ in range(warmup):
            model.describe(params, patches[:bs])
        start = time.perf_counter()
        for lo in range(0, count, bs):
            model.describe(params, patches[lo:lo + bs])
        elapsed = time.perf_counter() - start
        mean_us = elapsed / count * 1e6
        rows.append((bs, mean_us, count / elapsed if elapsed > 0 else float("inf")))
    return rows


def cmd_bench(args):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if any(b < 1 for b in args.batch_sizes):
        raise UsageError("batch sizes must be >= 1")
    if args.checkpoint:
        params = model.load_checkpoint(args.checkpoint).params
    else:
        params = model.init_params(args.seed, args.descriptor_dim)
    limit = threadpool_limits(1) if args.single_thread else contextlib.nullcontext()
    with limit:
        rows = bench(params, args.count, args.batch_sizes, args.seed)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        out.write(f"# {_version_line('bench')} count={args.count} dim={params.descriptor_dim}\n")
        writer = csv.writer(out)
        writer.writerow(["batch_size", "mean_us", "throughput"])
        for bs, us, tput in rows:
            writer.writerow([bs, f"{us:.3f}", f"{tput:.1f}"])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def cmd_make_toy(args):
    spec = data.ToyCorpusSpec(args.num_points, args.patches_per_point, args.translation,
                              args.rotation, args.brightness, args.smoothness, args.seed)
    corpus = data.make_toy_corpus(spec)
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PNNetError(f"cannot create {out}: {exc}") from exc
    data.write_phototour(corpus, out)
    if args.pairs:
        pairs = data.sample_pairs(corpus, args.pairs, np.random.SeedSequence([args.seed, 1]),
                                  args.positive_fraction)
        data.write_pairs_file(pairs, corpus, out / args.pairs_file)
    log.info("wrote %d patches of %d points to %s", len(corpus), corpus.num_points(), out)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _batch_sizes(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad batch size list {text!r}") from None


def build_parser():
    p = _Parser(prog="pnnet", description="Triplet patch descriptors: train, extract, evaluate.")
    p.add_argument("--version", action="version", version=f"pnnet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("config")
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint")
    t.add_argument("--single-thread", action="store_true", help="bit-reproducible mode")
    t.add_argument("--checkpoint-dir", help="override checkpoint_dir from the config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", help="compute descriptors for a patch set")
    e.add_argument("checkpoint")
    e.add_argument("patches", help="Photo-Tour directory or .npy array")
    e.add_argument("out")
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--dump", metavar="TXT", help="also write a text rendering")
    e.add_argument("--single-thread", action="store_true")
    e.set_defaults(func=cmd_extract)

    r = sub.add_parser("eval-roc", help="FPR at 95%% recall over a pair list")
    r.add_argument("descriptors", help="descriptor file, or a checkpoint together with --data")
    r.add_argument("pairs")
    r.add_argument("--data", help="patch source when the first argument is a checkpoint")
    r.add_argument("--out", help="ROC curve CSV")
    r.add_argument("--batch-size", type=int, default=256)
    r.set_defaults(func=cmd_eval_roc)

    m = sub.add_parser("eval-match", help="nearest-neighbour matching average precision")
    m.add_argument("left")
    m.add_argument("right")
    m.add_argument("gt", help="rows: left_index right_index overlap_error")
    m.add_argument("--out", help="precision-recall CSV")
    m.set_defaults(func=cmd_eval_match)

    b = sub.add_parser("bench", help="descriptor extraction throughput")
    b.add_argument("checkpoint", nargs="?", help="defaults to a randomly initialized network")
    b.add_argument("--count", type=int, default=1024)
    b.add_argument("--batch-sizes", type=_batch_sizes, default=[1, 16, 128])
    b.add_argument("--descriptor-dim", type=int, default=128)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path (default stdout)")
    b.add_argument("--single-thread", action="store_true")
    b.set_defaults(func=cmd_bench)

    k = sub.add_parser("make-toy", help="write a synthetic corpus in Photo-Tour layout")
    k.add_argument("out_dir")
    defaults = data.ToyCorpusSpec()
    k.add_argument("--num-points", type=int, default=defaults.num_points)
    k.add_argument("--patches-per-point", type=int, default=defaults.patches_per_point)
    k.add_argument("--translation", type=float, default=defaults.translation)
    k.add_argument("--rotation", type=float, default=defaults.rotation)
    k.add_argument("--brightness", type=float, default=defaults.brightness)
    k.add_argument("--smoothness", type=float, default=defaults.smoothness)
    k.add_argument("--seed", type=int, default=defaults.seed)
    k.add_argument("--pairs", type=int, default=0, help="also write this many labeled pairs")
    k.add_argument("--pairs-file", default="pairs.txt")
    k.add_argument("--positive-fraction", type=float, default=0.5)
    k.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pnnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PNNetError, OSError, ValueError) as exc:
        print(f"pnnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
