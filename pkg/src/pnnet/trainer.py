"""Mini-batch SGD over on-the-fly triplets (or pairs for the hinge baseline)."""

import contextlib
import csv
import dataclasses
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import data, evaluation, losses, model
from . import tensor as T
from .errors import ConfigError, NonFiniteError

log = logging.getLogger(__name__)

LOG_NAME = "train_log.csv"
CHECKPOINT_PATTERN = re.compile(r"epoch(\d+)\.pnck$")
PAIRS_PER_TRIPLET = 3


@dataclass
class TrainConfig:
    loss: str = "softpn"
    batch_size: int = 128
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-6
    epochs: int = 1
    triplets_per_epoch: int = 1_200_000
    seed: int = 0
    descriptor_dim: int = 128
    conv1_channels: int = model.CONV1_CHANNELS
    conv2_channels: int = model.CONV2_CHANNELS
    checkpoint_dir: str | None = None
    eval_every: int = 1
    margin: float = losses.DEFAULT_MARGIN
    # "decompose": each triplet contributes its three pairs (same patches as
    # the triplet losses); "independent": separate pair stream.
    pair_source: str = "decompose"
    single_thread: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.loss not in losses.LOSS_NAMES:
            raise ConfigError(f"unknown loss {self.loss!r}; choose from {losses.LOSS_NAMES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.triplets_per_epoch < 1:
            raise ConfigError("triplets_per_epoch must be >= 1")
        if self.descriptor_dim < 1:
            raise ConfigError("descriptor_dim must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.margin <= 0:
            raise ConfigError("margin must be > 0")
        if self.pair_source not in ("decompose", "independent"):
            raise ConfigError("pair_source must be 'decompose' or 'independent'")

    @property
    def channels(self):
        return self.conv1_channels, self.conv2_channels

    @property
    def uses_pairs(self):
        return self.loss in losses.PAIR_LOSSES

    @property
    def examples_per_epoch(self):
        if self.uses_pairs:
            return PAIRS_PER_TRIPLET * self.triplets_per_epoch
        return self.triplets_per_epoch

    @classmethod
    def from_dict(cls, values):
        """Build from string-valued ``key = value`` entries; unknown keys are ignored."""
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in values:
                continue
            raw = values[f.name]
            try:
                kwargs[f.name] = _coerce(f.type, raw)
            except ValueError:
                raise ConfigError(f"bad value for {f.name}: {raw!r}") from None
        return cls(**kwargs)


def _coerce(kind, raw):
    if not isinstance(raw, str):
        return raw
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if kind is int:
        value = float(raw)
        if value != int(value):
            raise ValueError(raw)
        return int(value)
    if kind is float:
        return float(raw)
    if raw.lower() in ("", "none"):
        return None
    return raw


def read_config(path):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
    return values


@dataclass
class OptimizerState:
    velocity: model.NetworkParams

    @classmethod
    def zeros(cls, params):
        return cls(params.zeros_like())


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    seconds: float
    val_fpr95: float | None = None


def sgd_step(params, grads, state, cfg):
    """Classical momentum with weight decay folded into the gradient, in place:

    ``g = grad + wd*p;  v = mu*v + g;  p = p - lr*v``
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in {name}; step aborted")
    for p, g, v in zip(params.tensors(), grads.tensors(), state.velocity.tensors()):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        step = g + cfg.weight_decay * p
        v *= cfg.momentum
        v += step
        p -= cfg.learning_rate * v
    return params, state


# -- batch objectives --------------------------------------------------------------

def triplet_objective(params, x1, x2, xn, loss="softpn"):
    """Per-example triplet losses and the parameter gradient of their mean.

    The three branches share one set of weights, so they are evaluated as a
    single stacked batch; gradients from all three accumulate in one
    backward pass.
    """
    loss_fn, loss_bwd = losses.TRIPLET_LOSSES[loss]
    n = len(x1)
    if len(x2) != n or len(xn) != n:
        raise ValueError("triplet branches differ in batch size")
    out, cache = model.forward(params, np.concatenate([x1, x2, xn]))
    o1, o2, o3 = out[:n], out[n:2 * n], out[2 * n:]
    d_pos = T.l2_distance(o1, o2)
    d_n1 = T.l2_distance(o1, o3)
    d_n2 = T.l2_distance(o2, o3)
    values = loss_fn(d_pos, d_n1, d_n2)
    g_pos, g_n1, g_n2 = loss_bwd(d_pos, d_n1, d_n2)
    scale = 1.0 / n
    a, b = T.l2_distance_backward(o1, o2, g_pos * scale, d_pos)
    c, d = T.l2_distance_backward(o1, o3, g_n1 * scale, d_n1)
    e, f = T.l2_distance_backward(o2, o3, g_n2 * scale, d_n2)
    grad_out = np.concatenate([a + c, b + e, d + f])
    return values, model.backward(params, cache, grad_out)


def pair_objective(params, patches, left, right, labels, margin=losses.DEFAULT_MARGIN):
    """Mean hinge loss over pairs of rows of ``patches``.

    Each distinct patch goes through the network once; pairs sharing a patch
    share its descriptor.
    """
    ids, inverse = np.unique(np.concatenate([left, right]), return_inverse=True)
    out, cache = model.forward(params, patches[ids])
    li, ri = inverse[:len(left)], inverse[len(left):]
    dist = T.l2_distance(out[li], out[ri])
    values = losses.hinge_embedding_loss(dist, labels, margin)
    g = losses.hinge_embedding_backward(dist, labels, margin) / len(values)
    ga, gb = T.l2_distance_backward(out[li], out[ri], g, dist)
    grad_out = np.zeros_like(out)
    np.add.at(grad_out, li, ga)
    np.add.at(grad_out, ri, gb)
    return values, model.backward(params, cache, grad_out)


# -- samplers ----------------------------------------------------------------------

class TripletSampler:
    arity = "triplet"

    def __init__(self, corpus, seed):
        self.corpus = corpus
        self.rng = np.random.default_rng(seed)

    def draw(self, count):
        return data.sample_triplets(self.corpus, count, self.rng)


class PairSampler:
    arity = "pair"

    def __init__(self, corpus, seed, source="decompose", positive_fraction=1 / 3):
        self.corpus = corpus
        self.rng = np.random.default_rng(seed)
        self.source = source
        self.positive_fraction = positive_fraction

    def draw(self, count):
        if self.source == "independent":
            return data.sample_pairs(self.corpus, count, self.rng, self.positive_fraction)
        triplets = data.sample_triplets(self.corpus, -(-count // PAIRS_PER_TRIPLET), self.rng)
        pairs = data.decompose_triplets(triplets)
        return data.PairList(pairs.left[:count], pairs.right[:count], pairs.labels[:count])


def make_sampler(corpus, cfg, epoch):
    seed = data.epoch_seed(cfg.seed, epoch)
    if cfg.uses_pairs:
        return PairSampler(corpus, seed, cfg.pair_source)
    return TripletSampler(corpus, seed)


def train_epoch(params, state, sampler, cfg, epoch=1):
    """One pass over ``cfg.examples_per_epoch`` freshly sampled examples."""
    want = "pair" if cfg.uses_pairs else "triplet"
    if sampler.arity != want:
        raise ConfigError(f"loss {cfg.loss!r} needs a {want} sampler, got {sampler.arity}")
    count = cfg.examples_per_epoch
    if count < 1:
        raise ConfigError("epoch has no examples")
    patches = sampler.corpus.normalized()
    batch = sampler.draw(count)
    if len(batch) != count:
        raise ConfigError(f"sampler produced {len(batch)} of {count} examples")

    start = time.perf_counter()
    total = 0.0
    for lo in range(0, count, cfg.batch_size):
        hi = min(lo + cfg.batch_size, count)
        if cfg.uses_pairs:
            values, grads = pair_objective(params, patches, batch.left[lo:hi],
                                           batch.right[lo:hi], batch.labels[lo:hi], cfg.margin)
        else:
            rows = batch[lo:hi]
            values, grads = triplet_objective(params, patches[rows[:, 0]], patches[rows[:, 1]],
                                              patches[rows[:, 2]], cfg.loss)
        batch_sum = float(np.sum(values))
        if not np.isfinite(batch_sum):
            raise NonFiniteError(f"non-finite loss in epoch {epoch}, examples {lo}:{hi}")
        total += batch_sum
        sgd_step(params, grads, state, cfg)
    return EpochLog(epoch, total / count, time.perf_counter() - start)


# -- validation and the full run ---------------------------------------------------

@dataclass
class ValidationSet:
    corpus: data.PatchCorpus
    pairs: data.PairList


def validation_fpr95(params, val, batch_size=256):
    desc = model.describe_batched(params, val.corpus.normalized(), batch_size)
    return evaluation.fpr_at_95_tpr(evaluation.pair_distances(desc, val.pairs), val.pairs.labels)


def checkpoint_path(directory, epoch):
    return Path(directory) / f"epoch{epoch:04d}.pnck"


def latest_checkpoint(directory):
    found = []
    for p in Path(directory).glob("epoch*.pnck"):
        m = CHECKPOINT_PATTERN.search(p.name)
        if m:
            found.append((int(m.group(1)), p))
    return max(found)[1] if found else None


def _write_log(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write(f"# pnnet {__version__} training log\n")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "seconds", "val_fpr95"])
        for r in rows:
            writer.writerow([r.epoch, repr(r.mean_loss), f"{r.seconds:.3f}",
                             "" if r.val_fpr95 is None else repr(r.val_fpr95)])


def read_log(path):
    rows = []
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    for rec in csv.DictReader(lines):
        rows.append(EpochLog(int(rec["epoch"]), float(rec["mean_loss"]), float(rec["seconds"]),
                             float(rec["val_fpr95"]) if rec["val_fpr95"] else None))
    return rows


def run_training(cfg, corpus, val=None, resume=False, params=None):
    """Train for ``cfg.epochs`` epochs; returns ``(params, state, logs)``.

    With ``checkpoint_dir`` set, writes ``epochNNNN.pnck`` every
    ``eval_every`` epochs (and after the last) plus ``train_log.csv``.
    ``resume`` continues from the newest checkpoint; sampling streams are
    derived from ``(seed, epoch)`` so a resumed run matches an
    uninterrupted one bit for bit.
    """
    directory = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    if directory is not None:
        try:
            directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create checkpoint dir {directory}: {exc}") from exc

    logs = []
    first = 1
    if params is None:
        params = model.init_params(cfg.seed, cfg.descriptor_dim, cfg.channels)
    state = OptimizerState.zeros(params)
    if resume:
        if directory is None:
            raise ConfigError("resume requires checkpoint_dir")
        latest = latest_checkpoint(directory)
        if latest is not None:
            ckpt = model.load_checkpoint(latest, expected_dim=cfg.descriptor_dim)
            if ckpt.seed != cfg.seed or ckpt.params.channels != cfg.channels:
                raise ConfigError(f"{latest} was written by a different configuration")
            if ckpt.velocity is None:
                raise ConfigError(f"{latest} has no optimizer state to resume from")
            params, state = ckpt.params, OptimizerState(ckpt.velocity)
            first = ckpt.epoch + 1
            log_file = directory / LOG_NAME
            if log_file.exists():
                logs = [r for r in read_log(log_file) if r.epoch <= ckpt.epoch]
            log.info("resuming from %s at epoch %d", latest, first)

    limit = threadpool_limits(1) if cfg.single_thread else contextlib.nullcontext()
    with limit:
        for epoch in range(first, cfg.epochs + 1):
            sampler = make_sampler(corpus, cfg, epoch)
            entry = train_epoch(params, state, sampler, cfg, epoch)
            due = epoch % cfg.eval_every == 0 or epoch == cfg.epochs
            if due and val is not None:
                entry.val_fpr95 = validation_fpr95(params, val)
            logs.append(entry)
            log.info("epoch %d loss %.5f (%.1fs)%s", epoch, entry.mean_loss, entry.seconds,
                     "" if entry.val_fpr95 is None else f" val fpr95 {entry.val_fpr95:.4f}")
            if directory is not None:
                if due:
                    model.save_checkpoint(params, state.velocity, checkpoint_path(directory, epoch),
                                          seed=cfg.seed, epoch=epoch)
                _write_log(directory / LOG_NAME, logs)
    return params, state, logs
