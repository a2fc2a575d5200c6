"""Patch corpora, preprocessing and on-the-fly training samplers.

On-disk layout follows the public Photo Tour distribution: 1024x1024
grayscale bitmap sheets (``patches0000.bmp``, ...) each holding a 16x16 grid
of 64x64 patches in row-major order, plus ``info.txt`` whose i-th line starts
with the 3D point id of patch i.
"""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import DataError, FormatError

STORED_SIZE = 64
SHEET_SIZE = 1024
GRID = SHEET_SIZE // STORED_SIZE
PER_SHEET = GRID * GRID
STD_FLOOR = 1e-6
INFO_FILE = "info.txt"


@dataclass(frozen=True)
class PatchRecord:
    patch_id: int
    point_id: int
    pixels: np.ndarray  # (1, 64, 64) in [0, 1]


@dataclass(frozen=True)
class Triplet:
    p1: PatchRecord
    p2: PatchRecord
    n: PatchRecord

    def __post_init__(self):
        if self.p1.point_id != self.p2.point_id:
            raise DataError("triplet positives come from different points")
        if self.p1.patch_id == self.p2.patch_id:
            raise DataError("triplet positives are the same patch")
        if self.n.point_id == self.p1.point_id:
            raise DataError("triplet negative shares the positive point")


@dataclass(frozen=True)
class LabeledPair:
    left: PatchRecord
    right: PatchRecord
    label: int

    def __post_init__(self):
        if self.label not in (1, -1):
            raise DataError(f"invalid pair label {self.label}")
        if (self.label == 1) != (self.left.point_id == self.right.point_id):
            raise DataError("pair label disagrees with point ids")


class PatchCorpus:
    """Immutable indexed collection of 64x64 grayscale patches."""

    def __init__(self, pixels, point_ids):
        pixels = np.asarray(pixels, dtype=np.float32)
        point_ids = np.asarray(point_ids, dtype=np.int64)
        if pixels.ndim != 3 or pixels.shape[1:] != (STORED_SIZE, STORED_SIZE):
            raise DataError(f"pixels must be (N, 64, 64), got {pixels.shape}")
        if len(pixels) != len(point_ids):
            raise DataError(f"{len(pixels)} patches but {len(point_ids)} point ids")
        pixels.setflags(write=False)
        point_ids.setflags(write=False)
        self.pixels = pixels
        self.point_ids = point_ids
        self._normalized = None
        self._groups = None

    def __len__(self):
        return len(self.point_ids)

    def __getitem__(self, i):
        return PatchRecord(int(i), int(self.point_ids[i]), self.pixels[i][None])

    def normalized(self):
        """All patches as network input ``(N, 1, 32, 32)``; computed once."""
        if self._normalized is None:
            out = normalize_patches(self.pixels)
            out.setflags(write=False)
            self._normalized = out
        return self._normalized

    @property
    def groups(self):
        """``(order, starts, sizes, group_of)``: patch indices sorted by point."""
        if self._groups is None:
            order = np.argsort(self.point_ids, kind="stable")
            _, starts, sizes = np.unique(self.point_ids[order], return_index=True,
                                         return_counts=True)
            group_of = np.empty(len(self), dtype=np.int64)
            group_of[order] = np.repeat(np.arange(len(sizes)), sizes)
            self._groups = (order, starts, sizes, group_of)
        return self._groups

    def num_points(self):
        return len(self.groups[1])

    def triplet(self, row):
        return Triplet(*(self[i] for i in row))

    def pair(self, left, right, label):
        return LabeledPair(self[left], self[right], int(label))


# -- Photo Tour I/O ----------------------------------------------------------------

def _sheet_paths(directory):
    return sorted(p for p in Path(directory).iterdir()
                  if p.suffix.lower() == ".bmp" and p.name.startswith("patches"))


def read_info(path):
    point_ids = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                point_ids.append(int(parts[0]))
            except ValueError:
                raise FormatError(f"bad point id {parts[0]!r}", line=lineno) from None
    return np.array(point_ids, dtype=np.int64)


def load_phototour(directory):
    directory = Path(directory)
    info = directory / INFO_FILE
    if not info.is_file():
        raise DataError(f"missing {INFO_FILE} in {directory}")
    point_ids = read_info(info)
    sheets = _sheet_paths(directory)
    n = len(point_ids)
    if n > PER_SHEET * len(sheets):
        raise DataError(f"{INFO_FILE} lists {n} patches but {len(sheets)} sheet(s) "
                        f"hold at most {PER_SHEET * len(sheets)}")
    if len(sheets) != math.ceil(n / PER_SHEET):
        raise DataError(f"{len(sheets)} sheet(s) present for {n} patches")
    pixels = np.empty((n, STORED_SIZE, STORED_SIZE), dtype=np.float32)
    for s, sheet_path in enumerate(sheets):
        try:
            with Image.open(sheet_path) as img:
                sheet = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
        except OSError as exc:
            raise DataError(f"cannot read {sheet_path}: {exc}") from exc
        if sheet.shape != (SHEET_SIZE, SHEET_SIZE):
            raise DataError(f"{sheet_path} is {sheet.shape}, expected 1024x1024")
        cells = sheet.reshape(GRID, STORED_SIZE, GRID, STORED_SIZE).transpose(0, 2, 1, 3)
        cells = cells.reshape(PER_SHEET, STORED_SIZE, STORED_SIZE)
        lo = s * PER_SHEET
        take = min(PER_SHEET, n - lo)
        pixels[lo:lo + take] = cells[:take]
    return PatchCorpus(pixels, point_ids)


def write_phototour(corpus, directory):
    """Write ``corpus`` as sheets plus ``info.txt``; pixels are quantized to 8 bits."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    n = len(corpus)
    levels = np.rint(np.clip(corpus.pixels, 0, 1) * 255).astype(np.uint8)
    for s in range(math.ceil(n / PER_SHEET)):
        cells = np.zeros((PER_SHEET, STORED_SIZE, STORED_SIZE), dtype=np.uint8)
        chunk = levels[s * PER_SHEET:(s + 1) * PER_SHEET]
        cells[:len(chunk)] = chunk
        sheet = cells.reshape(GRID, GRID, STORED_SIZE, STORED_SIZE).transpose(0, 2, 1, 3)
        Image.fromarray(sheet.reshape(SHEET_SIZE, SHEET_SIZE), mode="L").save(
            directory / f"patches{s:04d}.bmp")
    with open(directory / INFO_FILE, "w") as fh:
        for pid in corpus.point_ids:
            fh.write(f"{pid} 0\n")
    return directory


class PairList:
    """Evaluation pairs as parallel arrays of patch ids and +-1 labels."""

    def __init__(self, left, right, labels):
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int8)
        if not (len(self.left) == len(self.right) == len(self.labels)):
            raise DataError("pair arrays differ in length")

    def __len__(self):
        return len(self.labels)

    def records(self, corpus):
        for a, b, lab in zip(self.left, self.right, self.labels):
            yield corpus.pair(a, b, lab)


def load_pairs_file(path, num_patches=None):
    """Rows ``patchID1 pointID1 _ patchID2 pointID2 _``; +1 iff point ids match."""
    left, right, labels = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise FormatError(f"expected 6 fields, got {len(parts)}", line=lineno)
            try:
                a, pa, _, b, pb, _ = (int(v) for v in parts)
            except ValueError:
                raise FormatError("non-integer field", line=lineno) from None
            for pid in (a, b):
                if pid < 0 or (num_patches is not None and pid >= num_patches):
                    raise FormatError(f"patch id {pid} outside corpus of {num_patches}",
                                      line=lineno)
            left.append(a)
            right.append(b)
            labels.append(1 if pa == pb else -1)
    return PairList(left, right, labels)


def write_pairs_file(pairs, corpus, path):
    with open(path, "w") as fh:
        for a, b in zip(pairs.left, pairs.right):
            fh.write(f"{a} {corpus.point_ids[a]} 0 {b} {corpus.point_ids[b]} 0\n")


# -- preprocessing -----------------------------------------------------------------

def normalize_patches(pixels):
    """2x2 average downsample to 32x32, then per-patch zero mean / unit std.

    Accepts ``(N, 64, 64)`` or ``(N, 1, 64, 64)`` and returns
    ``(N, 1, 32, 32)`` float32. Constant patches map to zeros.
    """
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, STORED_SIZE, STORED_SIZE)
    h = STORED_SIZE // 2
    small = x.reshape(-1, h, 2, h, 2).mean(axis=(2, 4))
    mean = small.mean(axis=(1, 2), keepdims=True)
    std = small.std(axis=(1, 2), keepdims=True)
    centered = small - mean
    # constant patches can leave rounding residue; zero them outright
    centered[np.broadcast_to(std < STD_FLOOR, centered.shape)] = 0.0
    return (centered / np.maximum(std, STD_FLOOR)).astype(np.float32)[:, None]


def normalize_patch(pixels):
    """Single ``(1, 64, 64)`` patch -> ``(1, 32, 32)``."""
    pixels = np.asarray(pixels)
    if pixels.size != STORED_SIZE * STORED_SIZE:
        raise DataError(f"expected a 64x64 patch, got {pixels.shape}")
    return normalize_patches(pixels.reshape(1, STORED_SIZE, STORED_SIZE))[0]


# -- samplers --------------------------------------------------------------------

def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def epoch_seed(seed, epoch):
    """Independent, reproducible seed for one epoch's sampling stream."""
    return np.random.SeedSequence([int(seed), int(epoch)])


def _matchable(corpus):
    order, starts, sizes, group_of = corpus.groups
    if len(sizes) < 2:
        raise DataError("corpus needs at least two point groups")
    matchable = np.flatnonzero(sizes >= 2)
    if len(matchable) == 0:
        raise DataError("no point has two or more patches")
    return order, starts, sizes, matchable


def _positive_pairs(rng, order, starts, sizes, groups):
    size = sizes[groups]
    i = rng.integers(0, size)
    j = rng.integers(0, size - 1)
    j = j + (j >= i)
    return order[starts[groups] + i], order[starts[groups] + j]


def _other_point(rng, order, starts, sizes, groups):
    # uniform over every patch outside the group: skip the group's slot range
    n = len(order)
    r = rng.integers(0, n - sizes[groups])
    r = r + np.where(r >= starts[groups], sizes[groups], 0)
    return order[r]


def sample_triplets(corpus, count, seed):
    """``(count, 3)`` patch ids ``(p1, p2, n)``.

    Point uniform over matchable points, positive pair uniform among distinct
    patches of that point, negative uniform over patches of other points.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    order, starts, sizes, matchable = _matchable(corpus)
    rng = _rng(seed)
    groups = matchable[rng.integers(0, len(matchable), size=count)]
    p1, p2 = _positive_pairs(rng, order, starts, sizes, groups)
    n = _other_point(rng, order, starts, sizes, groups)
    return np.stack([p1, p2, n], axis=1)


def sample_pairs(corpus, count, seed, positive_fraction=1 / 3):
    """Labeled pairs as :class:`PairList`.

    Each pair is anchored on a uniformly chosen matchable point; positives
    take a second distinct patch of that point, negatives a patch of any
    other point (the same distributions the triplet sampler uses).
    """
    if not 0.0 <= positive_fraction <= 1.0:
        raise ValueError("positive_fraction must be in [0, 1]")
    if count < 0:
        raise ValueError("count must be >= 0")
    order, starts, sizes, matchable = _matchable(corpus)
    rng = _rng(seed)
    groups = matchable[rng.integers(0, len(matchable), size=count)]
    positive = rng.random(count) < positive_fraction
    a, b = _positive_pairs(rng, order, starts, sizes, groups)
    neg = _other_point(rng, order, starts, sizes, groups)
    right = np.where(positive, b, neg)
    return PairList(a, right, np.where(positive, 1, -1))


def decompose_triplets(triplets):
    """Each triplet yields ``(p1, p2, +1), (p1, n, -1), (p2, n, -1)``."""
    t = np.asarray(triplets).reshape(-1, 3)
    left = np.stack([t[:, 0], t[:, 0], t[:, 1]], axis=1).reshape(-1)
    right = np.stack([t[:, 1], t[:, 2], t[:, 2]], axis=1).reshape(-1)
    labels = np.tile(np.array([1, -1, -1]), len(t))
    return PairList(left, right, labels)


# -- toy corpus -------------------------------------------------------------------

@dataclass(frozen=True)
class ToyCorpusSpec:
    num_points: int = 128
    patches_per_point: int = 8
    translation: float = 4.0   # +- pixels at 64x64 resolution
    rotation: float = 20.0     # +- degrees
    brightness: float = 0.2    # +- fractional gain
    smoothness: float = 2.0    # Gaussian blur sigma of the base texture, pixels
    seed: int = 0

    def __post_init__(self):
        if self.num_points < 2:
            raise DataError("toy corpus needs num_points >= 2")
        if self.patches_per_point < 2:
            raise DataError("toy corpus needs patches_per_point >= 2")
        for name in ("translation", "rotation", "brightness"):
            if getattr(self, name) < 0:
                raise DataError(f"{name} jitter must be >= 0")
        if self.smoothness <= 0:
            raise DataError("smoothness must be positive")


_CANVAS = 96


def _base_texture(rng, sigma):
    noise = rng.standard_normal((_CANVAS, _CANVAS))
    tex = ndimage.gaussian_filter(noise, sigma, mode="wrap")
    tex = (tex - tex.mean()) / tex.std()
    return np.clip(0.5 + 0.18 * tex, 0.0, 1.0)


def _jittered_view(rng, tex, spec):
    angle = np.deg2rad(rng.uniform(-spec.rotation, spec.rotation))
    shift = rng.uniform(-spec.translation, spec.translation, size=2)
    gain = 1.0 + rng.uniform(-spec.brightness, spec.brightness)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s], [s, c]])
    out_center = np.array([STORED_SIZE / 2 - 0.5] * 2)
    in_center = np.array([_CANVAS / 2 - 0.5] * 2) + shift
    offset = in_center - rot @ out_center
    view = ndimage.affine_transform(tex, rot, offset=offset,
                                    output_shape=(STORED_SIZE, STORED_SIZE),
                                    order=1, mode="reflect")
    return np.clip(view * gain, 0.0, 1.0)


def make_toy_corpus(spec=ToyCorpusSpec()):
    """Smooth random textures, one per point, seen through small random warps.

    Pixels are quantized to 8 bits so the corpus survives a round trip through
    the bitmap sheet format unchanged.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_points * spec.patches_per_point
    pixels = np.empty((n, STORED_SIZE, STORED_SIZE), dtype=np.float32)
    k = 0
    for _ in range(spec.num_points):
        tex = _base_texture(rng, spec.smoothness)
        for _ in range(spec.patches_per_point):
            view = _jittered_view(rng, tex, spec)
            pixels[k] = np.rint(view * 255) / 255
            k += 1
    point_ids = np.repeat(np.arange(spec.num_points), spec.patches_per_point)
    return PatchCorpus(pixels, point_ids)
