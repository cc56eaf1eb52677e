"""Two-modality datasets at the embedding level.

Genetic sequences are handled as raw strings (encoding, augmentation) and as
latent grids (positional encoding). Images never appear here: both
modalities arrive as ``(D, H, W)`` embedding maps, either loaded from a
container file or produced by :func:`synth_generate`.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .errors import (
    DimensionMismatchError,
    LabelOutOfRangeError,
    SequenceOverflowError,
    ValidationError,
)

# Channel order of the one-hot tensor.
BASES = "ACTG"
ALPHABET = frozenset("ACTGN")
MAX_WIDTH = 720
_BASE_INDEX = {b: i for i, b in enumerate(BASES)}


# --------------------------------------------------------------------------
# sequences
# --------------------------------------------------------------------------

def validate_sequence(seq):
    bad = set(seq) - ALPHABET
    if bad:
        raise ValidationError(f"sequence contains characters outside ACTGN: {sorted(bad)}")


def encode_genetic(seq, max_width=MAX_WIDTH):
    """One-hot encode ``seq`` into a ``(4, 1, max_width)`` float32 tensor.

    Unknown bases (``N``) and right padding are all-zero columns. Sequences
    longer than ``max_width`` raise :class:`SequenceOverflowError`.
    """
    validate_sequence(seq)
    if len(seq) > max_width:
        raise SequenceOverflowError(
            f"sequence of length {len(seq)} exceeds max_width={max_width}"
        )
    out = np.zeros((4, 1, max_width), dtype=np.float32)
    for i, base in enumerate(seq):
        ch = _BASE_INDEX.get(base)
        if ch is not None:
            out[ch, 0, i] = 1.0
    return out


def decode_genetic(onehot, length=None):
    """Inverse of :func:`encode_genetic`.

    Zero columns decode to ``N``. Without an explicit ``length`` the string
    stops at the last non-zero column, so trailing ``N`` bases are lost.
    """
    onehot = np.asarray(onehot)
    cols = onehot[:, 0, :]
    nonzero = cols.sum(axis=0) > 0
    if length is None:
        idx = np.flatnonzero(nonzero)
        length = int(idx[-1]) + 1 if idx.size else 0
    chars = []
    for i in range(length):
        chars.append(BASES[int(np.argmax(cols[:, i]))] if nonzero[i] else "N")
    return "".join(chars)


def augment_genetic(seq, sub_rate=0.0, n_insert=0, n_delete=0, rng_seed=None):
    """Random point substitutions, insertions and deletions.

    Each non-``N`` position is substituted with probability ``sub_rate`` by a
    uniformly chosen *different* base. Then ``n_insert`` random bases are
    inserted at random positions, and ``n_delete`` random positions are
    removed (everything, if there are fewer). Output length is therefore
    ``max(0, len(seq) + n_insert - n_delete)``.
    """
    validate_sequence(seq)
    if not 0.0 <= sub_rate <= 1.0:
        raise ValidationError(f"sub_rate must be in [0, 1], got {sub_rate}")
    if n_insert < 0 or n_delete < 0:
        raise ValidationError("insertion and deletion counts must be non-negative")
    rng = np.random.default_rng(rng_seed)
    bases = list(seq)

    if sub_rate > 0:
        hits = rng.random(len(bases)) < sub_rate
        for i in np.flatnonzero(hits):
            if bases[i] == "N":
                continue
            choices = [b for b in BASES if b != bases[i]]
            bases[i] = choices[int(rng.integers(3))]

    for _ in range(n_insert):
        pos = int(rng.integers(len(bases) + 1))
        bases.insert(pos, BASES[int(rng.integers(4))])

    if n_delete >= len(bases):
        return ""
    if n_delete:
        drop = set(rng.choice(len(bases), size=n_delete, replace=False).tolist())
        bases = [b for i, b in enumerate(bases) if i not in drop]
    return "".join(bases)


def positional_encoding(depth, width):
    """Sinusoidal table of shape ``(depth, width)``.

    Even rows ``2i`` hold ``sin(w / 10000**(2i/depth))``, odd rows the cosine
    with the same frequency.
    """
    pe = np.zeros((depth, width), dtype=np.float64)
    w = np.arange(width, dtype=np.float64)
    for d in range(depth):
        i2 = d - (d % 2)
        freq = 10000.0 ** (i2 / depth)
        pe[d] = np.sin(w / freq) if d % 2 == 0 else np.cos(w / freq)
    return pe


def add_positional_encoding(emb, strength):
    """Add ``strength * PE`` to a genetic embedding of shape ``(..., D, 1, W)``."""
    if strength < 0:
        raise ValidationError("positional encoding strength must be >= 0")
    emb = np.asarray(emb)
    if emb.ndim < 3 or emb.shape[-2] != 1:
        raise ValidationError(f"expected genetic embedding (..., D, 1, W), got {emb.shape}")
    depth, width = emb.shape[-3], emb.shape[-1]
    pe = positional_encoding(depth, width)[:, None, :]
    return (emb + strength * pe).astype(emb.dtype, copy=False)


def jitter_embeddings(emb, scale, rng):
    """Gaussian jitter in embedding space.

    Stand-in for sequence/image augmentation when only embeddings exist.
    """
    return emb + rng.normal(0.0, scale, size=emb.shape).astype(emb.dtype)


# --------------------------------------------------------------------------
# splits and sampling
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/validation/test index lists over the original dataset.

    ``class_map`` maps each retained original label to its dense new label.
    The validation split doubles as the conformal calibration set.
    """

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    seed: int
    class_map: dict

    @property
    def calibration(self):
        return self.validation

    def to_json(self):
        return {
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
            "seed": self.seed,
            "class_map": {str(k): v for k, v in self.class_map.items()},
        }

    @classmethod
    def from_json(cls, obj):
        return cls(
            train=np.asarray(obj["train"], dtype=np.int64),
            validation=np.asarray(obj["validation"], dtype=np.int64),
            test=np.asarray(obj["test"], dtype=np.int64),
            seed=int(obj["seed"]),
            class_map={int(k): int(v) for k, v in obj["class_map"].items()},
        )


def make_splits(labels, ratios=(0.6, 0.2, 0.2), min_per_class=10, seed=0):
    """Stratified split with rare-class filtering.

    Classes with fewer than ``min_per_class`` samples are dropped and the
    remaining labels renumbered densely in ascending order of the original
    label.
    """
    labels = np.asarray(labels)
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValidationError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    if min_per_class < 1:
        raise ValidationError("min_per_class must be >= 1")

    classes, counts = np.unique(labels, return_counts=True)
    kept = [int(c) for c, n in zip(classes, counts) if n >= min_per_class]
    if not kept:
        raise ValidationError("no class has at least min_per_class samples")
    class_map = {c: i for i, c in enumerate(kept)}

    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in kept:
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n = idx.size
        n_train = int(round(n * ratios[0]))
        n_val = min(int(round(n * ratios[1])), n - n_train)
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    train, val, test = (np.sort(np.concatenate(p)).astype(np.int64) for p in parts)
    return SplitSpec(train, val, test, int(seed), class_map)


def oversample_indices(labels, seed=0):
    """Positions into ``labels`` for one class-balanced epoch.

    Every class appears ``max_count`` times: the largest classes contribute
    each sample once, smaller classes are drawn uniformly with replacement.
    The epoch order is shuffled.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(labels, return_counts=True)
    target = int(counts.max())
    picks = []
    for c, n in zip(classes, counts):
        idx = np.flatnonzero(labels == c)
        if n == target:
            picks.append(idx)
        else:
            picks.append(rng.choice(idx, size=target, replace=True))
    out = np.concatenate(picks)
    return out[rng.permutation(out.size)]


# --------------------------------------------------------------------------
# dataset container
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    id: int
    label: int
    image_embedding: np.ndarray
    genetic_embedding: np.ndarray = None


@dataclass(frozen=True)
class Dataset:
    """Immutable bundle of per-sample embeddings.

    ``image`` has shape ``(N, D_img, H, W)`` and ``genetic`` (optional)
    ``(N, D_gen, 1, W_gen)``; both float32.
    """

    labels: np.ndarray
    ids: np.ndarray
    image: np.ndarray
    genetic: np.ndarray = None
    class_names: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if self.ids.shape != (n,) or self.image.shape[0] != n:
            raise DimensionMismatchError("labels, ids and image embeddings disagree on sample count")
        if self.genetic is not None and self.genetic.shape[0] != n:
            raise DimensionMismatchError("genetic embeddings disagree on sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise LabelOutOfRangeError(
                f"labels must lie in [0, {self.n_classes}), found range "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        for name in ("image", "genetic"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} embeddings contain non-finite values")

    @property
    def n_classes(self):
        return len(self.class_names)

    def __len__(self):
        return len(self.labels)

    def sample(self, i):
        return Sample(
            id=int(self.ids[i]),
            label=int(self.labels[i]),
            image_embedding=self.image[i],
            genetic_embedding=None if self.genetic is None else self.genetic[i],
        )

    def subset(self, idx, class_map=None):
        """Rows ``idx``; optionally relabel with ``class_map`` (old -> new)."""
        idx = np.asarray(idx, dtype=np.int64)
        labels = self.labels[idx]
        names = self.class_names
        if class_map is not None:
            labels = np.array([class_map[int(y)] for y in labels], dtype=labels.dtype)
            inv = sorted(class_map, key=class_map.get)
            names = tuple(self.class_names[c] for c in inv)
        return Dataset(
            labels=labels,
            ids=self.ids[idx],
            image=self.image[idx],
            genetic=None if self.genetic is None else self.genetic[idx],
            class_names=names,
            meta=dict(self.meta),
        )

    def manifest(self, splits=None):
        counts = np.bincount(self.labels, minlength=self.n_classes).tolist() if len(self) else []
        out = {
            "format_version": container.FORMAT_VERSION,
            "K": self.n_classes,
            "class_names": list(self.class_names),
            "n_samples": len(self),
            "class_counts": counts,
            "image_dims": list(self.image.shape[1:]),
            "genetic_dims": None if self.genetic is None else list(self.genetic.shape[1:]),
            "meta": self.meta,
        }
        if splits is not None:
            out["split_counts"] = {
                "train": int(splits.train.size),
                "validation": int(splits.validation.size),
                "test": int(splits.test.size),
            }
        return out


def save_dataset(path, ds):
    """Write ``path`` (binary container) and ``path.json`` (manifest mirror)."""
    path = Path(path)
    manifest = ds.manifest()
    arrays = {
        "labels": ds.labels.astype(np.int32),
        "ids": ds.ids.astype(np.int64),
        "image": ds.image.astype(np.float32, copy=False),
    }
    if ds.genetic is not None:
        arrays["genetic"] = ds.genetic.astype(np.float32, copy=False)
    digest = container.write(path, container.DATASET_MAGIC, manifest, arrays)
    manifest["sha256"] = digest
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return digest


def load_dataset(path):
    meta, arrays = container.read(path, container.DATASET_MAGIC)
    n = meta["n_samples"]
    image = arrays["image"]
    if list(image.shape) != [n] + list(meta["image_dims"]):
        raise DimensionMismatchError(
            f"image payload shape {image.shape} does not match manifest {meta['image_dims']}"
        )
    genetic = arrays.get("genetic")
    if (genetic is None) != (meta["genetic_dims"] is None):
        raise DimensionMismatchError("genetic payload presence disagrees with manifest")
    if genetic is not None and list(genetic.shape) != [n] + list(meta["genetic_dims"]):
        raise DimensionMismatchError(
            f"genetic payload shape {genetic.shape} does not match manifest {meta['genetic_dims']}"
        )
    labels = arrays["labels"]
    if labels.size and (labels.min() < 0 or labels.max() >= meta["K"]):
        raise LabelOutOfRangeError(f"label {labels.max()} out of range for K={meta['K']}")
    return Dataset(
        labels=labels,
        ids=arrays["ids"],
        image=image,
        genetic=genetic,
        class_names=tuple(meta["class_names"]),
        meta=meta.get("meta", {}),
    )


def export_split_csv(path, ds, splits):
    """CSV of ``sample_id,label,class_name,split`` over the retained samples."""
    which = {}
    for name in ("train", "validation", "test"):
        for i in getattr(splits, name):
            which[int(i)] = name
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "label", "class_name", "split"])
        for i in sorted(which):
            old = int(ds.labels[i])
            w.writerow([int(ds.ids[i]), splits.class_map[old], ds.class_names[old], which[i]])


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------

@dataclass
class SynthConfig:
    """Knobs for :func:`synth_generate`.

    ``layout`` picks the patch model. With ``"class"`` every class has one
    mean direction per modality. With ``"parts"`` a class is a code of
    ``ceil(log2 K)`` bits and patch ``l`` shows one of two level-``l`` parts
    picked by bit ``l``; parts come from a centered simplex, so distinct parts
    have negative cosine. ``confusable_pairs`` share their image signal
    (mean, or the parts where the codes differ) but keep distinct genetic
    signal. ``part_fraction`` is the probability that a spatial patch carries
    signal rather than pure noise.
    """

    K: int = 16
    n_per_class: int = 40
    d_image: int = 32
    d_genetic: int = 32
    image_grid: tuple = (2, 2)
    genetic_width: int = 4
    image_separability: float = 3.0
    genetic_separability: float = 3.0
    confusable_pairs: tuple = ((0, 1), (2, 3), (4, 5), (6, 7))
    part_fraction: float = 1.0
    noise: float = 1.0
    position_encoding_strength: float = 0.01
    layout: str = "class"
    seed: int = 0

    def to_dict(self):
        d = dict(self.__dict__)
        d["image_grid"] = list(self.image_grid)
        d["confusable_pairs"] = [list(p) for p in self.confusable_pairs]
        return d


def _orthonormal(rng, n, dim):
    raw = rng.normal(size=(dim, n))
    q, r = np.linalg.qr(raw)
    return (q * np.sign(np.diag(r))).T


def _class_means(rng, K, dim, scale):
    """Unit directions scaled by ``scale``; mutually orthogonal when ``dim >= K``."""
    if dim >= K:
        means = _orthonormal(rng, K, dim)
    else:
        raw = rng.normal(size=(K, dim))
        means = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return means * scale


def n_code_bits(K):
    return max(1, math.ceil(math.log2(K)))


def _simplex(rng, n, dim):
    """``n`` unit vectors with pairwise cosine ``-1/(n-1)``."""
    if dim < n:
        raise ValidationError(f"parts layout needs embedding depth >= {n}, got {dim}")
    e = _orthonormal(rng, n, dim)
    e = e - e.mean(axis=0)
    return e / np.linalg.norm(e, axis=1, keepdims=True)


def _part_templates(rng, K, dim, n_patches, scale, pairs):
    """Per-class patch templates ``(K, n_patches, dim)`` for the parts layout."""
    L = n_code_bits(K)
    if n_patches < L:
        raise ValidationError(f"parts layout needs at least {L} patches per sample, got {n_patches}")
    parts = _simplex(rng, 2 * L + 1, dim)          # last one is the neutral part
    bits = (np.arange(K)[:, None] >> (L - 1 - np.arange(L))[None, :]) & 1
    idx = 2 * np.arange(L)[None, :] + bits        # (K, L)
    for a, b in pairs:
        differ = bits[a] != bits[b]
        idx[a, differ] = idx[b, differ] = 2 * L
    level = np.arange(n_patches) % L
    return scale * parts[idx[:, level]]


def _patches(rng, templates, labels, part_fraction, noise):
    n = len(labels)
    _, n_patches, dim = templates.shape
    out = rng.normal(0.0, noise / math.sqrt(dim), size=(n, n_patches, dim))
    signal = rng.random((n, n_patches)) < part_fraction
    # every sample shows its class signal somewhere
    signal[np.arange(n), rng.integers(n_patches, size=n)] = True
    out += signal[..., None] * templates[labels]
    return out


def synth_generate(cfg):
    """Gaussian patch embeddings with planted image-confusable class pairs.

    In the ``"class"`` layout each class owns a unit-norm mean direction per
    modality (orthonormal across classes when the depth allows) scaled by
    that modality's separability; a patch is its class mean plus isotropic
    noise of total scale ``noise`` (or noise alone, with probability
    ``1 - part_fraction``). The ``"parts"`` layout swaps the class mean for
    level-wise parts, see :class:`SynthConfig`.
    """
    if cfg.image_separability < 0 or cfg.genetic_separability < 0:
        raise ValidationError("separability must be >= 0")
    if cfg.K < 2:
        raise ValidationError("K must be >= 2")
    if cfg.layout not in ("class", "parts"):
        raise ValidationError(f"unknown layout {cfg.layout!r}")
    seen = set()
    for a, b in cfg.confusable_pairs:
        if not (0 <= a < cfg.K and 0 <= b < cfg.K) or a == b or a in seen or b in seen:
            raise ValidationError(f"invalid confusable pair ({a}, {b})")
        seen.update((a, b))

    rng = np.random.default_rng(cfg.seed)
    H, W = cfg.image_grid
    if cfg.layout == "class":
        img_means = _class_means(rng, cfg.K, cfg.d_image, cfg.image_separability)
        for a, b in cfg.confusable_pairs:
            img_means[b] = img_means[a]
        gen_means = _class_means(rng, cfg.K, cfg.d_genetic, cfg.genetic_separability)
        img_t = np.repeat(img_means[:, None, :], H * W, axis=1)
        gen_t = np.repeat(gen_means[:, None, :], cfg.genetic_width, axis=1)
    else:
        img_t = _part_templates(rng, cfg.K, cfg.d_image, H * W, cfg.image_separability, cfg.confusable_pairs)
        gen_t = _part_templates(rng, cfg.K, cfg.d_genetic, cfg.genetic_width, cfg.genetic_separability, ())

    labels = np.repeat(np.arange(cfg.K), cfg.n_per_class)
    labels = labels[rng.permutation(labels.size)]
    img = _patches(rng, img_t, labels, cfg.part_fraction, cfg.noise)
    gen = _patches(rng, gen_t, labels, cfg.part_fraction, cfg.noise)

    image = img.transpose(0, 2, 1).reshape(-1, cfg.d_image, H, W)
    genetic = gen.transpose(0, 2, 1).reshape(-1, cfg.d_genetic, 1, cfg.genetic_width)
    genetic = add_positional_encoding(genetic, cfg.position_encoding_strength)
    return Dataset(
        labels=labels.astype(np.int32),
        ids=np.arange(labels.size, dtype=np.int64),
        image=image.astype(np.float32),
        genetic=genetic.astype(np.float32),
        class_names=tuple(f"class_{c:03d}" for c in range(cfg.K)),
        meta={"synth": cfg.to_dict()},
    )
