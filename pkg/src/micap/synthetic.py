"""Synthetic tasks and fixtures with planted structure.

They stand in for external datasets at desk scale: each one has a known answer
(solution dimension, separability, informative tap, attended instance) that
the corresponding protocol must recover.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .corpus import Bag, save_image
from .encoder import EncoderConfig, build_encoder
from .nn import Linear, Module
from .rng import make_generator
from .tensor import Tensor


# -- intrinsic-dimension tasks --------------------------------------------------

class _LinearModel(Module):
    def __init__(self, n_in, rng, dtype):
        self.fc = Linear(n_in, 1, rng, bias=False, dtype=dtype)

    def __call__(self, x):
        return self.fc(x)


@dataclass
class LinearRegressionTask:
    """Targets depend on the weights only through ``rank`` linear functionals.

    Zero-loss weights therefore form an affine set of codimension ``rank``;
    a random subspace needs about ``rank`` dimensions to reach it.
    """
    n_features: int = 64
    rank: int = 4
    n_train: int = 256
    n_eval: int = 256
    data_seed: int = 0
    name: str = "linreg"

    def __post_init__(self):
        rng = make_generator(self.data_seed, "linreg-data")
        basis = rng.standard_normal((self.rank, self.n_features)) / np.sqrt(self.n_features)
        w_true = rng.standard_normal(self.n_features)
        z = rng.standard_normal((self.n_train + self.n_eval, self.rank))
        x = z @ basis
        y = x @ w_true
        self._x_train, self._y_train = x[: self.n_train], y[: self.n_train]
        self._x_eval, self._y_eval = x[self.n_train:], y[self.n_train:]

    def build_model(self, seed: int) -> Module:
        return _LinearModel(self.n_features, make_generator(seed, "linreg-model"), np.float64)

    def loss(self, model, step):
        err = model(Tensor(self._x_train)) - Tensor(self._y_train[:, None])
        return (err * err).mean()

    def metric(self, model) -> float:
        pred = model(Tensor(self._x_eval)).data[:, 0]
        resid = ((pred - self._y_eval) ** 2).sum()
        total = ((self._y_eval - self._y_eval.mean()) ** 2).sum()
        return max(0.0, 1.0 - resid / total)


class _ImageClassifier(Module):
    def __init__(self, enc_cfg, n_classes, seed):
        self.encoder = build_encoder(enc_cfg, seed)
        rng = make_generator(seed, "image-task-head")
        self.head = Linear(enc_cfg.out_channels, n_classes, rng)

    def __call__(self, images):
        return self.head(F.global_avg_pool(self.encoder(Tensor(images))))


@dataclass
class ImageClassificationTask:
    """Encoder plus linear head on planted colour-pattern images; metric is accuracy."""
    n_classes: int = 4
    n_train: int = 64
    n_eval: int = 64
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(
        stem_channels=8, stage_channels=(8, 8, 16, 16), input_size=32, stem_kernel=3))
    data_seed: int = 0
    name: str = "image-classification"

    def __post_init__(self):
        rng = make_generator(self.data_seed, "image-task-data")
        n = self.n_train + self.n_eval
        images, labels = pattern_images(n, self.n_classes, self.encoder.input_size, rng)
        self._train = (images[: self.n_train], labels[: self.n_train])
        self._eval = (images[self.n_train:], labels[self.n_train:])

    def build_model(self, seed: int) -> Module:
        return _ImageClassifier(self.encoder, self.n_classes, seed)

    def loss(self, model, step):
        x, y = self._train
        return F.softmax_cross_entropy(model(x), y)

    def metric(self, model) -> float:
        model.eval()
        x, y = self._eval
        acc = float((model(x).data.argmax(axis=1) == y).mean())
        model.train()
        return acc


SUBSPACE_TASKS = {"linreg": LinearRegressionTask, "image-classification": ImageClassificationTask}


# -- images -----------------------------------------------------------------------

def pattern_images(n: int, n_classes: int, size: int, rng: np.random.Generator):
    """Noisy images whose class sets both the dominant colour channel and a stripe orientation."""
    labels = rng.integers(0, n_classes, size=n)
    yy, xx = np.mgrid[0:size, 0:size] / size
    images = 0.15 * rng.random((n, 3, size, size))
    for i, c in enumerate(labels):
        stripes = 0.5 + 0.5 * np.sin(2 * np.pi * 3 * (xx if c % 2 else yy))
        images[i, c % 3] += 0.6 * stripes
    return np.clip(images, 0, 1).astype(np.float32), labels


# -- probe fixtures ----------------------------------------------------------------

def xor_features(n: int, rng: np.random.Generator, noise: float = 0.15):
    """Four Gaussian blobs at (+-1, +-1); the label is the XOR of the coordinate signs."""
    signs = rng.choice(np.array([-1.0, 1.0]), size=(n, 2))
    x = signs + noise * rng.standard_normal((n, 2))
    y = (signs[:, 0] != signs[:, 1]).astype(np.int64)
    return x.astype(np.float32), y


def blob_features(n: int, rng: np.random.Generator, dim: int = 2, gap: float = 3.0):
    y = rng.integers(0, 2, size=n)
    x = rng.standard_normal((n, dim)) * 0.3
    x[:, 0] += np.where(y == 1, gap / 2, -gap / 2)
    return x.astype(np.float32), y


class PlantedTapEncoder:
    """Stand-in encoder whose deepest tap carries the label and whose other taps are noise.

    Quacks like ``Encoder`` for ``extract_features``: images are integer sample
    ids broadcast into an array; ``encode`` looks the features up.
    """

    def __init__(self, labels: np.ndarray, channels=(4, 8, 8, 16, 16), seed: int = 0):
        rng = make_generator(seed, "planted-taps")
        n = len(labels)
        self._tables = []
        for tap, c in enumerate(channels, 1):
            feats = rng.standard_normal((n, c))
            if tap == len(channels):
                feats[:, 0] += 4.0 * (2 * labels - 1)
            self._tables.append(feats.astype(np.float32))
        self.training = False
        self.config = EncoderConfig(stem_channels=channels[0], stage_channels=tuple(channels[1:]), input_size=32)

    def named_parameters(self):
        return iter(())

    def eval(self):
        return self

    def train(self, mode=True):
        return self

    def __call__(self, images: Tensor, tap: int) -> Tensor:
        ids = np.asarray(images.data[:, 0, 0, 0], dtype=np.int64)
        feats = self._tables[tap - 1][ids]
        return Tensor(feats[:, :, None, None])


def planted_tap_images(n: int) -> np.ndarray:
    """Sample ids smuggled through the image tensor for ``PlantedTapEncoder``."""
    images = np.zeros((n, 3, 32, 32), dtype=np.float32)
    images[:, :, :, :] = np.arange(n, dtype=np.float32)[:, None, None, None]
    return images


# -- captioning fixtures -------------------------------------------------------------

COLOURS = ("red", "green", "blue")


def bright_instance_bag(rng: np.random.Generator, size: int, bag_size: int = 3):
    """A bag of dim grey-noise instances with one bright coloured instance.

    Returns ``(images, bright_index, colour)``; the caption names the colour.
    """
    images = 0.1 + 0.1 * rng.random((bag_size, 3, size, size))
    bright = int(rng.integers(bag_size))
    colour = int(rng.integers(len(COLOURS)))
    images[bright] = 0.2 * rng.random((3, size, size))
    images[bright, colour] += 0.75
    return np.clip(images, 0, 1).astype(np.float32), bright, COLOURS[colour]


OVERFIT_CAPTIONS = (
    "signet ring cells infiltrate the gastric mucosa",
    "a well differentiated squamous cell carcinoma with keratin pearls",
    "granulomas with multinucleated giant cells",
    "mitotic figures are frequent in this sarcoma",
    "reed sternberg cells in a mixed inflammatory background",
    "psammoma bodies in papillary thyroid carcinoma",
    "adipose tissue with scattered lipoblasts",
    "crypt abscesses in ulcerative colitis",
)


def write_synthetic_corpus(root, n_bags: int = 8, size: int = 32, seed: int = 0,
                           captions=OVERFIT_CAPTIONS, max_bag: int = 3) -> list[Bag]:
    """Write PNG bags with distinct colour patterns and a manifest-ready list of Bags."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = make_generator(seed, "synthetic-corpus")
    yy, xx = np.mgrid[0:size, 0:size] / size
    bags = []
    for i in range(n_bags):
        k = 1 + i % max_bag
        refs = []
        for j in range(k):
            img = 0.2 * rng.random((3, size, size))
            freq = 1 + (i + j) % 4
            img[i % 3] += 0.6 * (0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx + (i % 2) * yy)))
            img[(i // 3) % 3] += 0.2
            path = root / "images" / f"bag{i:03d}_{j}.png"
            save_image(path, np.clip(img, 0, 1))
            refs.append(f"images/bag{i:03d}_{j}.png")
        bags.append(Bag(f"b{i:03d}", tuple(refs), captions[i % len(captions)], "synthetic"))
    return bags


# -- manifests -------------------------------------------------------------------------

ARCH_SIZE_HISTOGRAM = {1: 9772, 2: 1292, 3: 461, 4: 173, 5: 44, 6: 36, 7: 14, 8: 17, 9: 7}


def arch_shaped_bags(histogram=None, seed: int = 0) -> list[Bag]:
    """Bags (with placeholder image refs) whose size histogram is ``histogram``, in shuffled order."""
    histogram = ARCH_SIZE_HISTOGRAM if histogram is None else histogram
    sizes = np.concatenate([np.full(n, k) for k, n in sorted(histogram.items())])
    sizes = make_generator(seed, "arch-shaped").permutation(sizes)
    bags = []
    for i, k in enumerate(sizes):
        refs = tuple(f"images/{i:05d}_{j}.png" for j in range(int(k)))
        source = "book" if i % 3 else "article"
        bags.append(Bag(f"bag{i:05d}", refs, f"caption of bag {i} with {int(k)} images", source))
    return bags
