"""Frozen-feature probes: multi-depth extraction, decoder-depth x dropout grid search, reports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .corpus import load_image
from .encoder import TAP_COUNT
from .metrics import accuracy, multilabel_avg_accuracy
from .nn import Adam, EarlyStopping, Linear, Module, ModuleList
from .rng import make_generator
from .tensor import Tensor, no_grad

DEPTHS = (0, 1, 3)
DROPOUTS = (0.0, 0.25, 0.5)
HEAD_KINDS = ("softmax", "sigmoid")


@dataclass
class ProbeConfig:
    decoder_depth: int = 0
    hidden_width: int = 512
    dropout: float = 0.0
    tap: int = TAP_COUNT
    head: str = "softmax"
    lr: float = 1e-3
    patience: int = 10
    max_epochs: int = 200
    batch_size: int = 64
    min_check_steps: int = 20     # optimizer steps between validation checks, for tiny splits

    def __post_init__(self):
        if self.decoder_depth < 0:
            raise ValueError("decoder depth must be >= 0")
        if self.head not in HEAD_KINDS:
            raise ValueError(f"head must be one of {HEAD_KINDS}")
        if not 1 <= self.tap <= TAP_COUNT:
            raise ValueError(f"tap must be in 1..{TAP_COUNT}")


@dataclass
class TaskSpec:
    task_id: str
    kind: str                 # "single-label", "multi-label" or "captioning"
    train: tuple
    val: tuple
    test: tuple | None = None
    arity: int = 2

    @property
    def head(self) -> str:
        return "sigmoid" if self.kind == "multi-label" else "softmax"


@dataclass
class Grid:
    taps: tuple = tuple(range(1, TAP_COUNT + 1))
    depths: tuple = DEPTHS
    dropouts: tuple = DROPOUTS
    hidden_width: int = 512

    def cells(self):
        return [(t, d, p) for t in self.taps for d in self.depths for p in self.dropouts]


class ProbeDecoder(Module):
    """``depth`` x (linear, ReLU, dropout) blocks then a linear output head, on standardised features."""

    def __init__(self, n_in: int, n_out: int, cfg: ProbeConfig, rng: np.random.Generator,
                 mean: np.ndarray, std: np.ndarray):
        width = n_in
        hidden = []
        for _ in range(cfg.decoder_depth):
            hidden.append(Linear(width, cfg.hidden_width, rng))
            width = cfg.hidden_width
        self.hidden = ModuleList(hidden)
        self.head = Linear(width, n_out, rng)
        self._dropout = cfg.dropout
        self._rng = rng
        self._mean, self._std = mean.astype(np.float32), std.astype(np.float32)

    def __call__(self, x) -> Tensor:
        x = Tensor(((np.asarray(x, dtype=np.float32) - self._mean) / self._std))
        for layer in self.hidden:
            x = F.dropout(layer(x).relu(), self._dropout, self._rng, self.training)
        return self.head(x)

    def predict(self, x, head: str) -> np.ndarray:
        self.eval()
        with no_grad():
            z = self(x).data
        return (z > 0).astype(np.int64) if head == "sigmoid" else z.argmax(axis=1)


def _metric(preds, labels, head):
    return multilabel_avg_accuracy(preds, labels) if head == "sigmoid" else accuracy(preds, labels)


def _check_order(n: int, config: ProbeConfig, rng) -> np.ndarray:
    """Sample order for one validation check: whole shuffled passes, at least ``min_check_steps`` batches."""
    per_pass = -(-n // config.batch_size)
    passes = max(1, -(-config.min_check_steps // per_pass))
    return np.concatenate([rng.permutation(n) for _ in range(passes)])


def train_probe(train: tuple, val: tuple, config: ProbeConfig, seed: int) -> tuple[ProbeDecoder, float]:
    """Adam with early stopping on the validation metric; the best epoch's weights are kept."""
    xtr, ytr = np.asarray(train[0]), np.asarray(train[1])
    xva, yva = np.asarray(val[0]), np.asarray(val[1])
    if len(xtr) == 0 or len(xva) == 0:
        raise ValueError("probe training needs non-empty train and validation splits")
    if len(xtr) != len(ytr) or len(xva) != len(yva):
        raise ValueError("features and labels are not aligned")
    n_out = ytr.shape[1] if config.head == "sigmoid" else int(max(ytr.max(), yva.max())) + 1
    rng = make_generator(seed, "probe", config.decoder_depth, config.dropout, config.tap)
    std = xtr.std(axis=0)
    probe = ProbeDecoder(xtr.shape[1], n_out, config, rng, xtr.mean(axis=0), np.where(std > 1e-6, std, 1.0))
    opt = Adam(probe.parameters(), lr=config.lr)
    stopper = EarlyStopping(config.patience, mode="max")
    best_state = probe.state_dict()
    for _ in range(config.max_epochs):
        probe.train()
        order = _check_order(len(xtr), config, rng)
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            opt.zero_grad()
            logits = probe(xtr[idx])
            if config.head == "sigmoid":
                loss = F.sigmoid_binary_cross_entropy(logits, ytr[idx])
            else:
                loss = F.softmax_cross_entropy(logits, ytr[idx])
            loss.backward()
            opt.step()
        if stopper.step(_metric(probe.predict(xva, config.head), yva, config.head)):
            best_state = probe.state_dict()
        if stopper.should_stop:
            break
    probe.load_state_dict(best_state)
    probe.eval()
    return probe, float(stopper.best)


def extract_features(encoder, tap: int, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Globally average-pooled features at ``tap``, one row per image, in input order."""
    prev = encoder.training
    encoder.eval()
    rows = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                chunk = np.asarray(images[start:start + batch_size], dtype=np.float32)
                rows.append(F.global_avg_pool(encoder(Tensor(chunk), tap)).data)
    finally:
        encoder.train(prev)
    return np.concatenate(rows).astype(np.float32) if rows else np.zeros((0, 0), np.float32)


def select_cell(cells: dict) -> tuple:
    """Argmax of validation metric; ties prefer smaller depth, then smaller dropout, then deeper tap."""
    return max(cells, key=lambda c: (cells[c], -c[1], -c[2], c[0]))


@dataclass
class ProbeReport:
    cells: dict = field(default_factory=dict)   # (tap, depth, dropout) -> validation metric
    selected: tuple | None = None
    test_metric: float | None = None
    model: str = "encoder"

    def matrix(self) -> dict:
        """Best-over-dropout validation metric per (tap, depth)."""
        out = {}
        for (tap, depth, _), m in self.cells.items():
            key = (tap, depth)
            out[key] = max(out.get(key, -np.inf), m)
        return out

    def to_csv(self) -> str:
        mat = self.matrix()
        taps = sorted({t for t, _ in mat})
        depths = sorted({d for _, d in mat})
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model"] + [f"depth_{d}" for d in depths])
        for t in taps:
            w.writerow([f"{self.model}_tap{t}"] + [repr(float(mat[(t, d)])) if (t, d) in mat else "" for d in depths])
        return buf.getvalue()

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tap", "depth", "dropout", "val_metric"])
        for (t, d, p), m in sorted(self.cells.items()):
            w.writerow([t, d, p, repr(float(m))])
        return buf.getvalue()

    def to_json(self) -> str:
        sel = None if self.selected is None else dict(zip(("tap", "depth", "dropout"), self.selected))
        return json.dumps({"selected": sel, "val_metric": self.cells.get(self.selected),
                           "test_metric": self.test_metric, "n_cells": len(self.cells)},
                          indent=2, sort_keys=True)


def grid_search(encoder, task: TaskSpec, grid: Grid, seed: int = 0, base: ProbeConfig | None = None) -> ProbeReport:
    """One probe per (tap, depth, dropout) cell on frozen features."""
    if not grid.cells():
        raise ValueError("empty probe grid")
    base = base or ProbeConfig()
    report = ProbeReport()
    features = {}
    probes = {}
    for tap in grid.taps:
        features[tap] = {split: extract_features(encoder, tap, getattr(task, split)[0])
                         for split in ("train", "val", "test") if getattr(task, split) is not None}
    for tap, depth, p in grid.cells():
        cfg = ProbeConfig(**{**asdict(base), "decoder_depth": depth, "dropout": p, "tap": tap,
                             "hidden_width": grid.hidden_width, "head": task.head})
        probe, metric = train_probe((features[tap]["train"], task.train[1]),
                                    (features[tap]["val"], task.val[1]), cfg, seed)
        report.cells[(tap, depth, p)] = metric
        probes[(tap, depth, p)] = probe
    report.selected = select_cell(report.cells)
    if task.test is not None:
        tap = report.selected[0]
        preds = probes[report.selected].predict(features[tap]["test"], task.head)
        report.test_metric = _metric(preds, task.test[1], task.head)
    return report


# -- dataset directories ---------------------------------------------------------

def load_class_folders(root, size: int, task_id: str | None = None) -> TaskSpec:
    """``root/<class>/<image>`` plus ``root/splits.json`` with train/val/test lists of ``<class>/<image>``."""
    root = Path(root)
    splits_path = root / "splits.json"
    if not splits_path.is_file():
        raise FileNotFoundError(f"{splits_path} not found; split files are a required input")
    splits = json.loads(splits_path.read_text())
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise ValueError(f"no class folders under {root}")
    index = {c: i for i, c in enumerate(classes)}
    seen = set()
    out = {}
    for split in ("train", "val", "test"):
        names = splits.get(split, [])
        if split != "test" and not names:
            raise ValueError(f"split {split!r} is empty")
        overlap = seen & set(names)
        if overlap:
            raise ValueError(f"splits overlap on {sorted(overlap)[:3]}")
        seen |= set(names)
        images, labels = [], []
        for name in names:
            cls = Path(name).parts[0]
            if cls not in index:
                raise ValueError(f"{name}: unknown class folder {cls!r}")
            images.append(load_image(root / name, size))
            labels.append(index[cls])
        out[split] = (np.stack(images), np.array(labels)) if names else None
    return TaskSpec(task_id or root.name, "single-label", out["train"], out["val"], out["test"], len(classes))
