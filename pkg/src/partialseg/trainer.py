"""Two-stage training with provenance-dispatched losses.

Stage 1 fits the fully labeled data with regular losses. Stage 2 draws an
equal quota of patches from every dataset each epoch and applies regular
losses to fully labeled patches and weighted marginal + exclusion losses to
partially labeled ones.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from partialseg import losses as L
from partialseg.checkpoint import label_space_hash, load_checkpoint, save_checkpoint
from partialseg.errors import DivergedLoss, GradientCheckFailed, NoForegroundAvailable
from partialseg.gradcheck import compare, finite_diff_gradient
from partialseg.label_space import ExclusionMap, MergePartition
from partialseg.model import FeatureExtractor, PixelModel, make_optimizer


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 80
    stage2_epochs: int = 80
    batch_size: int = 2
    patch_size: int = 32
    batches_per_epoch: int = 25  # stage 1
    patches_per_dataset: int = 50  # stage 2 quota per dataset per epoch
    foreground_min_fraction: float = 0.33
    initial_lr: float = 0.1
    plateau_patience: int = 10
    plateau_min_delta: float = 1e-3
    decay_factor: float = 0.8
    weights: L.LossWeights = L.LossWeights()
    optimizer: str = "adam"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    hidden: int = 32
    seed: int = 0
    paranoid_every: int = 0  # spot gradcheck every K batches; 0 disables

    def __post_init__(self):
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", L.LossWeights(**self.weights))
        object.__setattr__(self, "betas", tuple(self.betas))
        if min(self.stage1_epochs, self.stage2_epochs, self.paranoid_every) < 0:
            raise ValueError("epoch counts and paranoid_every must be non-negative")
        if self.batch_size < 1 or self.patch_size < 1 or self.batches_per_epoch < 1 or self.patches_per_dataset < 1:
            raise ValueError("batch/patch sizes and counts must be positive")
        if not 0.0 <= self.foreground_min_fraction <= 1.0:
            raise ValueError("foreground_min_fraction must lie in [0, 1]")
        if not (self.initial_lr > 0 and 0 < self.decay_factor < 1 and self.plateau_patience >= 2):
            raise ValueError("need initial_lr > 0, 0 < decay_factor < 1, plateau_patience >= 2")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"]["ce_dice_mix"] = list(d["weights"]["ce_dice_mix"])
        d["betas"] = list(d["betas"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


@dataclass
class TrainData:
    """One dataset as the trainer sees it: per-sample features and targets
    in the space of ``partition``."""

    name: str
    partition: MergePartition
    features: list[np.ndarray]
    targets: list[np.ndarray]

    def __post_init__(self):
        self.has_foreground = np.array([bool((t != 0).any()) for t in self.targets], dtype=bool)

    def __len__(self):
        return len(self.targets)


# Sampling ----------------------------------------------------------------------


def foreground_quota(cfg: TrainConfig) -> int:
    # guard against 0.33 * 3 = 0.9900000000000001 style round-up
    return min(cfg.batch_size, math.ceil(round(cfg.foreground_min_fraction * cfg.batch_size, 9)))


def sample_batch(data: TrainData, cfg: TrainConfig, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Draw ``batch_size`` patches as ``(sample_index, y0, x0)``.

    The first ``ceil(fraction * batch_size)`` patches are centred (with a
    random offset) on a foreground pixel of the visible mask; the rest are
    uniform.
    """
    if len(data) == 0:
        raise ValueError(f"dataset {data.name} is empty")
    n_fg = foreground_quota(cfg)
    fg_idx = np.flatnonzero(data.has_foreground)
    if n_fg and fg_idx.size == 0:
        raise NoForegroundAvailable(f"dataset {data.name} has no sample with foreground")
    batch = []
    for slot in range(cfg.batch_size):
        if slot < n_fg:
            i = int(fg_idx[rng.integers(fg_idx.size)])
            t = data.targets[i]
            ps_y, ps_x = min(cfg.patch_size, t.shape[0]), min(cfg.patch_size, t.shape[1])
            ys, xs = np.nonzero(t)
            k = int(rng.integers(ys.size))
            y0 = int(np.clip(ys[k] - rng.integers(ps_y), 0, t.shape[0] - ps_y))
            x0 = int(np.clip(xs[k] - rng.integers(ps_x), 0, t.shape[1] - ps_x))
        else:
            i = int(rng.integers(len(data)))
            t = data.targets[i]
            ps_y, ps_x = min(cfg.patch_size, t.shape[0]), min(cfg.patch_size, t.shape[1])
            y0 = int(rng.integers(t.shape[0] - ps_y + 1))
            x0 = int(rng.integers(t.shape[1] - ps_x + 1))
        batch.append((i, y0, x0))
    return batch


def gather(data: TrainData, batch, patch_size: int):
    feats, targets = [], []
    for i, y0, x0 in batch:
        f, t = data.features[i], data.targets[i]
        ps_y, ps_x = min(patch_size, t.shape[0]), min(patch_size, t.shape[1])
        feats.append(f[y0 : y0 + ps_y, x0 : x0 + ps_x])
        targets.append(t[y0 : y0 + ps_y, x0 : x0 + ps_x])
    return np.stack(feats), np.stack(targets)


# Scheduler -----------------------------------------------------------------------


def plateau_scheduler(window: Sequence[float], lr: float, min_delta: float = 1e-3, factor: float = 0.8) -> float:
    """New learning rate after a window of epoch-mean losses.

    Decays when the best improvement over the window's first loss is
    strictly below ``min_delta``.
    """
    if len(window) < 2:
        return lr
    improvement = window[0] - min(window[1:])
    return lr * factor if improvement < min_delta else lr


class PlateauScheduler:
    def __init__(self, lr: float, patience: int = 10, min_delta: float = 1e-3, factor: float = 0.8):
        self.lr, self.patience, self.min_delta, self.factor = lr, patience, min_delta, factor
        self.history: list[float] = []

    def step(self, epoch_loss: float) -> float:
        self.history.append(float(epoch_loss))
        if len(self.history) >= self.patience:
            window = self.history[-self.patience :]
            new_lr = plateau_scheduler(window, self.lr, self.min_delta, self.factor)
            if new_lr != self.lr:
                self.lr = new_lr
                self.history.clear()
        return self.lr


# Training ------------------------------------------------------------------------

LOG_FIELDS = ["stage", "epoch", "loss", *L.TERM_NAMES, "lr", "wall_time"]


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.records]

    def write_csv(self, path, header_lines: Sequence[str] = ()) -> None:
        with open(path, "w", newline="") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.records:
                w.writerow({k: (f"{r[k]:.10g}" if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


class Session:
    """Mutable training state carried across stages and checkpoints."""

    def __init__(self, model: PixelModel, cfg: TrainConfig, exmap: ExclusionMap | None = None):
        self.model = model
        self.cfg = cfg
        self.exmap = exmap
        self.optimizer = make_optimizer(cfg.optimizer, cfg.initial_lr, cfg.betas, cfg.eps)
        self.scheduler = PlateauScheduler(cfg.initial_lr, cfg.plateau_patience, cfg.plateau_min_delta, cfg.decay_factor)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.log = TrainLog()
        self.epochs_done = {1: 0, 2: 0}
        self.batches_seen = 0
        self.dump_path = None  # where to save state when training diverges

    def _diverged(self, message: str):
        path = None
        if self.dump_path is not None:
            path = Path(self.dump_path)
            self.save(path, {"diverged": message})
        return DivergedLoss(message, path)

    # one optimization step on one batch drawn from one dataset
    def _step(self, data: TrainData, batch) -> L.LossReport:
        feats, targets = gather(data, batch, self.cfg.patch_size)
        logits, cache = self.model.forward(feats)
        if not np.isfinite(logits).all():
            raise self._diverged(f"non-finite logits on dataset {data.name}")
        report = L.combined_loss(logits, targets, data.partition, self.cfg.weights, self.exmap)
        if not np.isfinite(report.value) or not np.isfinite(report.gradient).all():
            raise self._diverged(f"non-finite loss {report.value} on dataset {data.name}")
        grads = self.model.backward(report.gradient, cache)
        self.batches_seen += 1
        if self.cfg.paranoid_every and self.batches_seen % self.cfg.paranoid_every == 0:
            self._spot_check(data, feats, targets, logits, report, grads)
        self.optimizer.lr = self.scheduler.lr
        self.optimizer.step(self.model.params, grads)
        return report

    def _spot_check(self, data, feats, targets, logits, report, grads, n_coords=8):
        rng = np.random.default_rng([self.cfg.seed, 2, self.batches_seen])

        def loss_of_logits(a):
            return L.combined_loss(a, targets, data.partition, self.cfg.weights, self.exmap).value

        coords = [tuple(int(rng.integers(s)) for s in logits.shape) for _ in range(n_coords)]
        numeric = finite_diff_gradient(loss_of_logits, logits, coords=coords)
        rep = compare(report.gradient, numeric, loss="combined/logits")
        if not rep.passed:
            raise GradientCheckFailed(f"logit gradient spot check failed: {rep}")
        for name, p in self.model.params.items():
            idx = tuple(int(rng.integers(s)) for s in p.shape)

            def loss_of_param(v, name=name, idx=idx):
                saved = self.model.params[name][idx]
                self.model.params[name][idx] = v[0]
                try:
                    return loss_of_logits(self.model.logits(feats))
                finally:
                    self.model.params[name][idx] = saved

            num = finite_diff_gradient(loss_of_param, np.array([p[idx]]))
            rep = compare(np.array([grads[name][idx]]), num, loss=f"combined/{name}")
            if not rep.passed:
                raise GradientCheckFailed(f"parameter gradient spot check failed for {name}{idx}: {rep}")

    def _finish_epoch(self, stage: int, reports: list[L.LossReport], started: float) -> dict:
        lr_used = self.scheduler.lr
        mean = float(np.mean([r.value for r in reports]))
        rec = {"stage": stage, "epoch": len(self.log.records) + 1, "loss": mean}
        for k in L.TERM_NAMES:
            rec[k] = float(np.mean([r.terms.get(k, 0.0) for r in reports]))
        rec["lr"] = lr_used
        rec["wall_time"] = time.perf_counter() - started
        self.log.append(rec)
        self.scheduler.step(mean)
        self.epochs_done[stage] += 1
        return rec

    def run_stage1(self, full: TrainData, epochs: int, on_epoch: Callable | None = None) -> None:
        if not full.partition.is_identity:
            raise ValueError("stage 1 needs a fully labeled dataset")
        for _ in range(epochs):
            started = time.perf_counter()
            reports = [self._step(full, sample_batch(full, self.cfg, self.rng)) for _ in range(self.cfg.batches_per_epoch)]
            self._finish_epoch(1, reports, started)
            if on_epoch:
                on_epoch(self)

    def run_stage2(self, datasets: Sequence[TrainData], epochs: int, on_epoch: Callable | None = None) -> None:
        datasets = [d for d in datasets if len(d)]
        per_ds = math.ceil(self.cfg.patches_per_dataset / self.cfg.batch_size)
        for _ in range(epochs):
            started = time.perf_counter()
            jobs = np.repeat(np.arange(len(datasets)), per_ds)
            jobs = jobs[self.rng.permutation(jobs.size)]
            reports = [self._step(datasets[j], sample_batch(datasets[j], self.cfg, self.rng)) for j in jobs]
            self._finish_epoch(2, reports, started)
            if on_epoch:
                on_epoch(self)

    # persistence
    def save(self, path, extra: dict | None = None) -> None:
        header = {
            "kind": "session",
            "model": self.model.config(),
            "train_config": self.cfg.to_dict(),
            "optimizer": self.optimizer.meta(),
            "scheduler": {"lr": self.scheduler.lr, "history": self.scheduler.history},
            "rng": self.rng.bit_generator.state,
            "log": self.log.records,
            "epochs_done": {str(k): v for k, v in self.epochs_done.items()},
            "batches_seen": self.batches_seen,
            **(extra or {}),
        }
        arrays = {f"param/{k}": v for k, v in self.model.params.items()}
        arrays.update(self.optimizer.state())
        save_checkpoint(path, header, arrays)

    @classmethod
    def load(cls, path, exmap: ExclusionMap | None = None) -> tuple["Session", dict]:
        header, arrays = load_checkpoint(path)
        cfg = TrainConfig.from_dict(header["train_config"])
        mc = header["model"]
        model = PixelModel(mc["in_dim"], mc["num_classes"], mc["hidden"])
        model.params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
        s = cls(model, cfg, exmap)
        s.optimizer.load_state(arrays, header["optimizer"])
        s.scheduler.lr = header["scheduler"]["lr"]
        s.scheduler.history = list(header["scheduler"]["history"])
        s.rng.bit_generator.state = header["rng"]
        s.log = TrainLog(list(header["log"]))
        s.epochs_done = {int(k): v for k, v in header["epochs_done"].items()}
        s.batches_seen = header["batches_seen"]
        return s, header


def new_session(num_classes: int, cfg: TrainConfig, exmap: ExclusionMap | None = None, features: FeatureExtractor | None = None) -> Session:
    features = features or FeatureExtractor()
    model = PixelModel(features.dim, num_classes, cfg.hidden, np.random.default_rng([cfg.seed, 0]))
    return Session(model, cfg, exmap)


def train_stage1(model: PixelModel, full: TrainData, cfg: TrainConfig, session: Session | None = None):
    """Fit ``model`` on fully labeled data with regular losses."""
    session = session or Session(model, cfg)
    session.model = model
    session.run_stage1(full, cfg.stage1_epochs)
    return session.model, session.log


def train_stage2(model: PixelModel, datasets: Sequence[TrainData], cfg: TrainConfig, session: Session | None = None, exmap=None):
    """Joint training on every dataset with provenance-dispatched losses."""
    session = session or Session(model, cfg, exmap)
    session.model = model
    session.run_stage2(datasets, cfg.stage2_epochs)
    return session.model, session.log


def save_model(path, model: PixelModel, features: FeatureExtractor, class_names, extra: dict | None = None) -> None:
    header = {
        "kind": "model",
        "model": model.config(),
        "features": features.to_dict(),
        "classes": list(class_names),
        "label_space_hash": label_space_hash(class_names),
        **(extra or {}),
    }
    save_checkpoint(path, header, {f"param/{k}": v for k, v in model.params.items()})


def load_model(path) -> tuple[PixelModel, FeatureExtractor, dict]:
    header, arrays = load_checkpoint(path)
    mc = header["model"]
    model = PixelModel(mc["in_dim"], mc["num_classes"], mc["hidden"])
    model.params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
    return model, FeatureExtractor.from_dict(header["features"]), header
