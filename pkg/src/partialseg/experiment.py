"""Network roster, training runs and evaluation over a synthetic suite.

Networks mirror the fully/partially labeled dataset roster:

* ``F``      multi-class, fully labeled data only (stage 1 only)
* ``All``    multi-class, every dataset (stage 1 on F, then joint stage 2)
* ``F+Pi``   reduced label space of ``Pi``, trained on F and Pi
* ``Pi``     reduced label space of ``Pi``, trained on Pi alone
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from partialseg.label_space import (
    ExclusionMap,
    LabelSpace,
    MergePartition,
    identity_partition,
    project_labels,
)
from partialseg.losses import LossWeights
from partialseg.metrics import MetricsReport, evaluate_dataset, scored_classes
from partialseg.model import FeatureExtractor, PixelModel
from partialseg.synthdata import Suite
from partialseg.trainer import Session, TrainConfig, TrainData, new_session


@dataclass(frozen=True)
class NetworkPlan:
    name: str
    datasets: tuple[str, ...]
    reduce_by: str | None = None  # dataset whose partition defines the output space

    @property
    def multiclass(self) -> bool:
        return self.reduce_by is None


def network_plan(suite: Suite, name: str) -> NetworkPlan:
    ids = [d.id for d in suite.descriptors]
    full = [d.id for d in suite.descriptors if d.role == "full"]
    if name == "F":
        return NetworkPlan(name, tuple(full))
    if name == "All":
        return NetworkPlan(name, tuple(ids))
    if name.startswith("F+") and name[2:] in ids:
        return NetworkPlan(name, tuple(full) + (name[2:],), reduce_by=name[2:])
    if name in ids and suite.descriptor(name).role == "partial":
        return NetworkPlan(name, (name,), reduce_by=name)
    raise ValueError(f"unknown network {name!r}; expected F, All, F+<Pi> or <Pi> with Pi in {ids}")


def network_roster(suite: Suite) -> list[str]:
    partial = [d.id for d in suite.descriptors if d.role == "partial"]
    return ["F", *[f"F+{p}" for p in partial], *partial, "All"]


class FeatureCache:
    def __init__(self, suite: Suite, features: FeatureExtractor | None = None):
        self.suite = suite
        self.extractor = features or FeatureExtractor()
        self._cache: dict[str, np.ndarray] = {}

    def __call__(self, sample) -> np.ndarray:
        f = self._cache.get(sample.id)
        if f is None:
            f = self._cache[sample.id] = self.extractor(sample.image)
        return f


def reduced_space(partition: MergePartition) -> tuple[LabelSpace, np.ndarray]:
    """Label space of a reduced network and the map from its labels to global classes."""
    names = ("background",) + tuple(partition.space.names[k] for k in partition.kept)
    to_global = np.array((0,) + partition.kept, dtype=np.int64)
    return LabelSpace(names), to_global


def output_space(suite: Suite, plan: NetworkPlan) -> tuple[LabelSpace, np.ndarray]:
    if plan.multiclass:
        return suite.space, np.arange(suite.space.num_classes)
    return reduced_space(suite.descriptor(plan.reduce_by).partition)


def train_data(suite: Suite, plan: NetworkPlan, cache: FeatureCache, split: str = "train") -> list[TrainData]:
    out = []
    if plan.multiclass:
        for ds_id in plan.datasets:
            samples = suite.split(ds_id, split)
            out.append(TrainData(ds_id, suite.descriptor(ds_id).partition, [cache(s) for s in samples], [s.gt_visible for s in samples]))
        return out
    reducer = suite.descriptor(plan.reduce_by).partition
    space, _ = reduced_space(reducer)
    for ds_id in plan.datasets:
        samples = suite.split(ds_id, split)
        out.append(TrainData(ds_id, identity_partition(space), [cache(s) for s in samples], [project_labels(s.gt_full, reducer) for s in samples]))
    return out


def train_network(
    suite: Suite,
    name: str,
    cfg: TrainConfig,
    cache: FeatureCache,
    exmap: ExclusionMap | None = None,
    stage1: Session | None = None,
    on_epoch: Callable | None = None,
    session: Session | None = None,
    dump_path=None,
) -> Session:
    """Train one network. ``stage1`` may hold a finished stage-1 session of
    the same seed/config to start ``All`` from; ``session`` resumes a
    partially trained run."""
    plan = network_plan(suite, name)
    space, _ = output_space(suite, plan)
    data = train_data(suite, plan, cache)
    if exmap is None:
        exmap = ExclusionMap.full(space)
    if session is None:
        if stage1 is not None and plan.name == "All":
            session = copy.deepcopy(stage1)
            session.cfg = cfg
            session.exmap = exmap
        else:
            session = new_session(space.num_classes, cfg, exmap, cache.extractor)
    session.dump_path = dump_path
    full = [d for d in data if d.partition.is_identity and d.name in {x.id for x in suite.descriptors if x.role == "full"}]
    if plan.name == "All" or plan.name == "F":
        remaining = cfg.stage1_epochs - session.epochs_done[1]
        if remaining > 0:
            session.run_stage1(full[0], remaining, on_epoch)
        if plan.name == "All":
            remaining = cfg.stage2_epochs - session.epochs_done[2]
            if remaining > 0:
                session.run_stage2(data, remaining, on_epoch)
    else:
        # reduced networks: single joint stage with regular losses in the reduced space
        epochs = cfg.stage1_epochs + (cfg.stage2_epochs if len(data) > 1 else 0)
        remaining = epochs - session.epochs_done[2]
        if remaining > 0:
            session.run_stage2(data, remaining, on_epoch)
    return session


def predict(model: PixelModel, feats: np.ndarray, to_global: np.ndarray) -> np.ndarray:
    return to_global[np.argmax(model.logits(feats), axis=-1)]


def evaluate_network(
    suite: Suite,
    name: str,
    model: PixelModel | None,
    cache: FeatureCache,
    datasets: Sequence[str] | None = None,
    predictor: Callable | None = None,
) -> dict[str, MetricsReport]:
    """Per-dataset metrics on test splits, scoring only classes that both the
    dataset annotates and the network predicts.

    ``predictor(sample) -> global label mask`` replaces the model when given.
    """
    plan = network_plan(suite, name)
    _, to_global = output_space(suite, plan)
    predicted = set(to_global.tolist()) - {0}
    if predictor is None:
        predictor = lambda s: predict(model, cache(s), to_global)
    out = {}
    for d in suite.descriptors:
        if datasets is not None and d.id not in datasets:
            continue
        classes = [c for c in scored_classes(d.partition) if c in predicted]
        samples = suite.split(d.id, "test")
        if not classes or not samples:
            continue
        preds = [predictor(s) for s in samples]
        out[d.id] = evaluate_dataset(preds, [s.gt_full for s in samples], d.partition, d.id, [s.id for s in samples], classes=classes)
    return out


def cell_dice(reports: dict[str, MetricsReport]) -> dict[tuple[str, int], float]:
    return {(ds, c): v for ds, r in reports.items() for c, v in r.per_class_dice.items()}


def cell_hd(reports: dict[str, MetricsReport]) -> dict[tuple[str, int], float]:
    return {(ds, c): v for ds, r in reports.items() for c, v in r.per_class_hausdorff.items() if not r.hd_sentinel[c]}


def mean_dice(reports: dict[str, MetricsReport]) -> float:
    """Mean over (dataset, class) cells of the per-cell mean Dice."""
    cells = cell_dice(reports)
    return float(np.mean(list(cells.values()))) if cells else float("nan")


def mean_hd(reports: dict[str, MetricsReport]) -> float:
    cells = cell_hd(reports)
    return float(np.mean(list(cells.values()))) if cells else float("nan")


def with_ratio(cfg: TrainConfig, ratio: str) -> TrainConfig:
    m, e = (float(x) for x in ratio.split(":"))
    return replace(cfg, weights=replace(cfg.weights, marginal_weight=m, exclusion_weight=e))


TABLE4_RATIOS = ("4:1", "3:1", "2:1", "1:1", "1:2", "1:3", "1:4", "1:0", "0:1")
