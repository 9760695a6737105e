"""Central finite-difference oracle for logit gradients.

The oracle only ever calls the loss for its value; it never looks at the
analytic gradient it is checking.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable, Iterable

import numpy as np

from partialseg import losses as L
from partialseg.errors import NonFiniteLoss
from partialseg.label_space import (
    ExclusionMap,
    LabelSpace,
    MergePartition,
    identity_partition,
    project_labels,
)

STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-7
REL_FLOOR = 1e-3


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_coordinate: tuple
    passed: bool
    loss: str = ""

    def to_dict(self) -> dict:
        d = asdict(self)
        d["worst_coordinate"] = [list(d["worst_coordinate"][0]), d["worst_coordinate"][1]]
        return d


def _value(out) -> float:
    v = out.value if isinstance(out, L.LossReport) else out
    v = float(v)
    if not np.isfinite(v):
        raise NonFiniteLoss(f"loss evaluated to {v}")
    return v


def finite_diff_gradient(
    loss_fn: Callable,
    logits: np.ndarray,
    *context,
    h: float = STEP,
    coords: Iterable[tuple] | None = None,
) -> np.ndarray:
    """Central differences of ``loss_fn(logits, *context)``.

    ``loss_fn`` may return a float or a LossReport (only ``.value`` is
    used). With ``coords`` only those entries are perturbed and the rest of
    the returned array is NaN.
    """
    a = np.array(logits, dtype=np.float64)
    if not np.isfinite(a).all():
        raise NonFiniteLoss("logits contain NaN or inf")
    if coords is None:
        grad = np.zeros_like(a)
        coords = np.ndindex(a.shape)
    else:
        grad = np.full_like(a, np.nan)
    for idx in coords:
        idx = tuple(idx)
        orig = a[idx]
        a[idx] = orig + h
        up = _value(loss_fn(a, *context))
        a[idx] = orig - h
        down = _value(loss_fn(a, *context))
        a[idx] = orig
        grad[idx] = (up - down) / (2.0 * h)
    return grad


def compare(analytic: np.ndarray, numeric: np.ndarray, rel_tol=REL_TOL, abs_tol=ABS_TOL, loss="") -> GradCheckReport:
    mask = ~np.isnan(numeric)
    diff = np.where(mask, np.abs(analytic - numeric), 0.0)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(np.nan_to_num(numeric))), REL_FLOOR)
    rel = diff / scale
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    max_rel = float(rel.max()) if rel.size else 0.0
    max_abs = float(diff.max()) if diff.size else 0.0
    coord = (tuple(int(i) for i in worst[:-1]), int(worst[-1])) if rel.size else ((), 0)
    return GradCheckReport(
        max_rel_error=max_rel,
        max_abs_error=max_abs,
        worst_coordinate=coord,
        passed=bool(max_rel <= rel_tol or max_abs <= abs_tol),
        loss=loss,
    )


def check(
    loss_fn: Callable,
    logits: np.ndarray,
    context: tuple = (),
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
    h: float = STEP,
    loss: str = "",
) -> GradCheckReport:
    """Compare ``loss_fn(logits, *context).gradient`` against central differences."""
    analytic = np.asarray(loss_fn(np.array(logits, dtype=np.float64), *context).gradient)
    numeric = finite_diff_gradient(loss_fn, logits, *context, h=h)
    return compare(analytic, numeric, rel_tol, abs_tol, loss=loss)


# Random trial generation -----------------------------------------------------

LOSS_NAMES = ("regular_ce", "regular_dice", "marginal_ce", "marginal_dice", "exclusion_ce", "exclusion_dice")


def random_partition(space: LabelSpace, rng: np.random.Generator) -> MergePartition:
    """Uniformly random group assignment, background group first."""
    n = space.num_classes
    m = int(rng.integers(1, n + 1))
    assign = rng.integers(0, m, size=n)
    assign[rng.permutation(n)[:m]] = np.arange(m)  # every group non-empty
    groups = [frozenset(np.flatnonzero(assign == g).tolist()) for g in range(m)]
    groups.sort(key=lambda g: (0 not in g, min(g)))
    return MergePartition(space, tuple(groups))


def random_exclusion(space: LabelSpace, rng: np.random.Generator) -> ExclusionMap:
    n = space.num_classes
    sets = []
    for c in range(n):
        others = [k for k in range(n) if k != c]
        sets.append(tuple(k for k in others if rng.random() < 0.7))
    return ExclusionMap(space, tuple(sets))


def random_case(name: str, rng: np.random.Generator, max_classes: int = 6, max_side: int = 8):
    """Draw ``(loss_fn, logits)`` for one random configuration of loss ``name``."""
    n = int(rng.integers(2, max_classes + 1))
    h, w = (int(x) for x in rng.integers(1, max_side + 1, size=2))
    space = LabelSpace(tuple(f"c{i}" for i in range(n)))
    logits = rng.normal(scale=2.0, size=(h, w, n))
    gt = rng.integers(0, n, size=(h, w))
    if name.startswith("regular"):
        partition = identity_partition(space)
    else:
        partition = random_partition(space, rng)
    merged = project_labels(gt, partition)
    exmap = random_exclusion(space, rng)
    exclusion_target = (gt, None) if rng.random() < 0.5 else (merged, partition)

    fns = {
        "regular_ce": lambda a: L.regular_ce(L.softmax(a), gt),
        "regular_dice": lambda a: L.regular_dice(L.softmax(a), gt),
        "marginal_ce": lambda a: L.marginal_ce(L.softmax(a), merged, partition),
        "marginal_dice": lambda a: L.marginal_dice(L.softmax(a), merged, partition),
        "exclusion_ce": lambda a: L.exclusion_ce(L.softmax(a), exclusion_target[0], exmap, exclusion_target[1]),
        "exclusion_dice": lambda a: L.exclusion_dice(L.softmax(a), exclusion_target[0], exmap, exclusion_target[1]),
    }
    return fns[name], logits


def run_suite(
    names: Iterable[str] = LOSS_NAMES,
    trials: int = 100,
    seed: int = 0,
    rel_tol: float = REL_TOL,
    abs_tol: float = ABS_TOL,
) -> dict[str, dict]:
    """Gradcheck every loss on ``trials`` random configurations.

    Returns one summary per loss holding the worst trial's report plus the
    number of failing trials.
    """
    out = {}
    for k, name in enumerate(names):
        if name not in LOSS_NAMES:
            raise ValueError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
        rng = np.random.default_rng([seed, k])
        worst = None
        failures = 0
        for _ in range(trials):
            fn, logits = random_case(name, rng)
            rep = check(fn, logits, rel_tol=rel_tol, abs_tol=abs_tol, loss=name)
            failures += not rep.passed
            if worst is None or rep.max_rel_error > worst.max_rel_error:
                worst = rep
        summary = worst.to_dict()
        summary.update(trials=trials, failures=failures, passed=failures == 0)
        out[name] = summary
    return out
