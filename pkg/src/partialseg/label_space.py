"""Global label space, per-dataset merge partitions and exclusion sets.

Masks are plain integer arrays. A mask is in the *global* space when its
values index ``LabelSpace.names``, and in a *merged* space when its values
index the groups of a :class:`MergePartition`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from partialseg.errors import EmptyKeptSet, InvalidIndex, UnlabeledIndex, VersionMismatch

BACKGROUND = 0


@dataclass(frozen=True)
class LabelSpace:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("a label space needs at least 2 classes (background + 1)")
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique: {names}")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def foreground(self) -> tuple[int, ...]:
        return tuple(range(1, self.num_classes))

    def check_index(self, n: int) -> int:
        if isinstance(n, (bool, np.bool_)) or not isinstance(n, (int, np.integer)):
            raise InvalidIndex(f"class index must be an integer, got {n!r}")
        if not 0 <= int(n) < self.num_classes:
            raise InvalidIndex(f"class index {n} outside [0, {self.num_classes})")
        return int(n)


@dataclass(frozen=True)
class MergePartition:
    """Ordered groups of global classes; group ``m`` is the merged class m.

    The group holding background always comes first, so merged label 0 is
    the (possibly merged) background.
    """

    space: LabelSpace
    groups: tuple[frozenset[int], ...]
    lookup: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        n = self.space.num_classes
        groups = tuple(frozenset(int(self.space.check_index(k)) for k in g) for g in self.groups)
        object.__setattr__(self, "groups", groups)
        if not 1 <= len(groups) <= n:
            raise ValueError(f"need 1 <= M <= {n} groups, got {len(groups)}")
        if any(not g for g in groups):
            raise ValueError("groups must be non-empty")
        lookup = np.full(n, -1, dtype=np.int64)
        for m, g in enumerate(groups):
            for k in g:
                if lookup[k] >= 0:
                    raise ValueError(f"class {k} appears in groups {lookup[k]} and {m}")
                lookup[k] = m
        if (lookup < 0).any():
            missing = np.flatnonzero(lookup < 0).tolist()
            raise ValueError(f"partition does not cover classes {missing}")
        if BACKGROUND not in groups[0]:
            raise ValueError("the background class must belong to the first group")
        lookup.setflags(write=False)
        object.__setattr__(self, "lookup", lookup)

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    @property
    def is_identity(self) -> bool:
        return self.num_groups == self.space.num_classes

    @property
    def kept(self) -> tuple[int, ...]:
        """Foreground classes that keep their own (singleton) merged label."""
        return tuple(
            next(iter(g)) for g in self.groups if len(g) == 1 and BACKGROUND not in g
        )

    def membership(self) -> np.ndarray:
        """M x N indicator matrix, ``[m, j] = 1`` iff class j is in group m."""
        out = np.zeros((self.num_groups, self.space.num_classes))
        out[self.lookup, np.arange(self.space.num_classes)] = 1.0
        return out

    def __eq__(self, other):
        if not isinstance(other, MergePartition):
            return NotImplemented
        return self.space == other.space and self.groups == other.groups

    def __hash__(self):
        return hash((self.space, self.groups))


@dataclass(frozen=True)
class ExclusionMap:
    space: LabelSpace
    excluded: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.excluded) != self.space.num_classes:
            raise ValueError(
                f"need one exclusion set per class ({self.space.num_classes}), "
                f"got {len(self.excluded)}"
            )
        cleaned = []
        for n, members in enumerate(self.excluded):
            members = tuple(self.space.check_index(k) for k in members)
            if n in members:
                raise ValueError(f"class {n} cannot exclude itself")
            cleaned.append(members)
        object.__setattr__(self, "excluded", tuple(cleaned))

    @classmethod
    def full(cls, space: LabelSpace, include_background: bool = True) -> "ExclusionMap":
        """Every class excludes every other class.

        With ``include_background=False`` background neither excludes nor is
        excluded by anything.
        """
        n = space.num_classes
        sets = []
        for c in range(n):
            if include_background:
                sets.append(tuple(k for k in range(n) if k != c))
            elif c == BACKGROUND:
                sets.append(())
            else:
                sets.append(tuple(k for k in range(1, n) if k != c))
        return cls(space, tuple(sets))

    def matrix(self) -> np.ndarray:
        """N x N matrix whose row n is the exclusion vector of class n."""
        return np.stack([exclusion_vector(self, n) for n in range(self.space.num_classes)])

    def merged_matrix(self, partition: MergePartition) -> np.ndarray:
        """M x N exclusion vectors indexed by merged label.

        A singleton group takes its class's exclusion vector; merged
        background groups get zeros because the true class is unknown there.
        """
        if partition.space != self.space:
            raise ValueError("partition and exclusion map use different label spaces")
        full = self.matrix()
        out = np.zeros((partition.num_groups, self.space.num_classes))
        for m, g in enumerate(partition.groups):
            if len(g) == 1:
                out[m] = full[next(iter(g))]
        return out


def identity_partition(space: LabelSpace) -> MergePartition:
    return MergePartition(space, tuple(frozenset([n]) for n in range(space.num_classes)))


def single_organ_partition(space: LabelSpace, kept: Iterable[int]) -> MergePartition:
    """Keep ``kept`` as singleton groups and merge everything else into background."""
    kept = sorted({space.check_index(k) for k in kept})
    if not kept:
        raise EmptyKeptSet("a partial dataset must keep at least one class")
    if BACKGROUND in kept:
        raise InvalidIndex("background cannot be a kept class")
    rest = frozenset(k for k in range(space.num_classes) if k not in kept)
    return MergePartition(space, (rest,) + tuple(frozenset([k]) for k in kept))


def exclusion_vector(exmap: ExclusionMap, n: int) -> np.ndarray:
    """Sum of the one-hot vectors of the members of E_n."""
    n = exmap.space.check_index(n)
    vec = np.zeros(exmap.space.num_classes, dtype=np.int64)
    np.add.at(vec, list(exmap.excluded[n]), 1)
    return vec


def project_labels(mask: np.ndarray, partition: MergePartition) -> np.ndarray:
    """Map a global-space mask to the partition's merged space."""
    mask = np.asarray(mask)
    if mask.size and (mask.min() < 0 or mask.max() >= partition.space.num_classes):
        bad = mask[(mask < 0) | (mask >= partition.space.num_classes)]
        raise UnlabeledIndex(f"mask values {np.unique(bad).tolist()} not covered by the partition")
    return partition.lookup[mask.astype(np.int64)]


# JSON documents ------------------------------------------------------------


def dump_label_config(
    space: LabelSpace,
    partitions: Mapping[str, MergePartition],
    exmap: ExclusionMap | None = None,
) -> dict:
    doc = {
        "classes": list(space.names),
        "datasets": [
            {"id": ds_id, "kept": list(p.kept) if not p.is_identity else list(space.foreground)}
            for ds_id, p in partitions.items()
        ],
    }
    if exmap is not None:
        doc["exclusion"] = {str(n): list(members) for n, members in enumerate(exmap.excluded)}
    return doc


def load_label_config(
    doc: Mapping,
) -> tuple[LabelSpace, dict[str, MergePartition], ExclusionMap]:
    """Inverse of :func:`dump_label_config`; missing exclusion means full exclusion."""
    try:
        space = LabelSpace(tuple(doc["classes"]))
        partitions = {}
        for entry in doc.get("datasets", []):
            kept = [int(k) for k in entry["kept"]]
            for k in kept:
                if not 0 < k < space.num_classes:
                    raise VersionMismatch(
                        f"dataset {entry['id']!r} keeps class {k}, which is not in {space.names}"
                    )
            partitions[str(entry["id"])] = _partition_for(space, kept)
        if "exclusion" in doc:
            sets: list[Sequence[int]] = [()] * space.num_classes
            for key, members in doc["exclusion"].items():
                n = int(key)
                if not 0 <= n < space.num_classes or any(
                    not 0 <= int(k) < space.num_classes for k in members
                ):
                    raise VersionMismatch(f"exclusion entry {key}: {members} references unknown classes")
                sets[n] = tuple(int(k) for k in members)
            exmap = ExclusionMap(space, tuple(sets))
        else:
            exmap = ExclusionMap.full(space)
    except (KeyError, TypeError) as exc:
        raise VersionMismatch(f"malformed label config: {exc!r}") from exc
    return space, partitions, exmap


def _partition_for(space: LabelSpace, kept: Sequence[int]) -> MergePartition:
    if sorted(set(kept)) == list(space.foreground):
        return identity_partition(space)
    return single_organ_partition(space, kept)
