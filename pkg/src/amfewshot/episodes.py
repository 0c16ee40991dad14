"""Episode sampling at character, row or column granularity.

A character episode is the usual N-way K-shot task over distinct
characters. Row and column episodes instead draw distinct row / column
labels and fill each class by pooling the images of *all* characters in
the split that share the label, so one class may mix different
characters of the same consonant row (or vowel column). Training
streams mix the two kinds of episode according to a StreamPlan.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .alphabet import AlphabetTable
from .dataset import DatasetIndex, GlyphImage

METHODS = ("baseline", "method1", "method2")
MIX_MODES = ("alternate", "bernoulli", "block")

# stream tags keep the derived RNG sequences for distinct purposes disjoint
STREAM_PLAN, STREAM_TRAIN, STREAM_VAL, STREAM_TEST, STREAM_DUMP = range(5)


class Granularity(str, Enum):
    CHARACTER = "character"
    ROW = "row"
    COLUMN = "column"


def derive_rng(base_seed: int, *path: int) -> np.random.Generator:
    """Independent generator for (seed, stream, index, ...) tuples.

    Episode i's randomness depends only on the base seed and i, never on
    how many episodes were drawn before it, so prefetching cannot
    reorder outcomes.
    """
    return np.random.default_rng(np.random.SeedSequence([int(base_seed) & 0xFFFFFFFF, *path]))


@dataclass(frozen=True)
class EpisodeSpec:
    way: int = 5
    shot: int = 1
    queries_per_class: int = 2
    granularity: Granularity = Granularity.CHARACTER

    def __post_init__(self):
        if self.way < 2:
            raise ValueError(f"way must be >= 2, got {self.way}")
        if self.shot < 1:
            raise ValueError(f"shot must be >= 1, got {self.shot}")
        if self.queries_per_class < 1:
            raise ValueError(f"queries_per_class must be >= 1, got {self.queries_per_class}")

    @property
    def demand(self) -> int:
        """Images needed per class: shot support + queries."""
        return self.shot + self.queries_per_class

    def with_granularity(self, granularity: Granularity) -> "EpisodeSpec":
        return replace(self, granularity=Granularity(granularity))


@dataclass
class Episode:
    """One realized task: labelled support set plus query set.

    class_identities holds the original labels (char, row or column,
    depending on granularity) in local-class order, so local class k is
    the few-shot class built from identity class_identities[k].
    """

    spec: EpisodeSpec
    split: str
    class_identities: tuple
    support: list  # [(GlyphImage, local_class)], length way * shot
    query: list  # [(GlyphImage, local_class)], length way * queries_per_class


def class_label_of(glyph: GlyphImage, granularity: Granularity) -> int:
    if granularity is Granularity.CHARACTER:
        return glyph.char_label
    if granularity is Granularity.ROW:
        return glyph.row_label
    return glyph.col_label


def class_pools(index: DatasetIndex, split: str, granularity: Granularity) -> dict:
    """Map class label -> images of the split bearing it, in canonical order."""
    pools: dict[int, list[GlyphImage]] = {}
    for char_label in index.chars_in(split):
        for g in index.images_of(char_label):
            pools.setdefault(class_label_of(g, granularity), []).append(g)
    # canonical order so that rng draws are reproducible
    return {
        label: sorted(pools[label], key=lambda g: (g.char_label, g.instance_id))
        for label in sorted(pools)
    }


def sample_episode(
    index: DatasetIndex, split: str, spec: EpisodeSpec, rng: np.random.Generator
) -> Episode:
    """Draw one episode; identical (index, split, spec, seed) give
    identical episodes.

    Classes are drawn uniformly without replacement from the labels of
    the requested granularity that have at least shot+queries images in
    the split; each class's instances are then drawn uniformly without
    replacement from its pool.
    """
    pools = class_pools(index, split, spec.granularity)
    demand = spec.demand
    eligible = [label for label, pool in pools.items() if len(pool) >= demand]
    if len(eligible) < spec.way:
        largest = max((len(p) for p in pools.values()), default=0)
        if largest < demand:
            raise ValueError(
                f"insufficient pooled images: episode needs {demand} per class "
                f"(shot {spec.shot} + {spec.queries_per_class} queries) but the largest "
                f"{spec.granularity.value} pool in split '{split}' has {largest}"
            )
        raise ValueError(
            f"insufficient classes: need way={spec.way} but split '{split}' has only "
            f"{len(eligible)} {spec.granularity.value} classes with >= {demand} images"
        )
    chosen = rng.choice(len(eligible), size=spec.way, replace=False)
    identities = tuple(eligible[i] for i in chosen)
    support, query = [], []
    for local_class, label in enumerate(identities):
        pool = pools[label]
        picks = rng.choice(len(pool), size=demand, replace=False)
        for j in picks[: spec.shot]:
            support.append((pool[j], local_class))
        for j in picks[spec.shot :]:
            query.append((pool[j], local_class))
    return Episode(spec=spec, split=split, class_identities=identities, support=support, query=query)


def relabel(char_labels, granularity: Granularity, table: AlphabetTable) -> list:
    """Map character labels to the labels of a coarser granularity."""
    granularity = Granularity(granularity)
    if granularity is Granularity.CHARACTER:
        return list(char_labels)
    if granularity is Granularity.ROW:
        return [table.row_of(c) for c in char_labels]
    return [table.col_of(c) for c in char_labels]


def check_episode(ep: Episode) -> list:
    """Return a list of invariant violations (empty when well formed)."""
    violations = []
    spec = ep.spec
    if len(set(ep.class_identities)) != spec.way:
        violations.append(
            f"expected {spec.way} distinct class identities, got {ep.class_identities}"
        )
    if len(ep.support) != spec.way * spec.shot:
        violations.append(f"support size {len(ep.support)} != way*shot = {spec.way * spec.shot}")
    if len(ep.query) != spec.way * spec.queries_per_class:
        violations.append(
            f"query size {len(ep.query)} != way*queries = {spec.way * spec.queries_per_class}"
        )
    support_ids = [(g.char_label, g.instance_id) for g, _ in ep.support]
    query_ids = [(g.char_label, g.instance_id) for g, _ in ep.query]
    dup = set(support_ids) & set(query_ids)
    if dup:
        violations.append(f"instances appear in both support and query: {sorted(dup)}")
    if len(set(support_ids)) != len(support_ids):
        violations.append("duplicate instance inside support")
    if len(set(query_ids)) != len(query_ids):
        violations.append("duplicate instance inside query")
    for name, items, per_class in (
        ("support", ep.support, spec.shot),
        ("query", ep.query, spec.queries_per_class),
    ):
        counts = [0] * spec.way
        for g, local in items:
            if not 0 <= local < spec.way:
                violations.append(f"{name} local class {local} outside 0..{spec.way - 1}")
                continue
            counts[local] += 1
            expected = ep.class_identities[local]
            if class_label_of(g, spec.granularity) != expected:
                violations.append(
                    f"{name} item char {g.char_label} has {spec.granularity.value} label "
                    f"{class_label_of(g, spec.granularity)}, class {local} is identity {expected}"
                )
        bad = {k: c for k, c in enumerate(counts) if c != per_class}
        if bad:
            violations.append(f"{name} per-class counts off: {bad} (expected {per_class} each)")
    return violations


@dataclass(frozen=True)
class StreamPlan:
    """Deterministic granularity schedule for a training stream."""

    method: str
    total_episodes: int
    schedule: tuple  # Granularity per episode index

    def counts(self) -> dict:
        out = {}
        for g in self.schedule:
            out[g] = out.get(g, 0) + 1
        return out


AUX_GRANULARITY = {
    "baseline": None,
    "method1": Granularity.ROW,
    "method2": Granularity.COLUMN,
}


def make_stream_plan(
    method: str,
    total_episodes: int,
    base_spec: EpisodeSpec,
    mix_mode: str = "alternate",
    seed: int = 0,
) -> StreamPlan:
    """Build the episode schedule for a method.

    The baseline is all character episodes. method1 / method2 replace
    half of them with row / column episodes. The default "alternate"
    mix strictly interleaves starting with character (so any even prefix
    is exactly half and half); "block" runs all character episodes first;
    "bernoulli" flips a seeded coin per episode, which only approximates
    the half/half split.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    if mix_mode not in MIX_MODES:
        raise ValueError(f"unknown mix_mode {mix_mode!r}, expected one of {MIX_MODES}")
    if total_episodes < 1:
        raise ValueError(f"total_episodes must be >= 1, got {total_episodes}")
    if base_spec.granularity is not Granularity.CHARACTER:
        raise ValueError("base_spec must be character granularity; the plan swaps in the others")
    aux = AUX_GRANULARITY[method]
    char = Granularity.CHARACTER
    if aux is None:
        schedule = (char,) * total_episodes
    elif mix_mode == "alternate":
        schedule = tuple(char if i % 2 == 0 else aux for i in range(total_episodes))
    elif mix_mode == "block":
        n_char = math.ceil(total_episodes / 2)
        schedule = (char,) * n_char + (aux,) * (total_episodes - n_char)
    else:  # bernoulli
        rng = derive_rng(seed, STREAM_PLAN)
        schedule = tuple(char if rng.random() < 0.5 else aux for i in range(total_episodes))
    if mix_mode != "bernoulli" and aux is not None:
        assert schedule.count(char) == math.ceil(total_episodes / 2)
    return StreamPlan(method=method, total_episodes=total_episodes, schedule=schedule)
