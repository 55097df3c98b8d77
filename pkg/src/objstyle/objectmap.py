"""One-to-one object maps between content and style segmentations.

The map splits objects into mapped pairs and unmapped leftovers. Which side
has leftovers decides the problem kind: ``E`` (none), ``C`` (extra content
objects, style diffusion) or ``S`` (extra style objects, style utilization).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .exceptions import (
    InconsistentMap,
    InvalidPair,
    NonMaximalAmbiguity,
    UnreadableFile,
    WrongKind,
)
from .image_io import SegmentationMask


class StpKind(str, enum.Enum):
    E = "E"
    C = "C"
    S = "S"


@dataclass(frozen=True)
class ObjectMap:
    pairs: tuple = ()
    unmapped_content: frozenset = field(default_factory=frozenset)
    unmapped_style: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        pairs = tuple((str(c), str(s)) for c, s in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        object.__setattr__(self, "unmapped_content", frozenset(self.unmapped_content))
        object.__setattr__(self, "unmapped_style", frozenset(self.unmapped_style))
        _check_one_to_one(pairs)
        mapped_c = {c for c, _ in pairs}
        mapped_s = {s for _, s in pairs}
        if mapped_c & self.unmapped_content or mapped_s & self.unmapped_style:
            raise InvalidPair("a label cannot be both mapped and unmapped")

    @property
    def m(self) -> int:
        """Number of content objects covered by the map."""
        return len(self.pairs) + len(self.unmapped_content)

    @property
    def n(self) -> int:
        """Number of style objects covered by the map."""
        return len(self.pairs) + len(self.unmapped_style)

    @property
    def kind(self) -> StpKind:
        return classify(self, self.m, self.n)

    def to_json(self) -> dict:
        return {"pairs": [list(p) for p in self.pairs]}


def _check_one_to_one(pairs) -> None:
    seen_c, seen_s = set(), set()
    for c, s in pairs:
        if c in seen_c:
            raise InvalidPair(f"content label {c!r} appears in more than one pair")
        if s in seen_s:
            raise InvalidPair(f"style label {s!r} appears in more than one pair")
        seen_c.add(c)
        seen_s.add(s)


def build_map(content_mask: SegmentationMask, style_mask: SegmentationMask,
              user_pairs: Iterable[Sequence[str]] | None = None) -> ObjectMap:
    """Pair content objects with style objects.

    With ``user_pairs`` the pairs are used verbatim; otherwise labels are
    paired by exact string equality. Labels left over become unmapped.
    """
    c_labels = list(content_mask.labels)
    s_labels = list(style_mask.labels)
    if user_pairs is not None:
        pairs = [tuple(p) for p in user_pairs]
        for p in pairs:
            if len(p) != 2:
                raise InvalidPair(f"pair {p!r} must have exactly two labels")
            c, s = p
            if c not in c_labels:
                raise InvalidPair(f"unknown content label {c!r}")
            if s not in s_labels:
                raise InvalidPair(f"unknown style label {s!r}")
        _check_one_to_one(pairs)
    else:
        s_set = set(s_labels)
        pairs = [(c, c) for c in c_labels if c in s_set]
    mapped_c = {c for c, _ in pairs}
    mapped_s = {s for _, s in pairs}
    unmapped_c = [c for c in c_labels if c not in mapped_c]
    unmapped_s = [s for s in s_labels if s not in mapped_s]
    if user_pairs is None and unmapped_c and unmapped_s:
        raise NonMaximalAmbiguity(
            f"content objects {unmapped_c} and style objects {unmapped_s} have no equal names; "
            "supply the pairs explicitly"
        )
    return ObjectMap(tuple(pairs), frozenset(unmapped_c), frozenset(unmapped_s))


def load_object_map(path, content_mask: SegmentationMask, style_mask: SegmentationMask) -> ObjectMap:
    """Build a map from a ``{"pairs": [[content, style], ...]}`` JSON file."""
    try:
        with open(Path(path)) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UnreadableFile(f"cannot read object map {path}: {exc}") from exc
    if not isinstance(raw, dict) or not isinstance(raw.get("pairs"), list):
        raise InvalidPair(f"{path}: expected an object with a 'pairs' list")
    return build_map(content_mask, style_mask, raw["pairs"])


def classify(object_map: ObjectMap, m: int, n: int) -> StpKind:
    if object_map.unmapped_content and object_map.unmapped_style:
        raise InconsistentMap(
            f"both sides have unmapped objects: content {sorted(object_map.unmapped_content)}, "
            f"style {sorted(object_map.unmapped_style)}"
        )
    if m != object_map.m or n != object_map.n:
        raise InconsistentMap(f"counts m={m}, n={n} disagree with the map (m={object_map.m}, n={object_map.n})")
    if m > n:
        return StpKind.C
    if n > m:
        return StpKind.S
    return StpKind.E


def _union(mask: SegmentationMask, labels) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=np.uint8)
    for lab in labels:
        out += mask.channel(lab)
    return out


def unmapped_content_mask(object_map: ObjectMap, content_mask: SegmentationMask) -> np.ndarray:
    """Union of the unmapped content channels (the diffusion region)."""
    if object_map.kind is not StpKind.C:
        raise WrongKind(f"unmapped content mask needs an STP-C map, got {object_map.kind.value}")
    return _union(content_mask, sorted(object_map.unmapped_content))


def unmapped_style_mask(object_map: ObjectMap, style_mask: SegmentationMask) -> np.ndarray:
    """Union of the unmapped style channels (the utilization region)."""
    if object_map.kind is not StpKind.S:
        raise WrongKind(f"unmapped style mask needs an STP-S map, got {object_map.kind.value}")
    return _union(style_mask, sorted(object_map.unmapped_style))


def mapped_pair_masks(object_map: ObjectMap, content_mask: SegmentationMask,
                      style_mask: SegmentationMask) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(content_mask.channel(c), style_mask.channel(s)) for c, s in object_map.pairs]
