import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objstyle.exceptions import InconsistentMap, InvalidPair, NonMaximalAmbiguity, WrongKind
from objstyle.image_io import SegmentationMask
from objstyle.objectmap import (
    ObjectMap,
    StpKind,
    build_map,
    classify,
    load_object_map,
    mapped_pair_masks,
    unmapped_content_mask,
    unmapped_style_mask,
)


def stripes(*labels, size=12):
    index = np.repeat(np.arange(size) * len(labels) // size, size).reshape(size, size)
    return SegmentationMask.from_index(index, labels)


def test_equal_objects_is_e():
    omap = build_map(stripes("sky", "building"), stripes("sky", "building"))
    assert omap.pairs == (("sky", "sky"), ("building", "building"))
    assert omap.kind is StpKind.E and classify(omap, 2, 2) is StpKind.E


def test_extra_content_object_is_c():
    omap = build_map(stripes("sky", "building", "lake"), stripes("sky", "building"))
    assert len(omap.pairs) == 2 and omap.unmapped_content == {"lake"}
    assert classify(omap, 3, 2) is StpKind.C


def test_user_pairs_verbatim_is_s():
    omap = build_map(stripes("sky", "grass"), stripes("sky", "grass", "tree"), [("sky", "grass"), ("grass", "sky")])
    assert omap.pairs == (("sky", "grass"), ("grass", "sky"))
    assert omap.unmapped_style == {"tree"}
    assert classify(omap, 2, 3) is StpKind.S


def test_build_map_errors():
    c, s = stripes("a", "b"), stripes("a", "c")
    with pytest.raises(NonMaximalAmbiguity):
        build_map(c, s)
    with pytest.raises(InvalidPair):
        build_map(c, s, [("a", "zzz")])
    with pytest.raises(InvalidPair):
        build_map(c, s, [("a", "a"), ("b", "a")])
    with pytest.raises(InvalidPair):
        build_map(c, s, [("a",)])


def test_classify_inconsistent():
    with pytest.raises(InconsistentMap):
        classify(ObjectMap((("a", "a"),), {"b"}, {"c"}), 2, 2)
    with pytest.raises(InconsistentMap):
        classify(ObjectMap((("a", "a"),)), 2, 1)


def test_load_object_map(tmp_path):
    p = tmp_path / "map.json"
    p.write_text(json.dumps({"pairs": [["sky", "grass"], ["grass", "sky"]]}))
    omap = load_object_map(p, stripes("sky", "grass"), stripes("sky", "grass", "tree"))
    assert omap.kind is StpKind.S and omap.to_json()["pairs"] == [["sky", "grass"], ["grass", "sky"]]
    p.write_text("[]")
    with pytest.raises(InvalidPair):
        load_object_map(p, stripes("sky"), stripes("sky"))


def test_unmapped_masks():
    cm = stripes("sky", "building", "lake")
    omap = build_map(cm, stripes("sky", "building"))
    np.testing.assert_array_equal(unmapped_content_mask(omap, cm), cm.channel("lake"))
    with pytest.raises(WrongKind):
        unmapped_style_mask(omap, cm)

    two = ObjectMap((("sky", "sky"),), {"building", "lake"})
    u = unmapped_content_mask(two, cm)
    assert u.max() == 1
    np.testing.assert_array_equal(u, cm.channel("building") + cm.channel("lake"))
    everything = ObjectMap((), {"sky", "building", "lake"})
    assert unmapped_content_mask(everything, cm).all()

    sm = stripes("sky", "grass", "tree")
    smap = build_map(stripes("sky", "grass"), sm)
    np.testing.assert_array_equal(unmapped_style_mask(smap, sm), sm.channel("tree"))
    with pytest.raises(WrongKind):
        unmapped_content_mask(smap, stripes("sky", "grass"))


def test_mapped_pair_masks():
    cm, sm = stripes("sky", "building"), stripes("sky", "building")
    pairs = mapped_pair_masks(build_map(cm, sm), cm, sm)
    assert len(pairs) == 2
    assert (sum(c for c, _ in pairs) == 1).all() and (sum(s for _, s in pairs) == 1).all()
    assert mapped_pair_masks(ObjectMap((), {"sky", "building"}), cm, sm) == []

    cs, ss = stripes("sky", "grass"), stripes("sky", "grass", "tree")
    (c0, s0), _ = mapped_pair_masks(build_map(cs, ss, [("sky", "grass"), ("grass", "sky")]), cs, ss)
    np.testing.assert_array_equal(c0, cs.channel("sky"))
    np.testing.assert_array_equal(s0, ss.channel("grass"))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.data())
def test_map_invariants_and_relabel(m, n, data):
    shared = min(m, n)
    c_labels = [f"c{i}" for i in range(m)]
    s_labels = [f"c{i}" for i in range(shared)] + [f"s{i}" for i in range(n - shared)]
    cm, sm = stripes(*c_labels, size=10), stripes(*s_labels, size=10)
    omap = build_map(cm, sm)
    assert len(omap.pairs) == shared
    assert len(omap.unmapped_content) == max(m - n, 0)
    assert len(omap.unmapped_style) == max(n - m, 0)
    kind = classify(omap, m, n)
    assert kind is (StpKind.E if m == n else StpKind.C if m > n else StpKind.S)

    # consistent relabeling with arbitrary new names leaves the kind alone
    names = data.draw(st.lists(st.text("abcdefgh", min_size=1, max_size=6), min_size=m + n, max_size=m + n,
                               unique=True))
    rename = dict(zip(sorted(set(c_labels) | set(s_labels)), names))
    relabeled = build_map(SegmentationMask(cm.channels, [rename[x] for x in cm.labels]),
                          SegmentationMask(sm.channels, [rename[x] for x in sm.labels]))
    assert classify(relabeled, m, n) is kind
