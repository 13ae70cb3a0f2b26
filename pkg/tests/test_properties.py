"""Property-based checks of the library's invariants."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hreid.data import Attribute, AttributeSchema, Condition, attribute_histogram, \
    condition_mask, filter_by_conditions
from hreid.engine import QueryResult, RouteTrace, index_gallery, query, route
from hreid.evaluation import GroundTruth, mean_average_precision, rank1, worst_case_cost
from hreid.nn import Network, NetworkSpec, forward_batch
from hreid.tree import BuildConfig, DifficultyRank, Hierarchy, HierarchyNode, build_structure

from conftest import make_dataset

SETTINGS = settings(max_examples=60, deadline=None,
                    suppress_health_check=[HealthCheck.too_slow])

N_ATTRS = 3


@st.composite
def labeled(draw, min_size=1, max_size=40, unlabeled=True):
    n = draw(st.integers(min_size, max_size))
    low = -1 if unlabeled else 0
    rows = draw(st.lists(st.lists(st.integers(low, 1), min_size=N_ATTRS, max_size=N_ATTRS),
                         min_size=n, max_size=n))
    # unlabeled cells are only legal outside the train split
    return make_dataset(rows, splits=["gallery" if unlabeled else "train"] * n)


conditions = st.lists(st.builds(Condition, st.sampled_from(["a0", "a1", "a2"]),
                                st.integers(0, 1)), max_size=4)


# -- data ---------------------------------------------------------------------

@SETTINGS
@given(labeled(), conditions)
def test_filter_is_idempotent(ds, conds):
    once = filter_by_conditions(ds, conds)
    assert filter_by_conditions(once, conds) == once


@SETTINGS
@given(labeled(), conditions, conditions)
def test_filter_order_independent(ds, a, b):
    assert filter_by_conditions(filter_by_conditions(ds, a), b) == \
        filter_by_conditions(ds, a + b) == filter_by_conditions(filter_by_conditions(ds, b), a)


@SETTINGS
@given(labeled(), conditions, st.sampled_from(["a0", "a1", "a2"]))
def test_histogram_never_grows_under_filtering(ds, conds, attr):
    parent = attribute_histogram(ds, attr)
    child = attribute_histogram(filter_by_conditions(ds, conds), attr)
    assert all(c <= p for c, p in zip(child, parent))


# -- tree structure -------------------------------------------------------------

@SETTINGS
@given(labeled(min_size=2, max_size=80, unlabeled=False),
       st.permutations(["a0", "a1", "a2"]), st.integers(1, 3), st.integers(1, 10),
       st.floats(0.55, 0.95))
def test_tree_well_formed(ds, order, max_depth, min_samples, high):
    cfg = BuildConfig(max_depth=max_depth, min_node_samples=min_samples,
                      weak_band_low=1.0 - high, weak_band_high=high)
    rank = DifficultyRank(tuple((a, i / 10) for i, a in enumerate(order)))
    h = build_structure(ds, cfg, rank=rank)
    reached = np.zeros(len(ds), dtype=int)
    for path in h.paths():
        attrs = [n.attribute for n in path[:-1]]
        assert len(attrs) == len(set(attrs))
        for parent, child in zip(path, path[1:]):
            pm, cm = condition_mask(ds, parent.conditions), condition_mask(ds, child.conditions)
            assert not (cm & ~pm).any()
        reached += condition_mask(ds, path[-1].conditions)
    assert (reached == 1).all()


# -- routing --------------------------------------------------------------------

SCHEMA = AttributeSchema((Attribute("a", ("x", "y")), Attribute("b", ("x", "y"))))


def _random_tree(seed: int, width: int = 3, dim: int = 2) -> Hierarchy:
    rng = np.random.default_rng(seed)

    def net(in_dim, classes):
        n = Network.initialize(NetworkSpec(in_dim, (width,), 2, classes), rng)
        if classes:
            n.head = (rng.normal(size=(2, classes)), rng.normal(size=classes))
        return n

    def node(node_id, conds, attribute, children, in_dim):
        n = net(in_dim, 2 if attribute else 0)
        return HierarchyNode(node_id, tuple(conds), attribute, children, 1, n.spec, n)

    kids = {}
    for v in (0, 1):
        c = [Condition("a", v)]
        grand = {w: node(f"root/a={v}/b={w}", c + [Condition("b", w)], None, {}, width)
                 for w in (0, 1)}
        kids[v] = node(f"root/a={v}", c, "b", grand, width)
    return Hierarchy(SCHEMA, dim, node("root", [], "a", kids, dim))


points = st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=2)


@SETTINGS
@given(st.integers(0, 2**16), points)
def test_routing_deterministic_and_cost_exact(seed, x):
    h = _random_tree(seed)
    a, b = route(h, np.array(x)), route(_random_tree(seed), np.array(x))
    assert a.node_ids == b.node_ids and a.flops_spent == b.flops_spent
    assert np.array_equal(a.leaf_embedding, b.leaf_embedding)
    assert a.flops_spent == sum(h.node(n).cost.flops for n in a.node_ids)
    assert len(a.decisions) == len(a.node_ids) - 1


@SETTINGS
@given(st.integers(0, 2**16), st.lists(points, min_size=1, max_size=12), st.data())
def test_duplicate_of_gallery_sample_is_found(seed, gallery_pts, data):
    h = _random_tree(seed)
    g = make_dataset([[0, 0]] * len(gallery_pts), splits=["gallery"] * len(gallery_pts),
                     features=np.asarray(gallery_pts, np.float32), schema=SCHEMA)
    idx = index_gallery(h, g, "predicted")
    i = data.draw(st.integers(0, len(g) - 1))
    r = query(h, idx, g.features[i], top_k=None)
    assert r.route.leaf_id == idx.leaf_of[i]
    assert r.fallback_node is None
    assert r.matches[0][1] == 0.0
    assert str(g.sample_ids[i]) in [s for s, d in r.matches if d == 0.0]
    assert r.distances_computed <= len(g)
    ds = [d for _, d in r.matches]
    assert ds == sorted(ds)


@SETTINGS
@given(st.integers(0, 2**16), points)
def test_forward_is_pure(seed, x):
    n = Network.initialize(NetworkSpec(2, (4, 3), 2, 2), seed)
    X = np.array([x])
    a, b = forward_batch(n, X), forward_batch(n, X)
    assert all(np.array_equal(p, q) for p, q in zip(a, b))


# -- metrics ----------------------------------------------------------------------

def _results(rankings):
    trace = RouteTrace(("root",), (), np.zeros(1), 0)
    return [QueryResult(q, [(g, float(i)) for i, g in enumerate(r)], len(r), trace)
            for q, r in rankings.items()]


@st.composite
def retrieval(draw, single_relevant=False):
    n_g = draw(st.integers(1, 25))
    gallery = [f"g{i}" for i in range(n_g)]
    if single_relevant:
        ident = {g: f"p{i}" for i, g in enumerate(gallery)}
        queries = {f"q{j}": ident[draw(st.sampled_from(gallery))]
                   for j in range(draw(st.integers(1, 8)))}
    else:
        ident = {g: f"p{draw(st.integers(0, 4))}" for g in gallery}
        queries = {f"q{j}": f"p{draw(st.integers(0, 4))}" for j in range(draw(st.integers(1, 8)))}
    gt = GroundTruth({**ident, **queries}, {k: "c" for k in {**ident, **queries}}, tuple(gallery))
    rankings = {}
    for q in queries:
        perm = draw(st.permutations(gallery))
        rankings[q] = perm if single_relevant else perm[:draw(st.integers(1, n_g))]
    return _results(rankings), gt


@SETTINGS
@given(retrieval())
def test_map_bounded(fixture):
    results, gt = fixture
    if any(gt.relevant_count(r.query_id) for r in results):
        assert 0.0 <= mean_average_precision(results, gt) <= 1.0
    assert 0.0 <= rank1(results, gt) <= 1.0


@SETTINGS
@given(retrieval(single_relevant=True))
def test_single_relevant_item_ap_is_reciprocal_rank(fixture):
    results, gt = fixture
    rr = []
    for r in results:
        ranked = [g for g, _ in r.matches]
        rr.append(1.0 / (1 + next(i for i, g in enumerate(ranked)
                                  if gt.identity[g] == gt.identity[r.query_id])))
    assert mean_average_precision(results, gt) == pytest.approx(np.mean(rr))
    assert mean_average_precision(results, gt) >= rank1(results, gt) - 1e-12


@SETTINGS
@given(retrieval(single_relevant=True), st.data())
def test_map_equals_rank1_when_relevant_item_is_first_or_pruned(fixture, data):
    results, gt = fixture
    for r in results:
        rel = [m for m in r.matches if gt.identity[m[0]] == gt.identity[r.query_id]]
        rest = [m for m in r.matches if m not in rel]
        r.matches = rel + rest if data.draw(st.booleans()) else rest
    assert mean_average_precision(results, gt) == pytest.approx(rank1(results, gt))


@SETTINGS
@given(st.integers(0, 2**16), st.integers(1, 64))
def test_worst_case_cost_monotone_under_growth(seed, width):
    h = _random_tree(seed)
    before = worst_case_cost(h)
    leaf = h.node("root/a=0/b=0")
    n = Network.initialize(NetworkSpec(3, (width,), 2, 0), seed)
    leaf.children = {0: HierarchyNode("extra", (), None, {}, 1, n.spec, n)}
    after = worst_case_cost(h)
    assert after[0] >= before[0] and after[1] >= before[1]
