import json

import numpy as np
import pytest

from hreid.data import Condition
from hreid.engine import (GalleryIndex, flat_query, index_gallery, query, query_many,
                          rank_gallery, route, route_batch, write_results_jsonl)
from hreid.nn import HeadConfig, Network, NetworkSpec, TripletConfig
from hreid.synth import AttributeSpec, generate
from hreid.tree import (BuildConfig, Hierarchy, HierarchyNode, build_structure,
                        train_hierarchy)

from conftest import GENDER_DRESS, make_dataset, small_synth


def _net(head=None, bias=None):
    """2-d identity body: hidden = relu(x), embedding = hidden."""
    classes = 0 if head is None else 2
    spec = NetworkSpec(2, (2,), 2, classes)
    layers = [(np.eye(2), np.zeros(2)), (np.eye(2), np.zeros(2))]
    h = None if head is None else (np.asarray(head, float),
                                   np.zeros(2) if bias is None else np.asarray(bias, float))
    return Network(spec, layers, h, body_frozen=True)


def _node(node_id, conds, attribute=None, net=None, children=None):
    net = net or _net()
    return HierarchyNode(node_id, tuple(conds), attribute, children or {}, 10, net.spec, net)


def hand_tree() -> Hierarchy:
    """gender at the root, dress below; the female branch prefers "no" unless
    h1 exceeds h0 by more than 2."""
    m, f = Condition("gender", 0), Condition("gender", 1)
    no, yes = Condition("dress", 0), Condition("dress", 1)
    male = _node("root/gender=male", [m], "dress", _net(np.eye(2)), {
        0: _node("root/gender=male/dress=no", [m, no]),
        1: _node("root/gender=male/dress=yes", [m, yes])})
    female = _node("root/gender=female", [f], "dress", _net(np.eye(2), [0.0, -2.0]), {
        0: _node("root/gender=female/dress=no", [f, no]),
        1: _node("root/gender=female/dress=yes", [f, yes])})
    root = _node("root", [], "gender", _net(np.eye(2)), {0: male, 1: female})
    return Hierarchy(GENDER_DRESS, 2, root)


NODE_FLOPS = 2 * (2 * 2 + 2 * 2) + 2 * 2 * 2   # body + head
LEAF_FLOPS = 2 * (2 * 2 + 2 * 2)


@pytest.mark.parametrize("x, leaf", [
    ((3, 1), "root/gender=male/dress=no"),
    ((1, 3), "root/gender=female/dress=no"),      # (1, 1) tie goes to index 0
    ((1, 4), "root/gender=female/dress=yes"),
    ((0, -1), "root/gender=male/dress=no"),       # relu zeros, tie at both levels
    ((2, 5), "root/gender=female/dress=yes"),
])
def test_route_matches_hand_simulation(x, leaf):
    t = route(hand_tree(), np.array(x, float))
    assert t.leaf_id == leaf
    assert len(t.decisions) == len(t.node_ids) - 1 == 2
    assert t.flops_spent == 2 * NODE_FLOPS + LEAF_FLOPS == 64
    assert np.allclose(t.leaf_embedding, np.maximum(x, 0))


def test_flops_spent_is_sum_over_visited_nodes():
    h = hand_tree()
    t = route(h, np.array([1.0, 4.0]))
    assert t.flops_spent == sum(h.node(n).cost.flops for n in t.node_ids)


def test_single_node_hierarchy_routes_trivially():
    net = _net()
    h = Hierarchy(GENDER_DRESS, 2, _node("root", [], net=net))
    t = route(h, np.array([0.5, 0.5]))
    assert t.node_ids == ("root",) and t.decisions == ()
    assert t.flops_spent == net.cost.flops


def test_head_forced_to_class_zero_routes_everything_to_child_zero():
    h = hand_tree()
    h.root.network.head = (np.zeros((2, 2)), np.array([1.0, 0.0]))
    X = np.random.default_rng(0).normal(size=(50, 2)) * 5
    assert all(t.node_ids[1] == "root/gender=male" for t in route_batch(h, X))


def test_route_rejects_wrong_dimension_and_untrained_tree():
    h = hand_tree()
    with pytest.raises(ValueError, match="dimension"):
        route(h, np.zeros(3))
    h.root.network = None
    with pytest.raises(ValueError, match="not trained"):
        route(h, np.zeros(2))


def test_routing_batch_equals_single_routes():
    h = hand_tree()
    X = np.random.default_rng(1).normal(size=(30, 2)) * 3
    for x, t in zip(X, route_batch(h, X)):
        s = route(h, x)
        assert s.node_ids == t.node_ids and s.flops_spent == t.flops_spent
        assert np.array_equal(s.leaf_embedding, t.leaf_embedding)


# -- gallery index --------------------------------------------------------------

def _gallery(labels, features):
    n = len(labels)
    return make_dataset(labels, identities=[f"p{i % 3}" for i in range(n)],
                        splits=["gallery"] * n, features=np.asarray(features, np.float32),
                        schema=GENDER_DRESS)


def test_ground_truth_index_follows_labels():
    g = _gallery([[0, 0], [1, 1], [1, 0], [0, 0]], [[3, 1], [3, 1], [3, 1], [1, 3]])
    idx = index_gallery(hand_tree(), g, "ground_truth")
    assert idx.leaf_of.tolist() == ["root/gender=male/dress=no", "root/gender=female/dress=yes",
                                    "root/gender=female/dress=no", "root/gender=male/dress=no"]
    assert sum(idx.partition_sizes().values()) == len(g)
    assert idx.fallback_samples == []


def test_predicted_index_follows_heads():
    g = _gallery([[0, 0], [1, 1], [1, 0]], [[3, 1], [1, 4], [1, 3]])
    idx = index_gallery(hand_tree(), g, "predicted")
    assert idx.leaf_of.tolist() == [route(hand_tree(), x).leaf_id for x in g.features]


def test_missing_label_falls_back_to_prediction(caplog):
    g = _gallery([[0, 0], [-1, -1]], [[3, 1], [1, 4]])
    with caplog.at_level("WARNING"):
        idx = index_gallery(hand_tree(), g, "ground_truth")
    assert idx.leaf_of[1] == "root/gender=female/dress=yes"
    assert idx.fallback_samples == ["s001"]
    assert "prediction" in caplog.text


def test_index_rejects_unknown_source():
    g = _gallery([[0, 0]], [[1, 1]])
    with pytest.raises(ValueError):
        index_gallery(hand_tree(), g, "oracle")


def test_index_round_trips(tmp_path):
    g = _gallery([[0, 0], [1, 1], [1, 0]], [[3, 1], [1, 4], [1, 3]])
    idx = index_gallery(hand_tree(), g, "ground_truth")
    idx.save(tmp_path / "idx.json")
    back = GalleryIndex.load(tmp_path / "idx.json")
    assert back.to_dict() == idx.to_dict()


# -- queries ------------------------------------------------------------------

def test_query_searches_only_arrival_partition():
    g = _gallery([[0, 0], [0, 0], [1, 1], [1, 0]], [[3, 1], [4, 1], [1, 4], [1, 3]])
    h = hand_tree()
    idx = index_gallery(h, g, "ground_truth")
    r = query(h, idx, np.array([3.0, 1.0]), top_k=5, query_id="q")
    assert r.distances_computed == 2 and r.fallback_node is None
    assert r.matches == [("s000", 0.0), ("s001", 1.0)]


def test_single_member_partition():
    g = _gallery([[0, 0], [1, 1]], [[3, 1], [1, 4]])
    h = hand_tree()
    r = query(h, index_gallery(h, g, "ground_truth"), np.array([2.0, 6.0]))
    assert r.distances_computed == 1 and r.matches[0][0] == "s001"


def test_empty_leaf_falls_back_to_ancestor_embedding_space():
    # nothing filed under female/dress=yes; its parent holds female/dress=no
    g = _gallery([[0, 0], [1, 0], [1, 0]], [[3, 1], [1, 3], [0.5, 2]])
    h = hand_tree()
    idx = index_gallery(h, g, "ground_truth")
    r = query(h, idx, np.array([1.0, 4.0]), top_k=None)
    assert r.fallback_node == "root/gender=female"
    assert r.distances_computed == 2
    q = r.route.embedding_at("root/gender=female")
    rows, emb = idx.node_members["root/gender=female"]
    expected = sorted((float(np.linalg.norm(e - q)), str(idx.sample_ids[i]))
                      for i, e in zip(rows, emb))
    assert [(s, d) for d, s in expected] == r.matches


def test_top_k_below_one_is_rejected():
    g = _gallery([[0, 0]], [[3, 1]])
    h = hand_tree()
    idx = index_gallery(h, g, "ground_truth")
    with pytest.raises(ValueError, match="top_k"):
        query(h, idx, np.array([1.0, 1.0]), top_k=0)


def test_rank_gallery_breaks_ties_by_sample_id():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    out = rank_gallery(np.zeros(2), emb, np.array(["c", "a", "b"]), None)
    assert [s for s, _ in out] == ["a", "b", "c"]


def test_flat_query_five_point_fixture():
    # query embeds to (1, 1); squared distances 0, 25, 4, 1, 1 by hand
    gallery = np.array([[1, 1], [4, 5], [1, 3], [2, 1], [0, 1]], float)
    ids = ["a", "b", "c", "d", "e"]
    r = flat_query(_net(), ids, gallery, np.array([1.0, 1.0]), top_k=None)
    assert r.distances_computed == 5
    assert r.matches == [("a", 0.0), ("d", 1.0), ("e", 1.0), ("c", 2.0), ("b", 5.0)]
    assert len(flat_query(_net(), ids, gallery, np.array([1.0, 1.0]), top_k=2).matches) == 2
    with pytest.raises(ValueError):
        flat_query(_net(), ids, gallery, np.array([1.0, 1.0]), top_k=0)


def test_results_jsonl(tmp_path):
    g = _gallery([[0, 0], [1, 1]], [[3, 1], [1, 4]])
    h = hand_tree()
    qs = _gallery([[0, 0], [1, 1]], [[3, 1], [1, 4]])
    results = query_many(h, index_gallery(h, g, "ground_truth"), qs, top_k=1)
    write_results_jsonl(results, tmp_path / "r.jsonl")
    lines = [json.loads(x) for x in (tmp_path / "r.jsonl").read_text().splitlines()]
    assert [x["query_id"] for x in lines] == ["s000", "s001"]
    assert lines[1]["route"]["node_ids"][-1] == "root/gender=female/dress=yes"
    assert lines[0]["matches"] == [{"sample_id": "s000", "distance": 0.0}]


# -- trained routing ------------------------------------------------------------

@pytest.mark.slow
def test_predicted_routing_tracks_head_accuracy():
    attrs = (AttributeSpec("gender", ("male", "female"), 4.0, None),)
    fractions = []
    for seed in range(5):
        ds = generate(small_synth(seed=seed, attributes=attrs, n_identities=20, images=30))
        train = ds.split("train")
        skel = build_structure(train, BuildConfig(min_node_samples=1, hidden_width=32,
                                                  embedding_dim=16, max_depth=1))
        h = train_hierarchy(skel, train, TripletConfig(max_epochs=40), HeadConfig(),
                            fixed_layers=1, seed=seed)
        gallery = ds.split("gallery")
        pred = index_gallery(h, gallery, "predicted")
        truth = index_gallery(h, gallery, "ground_truth")
        fractions.append(float((pred.leaf_of == truth.leaf_of).mean()))
    assert np.mean(fractions) >= 0.85, fractions
