import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import max_rel_error
from phyloproto import tape as T
from phyloproto.config import ConvSpec, ModelConfig
from phyloproto.model import (
    TrivialTree,
    build_model,
    forward,
    node_logits,
    pool_scores,
    prototype_scores,
)
from phyloproto.phylo import parse_newick

SMALL = ModelConfig(beta=2, image_side=12, extractor=(ConvSpec(3, 2, 4), ConvSpec(3, 1, 5)))


def small_model(newick="((A,B),C);", seed=0, **kw):
    return build_model(parse_newick(newick), SMALL.replace(**kw), seed=seed)


def test_prototype_budgets():
    tree = parse_newick("((A,B),C);")
    m = build_model(tree, ModelConfig(beta=10))
    assert [h.K for h in m.heads.values()] == [20, 20]
    assert sum(h.K for h in m.heads.values()) == 40
    assert all(h.K == 2 for h in build_model(tree, ModelConfig(beta=1)).heads.values())


def test_same_seed_bitwise_identical():
    a, b = small_model(seed=3), small_model(seed=3)
    sa, sb = a.state_arrays(), b.state_arrays()
    assert list(sa) == list(sb)
    assert all(np.array_equal(sa[k], sb[k]) for k in sa)
    c = small_model(seed=4)
    assert not np.array_equal(sa["extractor.0.weight"], c.state_arrays()["extractor.0.weight"])


def test_initial_mask_logits_zero():
    m = small_model()
    assert all(not h.mask_logits.data.any() for h in m.heads.values())


def test_trivial_tree_rejected():
    with pytest.raises(TrivialTree):
        build_model(parse_newick("A;"), SMALL)


def test_zero_extractor_gives_zero_map():
    m = small_model()
    for w, b, *_ in m.layers:
        w.data[:] = 0
        b.data[:] = 0
    z = m.extract_features(np.random.default_rng(0).random((12, 12, 3)))
    assert z.shape == m.feat_shape == (6, 6, 5) and not z.data.any()


def test_feature_shape_and_mismatch():
    m = small_model()
    assert m.extract_features(np.zeros((4, 12, 12, 3))).shape == (4,) + m.feat_shape
    with pytest.raises(T.ShapeMismatch):
        m.extract_features(np.zeros((10, 10, 3)))


def test_desk_feature_map_is_26x26x64():
    assert ModelConfig().feat_side == 26 and ModelConfig().feat_channels == 64


def test_extractor_gradient():
    m = small_model(final_relu=True)
    x = np.random.default_rng(1).random((12, 12, 3))
    (w0, b0, s0, p0), (w1, b1, s1, p1) = m.layers

    def fn(a, b, c):
        m.layers = [(a, b, s0, p0), (c, b1, s1, p1)]
        return T.sum_(T.square(m.extract_features(x)))

    rng = np.random.default_rng(2)
    arrays = [rng.normal(0, 0.5, w0.shape), rng.normal(0, 0.1, b0.shape), rng.normal(0, 0.5, w1.shape)]
    assert max_rel_error(fn, arrays) < 1e-4


def test_scores_equal_prototypes_uniform():
    m = small_model()
    head = m.heads[m.tree.root]
    head.prototypes.data[:] = 0.3
    S = prototype_scores(head, np.random.default_rng(0).normal(size=(6, 6, 5)))
    assert np.allclose(S.data, 1.0 / head.K)


def test_scores_two_prototypes():
    m = small_model(beta=1)
    head = m.heads[m.tree.root]
    head.prototypes.data[:] = [[1.0, 0, 0, 0, 0], [0, 1.0, 0, 0, 0]]
    Z = np.zeros((1, 1, 5))
    Z[0, 0, :2] = [math.log(3), 0.0]
    assert np.allclose(prototype_scores(head, Z).data[0, 0], [0.75, 0.25], atol=1e-15)


def test_pool_examples():
    S = np.zeros((3, 3, 2))
    S[1, 2, 0] = 1.0
    assert pool_scores(S).data.tolist() == [1.0, 0.0]
    assert np.allclose(pool_scores(np.full((2, 2, 4), 0.25)).data, 0.25)


def test_logit_examples():
    m = small_model(beta=1)
    head = m.heads[m.tree.root]
    assert not node_logits(head, np.zeros(2)).data.any()
    head.classifier.data[:] = head.wiring
    assert node_logits(head, np.array([1.0, 0.0])).data.tolist() == pytest.approx([math.log(2), 0.0])
    head.classifier.data[:] = -head.wiring
    assert not node_logits(head, np.ones(2)).data.any()


def test_forward_probs_and_pair():
    m = small_model()
    x = np.random.default_rng(0).random((2, 12, 12, 3))
    outs = forward(m, x)
    for o in outs.values():
        assert np.allclose(o.probs.sum(-1), 1.0)
        assert np.allclose(o.score_map.data.sum(-1), 1.0)
    pair = forward(m, x, x)
    for n, (a, b) in pair.items():
        assert np.array_equal(a.score_map.data, b.score_map.data)
        assert np.array_equal(a.score_map.data, outs[n].score_map.data)


def brute_leaf_probs(model, image):
    tree = model.tree
    outs = model.forward(image[None])
    probs = []
    for leaf in tree.leaves:
        p, node = 1.0, leaf
        while node != tree.root:
            parent = tree.parent(node)
            p *= outs[parent].probs[0][tree.children(parent).index(node)]
            node = parent
        probs.append(p)
    return probs


def test_leaf_path_probabilities_sum_to_one():
    m = small_model("(((A,B),(C,D)),(E,(F,G,H)));")
    for seed in range(3):
        img = np.random.default_rng(seed).random((12, 12, 3))
        assert abs(sum(brute_leaf_probs(m, img)) - 1.0) < 1e-12


def test_classifier_sparsity_of_gradients():
    m = small_model()
    head = m.heads[m.tree.root]
    x = np.random.default_rng(0).random((3, 12, 12, 3))
    with T.Tape() as tape:
        out = m.forward(x)[m.tree.root]
        g = tape.backward(T.sum_(T.mul(out.logits, T.Tensor([[1.0, -2.0]] * 3))))
    assert not g[head.classifier][head.wiring == 0].any()


@given(st.integers(0, 1000), st.integers(0, 3), st.floats(0.0, 0.5))
@settings(max_examples=50, deadline=None)
def test_logit_monotone_in_pooled_scores(seed, i, bump):
    m = small_model(seed=seed % 7)
    head = m.heads[m.tree.root]
    rng = np.random.default_rng(seed)
    head.classifier.data = rng.normal(size=head.classifier.shape) * head.wiring
    g = rng.random(head.K) * 0.5
    before = node_logits(head, g).data
    h = g.copy()
    h[i] += bump
    after = node_logits(head, h).data
    assert after[head.child_of_proto[i]] >= before[head.child_of_proto[i]]
    assert (before >= 0).all()


@given(st.integers(0, 1000))
@settings(max_examples=20, deadline=None)
def test_shape_contract(seed):
    beta = seed % 3 + 1
    m = small_model("((A,B,C),(D,E));", beta=beta)
    outs = m.forward(np.random.default_rng(seed).random((12, 12, 3)))
    for n, o in outs.items():
        K = beta * len(m.tree.children(n))
        assert o.score_map.shape == (6, 6, K) and o.pooled.shape == (K,)
        assert ((o.pooled.data >= 0) & (o.pooled.data <= 1)).all()
        assert np.array_equal(o.pooled.data, o.score_map.data.max(axis=(0, 1)))
