"""The nine acceptance criteria, one test each.

Criteria 5, 6 and 8 train desk-size models on the 8-leaf synthetic tree and
take several minutes each on one core.
"""

import json
import math
import time
import warnings
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fd import max_rel_error
from op_table import OPS
from phyloproto import checkpoint as ckpt
from phyloproto import losses as L
from phyloproto import tape as T
from phyloproto.cli import main
from phyloproto.config import ConvSpec, ModelConfig, desk_config
from phyloproto.data import default_trait_spec, default_tree, generate_synthetic
from phyloproto.evaluation import (
    fine_grained_accuracy,
    infer,
    leaf_path_probabilities,
    part_purity,
    prototype_purity,
    unseen_accuracy,
    window_side,
)
from phyloproto.masking import (
    SpeciesUnderrepresented,
    deterministic_mask,
    gumbel_noise,
    mask_fixed_point,
    mask_loss,
    relaxed_mask,
)
from phyloproto.model import build_model
from phyloproto.phylo import parse_newick, serialize_newick, tree_digest
from phyloproto.pnm import read_pgm_bytes, read_ppm_bytes, write_pgm, write_ppm
from phyloproto.training import run_training
from test_eval import FIXTURES, brute_purity
from test_losses import LOSSES, loss_fixtures

BUDGET_S = 15 * 60
OMITTED = "node2"
HELD_OUT = "H"


# -- shared desk runs ----------------------------------------------------------------


def _desk_data(omit=()):
    tree = default_tree()
    nodes = [n for n in range(len(tree)) if tree.node_label(n) in omit]
    spec = default_trait_spec(tree, omit=nodes)
    return tree, spec, generate_synthetic(tree, spec, per_leaf=80, seed=0)


def _train(tree, train, **changes):
    model = build_model(tree, desk_config(**changes))
    start = time.perf_counter()
    run_training(model, train)
    return model, time.perf_counter() - start


@pytest.fixture(scope="session")
def omitted_data():
    return _desk_data(omit=[OMITTED])


@pytest.fixture(scope="session")
def desk_run(omitted_data):
    tree, _, ds = omitted_data
    return _train(tree, ds.by_split("train"))


@pytest.fixture(scope="session")
def ablations(omitted_data):
    tree, _, ds = omitted_data
    train = ds.by_split("train")
    return {
        "ovsp": _train(tree, train, lambdas={"ovsp": 0.0})[0],
        "disc": _train(tree, train, lambdas={"disc": 0.0})[0],
    }


def _masked(model, node):
    return deterministic_mask(model.heads[node], model.cfg.tau) < 0.5


# -- 1 --------------------------------------------------------------------------------


def test_criterion_1_gradient_fidelity(criterion):
    start = time.perf_counter()
    worst: dict[str, float] = {}
    failures = []
    seeds = range(20)

    def check(name, fn, arrays, tol=1e-4):
        err = max_rel_error(fn, arrays)
        worst[name] = max(worst.get(name, 0.0), err)
        if not err < tol:
            failures.append((name, err))

    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        for name, (make, fn) in OPS.items():
            check(f"op:{name}", fn, make(rng))
        fixtures = loss_fixtures(seed)
        for name, build in LOSSES.items():
            fn, arrays = build(fixtures)
            # tanh-based terms get the looser bound only when saturated
            saturated = name in ("tanh", "ovsp") and np.tanh(arrays[0].sum(0)).max() > 0.999
            check(f"loss:{name}", fn, arrays, 1e-3 if saturated else 1e-4)
        O = rng.uniform(-1, 0, 5)
        noise = gumbel_noise(rng, (5, 2))
        check("loss:mask", lambda M: mask_loss(M, O, 2.0, 0.5), [rng.uniform(0.05, 0.95, 5)])
        check("relaxed_mask", lambda g: T.sum_(T.mul(relaxed_mask(g, 0.5, noise), T.Tensor(O))), [rng.normal(size=(5, 2))])
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 60
    criterion(
        1, ok,
        f"{len(worst)} ops/losses x {len(seeds)} seeds, worst rel err {max(worst.values()):.1e}, {elapsed:.1f}s (< 60s)",
    )
    assert not failures, failures[:5]
    assert elapsed < 60


# -- 2 --------------------------------------------------------------------------------


def test_criterion_2_closed_form_losses(criterion):
    errs = []
    for K in (2, 5, 20):
        z = np.full((2, 4, 4, K), 1.0 / K)
        errs.append(abs(L.alignment_loss(z, z).item() - math.log(K)))
    ok_uniform = max(errs) <= 1e-9
    hot = np.zeros((2, 3, 3, 4))
    hot[..., 2] = 1.0
    ok_hot = L.alignment_loss(hot, hot).item() <= 1e-9
    tanh_val = L.tanh_loss(np.array([[0.25], [0.75]])).item()
    ok_tanh = abs(tanh_val - 0.27230) < 1e-4
    c, s = math.cos(math.pi / 3), math.sin(math.pi / 3)
    orth = [
        L.orthogonality_loss(np.eye(3, 5)).item(),
        L.orthogonality_loss(np.array([[1.0, 0.0], [1.0, 0.0]])).item(),
        L.orthogonality_loss(np.array([[1.0, 0.0], [c, s]])).item(),
    ]
    ok_orth = all(abs(a - b) <= 1e-9 for a, b in zip(orth, (0.0, 2.0, 0.5)))
    ok = ok_uniform and ok_hot and ok_tanh and ok_orth
    criterion(
        2, ok,
        f"L_A-lnK err {max(errs):.1e}; L_A one-hot ok={ok_hot}; L_T {tanh_val:.5f} vs 0.27230; "
        f"orth {[round(v, 12) for v in orth]} vs [0, 2, 0.5]",
    )
    assert ok


# -- 3 --------------------------------------------------------------------------------


def _fit_constant_mask(O, steps=2000, lr=1e-2, tau=0.5):
    gamma = T.Tensor(np.zeros((len(O), 2)), requires_grad=True)
    state = T.AdamState()
    rng = np.random.default_rng(0)
    for _ in range(steps):
        with T.Tape() as tape:
            M = relaxed_mask(gamma, tau, gumbel_noise(rng, gamma.shape))
            g = tape.backward(mask_loss(M, O, 2.0, 0.5))
        T.adam_step({"g": gamma}, {"g": g[gamma]}, state, lr=lr)
    gap = gamma.data[:, 0] - gamma.data[:, 1]
    return 0.5 * (1 + np.tanh(0.5 * gap / tau))


def test_criterion_3_mask_fixed_point(criterion):
    O = np.array([-1.0, -0.6, -0.3, -0.2, -0.1, 0.0])
    M = _fit_constant_mask(O)
    want = np.array([1.0 if mask_fixed_point(o, 2.0, 0.5) else 0.0 for o in O])
    gap = float(np.abs(M - want).max())

    tree = parse_newick("((A,B),(C,D));")
    cfg = ModelConfig(beta=2, image_side=16, extractor=(ConvSpec(3, 2, 4),), pretrain_epochs=0, main_epochs=0,
                      mask_epochs=2, batch_size=8)
    ds = generate_synthetic(tree, default_trait_spec(tree, size=3, jitter=1, image_side=16), 4, seed=0)
    m = build_model(tree, cfg)
    before = m.state_arrays()
    run_training(m, ds)
    after = m.state_arrays()
    changed = {k for k in before if before[k].tobytes() != after[k].tobytes()}
    frozen = bool(changed) and all(k.endswith("mask_logits") for k in changed)
    ok = gap < 1e-3 and frozen
    criterion(3, ok, f"max |M - keep/drop| {gap:.1e} after 2000 steps; non-mask params bitwise unchanged={frozen}")
    assert ok


# -- 4 --------------------------------------------------------------------------------


def _brute_leaf_probs(tree, probs, b):
    out = []
    for leaf in tree.leaves:
        p, node = 1.0, leaf
        while node != tree.root:
            parent = tree.parent(node)
            p *= probs[parent][b][tree.children(parent).index(node)]
            node = parent
        out.append(p)
    return np.array(out)


def test_criterion_4_tree_softmax_conservation(criterion):
    worst_sum, worst_brute = 0.0, 0.0
    for newick, seed in (("(((A,B),(C,D)),((E,F),(G,H)));", 0), ("((A,B,C),(D,(E,F,G,H)),I);", 1)):
        tree = parse_newick(newick)
        m = build_model(tree, ModelConfig(beta=2, image_side=16, extractor=(ConvSpec(3, 2, 6),), init_std=1.0), seed=seed)
        images = np.random.default_rng(seed).random((6, 16, 16, 3))
        probs = {n: o.probs for n, o in m.forward(images).items()}
        leaf = leaf_path_probabilities(tree, probs)
        worst_sum = max(worst_sum, float(np.abs(leaf.sum(1) - 1).max()))
        for b in range(len(images)):
            worst_brute = max(worst_brute, float(np.abs(leaf[b] - _brute_leaf_probs(tree, probs, b)).max()))
    ok = worst_sum < 1e-9 and worst_brute < 1e-12
    criterion(4, ok, f"max |sum - 1| {worst_sum:.1e}; max deviation from brute-force paths {worst_brute:.1e}")
    assert ok


# -- 5 --------------------------------------------------------------------------------


def test_criterion_5_synthetic_end_to_end(criterion, omitted_data, desk_run):
    tree, spec, ds = omitted_data
    model, train_s = desk_run
    val = ds.by_split("val")
    start = time.perf_counter()
    inf = infer(model, val.images)
    acc = fine_grained_accuracy(model, val, inf)
    rep = part_purity(model, val, inference=inf)
    elapsed = train_s + time.perf_counter() - start

    missing = []
    for node, head in model.heads.items():
        for child in tree.children(node):
            if child not in spec.glyphs:
                continue
            label = tree.node_label(child)
            good = [r for r in rep.records
                    if r.node == node and r.child == child and not r.masked and r.purity >= 0.8 and r.best_part == label]
            if not good:
                missing.append(label)

    omitted = next(n for n in range(len(tree)) if tree.node_label(n) == OMITTED)
    parent = tree.parent(omitted)
    head = model.heads[parent]
    masked = _masked(model, parent)
    frac = {tree.node_label(c): float(masked[head.prototypes_of(i)].mean()) for i, c in enumerate(tree.children(parent))}
    sibling_frac = max(v for k, v in frac.items() if k != OMITTED)

    ok_time = elapsed <= BUDGET_S
    ok = ok_time and acc >= 0.9 and not missing and frac[OMITTED] >= 0.5 and sibling_frac < 0.2
    criterion(
        5, ok,
        f"{elapsed:.0f}s (<= {BUDGET_S}s); val acc {acc:.3f} (>= 0.90); children lacking a pure glyph prototype: "
        f"{missing or 'none'}; masked at {OMITTED} {frac[OMITTED]:.2f} (>= 0.5), siblings {sibling_frac:.2f} (< 0.2)",
    )
    assert ok


# -- 6 --------------------------------------------------------------------------------


def test_criterion_6_unseen_species(criterion):
    tree, _, ds = _desk_data()
    model, _ = _train(tree, ds.by_split("train").without_species([HELD_OUT]))
    leaf = tree.leaf(HELD_OUT)
    images = ds.of_species([HELD_OUT]).images
    acc = unseen_accuracy(model, images, tree.parent(leaf))
    ok = acc >= 0.75
    criterion(6, ok, f"held-out {HELD_OUT}: unseen_accuracy {acc:.3f} over {len(images)} images (>= 0.75, chance 0.25)")
    assert ok


# -- 7 --------------------------------------------------------------------------------


def test_criterion_7_purity_oracle(criterion):
    from phyloproto.data import Part

    results = []
    for grid, side, top_k, window, n, ns, seed in FIXTURES:
        rng = np.random.default_rng(seed)
        labels = np.arange(n) % ns
        pooled = np.round(rng.random(n), 1)
        peaks = rng.integers(0, grid[0] * grid[1], n)
        parts = [[Part(nm, int(rng.integers(0, side)), int(rng.integers(0, side))) for nm in "pqr"] for _ in range(n)]
        species = list(range(ns))
        got = prototype_purity(pooled, peaks, labels, parts, species, grid, side, top_k, window)[:2]
        results.append(got == brute_purity(pooled, peaks, labels, parts, species, grid, side, top_k, window))
    ok = all(results)
    criterion(7, ok, f"{sum(results)}/{len(results)} fixtures equal to the brute-force window oracle")
    assert ok


# -- 8 --------------------------------------------------------------------------------


def coverage_overspecific(model, ds, top_k=10):
    """Unmasked prototypes whose peak sits on a sub-clade glyph for some species.

    For a prototype wired to child c, look at its top images of every species
    under c and find the planted glyph nearest its peak, within the purity
    window.  If for any species the most frequent such glyph belongs to a node
    strictly inside c's clade, the prototype tracks a trait that not every
    descendant has.
    """
    tree = model.tree
    inf = infer(model, ds.images)
    H, W = inf.grid
    side = model.cfg.image_side
    half = window_side(side) / 2.0
    count = 0
    for node, head in model.heads.items():
        masked = _masked(model, node)
        for j in range(head.K):
            if masked[j]:
                continue
            child = tree.children(node)[head.child_of_proto[j]]
            inside = {tree.node_label(n) for n in range(len(tree)) if child in tree.ancestors(n)}
            for leaf in tree.descendants(child):
                rows = np.flatnonzero(ds.labels == tree.leaf_position[leaf])
                rows = rows[np.argsort(-inf.pooled[node][rows, j], kind="stable")][:top_k]
                hits = Counter()
                for i in rows:
                    h, w = divmod(int(inf.peaks[node][i, j]), W)
                    cx, cy = (w + 0.5) * side / W - 0.5, (h + 0.5) * side / H - 0.5
                    near = [(max(abs(p.x - cx), abs(p.y - cy)), p.name) for p in ds.parts[i]]
                    near = [d for d in near if d[0] <= half]
                    if near:
                        hits[min(near)[1]] += 1
                if hits and hits.most_common(1)[0][0] in inside:
                    count += 1
                    break
    return count


def mean_disc_loss(model, ds):
    inf = infer(model, ds.images)
    vals = [L.discriminative_loss(inf.pooled[n], ds.labels, h, model.tree).item() for n, h in model.heads.items()]
    return float(np.mean(vals))


def test_criterion_8_ablation_directions(criterion, omitted_data, desk_run, ablations):
    _, _, ds = omitted_data
    val = ds.by_split("val")
    base = desk_run[0]
    ovsp_base, ovsp_off = coverage_overspecific(base, val), coverage_overspecific(ablations["ovsp"], val)
    disc_base, disc_off = mean_disc_loss(base, val), mean_disc_loss(ablations["disc"], val)
    ok = ovsp_off > ovsp_base and disc_off > disc_base
    criterion(
        8, ok,
        f"unmasked over-specific prototypes {ovsp_base} -> {ovsp_off} with lambda_ovsp=0; "
        f"mean L_disc {disc_base:.4f} -> {disc_off:.4f} with lambda_disc=0 (both must rise)",
    )
    assert ok


# -- 9 --------------------------------------------------------------------------------


@given(st.integers(2, 9), st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_newick_round_trip_property(n_leaves, seed):
    rng = np.random.default_rng(seed)
    nodes = [f"S{i}" for i in range(n_leaves)]
    while len(nodes) > 1:
        k = int(rng.integers(2, min(3, len(nodes)) + 1))
        picked = sorted(rng.choice(len(nodes), k, replace=False).tolist(), reverse=True)
        group = [nodes.pop(i) for i in picked]
        nodes.append("(" + ",".join(group) + ")")
    tree = parse_newick(nodes[0] + ";")
    text = serialize_newick(tree)
    assert serialize_newick(parse_newick(text)) == text
    assert tree_digest(parse_newick(text)) == tree_digest(tree)


def test_criterion_9_determinism_and_formats(criterion, tmp_path, desk_run):
    data = tmp_path / "data"
    assert main(["gen-data", "--tree", "default", "--out", str(data), "--per-leaf", "4"]) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({
        "data": str(data),
        "model": {"beta": 2, "extractor": [[3, 4, 4]], "pretrain_epochs": 1, "main_epochs": 1, "mask_epochs": 1,
                  "batch_size": 16},
    }))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SpeciesUnderrepresented)
        codes = [main(["train", "--config", str(cfg), "--out", str(tmp_path / r)]) for r in ("a", "b")]
    same_metrics = codes == [0, 0] and (tmp_path / "a/metrics.json").read_bytes() == (tmp_path / "b/metrics.json").read_bytes()

    tree = default_tree()
    text = serialize_newick(tree)
    newick_ok = serialize_newick(parse_newick(text)) == text and tree_digest(parse_newick(text)) == tree_digest(tree)

    rng = np.random.default_rng(0)
    rgb = rng.integers(0, 256, (13, 7, 3), dtype=np.uint8)
    grey = rng.integers(0, 256, (5, 11), dtype=np.uint8)
    write_ppm(tmp_path / "x.ppm", rgb)
    write_pgm(tmp_path / "x.pgm", grey)
    pnm_ok = np.array_equal(read_ppm_bytes(tmp_path / "x.ppm"), rgb) and np.array_equal(read_pgm_bytes(tmp_path / "x.pgm"), grey)

    model = desk_run[0]
    ckpt.save_model(tmp_path / "desk.ppck", model)
    back, _ = ckpt.load_model(tmp_path / "desk.ppck")
    a, b = model.state_arrays(), back.state_arrays()
    ckpt_ok = list(a) == list(b) and all(a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes() for k in a)

    ok = same_metrics and newick_ok and pnm_ok and ckpt_ok
    criterion(
        9, ok,
        f"metrics.json byte-identical={same_metrics}; Newick round trip={newick_ok}; PPM/PGM round trip={pnm_ok}; "
        f"checkpoint bit-exact over {len(a)} tensors={ckpt_ok}",
    )
    assert ok
