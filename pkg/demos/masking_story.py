"""Watch the mask separate common traits from over-specific ones.

Two datasets are rendered from the same 8-species tree. In the second one the
clade (A, B) loses its shared glyph, so any prototype that node1 dedicates to
that clade can only latch onto A's or B's own glyph. The mask should switch
most of those prototypes off while leaving the sibling clade's alone.

    python demos/masking_story.py            # about 12 minutes on one core
"""

import time

from phyloproto import build_model, desk_config
from phyloproto.data import default_trait_spec, default_tree, generate_synthetic
from phyloproto.evaluation import fine_grained_accuracy, infer, part_purity
from phyloproto.masking import deterministic_mask
from phyloproto.training import run_training


def describe(tree, model, val, title):
    inf = infer(model, val.images)
    acc = fine_grained_accuracy(model, val, inf)
    rep = part_purity(model, val, inference=inf)
    print(f"\n== {title}")
    print(f"validation accuracy {acc:.3f}; purity {rep.unmasked[0]:.2f} ± {rep.unmasked[1]:.2f} over unmasked prototypes")
    node1 = tree.parent(tree.parent(tree.leaf("A")))
    head = model.heads[node1]
    masked = deterministic_mask(head, model.cfg.tau) < 0.5
    for i, child in enumerate(tree.children(node1)):
        ids = head.prototypes_of(i)
        best = max((r for r in rep.records if r.node == node1 and r.child == child and not r.masked),
                   key=lambda r: r.purity, default=None)
        where = f"best unmasked purity {best.purity:.2f} on {best.best_part}" if best else "no unmasked prototype"
        print(f"  node1 -> {tree.node_label(child):6s} masked {int(masked[ids].sum()):2d}/{len(ids)}; {where}")


def main():
    tree = default_tree()
    ab = tree.parent(tree.leaf("A"))
    for title, omit in (("every clade has a shared glyph", []), ("clade (A, B) has no shared glyph", [ab])):
        spec = default_trait_spec(tree, omit=omit)
        ds = generate_synthetic(tree, spec, per_leaf=80, seed=0)
        model = build_model(tree, desk_config())
        start = time.perf_counter()
        run_training(model, ds.by_split("train"))
        print(f"\ntrained in {time.perf_counter() - start:.0f}s")
        describe(tree, model, ds.by_split("val"), title)


if __name__ == "__main__":
    main()
