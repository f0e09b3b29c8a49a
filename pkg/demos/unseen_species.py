"""Place a species the model never saw.

Species H is removed from training. Its images are then routed down the tree
with the leaf level ignored; a model that learned clade-level traits should
still send them to H's parent (node12) rather than to one of the three other
leaf parents.

    python demos/unseen_species.py           # about 6 minutes on one core
"""

import numpy as np

from phyloproto import build_model, desk_config
from phyloproto.data import default_trait_spec, default_tree, generate_synthetic
from phyloproto.evaluation import infer, predict_parents, unseen_accuracy
from phyloproto.training import run_training


def main(held_out="H"):
    tree = default_tree()
    ds = generate_synthetic(tree, default_trait_spec(tree), per_leaf=80, seed=0)
    model = build_model(tree, desk_config())
    run_training(model, ds.by_split("train").without_species([held_out]))

    images = ds.of_species([held_out]).images
    parent = tree.parent(tree.leaf(held_out))
    inf = infer(model, images)
    routed = predict_parents(tree, inf.probs)
    print(f"{len(images)} images of {held_out}; true parent {tree.node_label(parent)}")
    for node, count in zip(*np.unique(routed, return_counts=True)):
        print(f"  routed to {tree.node_label(int(node)):7s} {count}")
    print(f"unseen accuracy {unseen_accuracy(model, images, parent, inf):.3f} (chance 0.25)")


if __name__ == "__main__":
    main()
