from .ensemble import (EnsembleModel, init_ensemble, init_member, load_checkpoint, member_rng,
                       save_checkpoint)
from .mlp import PRESETS, MlpArchitecture, MlpParameters, init_mlp, mlp_backward, mlp_forward
from .rff import (RffClassifier, RffFeatureMap, fit_rff_classifier, fit_rff_ensemble, make_rff_map,
                  rff_ensemble_predict, rff_transform)
from .trees import DecisionTree, TreeNode, fit_forest, fit_tree, forest_predict, tree_predict

__all__ = [
    "EnsembleModel", "init_ensemble", "init_member", "load_checkpoint", "member_rng", "save_checkpoint",
    "PRESETS", "MlpArchitecture", "MlpParameters", "init_mlp", "mlp_backward", "mlp_forward",
    "RffClassifier", "RffFeatureMap", "fit_rff_classifier", "fit_rff_ensemble", "make_rff_map",
    "rff_ensemble_predict", "rff_transform",
    "DecisionTree", "TreeNode", "fit_forest", "fit_tree", "forest_predict", "tree_predict",
]
