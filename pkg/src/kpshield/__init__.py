"""Adversarial image detection from truncated row-PCA reconstructions."""
from .attacks import AttackResult, cw_l2, deepfool, jsma
from .detector import AdaBoostDetector, detect, load_detector, save_detector, train_adaboost, train_tree
from .kp import KpFeaturizer, KpPoint, kp_batch, kp_point, kp_point_bruteforce
from .linalg import PcaBasis, eigh_symmetric, reconstruct, reconstruct_prefix_sweep, row_matrix, row_pca
from .nnet import Model, classify, forward, input_gradient, load_model, save_model, softmax

__version__ = "0.1.0"

__all__ = [
    "AdaBoostDetector", "AttackResult", "KpFeaturizer", "KpPoint", "Model", "PcaBasis", "classify", "cw_l2",
    "deepfool", "detect", "eigh_symmetric", "forward", "input_gradient", "jsma", "kp_batch", "kp_point",
    "kp_point_bruteforce", "load_detector", "load_model", "reconstruct", "reconstruct_prefix_sweep",
    "row_matrix", "row_pca", "save_detector", "save_model", "softmax", "train_adaboost", "train_tree",
]
