"""scikit-learn style front end over the toy segmentation network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .divergence import DEFAULT_FLOOR, divergence_profile
from .losses import LossConfig, miou
from .nn import BRANCHES, build_toynet, forward_segmentation
from .training import OptimConfig, predict_logits, train
from .validation import check_images, check_masks


class IBNSegmenter(BaseEstimator):
    """Multi-label segmenter: ``fit(X, Y)`` with X (N, C, H, W) and binary Y (N, m, H, W).

    ``predict`` thresholds logits at 0, ``score`` is dataset-level mIoU and
    ``transform`` returns the feature maps of one probe.
    """

    def __init__(self, policy="PLAIN_BN", widths=(8, 16), lambda1=1.0, lambda2=1.0, per_image=True,
                 base_lr=0.01, momentum=0.9, weight_decay=5e-4, warmup_iters=80, constant_iters=560,
                 poly_iters=1360, batch_size=4, sn_branches=BRANCHES, random_state=0, probe="decoder.relu"):
        self.policy = policy
        self.widths = widths
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.per_image = per_image
        self.base_lr = base_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_iters = warmup_iters
        self.constant_iters = constant_iters
        self.poly_iters = poly_iters
        self.batch_size = batch_size
        self.sn_branches = sn_branches
        self.random_state = random_state
        self.probe = probe

    def _configs(self) -> tuple[LossConfig, OptimConfig]:
        loss = LossConfig(float(self.lambda1), float(self.lambda2), bool(self.per_image))
        optim = OptimConfig(base_lr=self.base_lr, momentum=self.momentum, weight_decay=self.weight_decay,
                            warmup_iters=self.warmup_iters, constant_iters=self.constant_iters,
                            poly_iters=self.poly_iters, batch_size=self.batch_size)
        return loss, optim

    def fit(self, X, Y):
        X = check_images(X, 3)
        Y = check_masks(Y, X)
        loss_cfg, optim_cfg = self._configs()
        seed = int(self.random_state or 0)
        net = build_toynet(self.policy, self.widths, Y.shape[1], seed=seed, sn_branches=self.sn_branches)
        self.net_, self.run_log_ = train(net, X, Y, loss_cfg, optim_cfg, seed=seed)
        self.n_classes_ = Y.shape[1]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return predict_logits(self.net_, check_images(X, 3))

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(np.int8)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_images(X, 3)
        _, acts = forward_segmentation(self.net_, X, "eval", capture=[self.probe])
        return acts[self.probe]

    def score(self, X, Y) -> float:
        X = check_images(X, 3)
        Y = check_masks(Y, X, getattr(self, "n_classes_", None))
        return miou(self.predict(X), Y).miou

    def divergence(self, X_a, X_b, floor: float = DEFAULT_FLOOR):
        """Per-probe feature divergence between two renderings of a dataset."""
        check_is_fitted(self, "net_")
        return divergence_profile(self.net_, list(check_images(X_a, 3)), list(check_images(X_b, 3)), floor=floor)
