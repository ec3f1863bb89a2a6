"""Estimator facade: federated training and inference behind fit/predict."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_domains, check_images, check_masks
from .config import METHODS
from .experiments import PLAIN_METHODS, MLA_METHODS, SingleDomainAttention
from .fedsim import LrSchedule, make_clients, run_federation
from .metrics import dsc
from .mla import build_bank, build_extractor, mla_inference, train_dam
from .segnet import BlockKind, NetConfig, build_segnet
from .tensor import no_grad


class FederatedSegmenter(BaseEstimator):
    """Train one client per distinct value of ``domains`` and combine them.

    ``method`` selects plain FedAvg, attention-weighted local models (MLA),
    BIN blocks, or both. Images are ``(N, 1, H, W)``, masks ``(N, S, H, W)``.
    """

    def __init__(self, method: str = "mla-bin", levels: int = 4, base_channels: int = 8,
                 bin_depth: int = 3, block_kind: str = "bin", rounds: int = 60,
                 epochs_per_round: int = 1, batch_size: int = 8, lr: float = 0.01,
                 lr_step: int = 100, lr_factor: float = 0.8, dam_epochs: int = 100,
                 dam_lr: float = 1e-3, granularity: str = "batch", eval_batch_size: int = 8,
                 extractor_levels: int = 3, seed: int = 0, threads: int = 1):
        self.method = method
        self.levels = levels
        self.base_channels = base_channels
        self.bin_depth = bin_depth
        self.block_kind = block_kind
        self.rounds = rounds
        self.epochs_per_round = epochs_per_round
        self.batch_size = batch_size
        self.lr = lr
        self.lr_step = lr_step
        self.lr_factor = lr_factor
        self.dam_epochs = dam_epochs
        self.dam_lr = dam_lr
        self.granularity = granularity
        self.eval_batch_size = eval_batch_size
        self.extractor_levels = extractor_levels
        self.seed = seed
        self.threads = threads

    def _net_config(self, structures: int = 1) -> NetConfig:
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method in PLAIN_METHODS:
            return NetConfig(self.levels, self.base_channels, 0, block_kind=BlockKind.PLAIN,
                             out_channels=structures)
        return NetConfig(self.levels, self.base_channels, self.bin_depth, block_kind=BlockKind(self.block_kind),
                         out_channels=structures)

    def fit(self, X, y, domains=None):
        X = check_images(X)
        y = check_masks(y, X)
        net_cfg = self._net_config(y.shape[1])
        X = check_images(X, multiple=net_cfg.size_multiple)
        domains = check_domains(domains, len(X))
        ids = sorted(set(domains.tolist()))
        data = [(d, X[domains == d], y[domains == d]) for d in ids]
        clients = make_clients(data, net_cfg, self.seed)
        self.federation_ = run_federation(clients, self.rounds, net_cfg, self.seed,
                                          epochs_per_round=self.epochs_per_round, batch_size=self.batch_size,
                                          schedule=LrSchedule(self.lr, self.lr_step, self.lr_factor),
                                          threads=self.threads)
        self.net_config_ = net_cfg
        self.domains_ = np.array(ids)
        self.n_structures_ = y.shape[1]
        self.net_ = build_segnet(net_cfg, self.seed)
        if self.method in MLA_METHODS:
            self.extractor_ = build_extractor(self.extractor_levels, 8, self.seed)
            if len(ids) == 1:
                self.attention_ = SingleDomainAttention()
            else:
                bank = build_bank({d: x for d, x, _ in data}, self.extractor_)
                self.attention_ = train_dam(bank, self.dam_epochs, self.dam_lr, self.seed)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "federation_")
        X = check_images(X, multiple=self.net_config_.size_multiple)
        res = self.federation_
        if self.method in MLA_METHODS:
            return mla_inference(res.local_params, self.attention_, self.extractor_, X, self.net_,
                                 self.granularity, self.eval_batch_size)
        self.net_.load_param_set(res.global_params)
        with no_grad():
            return np.concatenate([self.net_.forward(X[s:s + 32]).data for s in range(0, len(X), 32)])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.uint8)

    def score(self, X, y, sample_weight: Optional[np.ndarray] = None) -> float:
        """Mean DSC (percent) over samples and structures."""
        pred = self.predict(X)
        y = check_masks(y, pred)
        scores = np.array([np.mean([dsc(p, t) for p, t in zip(ps, ts)]) for ps, ts in zip(pred, y)])
        return float(np.average(scores, weights=sample_weight))
