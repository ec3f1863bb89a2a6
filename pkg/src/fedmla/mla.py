"""Model-level attention: frozen feature extractor, domain feature bank,
domain attention module (DAM) and aggregation-weight inference.

Clients map images to global-average-pooled encoder features with a frozen,
seed-generated encoder shared by the server. The server collects the feature
rows into a bank, fits the DAM to predict which seen domain a feature came
from, and later turns DAM probabilities on unseen-domain features into
aggregation weights over the seen-domain models.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .fedsim import FeatureUpload, aggregate
from .segnet import NetConfig, ParamSet, SegNet
from .tensor import (
    AdamState,
    NonFiniteError,
    ShapeError,
    Tensor,
    adam_step,
    conv2d,
    cross_entropy,
    fully_connected,
    global_avg_pool,
    no_grad,
    relu,
    softmax,
)

log = logging.getLogger(__name__)

BANK_MAGIC = b"MLAB"
BANK_VERSION = 1
GRANULARITIES = ("batch", "image", "dataset")


class BankFormatError(ValueError):
    pass


# Feature extraction -------------------------------------------------------------

class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Frozen encoder + global average pooling, generated from ``seed``.

    Every party that builds the extractor with the same arguments obtains
    bitwise identical weights, so the server only distributes the seed.
    """

    def __init__(self, levels: int = 3, base_channels: int = 8, seed: int = 0, batch_size: int = 64):
        self.levels = levels
        self.base_channels = base_channels
        self.seed = seed
        self.batch_size = batch_size

    def fit(self, X=None, y=None):
        cfg = NetConfig(levels=self.levels, base_channels=self.base_channels, bin_depth=0)
        self.encoder_ = SegNet(cfg, seed=self.seed)
        self.n_features_out_ = cfg.widths[-1]
        return self

    @property
    def n_features(self) -> int:
        check_is_fitted(self, "encoder_")
        return self.n_features_out_

    def transform(self, X) -> np.ndarray:
        """Images (N, 1, H, W) -> features (N, F)."""
        check_is_fitted(self, "encoder_")
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[:, None]
        if X.ndim != 4:
            raise ShapeError(f"expected images of shape (N, 1, H, W), got {X.shape}")
        out = []
        with no_grad():
            for s in range(0, len(X), self.batch_size):
                x = Tensor(X[s:s + self.batch_size])
                self.encoder_.check_input(x)
                top = self.encoder_.encode(x, training=False)[-1]
                out.append(global_avg_pool(top).data)
        return np.concatenate(out) if out else np.zeros((0, self.n_features_out_))


def build_extractor(levels: int = 3, base_channels: int = 8, seed: int = 0) -> FeatureExtractor:
    return FeatureExtractor(levels, base_channels, seed).fit()


def extract_feature(extractor: FeatureExtractor, image) -> np.ndarray:
    """Feature vector (F,) of a single 1 x 1 x H x W (or 1 x H x W) image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[0] != 1:
        raise ShapeError(f"extract_feature expects one image, got shape {img.shape}")
    return extractor.transform(img)[0]


# Domain feature bank -------------------------------------------------------------

@dataclass
class DomainFeatureBank:
    features: np.ndarray  # (rows, F)
    labels: np.ndarray    # (rows,) in [0, k)
    k: int
    domain_ids: List[int] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("bank needs an (n, F) feature matrix with one label per row")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("bank features must be finite")
        if self.k < 1 or (self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k)):
            raise ValueError(f"bank labels must lie in [0, {self.k})")
        missing = sorted(set(range(self.k)) - set(self.labels.tolist()))
        if missing:
            raise ValueError(f"bank has no rows for domain labels {missing}")
        if not self.domain_ids:
            self.domain_ids = list(range(self.k))

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def to_bytes(self) -> bytes:
        n, f = self.features.shape
        head = BANK_MAGIC + struct.pack("<IIIQ", BANK_VERSION, self.k, f, n)
        rows = np.empty(n, dtype=np.dtype([("domain", "<u4"), ("feature", "<f8", (f,))]))
        rows["domain"] = self.labels
        rows["feature"] = self.features
        return head + rows.tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DomainFeatureBank":
        if len(buf) < 24:
            raise BankFormatError(f"header truncated: {len(buf)} bytes")
        if buf[:4] != BANK_MAGIC:
            raise BankFormatError(f"magic: got {buf[:4]!r}, expected {BANK_MAGIC!r}")
        version, k, f, n = struct.unpack_from("<IIIQ", buf, 4)
        if version != BANK_VERSION:
            raise BankFormatError(f"version: file has {version}, reader supports {BANK_VERSION}")
        if f == 0 or k == 0:
            raise BankFormatError(f"header: k={k}, F={f} must be positive")
        row_bytes = 4 + 8 * f
        if len(buf) - 24 != n * row_bytes:
            raise BankFormatError(
                f"row count: header declares {n} rows ({n * row_bytes} bytes), payload has {len(buf) - 24} bytes")
        dt = np.dtype([("domain", "<u4"), ("feature", "<f8", (f,))])
        rows = np.frombuffer(buf, dtype=dt, count=n, offset=24)
        labels = rows["domain"].astype(np.int64)
        if labels.size and labels.max() >= k:
            raise BankFormatError(f"domain: row label {int(labels.max())} >= k={k}")
        return cls(rows["feature"].astype(np.float64), labels, int(k))

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DomainFeatureBank":
        return cls.from_bytes(Path(path).read_bytes())


def client_feature_upload(domain: int, images, extractor: FeatureExtractor) -> FeatureUpload:
    """Client side: features of the local images, ready to send to the server."""
    return FeatureUpload(domain, extractor.transform(images))


def bank_from_uploads(uploads: Sequence[FeatureUpload]) -> DomainFeatureBank:
    """Server side: stack uploads; label ``i`` is the i-th uploading client."""
    if len(uploads) < 2:
        raise ValueError("a feature bank needs at least 2 domains")
    feats, labels = [], []
    for i, up in enumerate(uploads):
        if len(up.features) == 0:
            raise ValueError(f"domain {up.domain} uploaded no features")
        feats.append(up.features)
        labels.append(np.full(len(up.features), i))
    return DomainFeatureBank(np.concatenate(feats), np.concatenate(labels), len(uploads),
                             [up.domain for up in uploads])


def build_bank(image_sets: Mapping[int, np.ndarray], extractor: FeatureExtractor) -> DomainFeatureBank:
    """Bank from per-domain image sets, in mapping order. Only the feature
    uploads reach the bank; images stay inside the client step."""
    for d, imgs in image_sets.items():
        if len(imgs) == 0:
            raise ValueError(f"domain {d} has no images")
    return bank_from_uploads([client_feature_upload(d, imgs, extractor) for d, imgs in image_sets.items()])


# Domain attention module --------------------------------------------------------------

class DomainAttention(ClassifierMixin, BaseEstimator):
    """1x1 conv + two fully connected layers + softmax over seen domains.

    Inputs are standardized with bank statistics frozen at fit time. ReLU
    follows the conv and the first fully connected layer.
    """

    def __init__(self, hidden: int = 64, epochs: int = 100, lr: float = 1e-3,
                 batch_size: int = 8, seed: int = 0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _init_params(self, f: int, k: int, rng: np.random.Generator) -> Dict[str, Tensor]:
        def he(shape, fan_in):
            return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)
        return {
            "conv.weight": he((f, f, 1, 1), f),
            "conv.bias": Tensor(np.zeros(f), requires_grad=True),
            "fc1.weight": he((self.hidden, f), f),
            "fc1.bias": Tensor(np.zeros(self.hidden), requires_grad=True),
            "fc2.weight": he((k, self.hidden), self.hidden),
            "fc2.bias": Tensor(np.zeros(k), requires_grad=True),
        }

    def _forward(self, X: np.ndarray) -> Tensor:
        P = self.params_
        z = (X - self.mean_) / self.scale_
        h = conv2d(Tensor(z.reshape(len(z), -1, 1, 1)), P["conv.weight"], P["conv.bias"])
        h = relu(h).reshape(len(z), -1)
        h = relu(fully_connected(h, P["fc1.weight"], P["fc1.bias"]))
        return softmax(fully_connected(h, P["fc2.weight"], P["fc2.bias"]))

    def fit(self, X, y, n_classes: Optional[int] = None):
        X, y = check_X_y(X, y, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        k = int(n_classes if n_classes is not None else y.max() + 1)
        if y.min() < 0 or y.max() >= k:
            raise ValueError(f"labels must lie in [0, {k})")
        self.classes_ = np.arange(k)
        self.n_features_in_ = X.shape[1]
        self.mean_ = X.mean(axis=0)
        std = X.std(axis=0)
        self.scale_ = np.where(std > 1e-12, std, 1.0)
        rng = np.random.default_rng(self.seed)
        self.params_ = self._init_params(X.shape[1], k, rng)
        state = AdamState()
        self.loss_curve_: List[float] = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(X))
            losses = []
            for s in range(0, len(X), self.batch_size):
                idx = order[s:s + self.batch_size]
                for p in self.params_.values():
                    p.grad = None
                try:
                    loss = cross_entropy(self._forward(X[idx]), y[idx])
                    loss.backward()
                except NonFiniteError as exc:
                    raise RuntimeError(f"DAM training diverged in epoch {epoch}: {exc}") from exc
                adam_step({n: p.data for n, p in self.params_.items()},
                          {n: p.grad for n, p in self.params_.items() if p.grad is not None}, state, self.lr)
                losses.append(loss.item())
            self.loss_curve_.append(float(np.mean(losses)))
            log.debug("DAM epoch %d loss %.5f", epoch, self.loss_curve_[-1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ShapeError(f"DAM expects {self.n_features_in_} features, got {X.shape[1]}")
        with no_grad():
            return self._forward(X).data

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)


def train_dam(bank: DomainFeatureBank, epochs: int = 100, lr: float = 1e-3, seed: int = 0,
              hidden: int = 64, batch_size: int = 8) -> DomainAttention:
    return DomainAttention(hidden, epochs, lr, batch_size, seed).fit(bank.features, bank.labels, n_classes=bank.k)


def infer_weights(dam, features) -> np.ndarray:
    """Aggregation weights for one feature vector or the mean over several.

    ``dam`` is anything with ``predict_proba``; per-row outputs are averaged
    and renormalized onto the simplex.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[None]
    probs = np.asarray(dam.predict_proba(f), dtype=np.float64)
    w = np.clip(probs.mean(axis=0), 0.0, None)
    return w / w.sum()


# Application phase ----------------------------------------------------------------

def _predict_with(net: SegNet, params: ParamSet, images: np.ndarray) -> np.ndarray:
    net.load_param_set(params)
    with no_grad():
        return net.forward(images, training=False).data


def mla_inference(local_models: Sequence[ParamSet], dam, extractor: FeatureExtractor, unseen_batch,
                  net: SegNet, granularity: str = "batch", batch_size: int = 8) -> np.ndarray:
    """Segment ``unseen_batch`` with attention-weighted combinations of the local models.

    ``granularity`` picks how often weights are inferred: once per chunk of
    ``batch_size`` images ("batch"), once per image ("image"), or once for
    the whole input ("dataset"). ``net`` is only used as an execution shell.
    """
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}, got {granularity!r}")
    images = np.asarray(unseen_batch, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected N x 1 x H x W images, got {images.shape}")
    feats = extractor.transform(images)
    step = {"batch": batch_size, "image": 1, "dataset": max(len(images), 1)}[granularity]
    out = []
    for s in range(0, len(images), step):
        w = infer_weights(dam, feats[s:s + step])
        out.append(_predict_with(net, aggregate(local_models, w), images[s:s + step]))
    return np.concatenate(out)
