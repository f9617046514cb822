"""Synthesis and classification metrics built on descriptor features."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .energy import DescriptorModel
from .ops import OPS

REPORT_KEYS = ("inception_score", "fid", "recovery_error", "softmax_prob", "classification_error")
FEATURE_POOLS = (4, 2)


def _feature_taps(model: DescriptorModel):
    """Graph nodes holding the rectified outputs of the first two conv layers."""
    taps = []
    layers = model.layers
    for i, spec in enumerate(layers):
        if spec.kind != "conv3d":
            continue
        j = i + 1 if i + 1 < len(layers) and layers[i + 1].kind == "relu" else i
        taps.append(model.net.taps[j])
        if len(taps) == 2:
            return taps
    raise ValueError("feature extraction needs a descriptor with at least two conv layers")


def extract_features(model: DescriptorModel, Y, pools=FEATURE_POOLS):
    """Max-pooled activations of conv layers 1 and 2, flattened and concatenated.

    Returns (N, F) float32; a single (D, H, W) grid gives (F,).
    """
    Y = np.asarray(Y, np.float32)
    single = Y.ndim == 3
    Y = Y[None] if single else Y
    taps = _feature_taps(model)
    vals = model._forward(Y)
    pool = OPS["maxpool3d"].forward
    parts = []
    for node, k in zip(taps, pools):
        pooled, _ = pool([vals[node]], {"kernel": (k, k, k)}, False)
        parts.append(pooled.reshape(len(Y), -1))
    feats = np.concatenate(parts, axis=1)
    return feats[0] if single else feats


def feature_length(model: DescriptorModel, pools=FEATURE_POOLS):
    total = 0
    for node, k in zip(_feature_taps(model), pools):
        shape = model.net.tap_shapes[model.net.taps.index(node)]
        c, *sp = shape
        total += c * int(np.prod([-(-n // k) for n in sp]))
    return total


# ---------------------------------------------------------------- classifier


@dataclass
class ClassifierModel:
    weight: np.ndarray  # (C, F)
    bias: np.ndarray  # (C,)
    mean: np.ndarray  # feature standardization
    std: np.ndarray

    @property
    def n_classes(self):
        return len(self.bias)

    def logits(self, features):
        X = (np.asarray(features, np.float64) - self.mean) / self.std
        return X @ self.weight.T + self.bias


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(features, labels, l2=1e-3, lr=0.5, epochs=500):
    """Multinomial logistic regression by full-batch gradient descent on
    z-scored features with an L2 penalty on the weights."""
    X = np.asarray(features, np.float64)
    y = np.asarray(labels, np.int64)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("classifier training needs at least two classes")
    C = int(y.max()) + 1
    mu = X.mean(0)
    sd = X.std(0)
    sd[sd < 1e-12] = 1.0
    Xs = (X - mu) / sd
    n, F = Xs.shape
    W = np.zeros((C, F))
    b = np.zeros(C)
    onehot = np.eye(C)[y]
    for _ in range(epochs):
        P = _softmax(Xs @ W.T + b)
        G = (P - onehot) / n
        W -= lr * (G.T @ Xs + l2 * W)
        b -= lr * G.sum(0)
    return ClassifierModel(W, b, mu, sd)


def classify(model: ClassifierModel, features):
    """(argmax labels, softmax probability rows)."""
    feats = np.asarray(features, np.float64)
    single = feats.ndim == 1
    P = _softmax(model.logits(feats[None] if single else feats))
    labels = P.argmax(1)
    return (int(labels[0]), P[0]) if single else (labels, P)


@dataclass
class ReferenceClassifier:
    """Descriptor features followed by a softmax classifier over voxel grids."""

    descriptor: DescriptorModel
    classifier: ClassifierModel

    @property
    def n_classes(self):
        return self.classifier.n_classes

    def predict_proba(self, grids):
        return classify(self.classifier, extract_features(self.descriptor, grids))[1]


# ---------------------------------------------------------------- metrics


def _check_prob_rows(P):
    P = np.asarray(P, np.float64)
    if P.ndim != 2 or len(P) == 0:
        raise ValueError("probability table must be a non-empty 2-D array")
    if np.any(P < 0) or np.any(np.abs(P.sum(1) - 1) > 1e-6):
        raise ValueError("each probability row must be non-negative and sum to 1")
    return P


def inception_score(P):
    """exp(mean_i KL(p(c|Y_i) || p(c))) with p(c) the mean row."""
    P = _check_prob_rows(P)
    marg = P.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(P > 0, P * (np.log(P) - np.log(marg)), 0.0)
    return float(np.exp(terms.sum(1).mean()))


def _sqrtm_psd(S):
    w, V = np.linalg.eigh((S + S.T) / 2)
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def fid_from_stats(mu1, cov1, mu2, cov2, eps=1e-6):
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    cov1, cov2 = np.atleast_2d(np.asarray(cov1, np.float64)), np.atleast_2d(np.asarray(cov2, np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ValueError("feature dimensions differ")
    I = np.eye(len(mu1))
    c1, c2 = cov1 + eps * I, cov2 + eps * I
    r = _sqrtm_psd(c1)
    mid = r @ c2 @ r
    tr_sqrt = float(np.sum(np.sqrt(np.clip(np.linalg.eigvalsh((mid + mid.T) / 2), 0, None))))
    return float(np.sum((mu1 - mu2) ** 2) + np.trace(c1) + np.trace(c2) - 2 * tr_sqrt)


def _stats(F):
    F = np.asarray(F, np.float64)
    if F.ndim == 1:
        F = F[:, None]
    if len(F) == 0:
        raise ValueError("feature set is empty")
    cov = np.cov(F, rowvar=False) if len(F) > 1 else np.zeros((F.shape[1], F.shape[1]))
    return F.mean(0), np.atleast_2d(cov)


def fid(features_real, features_syn):
    """Fréchet distance between Gaussian fits of two feature sets."""
    return fid_from_stats(*_stats(features_real), *_stats(features_syn))


def recovery_error(original, recovered, mask):
    """Mean |original − recovered| over the masked voxels of binary grids."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise ValueError("recovery error is undefined for an empty mask")
    o = np.asarray(original, np.float64)
    r = np.asarray(recovered, np.float64)
    return float(np.abs(o - r)[np.broadcast_to(mask, o.shape)].mean())


def _probs(classifier, batch):
    if hasattr(classifier, "predict_proba"):
        return np.asarray(classifier.predict_proba(batch), np.float64)
    return _check_prob_rows(classifier(batch))


def softmax_class_prob(classifier, batch, target):
    P = _probs(classifier, batch)
    if not 0 <= target < P.shape[1]:
        raise ValueError(f"unknown class {target}")
    return float(P[:, target].mean())


def classification_error(classifier, batch, target):
    P = _probs(classifier, batch)
    if not 0 <= target < P.shape[1]:
        raise ValueError(f"unknown class {target}")
    return float(np.mean(P.argmax(1) != target))


def nearest_neighbors(query, grids, k):
    """Indices of the ``k`` closest grids in squared ℓ2 distance, ties to the lower index."""
    grids = np.asarray(grids)
    query = np.asarray(query)
    if grids.shape[1:] != query.shape:
        raise ValueError(f"query {query.shape} does not match dataset grids {grids.shape[1:]}")
    if k > len(grids):
        raise ValueError(f"k={k} exceeds dataset size {len(grids)}")
    diff = (grids.astype(np.float64) - query.astype(np.float64)).reshape(len(grids), -1)
    d = np.einsum("ij,ij->i", diff, diff)
    return np.argsort(d, kind="stable")[:k].tolist()


def metrics_report(values, keys=None):
    """JSON text with exactly the requested metric keys."""
    keys = list(REPORT_KEYS if keys is None else keys)
    unknown = set(keys) - set(REPORT_KEYS)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    missing = [k for k in keys if k not in values]
    if missing:
        raise ValueError(f"missing metric values: {missing}")
    return json.dumps({k: values[k] for k in keys}, indent=2, sort_keys=False)
