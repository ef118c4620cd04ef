"""Self-supervised terrain labels from vibration and range readings.

Pipeline: RMS roughness score and a 15-bin FFT-magnitude histogram per
window, k-means over ``[histogram, rms]``, clusters renumbered by ascending
mean RMS so cluster ids become ordinal terrain classes. A short range reading
overrides the vibration class with the obstacle class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

MODEL_HEADER = "terranav-cluster-model 1"


def rms(window) -> float:
    x = np.asarray(window, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty window")
    return float(np.sqrt(np.mean(x * x)))


def retained_frequencies(n_samples=20, sample_rate=60.0):
    """Frequencies of the DFT terms kept for the histogram.

    The non-negative terms below Nyquist: ``n // 2`` of them (0, 3, ..., 27 Hz
    for 20 samples at 60 Hz).
    """
    return np.arange(n_samples // 2) * sample_rate / n_samples


def spectral_histogram(window, sample_rate=60.0, n_bins=15, max_freq=30.0) -> np.ndarray:
    """Sum of DFT magnitudes per equal-width frequency bin over ``[0, max_freq]``.

    The window mean is removed first. Bins without a DFT term stay zero, and
    the bins add up to exactly the retained magnitudes.
    """
    x = np.asarray(window, dtype=np.float64)
    x = x - x.mean()
    n = len(x)
    mags = np.abs(np.fft.rfft(x))[: n // 2]
    freqs = retained_frequencies(n, sample_rate)
    idx = np.minimum((freqs / (max_freq / n_bins)).astype(int), n_bins - 1)
    return np.bincount(idx, weights=mags, minlength=n_bins).astype(np.float64)


def window_features(windows, sample_rate=60.0, n_bins=15, max_freq=30.0) -> np.ndarray:
    """``(n, n_bins + 1)`` matrix: histogram bins with the RMS appended."""
    windows = np.atleast_2d(np.asarray(windows, dtype=np.float64))
    out = np.empty((len(windows), n_bins + 1))
    for i, w in enumerate(windows):
        out[i, :n_bins] = spectral_histogram(w, sample_rate, n_bins, max_freq)
        out[i, n_bins] = rms(w)
    return out


# --------------------------------------------------------------------------- #
# k-means


@dataclass
class ClusterModel:
    centroids: np.ndarray          # (k, d), indexed by cluster id
    cluster_to_class: np.ndarray   # (k,) ordinal class of each cluster
    mean_rms: np.ndarray           # (k,) mean RMS of each cluster's members
    inertia: float
    n_iter: int

    @property
    def k(self) -> int:
        return len(self.centroids)

    def class_centroids(self) -> np.ndarray:
        """Centroids reordered so row ``c`` belongs to class ``c``."""
        out = np.empty_like(self.centroids)
        out[self.cluster_to_class] = self.centroids
        return out


def _sq_dists(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(-1)


def _kmeans_pp(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(1))
    return np.array(centers)


def _lloyd(x, centroids, max_iter):
    labels = None
    for it in range(1, max_iter + 1):
        new = np.argmin(_sq_dists(x, centroids), axis=1)
        if labels is not None and np.array_equal(new, labels):
            return centroids, labels, it
        labels = new
        for j in range(len(centroids)):
            members = x[labels == j]
            if len(members):
                centroids[j] = members.mean(0)
            else:
                # move an empty centroid onto the worst-fit point
                far = np.argmax(((x - centroids[labels]) ** 2).sum(1))
                centroids[j] = x[far]
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    return centroids, labels, max_iter


def kmeans_fit(features, k, seed=0, max_iter=100, restarts=10, rms_column=-1) -> ClusterModel:
    """k-means++ seeded Lloyd iterations, best of ``restarts`` by inertia.

    Clusters are then ordinalized: the cluster with the lowest mean value of
    ``features[:, rms_column]`` becomes class 0.
    """
    x = check_array(features, dtype=np.float64)
    n_distinct = len(np.unique(x, axis=0))
    if k < 1 or k > n_distinct:
        raise ValueError(f"k={k} exceeds the {n_distinct} distinct feature vectors")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        centroids, labels, n_iter = _lloyd(x, _kmeans_pp(x, k, rng), max_iter)
        inertia = float(((x - centroids[labels]) ** 2).sum())
        if best is None or inertia < best[0] - 1e-12 * max(1.0, abs(best[0])):
            best = (inertia, centroids.copy(), labels, n_iter)
    inertia, centroids, labels, n_iter = best
    mean_rms = np.array([x[labels == j, rms_column].mean() for j in range(k)])
    order = np.argsort(mean_rms, kind="stable")
    cluster_to_class = np.empty(k, dtype=np.int64)
    cluster_to_class[order] = np.arange(k)
    return ClusterModel(centroids=centroids, cluster_to_class=cluster_to_class,
                        mean_rms=mean_rms, inertia=inertia, n_iter=n_iter)


def assign_class(model: ClusterModel, feature) -> np.ndarray | int:
    """Nearest centroid's ordinal class; equidistant centroids resolve to the
    lower class."""
    f = np.asarray(feature, dtype=np.float64)
    single = f.ndim == 1
    f = np.atleast_2d(f)
    labels = np.argmin(_sq_dists(f, model.class_centroids()), axis=1)
    return int(labels[0]) if single else labels


def obstacle_label(min_range, threshold=0.75):
    """True when the range reading is inside the obstacle threshold."""
    r = np.asarray(min_range, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("range must be non-negative")
    out = r < threshold
    return bool(out) if out.ndim == 0 else out


def save_cluster_model(model: ClusterModel, path, meta: dict | None = None) -> None:
    lines = [MODEL_HEADER]
    for key, value in (meta or {}).items():
        lines.append(f"meta.{key} = {value}")
    lines.append(f"k = {model.k}")
    lines.append(f"dim = {model.centroids.shape[1]}")
    lines.append(f"inertia = {model.inertia!r}")
    lines.append(f"n_iter = {model.n_iter}")
    lines.append("cluster_to_class = " + " ".join(str(int(c)) for c in model.cluster_to_class))
    lines.append("mean_rms = " + " ".join(repr(float(v)) for v in model.mean_rms))
    for j, row in enumerate(model.centroids):
        lines.append(f"centroid.{j} = " + " ".join(repr(float(v)) for v in row))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cluster_model(path) -> tuple[ClusterModel, dict]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != MODEL_HEADER:
        raise ValueError(f"{path}: not a cluster model file")
    kv = dict(line.split(" = ", 1) for line in lines[1:] if " = " in line)
    k = int(kv["k"])
    model = ClusterModel(
        centroids=np.array([[float(v) for v in kv[f"centroid.{j}"].split()] for j in range(k)]),
        cluster_to_class=np.array([int(v) for v in kv["cluster_to_class"].split()]),
        mean_rms=np.array([float(v) for v in kv["mean_rms"].split()]),
        inertia=float(kv["inertia"]),
        n_iter=int(kv["n_iter"]),
    )
    meta = {key[5:]: value for key, value in kv.items() if key.startswith("meta.")}
    return model, meta


# --------------------------------------------------------------------------- #
# estimators


class SpectralFeaturizer(TransformerMixin, BaseEstimator):
    """Stateless transformer: vibration windows -> ``[histogram bins, rms]``."""

    def __init__(self, sample_rate=60.0, n_bins=15, max_freq=30.0):
        self.sample_rate = sample_rate
        self.n_bins = n_bins
        self.max_freq = max_freq

    def fit(self, X, y=None):
        check_array(X)
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        return window_features(X, self.sample_rate, self.n_bins, self.max_freq)


class VibrationLabeler(BaseEstimator):
    """Fits ordinal terrain clusters on vibration windows.

    ``n_classes`` counts the obstacle class, which is never clustered:
    ``n_classes - 1`` clusters are fitted and a range reading below
    ``obstacle_threshold`` maps to class ``n_classes - 1``.
    """

    def __init__(self, n_classes=4, sample_rate=60.0, n_bins=15, max_freq=30.0, restarts=10,
                 max_iter=100, obstacle_threshold=0.75, random_state=0):
        self.n_classes = n_classes
        self.sample_rate = sample_rate
        self.n_bins = n_bins
        self.max_freq = max_freq
        self.restarts = restarts
        self.max_iter = max_iter
        self.obstacle_threshold = obstacle_threshold
        self.random_state = random_state

    def _featurize(self, X):
        return SpectralFeaturizer(self.sample_rate, self.n_bins, self.max_freq).transform(X)

    def fit(self, X, y=None):
        feats = self._featurize(X)
        self.cluster_model_ = kmeans_fit(feats, self.n_classes - 1, seed=self.random_state,
                                         max_iter=self.max_iter, restarts=self.restarts)
        return self

    def predict(self, X, min_range=None):
        check_is_fitted(self, "cluster_model_")
        labels = np.atleast_1d(assign_class(self.cluster_model_, self._featurize(X)))
        if min_range is not None:
            labels = np.where(obstacle_label(np.atleast_1d(min_range), self.obstacle_threshold),
                              self.n_classes - 1, labels)
        return labels.astype(np.int64)

    def fit_predict(self, X, min_range=None):
        return self.fit(X).predict(X, min_range)
