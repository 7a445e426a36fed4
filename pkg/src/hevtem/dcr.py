"""Unsupervised driving-condition recognition.

Pipeline: 60-second windows -> ten statistical features -> z-score
normalization -> PCA to five components -> EM-fitted Gaussian mixture
(K = 3) -> lightweight nearest-cluster classification against the mixture
means. Cluster-to-style names are bound post-fit by ordering the clusters'
raw mean speeds (lowest = city, highest = highway).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import BadWindow, DegenerateInput, SingularCovariance

WINDOW_S = 60
IDLE_SPEED_M_S = 0.5
CRUISE_ACCEL_M_S2 = 0.1

FEATURE_NAMES = (
    "max_speed", "min_speed", "mean_speed", "speed_std",
    "mean_accel", "mean_decel", "accel_std",
    "idle_frac", "cruise_frac", "accel_frac",
)


class StyleLabel(IntEnum):
    URBAN = 0
    HIGHWAY = 1
    CITY = 2


STYLE_BY_NAME = {"urban": StyleLabel.URBAN, "highway": StyleLabel.HIGHWAY,
                 "city": StyleLabel.CITY}


def segment_features(window) -> np.ndarray:
    """The ten per-window statistics (fixed order, see FEATURE_NAMES).

    Acceleration comes from first differences; idle is the fraction of
    samples below the idle speed, cruise the fraction of moving samples with
    near-zero acceleration, and the accel fraction uses the same threshold.
    """
    v = np.asarray(window, dtype=float)
    if v.shape != (WINDOW_S,):
        raise BadWindow(f"expected {WINDOW_S} samples, got {v.shape}")
    if np.any(v < 0.0) or not np.all(np.isfinite(v)):
        raise BadWindow("window speeds must be finite and >= 0")
    a = np.diff(v)
    pos = a[a > 0]
    neg = a[a < 0]
    moving = v[:-1] >= IDLE_SPEED_M_S
    return np.array([
        v.max(),
        v.min(),
        v.mean(),
        v.std(),
        pos.mean() if pos.size else 0.0,
        neg.mean() if neg.size else 0.0,
        a.std(),
        float(np.mean(v < IDLE_SPEED_M_S)),
        float(np.mean((np.abs(a) < CRUISE_ACCEL_M_S2) & moving)),
        float(np.mean(a > CRUISE_ACCEL_M_S2)),
    ])


def windows_from_cycle(speeds, window_s: int = WINDOW_S,
                       stride_s: int = WINDOW_S) -> list[np.ndarray]:
    """Non-overlapping by default; pass stride 1 for online-style windows."""
    v = np.asarray(speeds, dtype=float)
    return [v[i:i + window_s]
            for i in range(0, len(v) - window_s + 1, stride_s)]


# ---------------------------------------------------------------------------
# PCA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PcaModel:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    loadings: np.ndarray          # (n_features, retained)
    explained_ratio: np.ndarray   # retained, descending

    @property
    def retained(self) -> int:
        return self.loadings.shape[1]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.feature_mean) / self.feature_std

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.feature_std + self.feature_mean

    def transform(self, x: np.ndarray) -> np.ndarray:
        return self.normalize(x) @ self.loadings


def fit_pca(features: np.ndarray, retained: int = 5) -> PcaModel:
    """Z-score then eigendecompose the covariance; keep the top components.

    Deterministic sign convention: each component's largest-magnitude loading
    is positive.
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.shape[0] < retained + 1:
        raise DegenerateInput(f"need at least {retained + 1} feature rows")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1e-12, std)
    z = (x - mean) / std
    cov = z.T @ z / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order]
    total = eigvals.sum()
    if total <= 0.0:
        raise DegenerateInput("feature matrix has zero variance")
    for j in range(eigvecs.shape[1]):
        k = np.argmax(np.abs(eigvecs[:, j]))
        if eigvecs[k, j] < 0:
            eigvecs[:, j] = -eigvecs[:, j]
    return PcaModel(mean, std, eigvecs[:, :retained].copy(),
                    (eigvals / total)[:retained].copy())


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------


@dataclass
class GmmModel:
    weights: np.ndarray            # (K,)
    means: np.ndarray              # (K, d)
    covariances: np.ndarray        # (K, d, d)
    style_map: dict[int, StyleLabel]
    loglik_curve: np.ndarray

    @property
    def n_components(self) -> int:
        return len(self.weights)


def _log_gauss(z: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance not positive definite") from exc
    diff = z - mean
    y = np.linalg.solve(chol, diff.T).T
    maha = np.sum(y * y, axis=1)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)


def _init_centers(z: np.ndarray, k: int, lloyd_iters: int = 50) -> np.ndarray:
    """Deterministic seeding: quantile bands along the leading principal
    direction, refined by Lloyd iterations.

    Both stages depend only on the empirical distribution, so the result is
    invariant to duplicating the dataset (unlike sampled k-means++ seeding).
    """
    centered = z - z.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    pc1 = vt[0]
    if pc1[np.argmax(np.abs(pc1))] < 0:
        pc1 = -pc1
    order = np.argsort(centered @ pc1, kind="stable")
    bands = np.array_split(order, k)
    centers = np.array([z[idx].mean(axis=0) for idx in bands])
    for _ in range(lloyd_iters):
        dists = np.linalg.norm(z[:, None, :] - centers[None, :, :], axis=2)
        assign = dists.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            sel = assign == j
            if np.any(sel):
                new_centers[j] = z[sel].mean(axis=0)
        if np.allclose(new_centers, centers, atol=1e-12):
            break
        centers = new_centers
    return centers


def fit_gmm(z: np.ndarray, k: int = 3, reg_eps: float = 1e-4,
            seed: int = 0, tol: float = 1e-6, max_iter: int = 500) -> GmmModel:
    """EM with per-step ridge regularization of every covariance.

    Initialization is the greedy farthest-first variant of k-means++ seeding,
    which is deterministic for a fixed dataset (the seed is accepted for API
    stability but the procedure draws nothing from it).
    """
    z = np.asarray(z, dtype=float)
    n, d = z.shape
    if n < 10 * k:
        raise DegenerateInput(f"need at least {10 * k} rows to fit {k} components")
    means = _init_centers(z, k)
    base_cov = np.cov(z.T, ddof=1).reshape(d, d) + reg_eps * np.eye(d)
    covs = np.repeat(base_cov[None, :, :], k, axis=0)
    weights = np.full(k, 1.0 / k)

    loglik_curve = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        log_resp = np.empty((n, k))
        for j in range(k):
            log_resp[:, j] = np.log(weights[j]) + _log_gauss(z, means[j], covs[j])
        m = log_resp.max(axis=1, keepdims=True)
        log_norm = m[:, 0] + np.log(np.exp(log_resp - m).sum(axis=1))
        ll = float(log_norm.sum())
        if ll < prev_ll:
            # the ridge added after each M-step is not part of the recorded
            # objective, so a sub-tolerance dip can appear right at
            # convergence; keep the better previous iterate instead
            weights, means, covs = prev_params
            break
        loglik_curve.append(ll)
        resp = np.exp(log_resp - log_norm[:, None])

        prev_params = (weights.copy(), means.copy(), covs.copy())
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / n
        means = (resp.T @ z) / nk[:, None]
        for j in range(k):
            diff = z - means[j]
            covs[j] = (resp[:, j][:, None] * diff).T @ diff / nk[j]
            covs[j] += reg_eps * np.eye(d)
            try:
                np.linalg.cholesky(covs[j])
            except np.linalg.LinAlgError as exc:
                raise SingularCovariance(
                    f"component {j} covariance stayed singular after "
                    f"regularization ({reg_eps})") from exc
        if ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = ll

    return GmmModel(weights, means, covs,
                    {j: StyleLabel(j % 3) for j in range(k)},
                    np.array(loglik_curve))


def gmm_pdf(z: np.ndarray, model: GmmModel) -> float:
    """Mixture density at one point."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    dens = 0.0
    for j in range(model.n_components):
        dens += model.weights[j] * float(
            np.exp(_log_gauss(z, model.means[j], model.covariances[j]))[0])
    return dens


def classify_lncc(raw_features: np.ndarray, gmm: GmmModel,
                  pca: PcaModel) -> StyleLabel:
    """Nearest cluster mean in projected space; ties break to the lowest
    cluster index."""
    z = pca.transform(np.asarray(raw_features, dtype=float))
    dists = np.linalg.norm(gmm.means - z, axis=1)
    return gmm.style_map[int(np.argmin(dists))]


# ---------------------------------------------------------------------------
# the full recognizer
# ---------------------------------------------------------------------------


@dataclass
class DcrModel:
    pca: PcaModel
    gmm: GmmModel

    def classify(self, raw_features: np.ndarray) -> StyleLabel:
        return classify_lncc(raw_features, self.gmm, self.pca)

    def classify_window(self, speeds) -> StyleLabel:
        return self.classify(segment_features(speeds))


def fit_dcr(cycles: list[np.ndarray], retained: int = 5, k: int = 3,
            reg_eps: float = 1e-4, seed: int = 0) -> DcrModel:
    """Fit the full recognizer on raw speed cycles.

    Styles are bound to clusters by their raw mean-speed ordering
    (lowest = city, middle = urban, highest = highway).
    """
    feats = []
    for speeds in cycles:
        for window in windows_from_cycle(speeds):
            feats.append(segment_features(window))
    feats = np.array(feats)
    pca = fit_pca(feats, retained)
    gmm = fit_gmm(pca.transform(feats), k, reg_eps, seed)

    projected = pca.transform(feats)
    assign = np.argmin(
        np.linalg.norm(projected[:, None, :] - gmm.means[None, :, :], axis=2),
        axis=1)
    mean_speed_idx = FEATURE_NAMES.index("mean_speed")
    cluster_speed = np.array([
        feats[assign == j, mean_speed_idx].mean() if np.any(assign == j)
        else np.inf
        for j in range(gmm.n_components)])
    order = np.argsort(cluster_speed)
    by_rank = [StyleLabel.CITY, StyleLabel.URBAN, StyleLabel.HIGHWAY]
    gmm.style_map = {int(cluster): by_rank[min(rank, 2)]
                     for rank, cluster in enumerate(order)}
    return DcrModel(pca, gmm)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def dcr_to_json(model: DcrModel) -> str:
    doc = {
        "feature_names": list(FEATURE_NAMES),
        "pca": {
            "feature_mean": model.pca.feature_mean.tolist(),
            "feature_std": model.pca.feature_std.tolist(),
            "loadings": model.pca.loadings.tolist(),
            "explained_ratio": model.pca.explained_ratio.tolist(),
        },
        "gmm": {
            "weights": model.gmm.weights.tolist(),
            "means": model.gmm.means.tolist(),
            "covariances": model.gmm.covariances.tolist(),
            "style_map": {str(kk): int(v) for kk, v in
                          model.gmm.style_map.items()},
            "loglik_curve": model.gmm.loglik_curve.tolist(),
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def dcr_from_json(text: str) -> DcrModel:
    doc = json.loads(text)
    pca = PcaModel(np.array(doc["pca"]["feature_mean"]),
                   np.array(doc["pca"]["feature_std"]),
                   np.array(doc["pca"]["loadings"]),
                   np.array(doc["pca"]["explained_ratio"]))
    gmm = GmmModel(np.array(doc["gmm"]["weights"]),
                   np.array(doc["gmm"]["means"]),
                   np.array(doc["gmm"]["covariances"]),
                   {int(kk): StyleLabel(v)
                    for kk, v in doc["gmm"]["style_map"].items()},
                   np.array(doc["gmm"]["loglik_curve"]))
    return DcrModel(pca, gmm)
