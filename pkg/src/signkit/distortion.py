"""Fitted distortion distributions for synthetic sign generation.

Three families of variability observed in a training corpus are modeled
with diagonal Gaussian mixtures and later resampled to distort synthetic
instances:

* rotation: one 3D Gaussian (K=1) over Euler angle triples,
* brightness: one mean per category with a single variance pooled across
  all categories, so dark or bright sign families keep plausible values,
* scale: a two-component 1D mixture (K=2) over rectified instance sizes.

Sampling doubles every variance to bias generation toward larger
distortions; the stored model keeps the observed variances, so a fitted
model round-trips through serialization and re-fitting unchanged.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import logsumexp

from signkit.errors import InsufficientSamplesError, SignkitError
from signkit.geometry import EulerAngles

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
EM_TOL = 1e-6
EM_MAX_ITER = 300
VARIANCE_MULTIPLIER = 2.0

# Synthesis-time contrast jitter; brightness is the modeled quantity, this
# small multiplicative contrast wobble is an artifact-level choice.
CONTRAST_JITTER_MEAN = 1.0
CONTRAST_JITTER_STD = 0.15
CONTRAST_JITTER_RANGE = (0.2, 3.0)


@dataclass
class GaussianMixture:
    """Diagonal-covariance Gaussian mixture.

    ``weights`` has shape (K,), ``means`` (K, d), ``variances`` (K, d).
    ``log_likelihoods`` records the EM trajectory when produced by
    :func:`fit_gmm` (one entry per iteration, nondecreasing).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihoods: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape:
            raise SignkitError("means and variances shapes differ")
        if len(self.weights) != self.means.shape[0]:
            raise SignkitError("weight count does not match component count")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise SignkitError("mixture weights must be nonnegative and sum to 1")
        if np.any(self.variances < VARIANCE_FLOOR - 1e-18):
            raise SignkitError(f"variances below floor {VARIANCE_FLOOR}")

    @property
    def n_components(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Log density of each row of ``x`` under the mixture."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return logsumexp(self._component_log_pdf(x) + np.log(self.weights), axis=1)

    def _component_log_pdf(self, x: np.ndarray) -> np.ndarray:
        # (n, K) matrix of per-component log densities
        diff = x[:, None, :] - self.means[None, :, :]
        quad = np.sum(diff**2 / self.variances[None, :, :], axis=2)
        log_norm = -0.5 * (
            self.dim * math.log(2.0 * math.pi) + np.sum(np.log(self.variances), axis=1)
        )
        return log_norm[None, :] - 0.5 * quad

    def sample(self, rng: np.random.Generator, n: int = 1, variance_scale: float = 1.0) -> np.ndarray:
        """Draw ``n`` samples; ``variance_scale`` multiplies every variance."""
        comps = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        std = np.sqrt(self.variances * variance_scale)
        return self.means[comps] + noise * std[comps]

    def to_dict(self) -> dict[str, Any]:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "GaussianMixture":
        return cls(
            weights=np.asarray(raw["weights"]),
            means=np.asarray(raw["means"]),
            variances=np.asarray(raw["variances"]),
        )


def _kmeans_pp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: spread initial centers by squared distance."""
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(
            np.sum((x[:, None, :] - np.asarray(centers)[None, :, :]) ** 2, axis=2), axis=1
        )
        total = d2.sum()
        if total < 1e-18:
            centers.append(x[rng.integers(n)])
            continue
        centers.append(x[rng.choice(n, p=d2 / total)])
    return np.asarray(centers)


def fit_gmm(
    samples: Sequence[Sequence[float]] | np.ndarray,
    n_components: int,
    tol: float = EM_TOL,
    max_iter: int = EM_MAX_ITER,
    seed: int = 0,
    variance_floor: float = VARIANCE_FLOOR,
) -> GaussianMixture:
    """Fit a diagonal GMM by expectation-maximization.

    Initialization is seeded k-means++ followed by one hard assignment.  The
    per-iteration total log-likelihood is recorded on the result and checked
    to be nondecreasing; EM stops when the relative improvement drops below
    ``tol`` or after ``max_iter`` iterations.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if x.ndim != 2:
        raise SignkitError(f"samples must be 2D, got shape {x.shape}")
    n, d = x.shape
    if n < n_components * (d + 1):
        raise InsufficientSamplesError(
            f"{n} samples cannot support {n_components} components in {d}D "
            f"(need at least {n_components * (d + 1)})"
        )
    rng = np.random.default_rng(seed)

    if np.ptp(x, axis=0).max() < 1e-12:
        logger.warning("all samples identical; variances floored at %g", variance_floor)

    centers = _kmeans_pp_centers(x, n_components, rng)
    assignment = np.argmin(
        np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2), axis=1
    )
    weights = np.full(n_components, 1.0 / n_components)
    means = centers.copy()
    variances = np.full((n_components, d), max(x.var(axis=0).max(), variance_floor))
    for j in range(n_components):
        member = x[assignment == j]
        if len(member):
            means[j] = member.mean(axis=0)
            variances[j] = np.maximum(member.var(axis=0), variance_floor)

    gmm = GaussianMixture(weights=weights, means=means, variances=variances)
    history: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        # E step
        log_joint = gmm._component_log_pdf(x) + np.log(gmm.weights)
        log_norm = logsumexp(log_joint, axis=1)
        ll = float(log_norm.sum())
        if history and ll < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise SignkitError(
                f"EM log-likelihood decreased from {history[-1]} to {ll}"
            )
        history.append(ll)
        if np.isfinite(prev_ll) and abs(ll - prev_ll) < tol * max(1.0, abs(prev_ll)):
            break
        prev_ll = ll
        resp = np.exp(log_joint - log_norm[:, None])
        # M step
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        diff2 = (x[:, None, :] - means[None, :, :]) ** 2
        variances = np.einsum("nk,nkd->kd", resp, diff2) / nk[:, None]
        variances = np.maximum(variances, variance_floor)
        gmm = GaussianMixture(weights=weights / weights.sum(), means=means, variances=variances)

    gmm.log_likelihoods = history
    return gmm


# ---------------------------------------------------------------------------
# distortion model


@dataclass(frozen=True)
class DistortionSample:
    """One draw of synthetic distortion parameters."""

    angles: EulerAngles
    brightness_mean: float  # target mean L
    contrast_scale: float
    scale: float  # final size of the larger patch side, px

    def __post_init__(self):
        if self.scale <= 0:
            raise SignkitError(f"scale must be positive, got {self.scale}")


@dataclass
class DistortionModel:
    """Fitted distortion distributions plus the sampling-time variance boost."""

    rotation: GaussianMixture | None
    brightness_means: dict[int, float]
    brightness_variance: float
    scale: GaussianMixture
    variance_multiplier: float = VARIANCE_MULTIPLIER

    def __post_init__(self):
        if self.brightness_variance <= 0:
            raise SignkitError("shared brightness variance must be positive")

    def to_json_dict(self) -> dict[str, Any]:
        return {
            "rotation": self.rotation.to_dict() if self.rotation is not None else None,
            "brightness_means": {str(k): v for k, v in sorted(self.brightness_means.items())},
            "brightness_variance": self.brightness_variance,
            "scale": self.scale.to_dict(),
            "variance_multiplier": self.variance_multiplier,
        }

    @classmethod
    def from_json_dict(cls, raw: Mapping[str, Any]) -> "DistortionModel":
        return cls(
            rotation=(
                GaussianMixture.from_dict(raw["rotation"]) if raw.get("rotation") else None
            ),
            brightness_means={int(k): float(v) for k, v in raw["brightness_means"].items()},
            brightness_variance=float(raw["brightness_variance"]),
            scale=GaussianMixture.from_dict(raw["scale"]),
            variance_multiplier=float(raw.get("variance_multiplier", VARIANCE_MULTIPLIER)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "DistortionModel":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def pooled_brightness(brightness_by_category: Mapping[int, Sequence[float]]) -> tuple[dict[int, float], float]:
    """Per-category mean L plus one variance pooled over all categories.

    The pooled variance is the mean squared deviation of every sample from
    its own category mean (maximum-likelihood pooling), floored to keep the
    sampler well-defined on degenerate corpora.
    """
    means: dict[int, float] = {}
    sq_sum = 0.0
    count = 0
    for cat, values in brightness_by_category.items():
        arr = np.asarray(list(values), dtype=np.float64)
        if arr.size == 0:
            continue
        mu = float(arr.mean())
        means[cat] = mu
        sq_sum += float(((arr - mu) ** 2).sum())
        count += arr.size
    if not means:
        raise InsufficientSamplesError("no brightness samples in any category")
    variance = max(sq_sum / count, VARIANCE_FLOOR)
    return means, variance


def fit_distortion_model(
    angles: np.ndarray | None,
    brightness_by_category: Mapping[int, Sequence[float]],
    rectified_sizes: Sequence[float],
    seed: int = 0,
) -> DistortionModel:
    """Fit the three distortion families from per-instance statistics.

    ``angles`` is an (n, 3) array of Euler triples pooled over all
    geometry-capable instances (None or empty when the corpus has none, in
    which case synthesis skips geometric distortion).  ``rectified_sizes``
    are instance sizes in pixels measured in the rectified frame.
    """
    rotation = None
    if angles is not None:
        angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
        if angles.size:
            rotation = fit_gmm(angles, n_components=1, seed=seed)
        else:
            angles = None
    if angles is None:
        logger.warning("no rotation samples; geometric distortion will be skipped")

    means, variance = pooled_brightness(brightness_by_category)

    sizes = np.asarray(list(rectified_sizes), dtype=np.float64).reshape(-1, 1)
    if np.any(sizes <= 0):
        raise SignkitError("rectified sizes must be positive")
    scale = fit_gmm(sizes, n_components=2, seed=seed)

    return DistortionModel(
        rotation=rotation,
        brightness_means=means,
        brightness_variance=variance,
        scale=scale,
    )


def sample_distortion(
    model: DistortionModel, category_id: int, rng: np.random.Generator
) -> DistortionSample:
    """Draw one distortion sample for a category.

    Every Gaussian is sampled with its variance multiplied by
    ``model.variance_multiplier`` so synthetic instances explore a wider
    range than the training corpus.  Deterministic for a given generator
    state; draws are rejected and retried only when the scale comes out
    nonpositive.
    """
    if category_id not in model.brightness_means:
        raise SignkitError(f"unknown category {category_id} in distortion model")
    boost = model.variance_multiplier

    if model.rotation is not None:
        rot = model.rotation.sample(rng, 1, variance_scale=boost)[0]
        angles = EulerAngles(rx=float(rot[0]), ry=float(rot[1]), rz=float(rot[2]))
    else:
        angles = EulerAngles(0.0, 0.0, 0.0)

    brightness = float(
        rng.normal(
            model.brightness_means[category_id],
            math.sqrt(model.brightness_variance * boost),
        )
    )
    contrast = float(
        np.clip(
            rng.normal(CONTRAST_JITTER_MEAN, CONTRAST_JITTER_STD),
            *CONTRAST_JITTER_RANGE,
        )
    )

    size = 0.0
    for _ in range(100):
        size = float(model.scale.sample(rng, 1, variance_scale=boost)[0, 0])
        if size > 0:
            break
    else:
        size = float(model.scale.means.max())

    return DistortionSample(
        angles=angles, brightness_mean=brightness, contrast_scale=contrast, scale=size
    )
