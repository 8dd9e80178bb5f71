"""Two-step informative-patch selection: a convolutional autoencoder embeds each patch,
then k-means with k=2 splits the embeddings into useful and background clusters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn.layers import (Conv2D, Dense, DimensionError, Flatten, MaxPool2D, Reshape, Upsample2D,
                        infer_shapes, init_params, iter_param_shapes)
from .nn.network import backward_layers, forward_layers
from .optim import Adam
from .preprocess import optical_density, resize_bilinear, to_float

DEFAULT_LATENT_DIM = 32


@dataclass(frozen=True)
class AutoencoderSpec:
    input_shape: tuple
    encoder: tuple
    decoder: tuple

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        shapes = infer_shapes(self.input_shape, self.encoder)
        if len(shapes[-1]) != 1:
            raise DimensionError("encoder must end in a flat latent vector")
        out = infer_shapes(shapes[-1], self.decoder)[-1]
        if out != self.input_shape:
            raise DimensionError(f"decoder output {out} does not reproduce input {self.input_shape}")

    @property
    def latent_dim(self) -> int:
        return infer_shapes(self.input_shape, self.encoder)[-1][0]

    @property
    def layers(self) -> tuple:
        return self.encoder + self.decoder


def default_autoencoder_spec(input_size: int = 16, channels: int = 3, latent_dim: int = DEFAULT_LATENT_DIM,
                             filters: int = 8) -> AutoencoderSpec:
    """Conv/pool encoder to a linear latent, mirrored upsampling decoder with sigmoid output."""
    if input_size % 4:
        raise ValueError("autoencoder input size must be divisible by 4")
    q = input_size // 4
    encoder = (Conv2D(filters, 3, "relu"), MaxPool2D(2), Conv2D(filters, 3, "relu"), MaxPool2D(2),
               Flatten(), Dense(latent_dim, "linear"))
    decoder = (Dense(q * q * filters, "relu"), Reshape((q, q, filters)), Upsample2D(2),
               Conv2D(filters, 3, "relu"), Upsample2D(2), Conv2D(channels, 3, "sigmoid"))
    return AutoencoderSpec((input_size, input_size, channels), encoder, decoder)


@dataclass
class Autoencoder:
    spec: AutoencoderSpec
    params: dict
    history: list = field(default_factory=list)


def _check_batch(spec, x):
    x = np.asarray(x)
    if x.shape[1:] != spec.input_shape:
        raise DimensionError(f"patches of shape {x.shape[1:]} do not match autoencoder input {spec.input_shape}")
    return x


def reconstruction_mse(ae: Autoencoder, x, batch_size: int = 256) -> float:
    x = _check_batch(ae.spec, x)
    total = 0.0
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size].astype(np.float32)
        out, _ = forward_layers(ae.spec.layers, ae.params, xb)
        total += float(np.sum((out.astype(np.float64) - xb) ** 2))
    return total / x.size


def autoencoder_train(patches, spec: AutoencoderSpec, optimizer=None, epochs: int = 10, seed: int = 0,
                      batch_size: int = 32) -> Autoencoder:
    """Fit the autoencoder to minimise mean squared reconstruction error.

    ``patches`` are float arrays in [0, 1] shaped like ``spec.input_shape``. The reconstruction
    MSE over the whole training set after every epoch is kept in ``history``.
    """
    x = np.asarray(patches, dtype=np.float32)
    if len(x) == 0:
        raise ValueError("autoencoder needs at least one patch")
    x = _check_batch(spec, x)
    rng = np.random.default_rng(seed)
    params = init_params(spec.input_shape, spec.layers, seed=rng)
    optimizer = optimizer if optimizer is not None else Adam(lr=0.001)
    ae = Autoencoder(spec, params)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            xb = x[order[start:start + batch_size]]
            out, trace = forward_layers(spec.layers, params, xb, training=True, rng=rng)
            dout = (2.0 / out.size) * (out - xb)
            grads = {}
            backward_layers(spec.layers, params, trace, dout, grads)
            optimizer.step(params, {k: grads[k] for k in params})
        ae.history.append(reconstruction_mse(ae, x))
    return ae


def encode(ae: Autoencoder, patches):
    """Latent vectors for one patch or a batch (float inputs in [0, 1])."""
    x = np.asarray(patches, dtype=np.float32)
    single = x.shape == ae.spec.input_shape
    if single:
        x = x[None]
    x = _check_batch(ae.spec, x)
    enc_params = {k: ae.params[k] for k, _ in iter_param_shapes(ae.spec.input_shape, ae.spec.encoder)}
    z, _ = forward_layers(ae.spec.encoder, enc_params, x)
    return z[0] if single else z


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray
    inertia: float
    labels: np.ndarray
    history: list
    n_iter: int


def _sq_distances(x, centroids):
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def kmeans_fit(latents, k: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-10) -> ClusterModel:
    """Lloyd's algorithm from ``k`` distinct seeded data points.

    Ties in assignment go to the lowest centroid index. An empty cluster is re-seeded at the
    point farthest from its current centroid. Stops when assignments repeat, the largest
    centroid shift drops below ``tol``, or after ``max_iters``. ``history`` holds the
    objective (sum of squared distances) after each assignment step.
    """
    x = np.asarray(latents, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = len(x)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = x[rng.choice(n, size=k, replace=False)].copy()
    labels = None
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        d2 = _sq_distances(x, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        updated = centroids.copy()
        counts = np.bincount(labels, minlength=k)
        for j in range(k):
            if counts[j]:
                updated[j] = x[labels == j].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            point_cost = d2[np.arange(n), labels]
            far = np.argsort(-point_cost, kind="stable")
            for j, idx in zip(empty, far):
                updated[j] = x[idx]
        shift = float(np.max(np.linalg.norm(updated - centroids, axis=1)))
        centroids = updated
        if shift < tol:
            break
    d2 = _sq_distances(x, centroids)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    return ClusterModel(k, centroids, inertia, labels, history, it)


def kmeans_assign(model: ClusterModel, latent) -> int:
    """Index of the nearest centroid; ties go to the lowest index."""
    v = np.asarray(latent, dtype=np.float64).reshape(-1)
    if v.shape[0] != model.centroids.shape[1]:
        raise DimensionError(f"latent of length {v.shape[0]} vs centroids of dim {model.centroids.shape[1]}")
    return int(np.argmin(_sq_distances(v[None], model.centroids)[0]))


def patch_intensity_variance(patches) -> np.ndarray:
    """Variance of grayscale intensity over the pixels of each patch."""
    x = np.asarray(patches, dtype=np.float64)
    gray = x.mean(axis=-1).reshape(len(x), -1)
    return gray.var(axis=1)


def patch_stain_density(patches) -> np.ndarray:
    """Mean optical density of each uint8 patch; blank glass scores near zero."""
    od = optical_density(np.asarray(patches))
    return od.reshape(len(od), -1).mean(axis=1)


USEFUL_CRITERIA = {"variance": patch_intensity_variance, "density": patch_stain_density}


def select_useful_cluster(model: ClusterModel, patches, assignments, criterion: str = "variance") -> int:
    """Cluster whose member patches score higher on average; ties go to index 0.

    ``"variance"`` scores grayscale intensity variance (textured tissue). ``"density"`` scores
    mean optical density, which also ranks half-blank border patches below full tissue.
    """
    if model.k != 2:
        raise ValueError("useful-cluster selection is defined for k = 2 only")
    try:
        score = USEFUL_CRITERIA[criterion](patches)
    except KeyError:
        raise ValueError(f"unknown criterion {criterion!r}; expected one of {sorted(USEFUL_CRITERIA)}") from None
    assignments = np.asarray(assignments)
    means = [score[assignments == j].mean() if np.any(assignments == j) else -np.inf for j in range(2)]
    return 0 if means[0] >= means[1] else 1


def format_count(count: int, total: int) -> str:
    """``7,742 (46%)`` style cell."""
    pct = int(np.floor(100.0 * count / total + 0.5)) if total else 0
    return f"{count:,} ({pct}%)"


def cluster_table(groups: dict) -> list:
    """Rows ``[name, total, useful, not useful]`` for ``{name: useful_mask}``, with a Total row."""
    rows = []
    all_useful = all_total = 0
    for name, mask in groups.items():
        mask = np.asarray(mask, dtype=bool)
        useful, total = int(mask.sum()), int(mask.size)
        rows.append([name, f"{total:,}", format_count(useful, total), format_count(total - useful, total)])
        all_useful += useful
        all_total += total
    rows.append(["Total", f"{all_total:,}", format_count(all_useful, all_total),
                 format_count(all_total - all_useful, all_total)])
    return rows


@dataclass
class FilterResult:
    useful: np.ndarray
    autoencoder: Autoencoder
    clusters: ClusterModel
    useful_cluster: int


def prepare_for_autoencoder(images, input_size: int):
    """uint8 patches -> float autoencoder inputs resized to ``input_size``."""
    return to_float([resize_bilinear(im, input_size, input_size) for im in images])


def fit_patch_filter(images, input_size: int = 16, latent_dim: int = DEFAULT_LATENT_DIM, epochs: int = 5,
                     seed: int = 0, restarts: int = 5, criterion: str = "density") -> FilterResult:
    """Train the autoencoder on ``images`` (uint8 patches), cluster the latents and pick
    the useful cluster. The best of ``restarts`` seeded k-means runs is kept."""
    x = prepare_for_autoencoder(images, input_size)
    spec = default_autoencoder_spec(input_size, x.shape[-1], latent_dim)
    ae = autoencoder_train(x, spec, epochs=epochs, seed=seed)
    z = encode(ae, x)
    best = min((kmeans_fit(z, 2, seed=seed + r) for r in range(restarts)), key=lambda m: m.inertia)
    useful_cluster = select_useful_cluster(best, images, best.labels, criterion)
    return FilterResult(best.labels == useful_cluster, ae, best, useful_cluster)


def apply_patch_filter(result: FilterResult, images, input_size: int | None = None) -> np.ndarray:
    """Useful-mask for new patches under a fitted filter."""
    size = input_size or result.autoencoder.spec.input_shape[0]
    z = encode(result.autoencoder, prepare_for_autoencoder(images, size))
    labels = np.array([kmeans_assign(result.clusters, v) for v in z], dtype=int)
    return labels == result.useful_cluster
