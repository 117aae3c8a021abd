"""Image-level appearance encoding and comparison.

An image's local descriptors are PCA-projected, aggregated into a Fisher
vector (gradients of the GMM log-likelihood with respect to means and
standard deviations), power- and L2-normalized, compressed by kernel PCA,
and compared with the cosine distance.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from .ingest import ImageFeatures
from .vocab import (
    Embedding,
    Gmm,
    PcaModel,
    Vocabulary,
    VocabError,
    apply_kpca,
    apply_pca,
    fit_gmm,
    fit_kpca,
    fit_pca,
    gmm_posteriors,
)

EMBED_MAGIC = "PATEMB"
EMBED_VERSION = 1

DEFAULT_GMM_K = 16
DEFAULT_PCA_DIM = 64
MAX_KPCA_DIM = 512


def fisher_encode(features: ImageFeatures, pca: PcaModel, gmm: Gmm) -> np.ndarray:
    """Fisher vector of one image: per-component mean and variance gradients.

    With T projected descriptors x_t and posteriors gamma_t(k), each
    component k contributes
        G_mu_k    = 1/(T sqrt(pi_k))   * sum_t gamma_t(k) (x_t - mu_k) / sigma_k
        G_sigma_k = 1/(T sqrt(2 pi_k)) * sum_t gamma_t(k) [((x_t - mu_k)/sigma_k)^2 - 1]
    concatenated as [G_mu_1, G_sigma_1, ..., G_mu_K, G_sigma_K], total
    dimension 2*K*D.  Weight gradients are excluded.  An empty image yields
    the zero vector as the degenerate signal.
    """
    k, d = gmm.n_components, gmm.dim
    if features.count == 0:
        return np.zeros(2 * k * d)
    X = apply_pca(pca, features.descriptors)
    t = X.shape[0]
    gamma = gmm_posteriors(gmm, X)
    sigma = np.sqrt(gmm.variances)

    # Sufficient statistics; avoids materializing a (T, K, D) tensor.
    nk = gamma.sum(axis=0)
    sx = gamma.T @ X
    sx2 = gamma.T @ (X * X)

    g_mu = (sx - nk[:, None] * gmm.means) / sigma
    g_mu /= (t * np.sqrt(gmm.weights))[:, None]
    g_sigma = (
        sx2 - 2.0 * gmm.means * sx + nk[:, None] * gmm.means**2
    ) / gmm.variances - nk[:, None]
    g_sigma /= (t * np.sqrt(2.0 * gmm.weights))[:, None]

    out = np.empty((k, 2, d))
    out[:, 0, :] = g_mu
    out[:, 1, :] = g_sigma
    return out.reshape(-1)


def power_l2_normalize(v: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Signed power then L2 normalization; the zero vector passes through."""
    v = np.asarray(v, dtype=np.float64)
    p = np.sign(v) * np.abs(v) ** alpha
    norm = float(np.linalg.norm(p))
    return p if norm == 0.0 else p / norm


def embed_image(features: ImageFeatures, vocab: Vocabulary) -> Embedding:
    """Full appearance chain: Fisher vector, normalization, kernel PCA.

    Images with no features (or an exactly-zero encoding) come back flagged
    degenerate; everything else is unit norm.
    """
    if features.count == 0:
        return Embedding(values=np.zeros(vocab.kpca.out_dim), degenerate=True)
    fv = fisher_encode(features, vocab.pca, vocab.gmm)
    nv = power_l2_normalize(fv, vocab.alpha)
    if not np.any(nv):
        return Embedding(values=np.zeros(vocab.kpca.out_dim), degenerate=True)
    return apply_kpca(vocab.kpca, nv)


def cosine_distance(a: Embedding, b: Embedding) -> float:
    """d_L = 1 - cos(a, b), in [0, 2]; degenerate inputs score maximal 2."""
    if a.degenerate or b.degenerate:
        return 2.0
    na = float(np.linalg.norm(a.values))
    nb = float(np.linalg.norm(b.values))
    return float(1.0 - float(a.values @ b.values) / (na * nb))


def train_vocabulary(
    feature_sets: Sequence[ImageFeatures],
    gmm_k: int = DEFAULT_GMM_K,
    pca_dim: int = DEFAULT_PCA_DIM,
    kpca_dim: Optional[int] = None,
    alpha: float = 0.5,
    whiten: bool = True,
    seed: int = 0,
) -> Vocabulary:
    """Fit the whole appearance model on the database images.

    Pools all descriptors for PCA and the GMM, Fisher-encodes each database
    image, and fits the kernel-PCA compressor on the normalized Fisher
    vectors.  kpca_dim defaults to min(N_db - 1, 512).
    """
    non_empty = [f for f in feature_sets if f.count > 0]
    if len(feature_sets) < 2:
        raise VocabError(f"need at least 2 database images, got {len(feature_sets)}")
    if not non_empty:
        raise VocabError("all database images are empty")
    pooled = np.vstack([f.descriptors for f in non_empty])
    pca = fit_pca(pooled, pca_dim, whiten=whiten)
    gmm = fit_gmm(apply_pca(pca, pooled), gmm_k, seed=seed)

    fvs = np.stack(
        [
            power_l2_normalize(fisher_encode(f, pca, gmm), alpha)
            for f in feature_sets
        ]
    )
    if kpca_dim is None:
        kpca_dim = min(len(feature_sets) - 1, MAX_KPCA_DIM)
    kpca = fit_kpca(fvs, kpca_dim)
    return Vocabulary(
        pca=pca,
        gmm=gmm,
        kpca=kpca,
        descriptor_dim=pooled.shape[1],
        alpha=alpha,
    )


def write_embedding_store(items: Sequence[Tuple[str, Embedding]], path) -> None:
    """One row per image: id, dimension, values; degenerate rows are zeros."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{EMBED_MAGIC} {EMBED_VERSION}\n")
        for image_id, emb in items:
            dim = emb.values.shape[0]
            values = " ".join(repr(float(v)) for v in emb.values)
            fh.write(f"{image_id} {dim} {values}\n")


def load_embedding_store(path) -> list:
    """Parse an embedding store back into (image_id, Embedding) pairs."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].split() != [EMBED_MAGIC, str(EMBED_VERSION)]:
        raise VocabError(f"{path}: bad embedding store header")
    items = []
    for i, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tokens = line.split()
        try:
            image_id, dim = tokens[0], int(tokens[1])
            values = np.array(tokens[2:], dtype=np.float64)
        except (ValueError, IndexError):
            raise VocabError(f"{path}:{i}: malformed embedding row") from None
        if values.shape[0] != dim:
            raise VocabError(
                f"{path}:{i}: declared dim {dim}, found {values.shape[0]} values"
            )
        degenerate = not np.any(values)
        items.append((image_id, Embedding(values=values, degenerate=degenerate)))
    return items
