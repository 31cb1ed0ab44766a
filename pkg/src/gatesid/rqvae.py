"""Residual-quantized autoencoder over item content vectors.

An encoder MLP maps content vectors to a latent space; stacked codebooks
quantize the latent residually (each level encodes the residual left by
the previous one); the sum of selected codes is decoded back. The chosen
code indices form each item's hierarchical semantic ID.

Training recipe: MSE reconstruction + commitment loss with a
straight-through estimator past the quantizer, EMA codebook updates,
k-means initialization per level, and dead-code re-seeding. At levels 2+
code index 0 is pinned to the zero vector so the residual norm can never
increase across levels.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk


class DivergenceError(RuntimeError):
    pass


@dataclass
class RqVaeConfig:
    content_dim: int = 64
    latent_dim: int = 16
    levels: int = 4
    codes_per_level: int = 64
    hidden_dim: int = 32
    beta: float = 0.25          # commitment coefficient
    epochs: int = 10
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.0
    ema_decay: float = 0.99
    kmeans_iters: int = 25


@dataclass
class Codebook:
    codes: np.ndarray  # (levels, codes_per_level, latent_dim)

    @property
    def levels(self):
        return self.codes.shape[0]

    @property
    def codes_per_level(self):
        return self.codes.shape[1]

    @property
    def latent_dim(self):
        return self.codes.shape[2]


# ---------------------------------------------------------------------------
# k-means


def kmeans_fit(vectors, k, iters=25, seed=0):
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are re-seeded to the point farthest from its centroid,
    which keeps the within-cluster squared error non-increasing.
    """
    x = np.asarray(vectors, dtype=np.float64)
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < k:
        raise ValueError(f"kmeans_fit: need at least {k} distinct vectors, got {distinct.shape[0]}")
    rng = np.random.default_rng(seed)

    # k-means++ init
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(x.shape[0])]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(x.shape[0], 1.0 / x.shape[0])
        centroids[j] = x[rng.choice(x.shape[0], p=probs)]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))

    for _ in range(iters):
        dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        for j in range(k):
            members = x[assign == j]
            if members.shape[0] == 0:
                worst = dist[np.arange(x.shape[0]), assign].argmax()
                centroids[j] = x[worst]
            else:
                centroids[j] = members.mean(axis=0)
    return centroids


def kmeans_inertia(vectors, centroids):
    d = ((vectors[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return d.min(axis=1).sum()


# ---------------------------------------------------------------------------
# residual quantization


def rq_encode_batch(z, codebook):
    """Vectorized residual encode: z (N, d_z) -> (indices (N, L), residuals (N, L+1, d_z)).

    residuals[:, 0] is z itself; residuals[:, l] is what is left after
    subtracting the level-l code. Argmin ties break toward the lowest index.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.shape[0]
    L = codebook.levels
    indices = np.empty((n, L), dtype=np.int64)
    residuals = np.empty((n, L + 1, codebook.latent_dim))
    r = z.copy()
    residuals[:, 0] = r
    for level in range(L):
        codes = codebook.codes[level]
        d = ((r[:, None, :] - codes[None, :, :]) ** 2).sum(axis=2)
        idx = d.argmin(axis=1)
        indices[:, level] = idx
        r = r - codes[idx]
        residuals[:, level + 1] = r
    return indices, residuals


def rq_encode(z, codebook):
    """Single-vector residual encode; see rq_encode_batch."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (codebook.latent_dim,):
        raise ValueError(f"rq_encode: expected dimension {codebook.latent_dim}, got {z.shape}")
    indices, residuals = rq_encode_batch(z[None, :], codebook)
    return indices[0], residuals[0]


def rq_decode(indices, codebook):
    """Sum of the selected code vectors across levels."""
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (codebook.levels,):
        raise ValueError(f"rq_decode: expected {codebook.levels} indices")
    if indices.min() < 0 or indices.max() >= codebook.codes_per_level:
        raise IndexError(f"rq_decode: index out of range [0, {codebook.codes_per_level})")
    return codebook.codes[np.arange(codebook.levels), indices].sum(axis=0)


# ---------------------------------------------------------------------------
# autoencoder


def init_autoencoder(config, rng):
    """Two-layer relu MLPs for encoder and decoder."""
    def glorot(fan_in, fan_out):
        s = np.sqrt(2.0 / (fan_in + fan_out))
        return dk.Tensor(rng.normal(0.0, s, size=(fan_in, fan_out)), requires_grad=True)

    c, h, z = config.content_dim, config.hidden_dim, config.latent_dim
    return {
        "enc.w1": glorot(c, h), "enc.b1": dk.Tensor(np.zeros(h), requires_grad=True),
        "enc.w2": glorot(h, z), "enc.b2": dk.Tensor(np.zeros(z), requires_grad=True),
        "dec.w1": glorot(z, h), "dec.b1": dk.Tensor(np.zeros(h), requires_grad=True),
        "dec.w2": glorot(h, c), "dec.b2": dk.Tensor(np.zeros(c), requires_grad=True),
    }


def encode(params, x):
    h = dk.relu(dk.linear(x, params["enc.w1"], params["enc.b1"]))
    return dk.linear(h, params["enc.w2"], params["enc.b2"])


def decode(params, z):
    h = dk.relu(dk.linear(z, params["dec.w1"], params["dec.b1"]))
    return dk.linear(h, params["dec.w2"], params["dec.b2"])


def encode_latents(params, contents, batch_size=1024):
    out = []
    for lo in range(0, contents.shape[0], batch_size):
        out.append(encode(params, dk.constant(contents[lo:lo + batch_size])).values)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# training


def _init_codebook(latents, config, seed):
    """Per-level k-means on the running residuals; index 0 at levels 2+ is
    the pinned zero code, so those levels get K-1 learned centroids."""
    L, K, dz = config.levels, config.codes_per_level, config.latent_dim
    n = latents.shape[0]
    k_eff = K
    if n < 10 * K:
        k_eff = max(2, n // 10)
        warnings.warn(f"only {n} vectors for K={K}; k-means falls back to effective K={k_eff}")
    rng = np.random.default_rng([seed, 0x5EED])
    codes = np.zeros((L, K, dz))
    r = latents.copy()
    for level in range(L):
        learned = k_eff if level == 0 else k_eff - 1
        offset = 0 if level == 0 else 1
        cents = kmeans_fit(r, learned, iters=config.kmeans_iters, seed=seed + level)
        codes[level, offset:offset + learned] = cents
        # any remaining slots: jittered random residuals so they stay distinct
        for j in range(offset + learned, K):
            codes[level, j] = r[rng.integers(r.shape[0])] + rng.normal(0, 1e-3, dz)
        cb = Codebook(codes[: level + 1])
        idx, _ = rq_encode_batch(latents, cb)
        r = latents - np.array([
            codes[l][idx[:, l]] for l in range(level + 1)
        ]).sum(axis=0)
    return Codebook(codes)


def train_rqvae(content_vectors, config=None, seed=0):
    """Returns (autoencoder params, codebook, per-epoch loss curve)."""
    config = config or RqVaeConfig()
    x = np.asarray(content_vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != config.content_dim:
        raise ValueError(f"train_rqvae: expected (N, {config.content_dim}) content matrix")
    rng = np.random.default_rng([seed, 0xC0DE])
    params = init_autoencoder(config, rng)
    opt = dk.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    codebook = _init_codebook(encode_latents(params, x), config, seed)
    L, K = config.levels, config.codes_per_level
    ema_n = np.ones((L, K))
    ema_m = codebook.codes.copy()

    curve = []
    n = x.shape[0]
    for epoch in range(config.epochs):
        order = np.random.default_rng([seed, 1000 + epoch]).permutation(n)
        epoch_loss = 0.0
        epoch_counts = np.zeros((L, K), dtype=np.int64)
        last_residuals = None
        for lo in range(0, n, config.batch_size):
            batch = x[order[lo:lo + config.batch_size]]
            with dk.Tape() as tape:
                z = encode(params, dk.constant(batch))
                idx, residuals = rq_encode_batch(z.values, codebook)
                q = residuals[:, 0] - residuals[:, -1]  # sum of selected codes
                # straight-through: decoder sees q, gradient flows to z
                z_q = dk.add(z, dk.constant(q - z.values))
                x_hat = decode(params, z_q)
                recon = dk.tmean(dk.square(dk.sub(x_hat, dk.constant(batch))))
                commit = dk.tmean(dk.square(dk.sub(z, dk.constant(q))))
                loss = dk.add(recon, dk.affine(commit, config.beta))
                if not np.isfinite(loss.values):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                dk.backward(loss, tape)
            opt.step()
            opt.zero_grad()
            epoch_loss += float(loss.values) * batch.shape[0]

            # EMA codebook update from assigned residual inputs
            for level in range(L):
                counts = np.bincount(idx[:, level], minlength=K).astype(np.float64)
                sums = np.zeros((K, config.latent_dim))
                np.add.at(sums, idx[:, level], residuals[:, level])
                d = config.ema_decay
                ema_n[level] = d * ema_n[level] + (1 - d) * counts
                ema_m[level] = d * ema_m[level] + (1 - d) * sums
                start = 0 if level == 0 else 1  # keep pinned zero code frozen
                codebook.codes[level, start:] = (
                    ema_m[level, start:] / np.maximum(ema_n[level, start:], 1e-8)[:, None]
                )
                epoch_counts[level] += counts.astype(np.int64)
            last_residuals = residuals

        # dead-code re-seeding from the last batch's residuals
        reseed_rng = np.random.default_rng([seed, 2000 + epoch])
        for level in range(L):
            start = 0 if level == 0 else 1
            for j in range(start, K):
                if epoch_counts[level, j] == 0:
                    pick = reseed_rng.integers(last_residuals.shape[0])
                    codebook.codes[level, j] = (
                        last_residuals[pick, level] + reseed_rng.normal(0, 1e-4, config.latent_dim)
                    )
                    ema_n[level, j] = 1.0
                    ema_m[level, j] = codebook.codes[level, j]
        curve.append(epoch_loss / n)

    return params, codebook, curve


def codebook_utilization(contents, params, codebook):
    idx, _ = rq_encode_batch(encode_latents(params, contents), codebook)
    return np.array([
        len(np.unique(idx[:, level])) / codebook.codes_per_level
        for level in range(codebook.levels)
    ])


def assign_sids(content_vectors, params, codebook):
    """One semantic ID per item, deterministic given trained artifacts."""
    x = np.asarray(content_vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params["enc.w1"].shape[0]:
        raise ValueError(f"assign_sids: content dimension mismatch, got {x.shape}")
    z = encode_latents(params, x)
    idx, _ = rq_encode_batch(z, codebook)
    return idx


# ---------------------------------------------------------------------------
# artifacts


def save_codebook(path, codebook, config, seed, params=None):
    """Quantizer codes plus (optionally) the trained autoencoder weights."""
    meta = {
        "levels": codebook.levels,
        "codes_per_level": codebook.codes_per_level,
        "latent_dim": codebook.latent_dim,
        "beta": config.beta,
        "seed": seed,
    }
    arrays = {"codes": codebook.codes}
    for k, v in (params or {}).items():
        arrays["ae." + k] = v.values if isinstance(v, dk.Tensor) else np.asarray(v)
    dk.save_arrays(path, arrays, meta)


def load_codebook(path):
    """Returns (codebook, autoencoder params or None, meta)."""
    arrays, meta = dk.load_arrays(path)
    params = {k[3:]: dk.Tensor(v) for k, v in arrays.items() if k.startswith("ae.")}
    return Codebook(arrays["codes"]), (params or None), meta


def save_sid_table(path, item_ids, sids):
    levels = sids.shape[1]
    header = "item_id," + ",".join(f"s{k+1}" for k in range(levels))
    lines = [header]
    for i, row in zip(item_ids, sids):
        lines.append(f"{int(i)}," + ",".join(str(int(v)) for v in row))
    dk.atomic_write_text(path, "\n".join(lines) + "\n")


def load_sid_table(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return data[:, 0], data[:, 1:]
