"""Unpaired translation between the two embedding spaces.

A perceptron maps source-modality embeddings into the target space, trained
either adversarially against a real/fake discriminator or by minimizing the
squared maximum mean discrepancy, optionally through learned critic features
(kernel learning with weight clipping and an autoencoding penalty). Source
and target batches are drawn independently: nothing is paired.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .errors import DivergenceError
from .layers import DenseLayer, Module
from .optim import Adam

logger = logging.getLogger(__name__)

BANDWIDTH_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)


@dataclass
class KernelSpec:
    """Mixture of RBF kernels: k(x, y) = sum_q exp(-||x-y||^2 / (2 sigma_q^2))."""

    bandwidths: tuple = field(default_factory=lambda: (1.0,))

    def __post_init__(self):
        self.bandwidths = tuple(float(b) for b in self.bandwidths)
        if any(b <= 0 for b in self.bandwidths):
            raise ValueError(f"kernel bandwidths must be positive, got {self.bandwidths}")

    def gram(self, x: Tensor, y: Tensor) -> Tensor:
        """Differentiable Gram matrix between rows of x and rows of y."""
        d = ad.pairwise_sq_dists(x, y)
        total = None
        for sigma in self.bandwidths:
            term = ad.exp(ad.scale(d, -1.0 / (2.0 * sigma * sigma)))
            total = term if total is None else ad.add(total, term)
        return total

    def gram_np(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        sq_x = np.sum(x * x, axis=1)[:, None]
        sq_y = np.sum(y * y, axis=1)[None, :]
        d = np.maximum(sq_x + sq_y - 2.0 * (x @ y.T), 0.0)
        return sum(np.exp(d * (-1.0 / (2.0 * s * s))) for s in self.bandwidths)


def _as_batch(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 2:
        raise ShapeError(f"embedding batch must be 2-D, got {t.shape}")
    return t


def mmd2_biased(x, y, kernel: KernelSpec) -> Tensor:
    """V-statistic estimator of squared MMD; symmetric and never negative."""
    x, y = _as_batch(x), _as_batch(y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd2: dimension mismatch {x.shape} vs {y.shape}")
    raw = ad.sub(ad.add(ad.reduce("mean", kernel.gram(x, x)),
                        ad.reduce("mean", kernel.gram(y, y))),
                 ad.scale(ad.reduce("mean", kernel.gram(x, y)), 2.0))
    # mathematically >= 0; relu only absorbs float round-off near zero
    return ad.relu(raw)


def _offdiag_mean(gram: Tensor) -> Tensor:
    n = gram.shape[0]
    if n < 2:
        raise ShapeError("unbiased mmd2 needs batches of at least 2")
    mask = Tensor(1.0 - np.eye(n))
    return ad.scale(ad.reduce("sum", ad.mul(gram, mask)), 1.0 / (n * (n - 1)))


def mmd2_unbiased(x, y, kernel: KernelSpec) -> Tensor:
    """U-statistic estimator: within-set means skip the diagonal; may be negative."""
    x, y = _as_batch(x), _as_batch(y)
    if x.shape[1] != y.shape[1]:
        raise ShapeError(f"mmd2: dimension mismatch {x.shape} vs {y.shape}")
    return ad.sub(ad.add(_offdiag_mean(kernel.gram(x, x)),
                         _offdiag_mean(kernel.gram(y, y))),
                  ad.scale(ad.reduce("mean", kernel.gram(x, y)), 2.0))


def median_heuristic(x: np.ndarray, y: np.ndarray) -> float:
    """Base bandwidth: sigma0^2 = median pairwise squared distance / 2.

    Falls back to 1.0 (with a warning) when all pooled points coincide.
    """
    pooled = np.concatenate([np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)])
    if pooled.shape[0] < 2:
        raise ShapeError("median_heuristic needs at least 2 pooled points")
    sq = np.sum(pooled * pooled, axis=1)
    d = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (pooled @ pooled.T), 0.0)
    upper = d[np.triu_indices(pooled.shape[0], k=1)]
    if upper.max() == 0.0:
        logger.warning("median_heuristic: all pooled points identical; using sigma0 = 1")
        return 1.0
    return float(np.sqrt(np.median(upper) / 2.0))


def mixture_kernel(sigma0: float, scales=BANDWIDTH_SCALES) -> KernelSpec:
    return KernelSpec(tuple(sigma0 * s for s in scales))


class MapperGenerator(Module):
    """Two-hidden-layer perceptron from source space to target space."""

    def __init__(self, source_dim: int, target_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.source_dim = source_dim
        self.target_dim = target_dim
        self.l1 = self._child("l1", DenseLayer(source_dim, hidden, rng))
        self.l2 = self._child("l2", DenseLayer(hidden, hidden, rng))
        self.l3 = self._child("l3", DenseLayer(hidden, target_dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.l3(ad.relu(self.l2(ad.relu(self.l1(x)))))


class MapperDiscriminator(Module):
    def __init__(self, target_dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.l1 = self._child("l1", DenseLayer(target_dim, hidden, rng))
        self.l2 = self._child("l2", DenseLayer(hidden, hidden, rng))
        self.l3 = self._child("l3", DenseLayer(hidden, 1, rng))

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.leaky_relu(self.l1(x), 0.2)
        h = ad.leaky_relu(self.l2(h), 0.2)
        return ad.sigmoid(ad.reshape(self.l3(h), (x.shape[0],)))


class MMDCritic(Module):
    """Feature encoder f and decoder f' for adversarial kernel learning.

    All parameters stay inside [-clip, clip]; the decoder supports the
    autoencoding penalty that keeps f from collapsing.
    """

    def __init__(self, target_dim: int, hidden: int, critic_dim: int, clip: float,
                 rng: np.random.Generator):
        super().__init__()
        self.clip = clip
        self.e1 = self._child("e1", DenseLayer(target_dim, hidden, rng))
        self.e2 = self._child("e2", DenseLayer(hidden, critic_dim, rng))
        self.d1 = self._child("d1", DenseLayer(critic_dim, hidden, rng))
        self.d2 = self._child("d2", DenseLayer(hidden, target_dim, rng))
        self.clamp()

    def encode(self, x: Tensor) -> Tensor:
        return self.e2(ad.leaky_relu(self.e1(x), 0.2))

    def decode(self, f: Tensor) -> Tensor:
        return self.d2(ad.leaky_relu(self.d1(f), 0.2))

    def clamp(self):
        for p in self.parameters():
            np.clip(p.data, -self.clip, self.clip, out=p.data)


def map_embedding(gen: MapperGenerator, e: np.ndarray) -> np.ndarray:
    """Deterministic mapping of one embedding or a batch into the target space."""
    e = np.asarray(e, dtype=np.float64)
    single = e.ndim == 1
    batch = e[None] if single else e
    if batch.shape[1] != gen.source_dim:
        raise ShapeError(f"mapper expects dimension {gen.source_dim}, got {batch.shape[1]}")
    with ad.no_grad():
        out = gen(Tensor(batch)).data.copy()
    return out[0] if single else out


@dataclass
class MapperConfig:
    kind: str = "mmd"
    hidden: int = 256
    batch: int = 64
    steps: int = 2000
    lr: float = 1e-4
    n_critic: int = 5
    clip: float = 0.1
    lambda_ae: float = 1.0
    critic_hidden: int = 64
    critic_dim: int = 32
    kernel_learning: bool = True


def _sample(rows: np.ndarray, batch: int, rng: np.random.Generator) -> np.ndarray:
    return rows[rng.integers(0, rows.shape[0], size=batch)]


def _check_sets(source: np.ndarray, target: np.ndarray, cfg: MapperConfig):
    if source.ndim != 2 or target.ndim != 2:
        raise ShapeError("embedding sets must be 2-D")
    if cfg.batch < 2:
        raise ShapeError("mapper batch size must be at least 2")


def train_gan_mapper(source: np.ndarray, target: np.ndarray, cfg: MapperConfig,
                     rng: np.random.Generator, log=None) -> tuple[MapperGenerator, list[dict]]:
    """Alternating discriminator/generator updates with the cross-entropy GAN loss."""
    _check_sets(source, target, cfg)
    gen = MapperGenerator(source.shape[1], target.shape[1], cfg.hidden, rng)
    disc = MapperDiscriminator(target.shape[1], cfg.hidden, rng)
    g_opt = Adam(gen.parameters(), lr=cfg.lr)
    d_opt = Adam(disc.parameters(), lr=cfg.lr)
    metrics: list[dict] = []
    last_good = [(n, p.data.copy()) for n, p in gen.named_parameters()]

    def emit(name, value):
        row = {"metric": name, "value": value}
        metrics.append(row)
        if log:
            log(row)

    one = Tensor(1.0)
    for step in range(cfg.steps):
        xb = Tensor(_sample(target, cfg.batch, rng))
        with ad.no_grad():
            fake = gen(Tensor(_sample(source, cfg.batch, rng)))
        d_loss = ad.neg(ad.add(ad.reduce("mean", ad.log(disc(xb))),
                               ad.reduce("mean", ad.log(ad.sub(one, disc(fake))))))
        d_value = d_loss.item()
        d_opt.zero_grad()
        ad.backward(d_loss)
        d_opt.step()

        fake = gen(Tensor(_sample(source, cfg.batch, rng)))
        g_loss = ad.neg(ad.reduce("mean", ad.log(disc(fake))))
        g_value = g_loss.item()
        if not (np.isfinite(d_value) and np.isfinite(g_value)):
            err = DivergenceError(f"gan mapper loss non-finite at step {step}")
            err.last_good = last_good
            raise err
        g_opt.zero_grad()
        ad.backward(g_loss)
        g_opt.step()
        last_good = [(n, p.data.copy()) for n, p in gen.named_parameters()]
        emit("d_loss", d_value)
        emit("g_loss", g_value)
    return gen, metrics


def _strided_sample(rows: np.ndarray, count: int) -> np.ndarray:
    take = min(count, rows.shape[0])
    idx = np.linspace(0, rows.shape[0] - 1, take).astype(int)
    return rows[idx]


def train_mmd_mapper(source: np.ndarray, target: np.ndarray, cfg: MapperConfig,
                     rng: np.random.Generator, log=None) -> tuple[MapperGenerator, list[dict]]:
    """Minimize unbiased MMD^2, optionally through adversarially learned features.

    With kernel_learning, each generator step is preceded by n_critic critic
    ascents on MMD^2 minus the autoencoding penalty, with weights clipped
    after every update. Kernel bandwidths are fixed at start by the median
    heuristic in the initial feature space.
    """
    _check_sets(source, target, cfg)
    gen = MapperGenerator(source.shape[1], target.shape[1], cfg.hidden, rng)
    critic = MMDCritic(target.shape[1], cfg.critic_hidden, cfg.critic_dim, cfg.clip, rng) \
        if cfg.kernel_learning else None
    g_opt = Adam(gen.parameters(), lr=cfg.lr)
    c_opt = Adam(critic.parameters(), lr=cfg.lr) if critic else None
    metrics: list[dict] = []
    last_good = [(n, p.data.copy()) for n, p in gen.named_parameters()]

    def features(x: Tensor) -> Tensor:
        return critic.encode(x) if critic else x

    with ad.no_grad():
        probe_t = _strided_sample(target, 128)
        probe_s = map_embedding(gen, _strided_sample(source, 128))
        fx = features(Tensor(probe_t)).data
        fy = features(Tensor(probe_s)).data
    kernel = mixture_kernel(median_heuristic(fx, fy))

    def emit(name, value):
        row = {"metric": name, "value": value}
        metrics.append(row)
        if log:
            log(row)

    for step in range(cfg.steps):
        if critic:
            for _ in range(cfg.n_critic):
                xb = Tensor(_sample(target, cfg.batch, rng))
                with ad.no_grad():
                    fake = gen(Tensor(_sample(source, cfg.batch, rng)))
                fx = critic.encode(xb)
                fy = critic.encode(fake)
                mmd = mmd2_unbiased(fx, fy, kernel)
                diff = ad.sub(critic.decode(fx), xb)
                rec = ad.reduce("mean", ad.mul(diff, diff))
                critic_obj = ad.neg(ad.sub(mmd, ad.scale(rec, cfg.lambda_ae)))
                c_opt.zero_grad()
                ad.backward(critic_obj)
                c_opt.step()
                critic.clamp()

        xb = Tensor(_sample(target, cfg.batch, rng))
        fake = gen(Tensor(_sample(source, cfg.batch, rng)))
        loss = mmd2_unbiased(features(xb), features(fake), kernel)
        value = loss.item()
        if not np.isfinite(value):
            err = DivergenceError(f"mmd mapper loss non-finite at step {step}")
            err.last_good = last_good
            raise err
        g_opt.zero_grad()
        ad.backward(loss)
        g_opt.step()
        last_good = [(n, p.data.copy()) for n, p in gen.named_parameters()]
        emit("mmd2", value)
    return gen, metrics
