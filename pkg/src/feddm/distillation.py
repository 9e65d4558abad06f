"""Client-side distribution matching.

A client keeps ``ipc`` learnable examples per class it holds and moves them
so that, for weights drawn around the current global model, the class-wise
mean embedding and mean logits of the synthetic examples match those of a
real batch. Only the synthetic inputs are optimized; the model is frozen.

With differential privacy enabled, the gradient of each class term is
rebuilt from per-real-example contributions, each clipped to a norm bound,
and Gaussian noise is added before the SGD step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset, sample_indices
from .models import Model
from .numerics import Tensor, grad, sample_ball_weight, sgd_step

log = logging.getLogger(__name__)


@dataclass
class SyntheticSet:
    x: np.ndarray
    y: np.ndarray
    client: int = 0
    ipc: int = 1

    def __len__(self):
        return self.y.shape[0]

    @property
    def classes(self) -> list[int]:
        return [int(c) for c in np.unique(self.y)]

    @property
    def example_floats(self) -> int:
        return int(np.prod(self.x.shape[1:]))

    @property
    def num_floats(self) -> int:
        return int(self.x.size)

    def as_dataset(self, num_classes, name="synthetic") -> Dataset:
        return Dataset(self.x, self.y, num_classes, name=name)


@dataclass
class ClientConfig:
    iterations: int = 1000
    lr: float = 1.0
    real_batch: int = 256
    ipc: int = 10
    rho: float = 5.0
    sigma: float = 0.0
    clip: float = 5.0
    # None: every synthetic example of a class is in each batch
    syn_batch: int | None = None
    # None: per-example clipping runs exactly when sigma > 0
    private: bool | None = None
    # real examples per replicated forward pass when computing per-example grads
    chunk: int = 64

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.lr > 0:
            raise ValueError("client lr must be positive")
        if self.real_batch < 1 or self.ipc < 1:
            raise ValueError("real_batch and ipc must be >= 1")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.dp_enabled and not self.clip > 0:
            raise ValueError("clip bound must be positive when DP is enabled")
        if self.syn_batch is not None and self.syn_batch < 1:
            raise ValueError("syn_batch must be >= 1")

    @property
    def dp_enabled(self) -> bool:
        return self.sigma > 0 if self.private is None else bool(self.private)


def init_synthetic(client_data: Dataset, ipc: int, seed, client: int = 0) -> SyntheticSet:
    """Copy ``ipc`` random real examples of every class the client holds."""
    if len(client_data) == 0:
        raise ValueError("client has no data")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c, idx in sorted(client_data.class_indices().items()):
        picked = sample_indices(idx, ipc, rng)
        xs.append(client_data.x[picked])
        ys.append(np.full(ipc, c, dtype=np.int64))
    return SyntheticSet(np.concatenate(xs).copy(), np.concatenate(ys), client, ipc)


# matching loss --------------------------------------------------------------------

def _features(model: Model, x, params):
    emb, logits = model.forward(x, params)
    return emb.data.reshape(len(x), -1), logits.data


def _weighted_matching_loss(model, params, syn_x, syn_y, classes, real_feats, weights):
    """Sum over classes of m_c * (||mean_S h - t_h||^2 + ||mean_S z - t_z||^2).

    For per-real-example weights s of class c, ``m_c = mean(s)`` and
    ``t = (s @ H) / sum(s)``. The gradient is then the mean over real
    examples of the s-weighted per-example gradients, by linearity. With all
    weights equal to 1 this is the plain matching loss.
    """
    syn_x = syn_x if isinstance(syn_x, Tensor) else Tensor(syn_x)
    emb, logits = model.forward(syn_x, params)
    emb = emb.reshape(syn_x.shape[0], -1)
    avg = np.zeros((len(classes), syn_x.shape[0]))
    scale = np.empty((len(classes), 1))
    t_h = np.empty((len(classes), emb.shape[1]))
    t_z = np.empty((len(classes), logits.shape[1]))
    for row, c in enumerate(classes):
        members = syn_y == c
        avg[row, members] = 1.0 / members.sum()
        h_real, z_real = real_feats[c]
        s = np.ones(h_real.shape[0]) if weights is None or weights.get(c) is None else weights[c]
        scale[row] = s.mean()
        t_h[row] = (s @ h_real) / s.sum()
        t_z[row] = (s @ z_real) / s.sum()
    dh = avg @ emb - t_h
    dz = avg @ logits - t_z
    return (dh * dh * scale).sum() + (dz * dz * scale).sum()


def dm_loss(model: Model, real_batches: dict, syn_x, syn_y, params=None) -> Tensor:
    """Distribution-matching loss summed over the classes in ``real_batches``.

    ``syn_x`` may be a Tensor with ``requires_grad`` to differentiate with
    respect to the synthetic inputs; the model weights are constants.
    """
    syn_y = np.asarray(syn_y)
    present = set(int(c) for c in np.unique(syn_y))
    classes = sorted(int(c) for c in real_batches)
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"classes {missing} have real batches but no synthetic examples")
    p = model.params if params is None else params
    feats = {c: _features(model, np.asarray(real_batches[c]), p) for c in classes}
    keep = np.isin(syn_y, classes)
    if not keep.all():
        syn_x = syn_x[np.flatnonzero(keep)]
        syn_y = syn_y[keep]
    return _weighted_matching_loss(model, p, syn_x, syn_y, classes, feats, None)


def per_example_grads(model: Model, real_batch, syn_x, params=None, chunk=64) -> np.ndarray:
    """Per-real-example gradients of one class's matching loss.

    Entry ``i`` is the gradient with respect to ``syn_x`` (all of one class)
    of the loss whose real-batch means are replaced by the features of
    ``real_batch[i]``. Their mean over ``i`` is the full class gradient.
    Returned shape: ``(len(real_batch),) + syn_x.shape``.
    """
    real_batch = np.asarray(real_batch)
    syn_x = np.asarray(syn_x, dtype=np.float64)
    if len(real_batch) == 0:
        raise ValueError("per_example_grads needs a non-empty real batch")
    p = model.params if params is None else params
    h_real, z_real = _features(model, real_batch, p)
    n_syn = syn_x.shape[0]
    out = np.empty((len(real_batch),) + syn_x.shape)
    for start in range(0, len(real_batch), chunk):
        stop = min(start + chunk, len(real_batch))
        b = stop - start
        # One replica of the synthetic class per real example.
        rep = Tensor(np.broadcast_to(syn_x, (b,) + syn_x.shape).reshape((b * n_syn,) + syn_x.shape[1:]),
                     requires_grad=True)
        emb, logits = model.forward(rep, p)
        mh = emb.reshape(b, n_syn, -1).mean(axis=1)
        mz = logits.reshape(b, n_syn, -1).mean(axis=1)
        dh = mh - h_real[start:stop]
        dz = mz - z_real[start:stop]
        g = grad((dh * dh).sum() + (dz * dz).sum(), rep)
        out[start:stop] = g.reshape((b,) + syn_x.shape)
    return out


def clip_weights(per_example, max_norm) -> np.ndarray:
    """Per-example scale factors ``1 / max(1, ||g_i|| / C)``."""
    norms = np.sqrt((per_example.reshape(per_example.shape[0], -1) ** 2).sum(axis=1))
    return 1.0 / np.maximum(1.0, norms / max_norm)


# client loop ------------------------------------------------------------------------

def client_update(model: Model, client_data: Dataset, w_r, cfg: ClientConfig, seed,
                  client: int = 0, trace: list | None = None) -> SyntheticSet:
    """Learn the client's synthetic set around the global weights ``w_r``.

    Deterministic in ``seed``. If ``trace`` is a list, the distance
    ``||w - w_r||`` of every sampled weight is appended to it.
    """
    w_r = np.asarray(w_r, dtype=np.float64)
    init_seed, w_seed, batch_seed, noise_seed = _seed_sequence(seed).spawn(4)
    syn = init_synthetic(client_data, cfg.ipc, init_seed, client)
    if cfg.iterations == 0:
        return syn
    rng_w = np.random.default_rng(w_seed)
    rng_b = np.random.default_rng(batch_seed)
    rng_n = np.random.default_rng(noise_seed)

    class_idx = client_data.class_indices()
    classes = syn.classes
    syn_rows = {c: np.flatnonzero(syn.y == c) for c in classes}
    x_syn = syn.x.copy()
    dp = cfg.dp_enabled
    noise_std = cfg.sigma * cfg.clip / cfg.real_batch

    for _ in range(cfg.iterations):
        w = sample_ball_weight(w_r, cfg.rho, rng_w)
        if trace is not None:
            trace.append(float(np.linalg.norm(w - w_r)))

        real_idx = {c: sample_indices(class_idx[c], cfg.real_batch, rng_b) for c in classes}
        if cfg.syn_batch is None or cfg.syn_batch >= cfg.ipc:
            sel = None
            sx, sy = x_syn, syn.y
        else:
            sel = np.concatenate([rng_b.choice(syn_rows[c], cfg.syn_batch, replace=False) for c in classes])
            sx, sy = x_syn[sel], syn.y[sel]

        stacked = np.concatenate([real_idx[c] for c in classes])
        h_all, z_all = _features(model, client_data.x[stacked], w)
        feats, start = {}, 0
        for c in classes:
            stop = start + cfg.real_batch
            feats[c] = (h_all[start:stop], z_all[start:stop])
            start = stop

        weights = None
        if dp:
            weights = {}
            for c in classes:
                pe = per_example_grads(model, client_data.x[real_idx[c]], sx[sy == c], w, cfg.chunk)
                weights[c] = clip_weights(pe, cfg.clip)

        syn_t = Tensor(sx, requires_grad=True)
        g = grad(_weighted_matching_loss(model, w, syn_t, sy, classes, feats, weights), syn_t)

        if dp and cfg.sigma > 0:
            for c in classes:
                rows = sy == c
                g[rows] += rng_n.normal(0.0, noise_std, size=g[rows].shape)

        if sel is not None:
            full = np.zeros_like(x_syn)
            full[sel] = g
            g = full
        x_syn = sgd_step(x_syn, g, cfg.lr)

    return SyntheticSet(x_syn, syn.y.copy(), client, cfg.ipc)


def _seed_sequence(seed):
    # A fresh copy, so spawning never mutates a caller-owned SeedSequence.
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    return np.random.SeedSequence(seed)


def surrogate_loss(model: Model, syn: SyntheticSet, params) -> float:
    """Mean training loss of ``params`` on the synthetic examples."""
    return float(model.loss(syn.x, syn.y, params=params).data)


# image dumps --------------------------------------------------------------------------

def dump_synthetic_images(syn: SyntheticSet, out_dir, image_shape=None) -> list[Path]:
    """Write each synthetic example as PGM (1 channel) or PPM (3 channels).

    Files are named ``{client}_{class}_{idx}.pgm|ppm`` with ``idx`` counting
    within the class. Pixel values are clipped to [0, 1] and scaled to 0..255.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    shape = tuple(image_shape) if image_shape else syn.x.shape[1:]
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3 or shape[0] not in (1, 3) or int(np.prod(shape)) != syn.example_floats:
        raise ValueError(f"cannot render examples of shape {syn.x.shape[1:]} as images")
    written = []
    counters: dict[int, int] = {}
    for x, c in zip(syn.x, syn.y):
        c = int(c)
        idx = counters.get(c, 0)
        counters[c] = idx + 1
        img = np.round(np.clip(x.reshape(shape), 0.0, 1.0) * 255.0).astype(np.uint8)
        ch, h, w = shape
        if ch == 1:
            path = out_dir / f"{syn.client}_{c}_{idx}.pgm"
            payload = b"P5\n%d %d\n255\n" % (w, h) + img[0].tobytes()
        else:
            path = out_dir / f"{syn.client}_{c}_{idx}.ppm"
            payload = b"P6\n%d %d\n255\n" % (w, h) + img.transpose(1, 2, 0).tobytes()
        path.write_bytes(payload)
        written.append(path)
    return written
