"""Round-based orchestration of FedDM, REAL, FedAvg and FedProx.

All randomness derives from ``(seed, round, client, stream)`` seed
sequences, so results do not depend on the order in which clients run or
on how many worker processes run them.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .accounting import baseline_message_size
from .data import Dataset, Partition, dirichlet_partition
from .distillation import ClientConfig, SyntheticSet, client_update
from .models import Architecture, Model, accuracy, init_params
from .numerics import Tensor, grad, project_ball, sgd_step
from .privacy import epsilon_for_sigma

log = logging.getLogger(__name__)

PROTOCOLS = ("feddm", "real", "fedavg", "fedprox")
CSV_COLUMNS = ["round", "protocol", "floats_uploaded", "cumulative_floats", "test_accuracy",
               "sigma", "epsilon", "delta", "wall_ms"]

# seed-sequence stream tags
_INIT, _CLIENT, _SERVER, _SAMPLE = 0, 1, 2, 3


def stream_seed(seed, round_idx, client, tag) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), int(round_idx), int(client), int(tag)])


@dataclass
class ServerConfig:
    lr: float = 0.01
    epochs: int = 500
    batch: int = 256
    rho: float = 5.0

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 0 or self.batch < 1 or self.rho < 0:
            raise ValueError(f"invalid server config {self}")


@dataclass
class LocalConfig:
    epochs: int = 10
    lr: float = 0.01
    batch: int = 256
    mu: float = 0.0

    def __post_init__(self):
        if not self.lr > 0 or self.epochs < 0 or self.batch < 1:
            raise ValueError(f"invalid local training config {self}")
        if self.mu < 0:
            raise ValueError("mu must be >= 0")


@dataclass
class FedRunConfig:
    protocol: str = "feddm"
    rounds: int = 20
    clients: int = 10
    alpha: float = 0.5
    seed: int = 0
    client: ClientConfig = field(default_factory=ClientConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    participation: float = 1.0
    workers: int = 1
    dp_delta: float | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if self.rounds < 1 or self.clients < 1:
            raise ValueError("rounds and clients must be >= 1")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")


@dataclass
class RoundRecord:
    round: int
    protocol: str
    floats_uploaded: int
    cumulative_floats: int
    test_accuracy: float
    sigma: float
    epsilon: float | None
    delta: float | None
    wall_ms: float
    params_sha: str
    step_norm: float


@dataclass
class RunHistory:
    protocol: str
    records: list[RoundRecord] = field(default_factory=list)
    initial_accuracy: float | None = None
    final_params: np.ndarray | None = None

    def accuracies(self) -> list[float]:
        return [r.test_accuracy for r in self.records]

    def csv_rows(self, wall_time=True):
        for r in self.records:
            yield [r.round, r.protocol, r.floats_uploaded, r.cumulative_floats, repr(r.test_accuracy),
                   repr(r.sigma), "" if r.epsilon is None else repr(r.epsilon),
                   "" if r.delta is None else repr(r.delta),
                   f"{r.wall_ms:.3f}" if wall_time else "0"]

    def write_csv(self, path, wall_time=True) -> None:
        """Write the per-round table. ``wall_time=False`` writes 0 for wall_ms so
        the file depends only on the configuration and seed."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            writer.writerows(self.csv_rows(wall_time))

    def comparable(self):
        """Everything except timing, for determinism checks."""
        return [(r.round, r.floats_uploaded, r.cumulative_floats, r.test_accuracy, r.params_sha)
                for r in self.records]


def params_sha(w) -> str:
    return hashlib.sha256(np.ascontiguousarray(w, dtype=np.float64).tobytes()).hexdigest()[:16]


# surrogate ------------------------------------------------------------------------

@dataclass
class WeightedDataset:
    dataset: Dataset
    weights: np.ndarray  # raw per-example weights, one per pooled example

    def __len__(self):
        return len(self.dataset)

    @property
    def normalized(self) -> np.ndarray:
        return self.weights / self.weights.sum()

    def loss(self, model: Model, params) -> Tensor:
        """sum_j weight_j * loss_j with the raw weights."""
        return model.loss(self.dataset.x, self.dataset.y, weights=self.weights, params=params)


def aggregate_surrogate(syn_sets, n_total, num_classes) -> WeightedDataset:
    """Pool all synthetic sets; a client-k example carries (n_k^S / n) / n_k^S.

    The weighted loss over the pool is then sum_k (n_k^S / n) * fhat_k.
    """
    syn_sets = [s for s in syn_sets if len(s)]
    if not syn_sets:
        raise ValueError("no synthetic examples to aggregate")
    xs, ys, ws = [], [], []
    for s in syn_sets:
        nk = len(s)
        xs.append(s.x)
        ys.append(s.y)
        ws.append(np.full(nk, (nk / n_total) / nk))
    pooled = Dataset(np.concatenate(xs), np.concatenate(ys), num_classes, name="surrogate")
    return WeightedDataset(pooled, np.concatenate(ws))


def server_train(model: Model, w_r, surrogate: WeightedDataset, cfg: ServerConfig, seed):
    """Minimize the weighted cross-entropy on the surrogate, staying in the rho-ball of w_r."""
    if len(surrogate) == 0:
        raise ValueError("empty surrogate")
    w_r = np.asarray(w_r, dtype=np.float64)
    w = w_r.copy()
    rng = np.random.default_rng(seed)
    x, y = surrogate.dataset.x, surrogate.dataset.y
    v = surrogate.normalized
    n = len(surrogate)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            b = order[start:start + cfg.batch]
            p = Tensor(w, requires_grad=True)
            # unbiased mini-batch estimate of sum_j v_j loss_j
            loss = model.loss(x[b], y[b], weights=v[b] * (n / len(b)), params=p)
            w = project_ball(sgd_step(w, grad(loss, p), cfg.lr), w_r, cfg.rho)
    return w


# local training (weight-based protocols) -----------------------------------------

def local_sgd(model: Model, data: Dataset, w_start, cfg: LocalConfig, seed, anchor=None):
    """Mini-batch SGD on the mean cross-entropy, plus (mu/2)||w - anchor||^2 if mu > 0."""
    w = np.array(w_start, dtype=np.float64)
    anchor = w.copy() if anchor is None else np.asarray(anchor, dtype=np.float64)
    rng = np.random.default_rng(seed)
    n = len(data)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch):
            b = order[start:start + cfg.batch]
            p = Tensor(w, requires_grad=True)
            g = grad(model.loss(data.x[b], data.y[b], params=p), p)
            if cfg.mu > 0:
                g = g + prox_grad(w, anchor, cfg.mu)
            w = sgd_step(w, g, cfg.lr)
    return w


def prox_term(w, anchor, mu) -> float:
    d = np.asarray(w) - np.asarray(anchor)
    return 0.5 * mu * float(d @ d)


def prox_grad(w, anchor, mu):
    return mu * (np.asarray(w) - np.asarray(anchor))


# orchestration ---------------------------------------------------------------------

def _client_task(args):
    model, data, w_r, cfg, seed, k = args
    return client_update(model, data, w_r, cfg, seed, client=k)


def _local_task(args):
    model, data, w_r, cfg, seed = args
    return local_sgd(model, data, w_r, cfg, seed, anchor=w_r)


def _map(fn, tasks, workers):
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def _setup(cfg: FedRunConfig, train: Dataset, arch: Architecture, partition, w0):
    if partition is None:
        partition = dirichlet_partition(train.y, cfg.clients, cfg.alpha, cfg.seed)
    if partition.num_clients != cfg.clients:
        raise ValueError(f"partition has {partition.num_clients} clients, config says {cfg.clients}")
    model = Model(arch, init_params(arch, stream_seed(cfg.seed, 0, 0, _INIT)) if w0 is None else w0)
    client_data = [train.subset(idx, name=f"client{k}") for k, idx in enumerate(partition.index_sets)]
    return partition, model, client_data


def _participants(cfg, r):
    if cfg.participation >= 1.0:
        return list(range(cfg.clients))
    m = max(1, int(round(cfg.participation * cfg.clients)))
    rng = np.random.default_rng(stream_seed(cfg.seed, r, 0, _SAMPLE))
    return sorted(int(k) for k in rng.choice(cfg.clients, m, replace=False))


def run_protocol(cfg: FedRunConfig, train: Dataset, test: Dataset, arch: Architecture,
                 partition: Partition | None = None, w0=None, on_round=None) -> RunHistory:
    """Dispatch on ``cfg.protocol``. ``on_round(r, syn_sets)`` only fires for FedDM and REAL."""
    if cfg.protocol in ("feddm", "real"):
        return run_feddm(cfg, train, test, arch, partition, w0, on_round)
    return run_fedavg(cfg, train, test, arch, partition, w0)


def run_feddm(cfg: FedRunConfig, train: Dataset, test: Dataset, arch: Architecture,
              partition: Partition | None = None, w0=None, on_round=None) -> RunHistory:
    """FedDM rounds: clients learn synthetic sets around w_r, the server trains on their union.

    With ``cfg.protocol == "real"`` clients skip matching and send their
    randomly drawn real examples instead (same payload shape). If given,
    ``on_round(r, syn_sets)`` sees each round's uploads.
    """
    partition, model, client_data = _setup(cfg, train, arch, partition, w0)
    ccfg = cfg.client
    if cfg.protocol == "real":
        ccfg = ClientConfig(**{**ccfg.__dict__, "iterations": 0})
    w = model.params.copy()
    hist = RunHistory(cfg.protocol, initial_accuracy=accuracy(model, test))
    sigma = ccfg.sigma if ccfg.dp_enabled else 0.0
    eps = epsilon_for_sigma(sigma, cfg.dp_delta) if sigma > 0 and cfg.dp_delta else None
    cumulative = 0
    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        ks = _participants(cfg, r)
        tasks = [(model, client_data[k], w, ccfg, stream_seed(cfg.seed, r, k, _CLIENT), k) for k in ks]
        syn_sets: list[SyntheticSet] = _map(_client_task, tasks, cfg.workers)
        uploaded = sum(s.num_floats for s in syn_sets)
        if on_round is not None:
            on_round(r, syn_sets)
        surrogate = aggregate_surrogate(syn_sets, len(train), train.num_classes)
        w_next = server_train(model, w, surrogate, cfg.server, stream_seed(cfg.seed, r, 0, _SERVER))
        step = float(np.linalg.norm(w_next - w))
        w = w_next
        model = model.with_params(w)
        cumulative += uploaded
        acc = accuracy(model, test)
        hist.records.append(RoundRecord(r, cfg.protocol, uploaded, cumulative, acc, sigma, eps,
                                        cfg.dp_delta if eps is not None else None,
                                        (time.perf_counter() - t0) * 1e3, params_sha(w), step))
        log.info("%s round %d: acc=%.4f floats=%d", cfg.protocol, r, acc, uploaded)
    hist.final_params = w
    return hist


def run_real(cfg: FedRunConfig, train, test, arch, partition=None, w0=None) -> RunHistory:
    return run_feddm(FedRunConfig(**{**cfg.__dict__, "protocol": "real"}), train, test, arch, partition, w0)


def run_fedavg(cfg: FedRunConfig, train: Dataset, test: Dataset, arch: Architecture,
               partition: Partition | None = None, w0=None) -> RunHistory:
    """FedAvg, or FedProx when ``cfg.protocol == "fedprox"`` (uses ``cfg.local.mu``)."""
    partition, model, client_data = _setup(cfg, train, arch, partition, w0)
    lcfg = cfg.local
    if cfg.protocol == "fedavg" and lcfg.mu != 0:
        lcfg = LocalConfig(lcfg.epochs, lcfg.lr, lcfg.batch, 0.0)
    w = model.params.copy()
    hist = RunHistory(cfg.protocol, initial_accuracy=accuracy(model, test))
    cumulative = 0
    for r in range(1, cfg.rounds + 1):
        t0 = time.perf_counter()
        ks = _participants(cfg, r)
        tasks = [(model, client_data[k], w, lcfg, stream_seed(cfg.seed, r, k, _CLIENT)) for k in ks]
        local_ws = _map(_local_task, tasks, cfg.workers)
        n = sum(len(client_data[k]) for k in ks)
        w_next = np.zeros_like(w)
        for k, wk in zip(ks, local_ws):
            w_next = w_next + (len(client_data[k]) / n) * wk
        step = float(np.linalg.norm(w_next - w))
        w = w_next
        model = model.with_params(w)
        uploaded = baseline_message_size(model.num_params, len(ks))
        cumulative += uploaded
        acc = accuracy(model, test)
        hist.records.append(RoundRecord(r, cfg.protocol, uploaded, cumulative, acc, 0.0, None, None,
                                        (time.perf_counter() - t0) * 1e3, params_sha(w), step))
        log.info("%s round %d: acc=%.4f", cfg.protocol, r, acc)
    hist.final_params = w
    return hist


def run_fedprox(cfg: FedRunConfig, train, test, arch, partition=None, w0=None) -> RunHistory:
    return run_fedavg(FedRunConfig(**{**cfg.__dict__, "protocol": "fedprox"}), train, test, arch, partition, w0)


def centralized_train(arch: Architecture, train: Dataset, cfg: LocalConfig, seed, w0=None) -> np.ndarray:
    """Plain mini-batch SGD on the pooled data (the non-federated reference)."""
    w0 = init_params(arch, stream_seed(seed, 0, 0, _INIT)) if w0 is None else w0
    return local_sgd(Model(arch, w0), train, w0, LocalConfig(cfg.epochs, cfg.lr, cfg.batch, 0.0), seed)
