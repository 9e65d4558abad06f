"""One test per acceptance criterion, each printing a PASS/FAIL line.

The lines are also collected into an "acceptance criteria" section at the
end of the pytest run.
"""
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from feddm.accounting import baseline_message_size, feddm_message_size, message_size_from_counts
from feddm.data import dirichlet_partition, gen_1d_binary, gen_blobs, label_entropy, load_idx, select_classes
from feddm.distillation import ClientConfig, client_update, dm_loss, per_example_grads
from feddm.federation import (
    FedRunConfig, LocalConfig, ServerConfig, centralized_train, init_params, local_sgd, run_feddm, run_fedavg,
    run_fedprox, stream_seed,
)
from feddm.models import Architecture, Model, accuracy
from feddm.numerics import Tensor, finite_diff_grad, grad
from feddm.privacy import DpBudget, gaussian_sigma, tailbound_sigma

from conftest import rel_err, report
from test_accounting import TABLE, fixture_partition, spread_counts


def _bce_curve(ws, x, y):
    t = np.outer(ws, x)
    return np.mean(np.logaddexp(0.0, t) - y * t, axis=1)


def test_criterion_01_surrogate_quality():
    t0 = time.perf_counter()
    model = Model.create(Architecture.logistic_1d())
    ratios = []
    for seed in range(10):
        data = gen_1d_binary(100, seed)
        cfg = ClientConfig(iterations=1000, lr=1.0, ipc=10, rho=5.0)
        syn = client_update(model, data, np.zeros(1), cfg, seed)
        assert len(syn) == 20
        ws = np.random.default_rng([seed, 1]).uniform(-5.0, 5.0, 200)
        x, y = data.x[:, 0], data.y
        f = _bce_curve(ws, x, y)
        surrogate = _bce_curve(ws, syn.x[:, 0], syn.y)
        # tangent line at w = 0: f(0) = ln 2, f'(0) = mean((1/2 - y) x)
        tangent = math.log(2.0) + np.mean((0.5 - y) * x) * ws
        ratios.append(np.mean((surrogate - f) ** 2) / np.mean((tangent - f) ** 2))
    elapsed = time.perf_counter() - t0
    wins = sum(r <= 0.1 for r in ratios)
    ok = wins >= 8 and elapsed < 30
    report(1, ok, f"surrogate/tangent MSE ratio <= 0.1 on {wins}/10 seeds "
                  f"(median {np.median(ratios):.4f}, max {max(ratios):.4f}); {elapsed:.1f}s")
    assert ok


def test_criterion_02_per_example_identity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    worst = 0.0
    for i in range(20):
        if i % 2 == 0:
            arch = Architecture.mlp((4, int(rng.integers(3, 9)), int(rng.integers(3, 7)), 3))
        else:
            arch = Architecture.convnet_lite((int(rng.integers(1, 3)), 6, 6), 3, channels=(2, 3))
        model = Model.create(arch, seed=i)
        model = model.with_params(model.params + 0.2 * rng.standard_normal(model.num_params))
        real = rng.standard_normal((int(rng.integers(1, 12)),) + arch.input_shape)
        syn = rng.standard_normal((int(rng.integers(1, 5)),) + arch.input_shape)
        xt = Tensor(syn, requires_grad=True)
        full = grad(dm_loss(model, {1: real}, xt, np.ones(len(syn), dtype=int)), xt)
        mean = per_example_grads(model, real, syn, chunk=5).mean(axis=0)
        worst = max(worst, float(np.max(np.abs(mean - full))))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 10
    report(2, ok, f"max |mean per-example grad - full grad| = {worst:.2e} over 20 instances; {elapsed:.1f}s")
    assert ok


def test_criterion_03_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errs = []
    archs = [Architecture.mlp((5, 7, 6, 4)), Architecture.mlp((3, 10, 2)),
             Architecture.convnet_lite((1, 6, 6), 3, channels=(2, 3)),
             Architecture.convnet_lite((2, 8, 8), 4, channels=(3, 2, 2))]
    for k, arch in enumerate(archs):
        model = Model.create(arch, seed=k)
        # random biases keep every ReLU away from its kink
        w0 = model.params + 0.1 * rng.standard_normal(model.num_params)
        x = rng.standard_normal((4,) + arch.input_shape)
        y = rng.integers(0, arch.num_classes, 4)
        w = Tensor(w0, requires_grad=True)
        g = grad(model.loss(x, y, params=w), w)
        fd = finite_diff_grad(lambda v: model.loss(x, y, params=v).data, w0)
        errs.append(rel_err(g, fd))
        xt = Tensor(x, requires_grad=True)
        gx = grad((model.forward_embed(xt, w0) ** 2).sum() + model.forward_logits(xt, w0).sum(), xt)
        fdx = finite_diff_grad(lambda v: (model.forward_embed(v, w0).data ** 2).sum()
                               + model.forward_logits(v, w0).data.sum(), x)
        errs.append(rel_err(gx, fdx))
    elapsed = time.perf_counter() - t0
    ok = max(errs) <= 1e-4 and elapsed < 30
    report(3, ok, f"max relative error vs central differences {max(errs):.2e} "
                  f"(MLP + convnet-lite, params and inputs); {elapsed:.1f}s")
    assert ok


def test_criterion_04_dp_calibration():
    s = gaussian_sigma(DpBudget(1.0, 1e-5))
    homog = all(gaussian_sigma(DpBudget(2 * e, d)) == gaussian_sigma(DpBudget(e, d)) / 2
                for e in (0.1, 0.5, 1.0, 3.0, 7.5) for d in (1e-3, 1e-5, 1e-8))
    # (eps, q, T) with T q^2 = eps / 2 exactly in binary floating point
    boundary = all(tailbound_sigma(DpBudget(e, d), q, t) == math.sqrt(2 * math.log(1 / d) / e)
                   for e, q, t in ((1.0, 0.5, 2), (2.0, 0.5, 4), (0.5, 0.25, 4), (8.0, 0.5, 16))
                   for d in (1e-3, 1e-5, 1e-6))
    ok = abs(s - 4.8455) <= 1e-3 and homog and boundary
    report(4, ok, f"gaussian_sigma(1, 1e-5) = {s:.6f}; homogeneity exact: {homog}; "
                  f"tail bound = simplified at T q^2 = eps/2: {boundary}")
    assert ok


def test_criterion_05_message_sizes():
    nine = message_size_from_counts([9] * 10, 10, 3072)
    base = baseline_message_size(320010, 10)
    got = {}
    for name, alpha, total, ipc, floats, expected in TABLE:
        part, labels = fixture_partition(spread_counts(total, 10, 100 if name == "cifar100" else 10),
                                         100 if name == "cifar100" else 10)
        got[(name, alpha)] = (feddm_message_size(part, labels, ipc, floats), expected)
    baselines = [baseline_message_size(p, 10) for p in (317706, 320010, 504420)]
    table_ok = all(a == b for a, b in got.values())
    ok = nine == 2_764_800 and base == 3_200_100 and table_ok and baselines == [3177060, 3200100, 5044200]
    dir05 = [got[(n, 0.5)][0] for n in ("mnist", "cifar10", "cifar100")]
    report(5, ok, f"9 classes x 10 clients -> {nine}; baseline {base}; Dir(0.5) row {dir05}; "
                  f"baselines {baselines}; all {len(got)} table cells exact: {table_ok}")
    assert ok


def _effective_classes(hist):
    p = hist / hist.sum(axis=1, keepdims=True)
    return (p >= 0.05).sum(axis=1)


def test_criterion_06_partition_properties():
    t0 = time.perf_counter()
    labels = np.repeat(np.arange(10), 500)
    n = labels.size
    covering = True
    ent = {0.01: [], 0.5: [], 50.0: []}
    eff = []
    for k in (1, 10, 50):
        for alpha in ent:
            for seed in range(10):
                part = dirichlet_partition(labels, k, alpha, seed)
                allidx = np.concatenate(part.index_sets)
                covering &= allidx.size == n and np.array_equal(np.sort(allidx), np.arange(n))
                covering &= all(len(s) >= 1 for s in part.index_sets)
                if k == 10:
                    hist = part.class_histograms(labels, 10)
                    ent[alpha].append(np.mean([label_entropy(r) for r in hist]))
                    if alpha == 0.01:
                        eff.append(_effective_classes(hist).mean())
    elapsed = time.perf_counter() - t0
    e = {a: float(np.mean(v)) for a, v in ent.items()}
    ordering = e[0.01] < e[0.5] < e[50.0]
    ok = covering and ordering and np.mean(eff) <= 2 and elapsed < 10
    report(6, ok, f"disjoint/covering on 90 partitions: {covering}; mean entropy "
                  f"{e[0.01]:.3f} < {e[0.5]:.3f} < {e[50.0]:.3f}; alpha=0.01 effective classes "
                  f"{np.mean(eff):.2f}; {elapsed:.1f}s")
    assert ok


def test_criterion_07_protocol_equivalences():
    t0 = time.perf_counter()
    train, test = gen_blobs(60, 4, 2, 0.5, seed=7), gen_blobs(50, 4, 2, 0.5, seed=8)
    arch = Architecture.mlp((2, 16, 4))
    local = LocalConfig(epochs=3, lr=0.1, batch=32)
    common = dict(rounds=3, clients=4, alpha=0.5, seed=5, local=local)

    avg = run_fedavg(FedRunConfig("fedavg", **common), train, test, arch)
    prox = run_fedprox(FedRunConfig("fedprox", **{**common, "local": LocalConfig(3, 0.1, 32, mu=0.0)}),
                       train, test, arch)
    prox_ok = np.array_equal(avg.final_params, prox.final_params) and avg.comparable() == prox.comparable()

    single = run_fedavg(FedRunConfig("fedavg", **{**common, "clients": 1}), train, test, arch)
    model = Model.create(arch)
    w = init_params(arch, stream_seed(5, 0, 0, 0))
    for r in (1, 2, 3):
        w = local_sgd(model, train, w, local, stream_seed(5, r, 0, 1))
    one_round = run_fedavg(FedRunConfig("fedavg", **{**common, "clients": 1, "rounds": 1}), train, test, arch)
    central = centralized_train(arch, train, local, stream_seed(5, 1, 0, 1), w0=init_params(arch, stream_seed(5, 0, 0, 0)))
    k1_ok = np.array_equal(single.final_params, w) and np.array_equal(one_round.final_params, central)

    plain_c = ClientConfig(iterations=10, lr=0.01, real_batch=32, ipc=3)
    dp_c = ClientConfig(iterations=10, lr=0.01, real_batch=32, ipc=3, sigma=0.0, clip=1e12, private=True)
    feddm_common = dict(rounds=2, clients=3, alpha=0.5, seed=5, server=ServerConfig(lr=0.05, epochs=5, batch=32))
    plain = run_feddm(FedRunConfig("feddm", client=plain_c, **feddm_common), train, test, arch)
    dp = run_feddm(FedRunConfig("feddm", client=dp_c, **feddm_common), train, test, arch)
    dp_ok = np.array_equal(plain.final_params, dp.final_params) and plain.comparable() == dp.comparable()

    elapsed = time.perf_counter() - t0
    ok = prox_ok and k1_ok and dp_ok and elapsed < 60
    report(7, ok, f"FedProx(mu=0) == FedAvg: {prox_ok}; FedAvg K=1 == centralized SGD: {k1_ok}; "
                  f"DP(sigma=0, huge clip) == non-DP: {dp_ok}; {elapsed:.1f}s")
    assert ok


# Desk-scale end-to-end settings. The client step size is 0.01: the default 1.0
# diverges for an MLP evaluated at weights sampled on the rho = 5 sphere.
E2E_CLIENT = ClientConfig(iterations=200, lr=0.01, real_batch=256, ipc=5, rho=5.0)
E2E_SERVER = ServerConfig(lr=0.01, epochs=500, batch=256, rho=5.0)
E2E_LOCAL = LocalConfig(epochs=10, lr=0.1, batch=256)
E2E_CENTRAL = LocalConfig(epochs=100, lr=0.1, batch=32)


@pytest.mark.slow
def test_criterion_08_desk_scale_end_to_end():
    t0 = time.perf_counter()
    arch = Architecture.mlp((2, 32, 4))
    rows, passes = [], 0
    for seed in range(3):
        train = gen_blobs(200, 4, 2, 0.5, seed)
        test = gen_blobs(500, 4, 2, 0.5, 1000 + seed)
        central = accuracy(Model(arch, centralized_train(arch, train, E2E_CENTRAL, seed)), test)
        common = dict(rounds=10, clients=5, alpha=0.1, seed=seed)
        fd = run_feddm(FedRunConfig("feddm", client=E2E_CLIENT, server=E2E_SERVER, **common), train, test, arch)
        avg = run_fedavg(FedRunConfig("fedavg", local=E2E_LOCAL, **common), train, test, arch)
        final, fd5, avg5 = fd.records[-1].test_accuracy, fd.records[4].test_accuracy, avg.records[4].test_accuracy
        ok_seed = final >= 0.9 * central and fd5 >= avg5
        passes += ok_seed
        rows.append(f"seed {seed}: central {central:.4f} feddm final {final:.4f} "
                    f"r5 feddm {fd5:.4f} vs fedavg {avg5:.4f} {'ok' if ok_seed else 'miss'}")
    elapsed = time.perf_counter() - t0
    ok = passes >= 2 and elapsed < 300
    report(8, ok, f"{passes}/3 seeds meet both conditions; {elapsed:.1f}s [" + "; ".join(rows) + "]")
    assert ok


def _mnist_files(root):
    names = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    found = []
    for name in names:
        for cand in (root / name, root / (name + ".gz")):
            if cand.exists():
                found.append(cand)
                break
        else:
            return None
    return found


@pytest.mark.slow
def test_criterion_09_mnist_smoke():
    root = os.environ.get("FEDDM_MNIST_DIR")
    files = _mnist_files(Path(root)) if root else None
    if files is None:
        report(9, None, "full-scale accuracies out of scope; MNIST smoke SKIPPED "
                        "(set FEDDM_MNIST_DIR to a directory with the four IDX files)")
        pytest.skip("MNIST files not available")
    t0 = time.perf_counter()
    train = select_classes(load_idx(files[0], files[1]), [0, 1, 2], per_class=600, seed=0)
    test = select_classes(load_idx(files[2], files[3]), [0, 1, 2], seed=0)
    arch = Architecture.mlp((784, 64, 3), input_shape=(1, 28, 28))
    cfg = FedRunConfig("feddm", rounds=10, clients=5, alpha=0.5, seed=0,
                       client=ClientConfig(iterations=100, lr=0.01, real_batch=128, ipc=10),
                       server=ServerConfig(lr=0.05, epochs=100, batch=64))
    hist = run_feddm(cfg, train, test, arch)
    best = max(hist.accuracies())
    ok = best > 0.8
    report(9, ok, f"MNIST 3-class smoke: best accuracy within 10 rounds {best:.4f}; "
                  f"{time.perf_counter() - t0:.1f}s")
    assert ok


def test_criterion_10_determinism(tmp_path):
    from feddm.cli import main

    (tmp_path / "cfg.ini").write_text("rounds = 3\nclients = 4\niterations = 30\nclient_lr = 0.01\n"
                                      "ipc = 3\nhidden = 16\nserver_epochs = 20\nalpha = 0.1\n")
    out = tmp_path / "run"
    assert main(["run", "--config", str(tmp_path / "cfg.ini"), "--out", str(out), "--seed", "11"]) == 0
    first = (out / "history.csv").read_bytes()
    identical = []
    for workers in ("1", "2"):
        rerun = tmp_path / f"rerun{workers}"
        assert main(["run", "--config", str(out / "manifest.json"), "--out", str(rerun), "--workers", workers]) == 0
        identical.append((rerun / "history.csv").read_bytes() == first)
    for proto in ("fedavg", "real"):
        p_out = tmp_path / proto
        text = (tmp_path / "cfg.ini").read_text() + f"protocol = {proto}\n"
        (tmp_path / f"{proto}.ini").write_text(text)
        main(["run", "--config", str(tmp_path / f"{proto}.ini"), "--out", str(p_out)])
        h = (p_out / "history.csv").read_bytes()
        main(["run", "--config", str(p_out / "manifest.json"), "--out", str(p_out / "again")])
        identical.append((p_out / "again" / "history.csv").read_bytes() == h)
    ok = all(identical)
    report(10, ok, f"history.csv byte-identical on rerun from manifest: {identical} "
                   "(feddm x workers 1/2, fedavg, real)")
    assert ok
