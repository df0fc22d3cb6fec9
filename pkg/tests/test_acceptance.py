"""Acceptance suite: one test per release criterion, at pinned tolerances.

Each test prints a single pass/fail line (visible with pytest -s) before
asserting, so a full run doubles as a checklist.
"""

import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from conftest import rel_err

from wvi.autodiff import Tape, Tensor
from wvi.cli import main
from wvi.costs import CostFunctionalSpec, JointBatch, WeightVector, f_term
from wvi.data import load_mnist_idx, split_train_val, synth_dataset
from wvi.metrics import latent_error, perturbation_harness
from wvi.models import ModelPair
from wvi.ot import CostMatrix, SinkhornConfig, sinkhorn_value
from wvi.trainer import TrainConfig, mc_wasserstein_loss, smoothed, train_run

MNIST_PATH = Path(__file__).resolve().parent.parent / "data" / "mnist-6k-idx3-ubyte.gz"


def report(number: int, name: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"[criterion {number}] {name}: {status}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {number} ({name}) failed: {detail}"


def uniform(n):
    return np.full(n, 1.0 / n)


def value(C, cfg, n=None):
    n, m = np.asarray(C).shape
    return float(sinkhorn_value(CostMatrix(C), uniform(n), uniform(m), cfg).data)


def point_batch(points, origin="variational_q"):
    points = np.asarray(points, dtype=np.float64)
    return JointBatch(x=Tensor(points), z=Tensor(np.zeros((points.shape[0], 1))),
                      origin=origin)


def tiny_pair(seed=0, dx=2, dz=2, hidden=(8,), sigma_x=0.1):
    return ModelPair.build(latent_dim=dz, observable_dim=dx, decoder_hidden=hidden,
                           encoder_hidden=hidden, obs_noise_sigma=sigma_x,
                           rng=np.random.default_rng(seed))


def test_criterion_1_sinkhorn_matches_permutation_oracle():
    rng = np.random.default_rng(2024)
    cfg = SinkhornConfig(epsilon=1e-3, iterations=5000)
    worst = 0.0
    for trial in range(50):
        n = 2 + trial % 5
        C = rng.uniform(0, 1, (n, n))
        C /= C.max()
        got = value(C, cfg)
        exact = min(sum(C[i, p] for i, p in enumerate(perm)) / n
                    for perm in itertools.permutations(range(n)))
        worst = max(worst, abs(got - exact) / max(exact, 1e-6))
    report(1, "sinkhorn vs permutation oracle", worst <= 0.02,
           f"worst rel err {worst:.2e} over 50 instances")


def test_criterion_2_symmetric_2x2_closed_form():
    got = value(np.array([[0.0, 1.0], [1.0, 0.0]]), SinkhornConfig(0.1, 1000))
    expected = math.exp(-10) / (1 + math.exp(-10))
    diff = abs(got - expected)
    report(2, "2x2 closed form", diff <= 1e-8, f"|diff| {diff:.2e}")


def test_criterion_3_differentiability():
    # 3a: every entry of a random 4x4 cost matrix
    rng = np.random.default_rng(7)
    C = rng.uniform(0.2, 1.0, (4, 4))
    cfg = SinkhornConfig(0.1, 200)
    tape = Tape()
    leaf = tape.leaf(C)
    tape.backward(sinkhorn_value(CostMatrix(leaf), uniform(4), uniform(4), cfg))
    h = 1e-6
    worst_a = 0.0
    for idx in np.ndindex(4, 4):
        up, down = C.copy(), C.copy()
        up[idx] += h
        down[idx] -= h
        fd = (value(up, cfg) - value(down, cfg)) / (2 * h)
        worst_a = max(worst_a, float(rel_err(leaf.grad[idx], fd)))

    # 3b: network weights through the full weighted-cost pipeline
    pair = tiny_pair(seed=1, dx=2, dz=2)
    data = synth_dataset("ring8", 64, seed=0).examples
    tcfg = TrainConfig(weights=WeightVector(1, 1, 1, 1, 0), batch_n=6, epsilon=0.1,
                       sinkhorn_t=50, normalize_costs=False, debias=False)
    spec = tcfg.cost_spec()

    def pipeline_loss(with_tape):
        srng = np.random.default_rng(11)
        tape = Tape() if with_tape else None
        bp = pair.sample_joint_p(tcfg.batch_n, srng, tape)
        bq = pair.sample_joint_q(tcfg.batch_n, data, srng, tape)
        loss = mc_wasserstein_loss(bp, bq, spec, pair, tcfg)
        return tape, loss

    tape, loss = pipeline_loss(True)
    grads = tape.backward(loss)
    picks = [(pair.decoder.weights[0], (0, 1)), (pair.decoder.weights[1], (3, 1)),
             (pair.decoder.biases[1], (0,)), (pair.encoder.weights[0], (1, 4)),
             (pair.encoder.weights[1], (5, 0)), (pair.encoder.biases[0], (5,))]
    worst_b = 0.0
    for param, idx in picks:
        base = param.data[idx]

        def loss_at(v):
            param.data = param.data.copy()
            param.data[idx] = v
            _, l = pipeline_loss(False)
            return float(l.data)

        fd = (loss_at(base + h) - loss_at(base - h)) / (2 * h)
        param.data = param.data.copy()
        param.data[idx] = base
        worst_b = max(worst_b, float(rel_err(grads[param][idx], fd)))
    ok = worst_a <= 1e-3 and worst_b <= 1e-3
    report(3, "gradients vs finite differences", ok,
           f"cost entries {worst_a:.2e}, network weights {worst_b:.2e}")


def test_criterion_4_debiasing_zero_mean():
    rng = np.random.default_rng(3)
    pair = tiny_pair(seed=2)
    cfg = TrainConfig(weights=WeightVector(w1=1.0), batch_n=16, epsilon=0.1,
                      sinkhorn_t=100)
    spec = cfg.cost_spec()
    debiased, raw = [], []
    for _ in range(200):
        batches = [point_batch(rng.standard_normal((16, 2))) for _ in range(4)]
        cross = float(mc_wasserstein_loss(batches[0], batches[1], spec, pair, cfg).data)
        self_p = float(mc_wasserstein_loss(batches[0], batches[2], spec, pair, cfg).data)
        self_q = float(mc_wasserstein_loss(batches[1], batches[3], spec, pair, cfg).data)
        raw.append(cross)
        debiased.append(cross - 0.5 * (self_p + self_q))
    debiased, raw = np.array(debiased), np.array(raw)
    se = debiased.std(ddof=1) / math.sqrt(len(debiased))
    se_raw = raw.std(ddof=1) / math.sqrt(len(raw))
    ok = abs(debiased.mean()) <= 3 * se and raw.mean() > 3 * se_raw
    report(4, "debiased loss centered at zero", ok,
           f"debiased mean {debiased.mean():+.4f} (3 SE {3*se:.4f}), "
           f"raw mean {raw.mean():.4f} (3 SE {3*se_raw:.4f})")


class IsotropicGaussians:
    """q = N(mu_q, I), p = N(mu_p, I) over the latent rows alone."""

    def __init__(self, mu_q, mu_p):
        self.mu_q, self.mu_p = mu_q, mu_p

    def log_densities(self, batch):
        from wvi import autodiff as ad

        d = batch.z.shape[1]
        const = -0.5 * d * math.log(2.0 * math.pi)
        sq_p = ad.reduce_sum(ad.square(batch.z - self.mu_p), axis=1)
        sq_q = ad.reduce_sum(ad.square(batch.z - self.mu_q), axis=1)
        return sq_p * (-0.5) + const, sq_q * (-0.5) + const


def test_criterion_5_f_term_matches_analytic_kl():
    rng = np.random.default_rng(4)
    n, d = 100000, 4
    z = rng.standard_normal((n, d))  # samples from q = N(0, I)
    batch = JointBatch(x=Tensor(np.zeros((n, 1))), z=Tensor(z), origin="variational_q")
    got = float(f_term(batch, IsotropicGaussians(0.0, 1.0), "reverse_kl").data)
    # per-sample value is d/2 - sum(z), variance d
    se = math.sqrt(d) / math.sqrt(n)
    ok = abs(got - 2.0) <= 3 * se
    report(5, "reverse-KL estimate vs analytic KL = 2.0", ok,
           f"estimate {got:.4f}, 3 SE {3*se:.4f}")


def test_criterion_6_divergence_axioms():
    rng = np.random.default_rng(5)
    pair = tiny_pair(seed=6, dx=3, dz=2)
    specs = [
        CostFunctionalSpec(WeightVector(w1=1.0)),
        CostFunctionalSpec(WeightVector(w1=1.0), observable_metric="sqeuclidean",
                           residual_metric="sqeuclidean"),
        CostFunctionalSpec(WeightVector(w2=1.0)),
        CostFunctionalSpec(WeightVector(w3=1.0)),
        CostFunctionalSpec(WeightVector(w4=1.0)),
        CostFunctionalSpec(WeightVector(1.0, 1.0, 1.0, 1.0, 0.0)),
    ]
    n = 8
    self_cfg = TrainConfig(weights=WeightVector(w1=1.0), batch_n=n, epsilon=0.01,
                           sinkhorn_t=3000, normalize_costs=False)
    worst_self = -np.inf
    for spec in specs:
        x = rng.standard_normal((n, 3))
        z = rng.standard_normal((n, 2))
        b = JointBatch(x=Tensor(x), z=Tensor(z), origin="variational_q")
        got = float(mc_wasserstein_loss(b, b, spec, pair, self_cfg).data)
        worst_self = max(worst_self, got)
    slack = 0.01 * math.log(n) + 1e-9

    cross_cfg = TrainConfig(weights=WeightVector(w1=1.0), batch_n=6, epsilon=0.1,
                            sinkhorn_t=50)
    lowest = np.inf
    evals = 0
    while evals < 1000:
        spec = specs[evals % len(specs)]
        bp = JointBatch(x=Tensor(rng.standard_normal((6, 3))),
                        z=Tensor(rng.standard_normal((6, 2))), origin="model_p")
        bq = JointBatch(x=Tensor(rng.standard_normal((6, 3))),
                        z=Tensor(rng.standard_normal((6, 2))), origin="variational_q")
        lowest = min(lowest, float(mc_wasserstein_loss(bp, bq, spec, pair,
                                                       cross_cfg).data))
        evals += 1
    ok = worst_self <= slack and lowest >= -1e-9
    report(6, "divergence axioms", ok,
           f"worst self-divergence {worst_self:.2e} (slack {slack:.2e}), "
           f"lowest of {evals} cross values {lowest:.3f}")


def test_criterion_7_training_smoke_on_ring8():
    data = synth_dataset("ring8", 2048, seed=0)
    cfg = TrainConfig(weights=WeightVector(1, 1, 1, 1, 0), epsilon=0.1, sinkhorn_t=20,
                      batch_n=32, learning_rate=1e-3, epochs=1, steps_per_epoch=500,
                      seed=0)
    pair = tiny_pair(seed=1, dx=2, dz=2, hidden=(32, 32))
    untrained = latent_error(tiny_pair(seed=1, dx=2, dz=2, hidden=(32, 32)), 2000,
                             np.random.default_rng(5))
    _, reports = train_run(cfg, data, pair)
    track = smoothed([r.debiased_loss for r in reports], window=50)
    initial, final = track[49], track[-1]
    trained = latent_error(pair, 2000, np.random.default_rng(5))
    ok = final < 0.5 * initial and trained < untrained
    report(7, "ring8 training halves the smoothed loss", ok,
           f"smoothed {initial:.3f} -> {final:.3f}, "
           f"latent error {untrained:.3f} -> {trained:.3f}")


def test_criterion_8_reduced_scale_robustness_direction():
    full = load_mnist_idx(MNIST_PATH, downsample=2)
    train, val = split_train_val(full, 1000, seed=0)
    assert len(train) == 5000 and len(val) == 1000

    def factory(rng):
        return ModelPair.build(latent_dim=8, observable_dim=196,
                               decoder_hidden=(64, 128), encoder_hidden=(128, 64),
                               rng=rng)

    common = dict(epsilon=0.1, sinkhorn_t=20, batch_n=32, learning_rate=1e-3,
                  epochs=1, steps_per_epoch=600, seed=0)
    cfg_transport = TrainConfig(weights=WeightVector(1, 1, 1, 1, 0), debias=True,
                                **common)
    cfg_vae = TrainConfig(weights=WeightVector(w5=1.0), f_kind="reverse_kl",
                          debias=False, **common)
    s_transport, r_transport = perturbation_harness(cfg_transport, factory, train, val,
                                                    n_runs=3, seed=0, n_eval=1000,
                                                    n_gen=64)
    s_vae, r_vae = perturbation_harness(cfg_vae, factory, train, val, n_runs=3,
                                        seed=0, n_eval=1000, n_gen=64)
    med_transport = float(np.median([r.latent_mse for r in r_transport]))
    med_vae = float(np.median([r.latent_mse for r in r_vae]))
    ok = (med_transport < med_vae
          and s_transport.std["latent"] < s_vae.std["latent"]
          and not s_transport.failures and not s_vae.failures)
    report(8, "reduced-scale latent robustness ordering", ok,
           f"median latent {med_transport:.3f} vs {med_vae:.3f}, "
           f"std {s_transport.std['latent']:.4f} vs {s_vae.std['latent']:.4f}")


CFG_TEMPLATE = """
[data]
kind = ring8
size = 96
val_count = 24

[model]
latent_dim = 2
decoder_hidden = 6
encoder_hidden = 6

[train]
w1 = 1
w3 = 1
epochs = 1
steps_per_epoch = 4
batch_n = 4
sinkhorn_t = 10
seed = 13

[output]
dir = {out}
n_eval = 16
n_gen = 4
"""


def test_criterion_9_seeded_training_is_byte_identical(tmp_path):
    cfg_path = tmp_path / "run.cfg"
    cfg_path.write_text(CFG_TEMPLATE.format(out=tmp_path / "unused"))
    logs = []
    for tag in ("first", "second"):
        out = tmp_path / tag
        assert main(["train", "--config", str(cfg_path), "--out-dir", str(out)]) == 0
        logs.append((out / "train_log.jsonl").read_bytes())
    identical = logs[0] == logs[1] and len(logs[0]) > 0
    records = [json.loads(line) for line in logs[0].splitlines()]
    ok = identical and all(np.isfinite(r["loss"]) for r in records)
    report(9, "seeded runs write byte-identical logs", ok,
           f"{len(records)} records, {len(logs[0])} bytes")
