"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the summary block at
the end of the session lists every criterion again.
"""

import math
from fractions import Fraction as F

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from moelab import autodiff as ad
from moelab.autodiff import Tensor
from moelab.config import (
    ExpertPoolSpec,
    ModelArchSpec,
    MoELayerSpec,
    Routing,
    activation_sparsity,
    count_params,
    enumerate_heterogeneous_grid,
    enumerate_homogeneous_grid,
    figure_homogeneous_grid,
    named_arch,
)
from moelab.data import SyntheticCorpus, batches, gen_corpus
from moelab.harness import RunSpec, SweepManifest, TINY_ARCH, macro_avg_ce, run_sweep
from moelab.model import build
from moelab.moe import (
    MoELayer,
    RouterAffinities,
    RoutingStats,
    dispatch_capacity,
    dispatch_dropless,
    lb_loss,
    moe_forward,
    route_probs,
    z_loss,
)
from moelab.train import AdamState, TrainConfig, adam_step, lm_loss, lr_at, total_loss, train_run

import oracles
from conftest import numeric_grad
from reference_counts import EXACT_DENSE, matches, rows

# ---------------------------------------------------------------------------
# 1. parameter counts


def test_c1_parameter_counts(criterion):
    with criterion(1, "parameter counts vs architecture table") as c:
        checked = 0
        for name, s, active, total in rows():
            if name not in ("10M", "50M", "110M", "300M"):
                continue
            pc = count_params(named_arch(name, MoELayerSpec.homogeneous(s, 1) if s > 1 else None))
            assert matches(pc.active_non_embedding, active), (name, s, pc.active_non_embedding, active)
            assert matches(pc.total_non_embedding, total), (name, s, pc.total_non_embedding, total)
            checked += 1
        for name, exact in EXACT_DENSE.items():
            assert count_params(named_arch(name)).active_non_embedding == exact
        c.detail = f"{checked} rows within display rounding + 0.5%, {len(EXACT_DENSE)} exact dense rows"


# ---------------------------------------------------------------------------
# 2. FLOP-match identity

# (g1, g2, k1, k2, n1, n2, s) transcribed row by row from the heterogeneous table
HETEROGENEOUS_ROWS = [
    (F(1, 2), F(1, 4), 1, 2, 4, 8, 4), (F(1, 2), F(1, 4), 1, 2, 8, 16, 8),
    (F(1, 2), F(1, 4), 1, 2, 16, 32, 16), (F(1, 2), F(1, 4), 1, 2, 32, 64, 32),
    (F(1, 4), F(1, 8), 2, 4, 8, 16, 4), (F(1, 4), F(1, 8), 2, 4, 16, 32, 8),
    (F(1, 4), F(1, 8), 2, 4, 32, 64, 16), (F(1, 4), F(1, 8), 2, 4, 64, 128, 32),
    (F(1, 8), F(1, 16), 4, 8, 16, 32, 4), (F(1, 8), F(1, 16), 4, 8, 32, 64, 8),
    (F(1, 8), F(1, 16), 4, 8, 64, 128, 16), (F(1, 8), F(1, 16), 4, 8, 128, 256, 32),
    (F(1, 16), F(1, 32), 8, 16, 16, 32, 2), (F(1, 16), F(1, 32), 8, 16, 32, 64, 4),
    (F(1, 16), F(1, 32), 8, 16, 64, 128, 8), (F(1, 16), F(1, 32), 8, 16, 128, 256, 16),
]


def _active_sum(spec):
    return spec.generalist + sum((p.k * p.g for p in spec.pools), F(0))


def test_c2_flop_match_identity(criterion):
    with criterion(2, "FLOP-match identity and heterogeneous table") as c:
        homo = enumerate_homogeneous_grid() + figure_homogeneous_grid()
        het = enumerate_heterogeneous_grid()
        for spec in homo + het:
            assert _active_sum(spec) == 1  # exact Fraction equality
        emitted = {(a.g, b.g, a.k, b.k, a.n, b.n, activation_sparsity(h)) for h in het for a, b in [h.pools]}
        assert emitted == set(HETEROGENEOUS_ROWS) and len(het) == len(HETEROGENEOUS_ROWS)
        c.detail = f"{len(homo)} homogeneous + {len(het)} heterogeneous specs"


# ---------------------------------------------------------------------------
# 3. loss closed forms


def test_c3_loss_closed_forms(criterion):
    with criterion(3, "load-balance and z-loss closed forms") as c, ad.precision(np.float64):
        def stats(f, P):
            return RoutingStats(np.asarray(f, float), Tensor(np.asarray(P, float)), np.zeros(len(f)), 1, 1)

        uniform = lb_loss(stats([0.25] * 4, [0.25] * 4)).item()
        peaked = lb_loss(stats([1, 0, 0, 0], [1, 0, 0, 0])).item()
        z4 = z_loss(RouterAffinities(Tensor(np.zeros((8, 4))), None)).item()
        z1 = z_loss(RouterAffinities(Tensor(np.zeros((8, 1))), None)).item()
        assert uniform == 1.0
        assert peaked == 4.0
        assert abs(z4 - math.log(4) ** 2) <= 1e-6
        assert z1 == 0.0
        c.detail = f"lb {uniform}, {peaked}; z {z4:.6f}, {z1}"


# ---------------------------------------------------------------------------
# 4. gradient fidelity

GRAD_ARCH = ModelArchSpec(
    "grad", layers=2, model_dim=32, heads=2, vocab=32, max_seq_len=8,
    layer_spec=MoELayerSpec(pools=(ExpertPoolSpec(4, F(1, 2), 2),), generalist=F(1, 2)),
)


def test_c4_gradient_fidelity(criterion):
    with criterion(4, "gradients vs central finite differences (float64)") as c, ad.precision(np.float64):
        model = build(GRAD_ARCH, 0)
        # expert 3 of layer 0 can never be picked, so its router column only sees the aux losses
        model.blocks[0].moe.pools[0].router.bias[3] = -10.0
        batch = np.random.default_rng(1).integers(0, 32, size=(2, 7))
        cfg = TrainConfig.desk(steps=1, warmup_steps=0).resolved(model)

        def loss():
            ce, res = lm_loss(model, batch)
            return total_loss(ce, res.lb_loss, res.z_loss, cfg), res

        value, res = loss()
        assert 3 not in {e for pool in res.stats[0] for e, load in enumerate(pool.raw_loads) if load}
        ad.backward(value)

        rng = np.random.default_rng(2)
        worst, n_checked = 0.0, 0
        for name, t in model.named_parameters():
            grad = t.grad if t.grad is not None else np.zeros_like(t.data)  # unrouted expert: outside the graph
            picks = {np.unravel_index(np.argmax(np.abs(grad)), t.shape)}
            picks |= {tuple(int(rng.integers(0, s)) for s in t.shape) for _ in range(3)}
            if name == "layers.0.moe.pool0.router":
                picks |= {(i, 3) for i in range(0, 32, 4)}
            for idx in picks:
                num = numeric_grad(lambda: loss()[0].item(), t.data, idx, eps=1e-5)
                got = grad[idx]
                if name == "layers.0.moe.pool0.router" and idx[1] == 3:
                    assert got != 0.0
                err = abs(got - num) / max(abs(got), abs(num), 1e-7)
                assert err <= 1e-3, (name, idx, got, num)
                worst = max(worst, err)
                n_checked += 1
        c.detail = f"{n_checked} entries over {len(model.named_parameters())} blocks, max rel err {worst:.2e}"


# ---------------------------------------------------------------------------
# 5. routing invariants


def _tie_break_oracle(scores, k):
    return [sorted(range(len(row)), key=lambda e: (-row[e], e))[:k] for row in scores]


@settings(max_examples=1000, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 16), T=st.integers(1, 48),
       cf=st.sampled_from([F(1, 4), F(1, 2), F(1), F(3, 2), F(2)]), quantised=st.booleans())
def _routing_case(seed, n, T, cf, quantised, counter):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, n + 1))
    probs = rng.dirichlet(np.full(n, 0.5), size=T)
    if quantised:  # coarse values force many exact ties
        probs = np.round(probs * 4) / 4 + 1e-3
        probs /= probs.sum(-1, keepdims=True)
    bias = rng.normal(scale=0.3, size=n) * rng.integers(0, 2)
    with ad.precision(np.float64):
        oc = route_probs(Tensor(probs), bias, k)
        plain = route_probs(Tensor(probs), None, k)
    assert oc.experts.tolist() == _tie_break_oracle(probs + bias, k)
    assert plain.experts.tolist() == _tie_break_oracle(probs, k)
    chosen = probs[np.arange(T)[:, None], oc.experts]
    np.testing.assert_allclose(oc.weights.data, chosen / chosen.sum(-1, keepdims=True), rtol=1e-12)

    free = dispatch_dropless(oc)
    assert free.n_dropped == 0 and free.batch_sizes().sum() == T * k
    plan = dispatch_capacity(oc, cf, probs)
    assert (plan.batch_sizes() <= math.ceil(cf * T * k / n)).all()
    assert plan.batch_sizes().sum() + plan.n_dropped == T * k
    inf = dispatch_capacity(oc, math.inf, probs)
    assert inf.n_dropped == 0
    assert all(a.tolist() == b.tolist() for a, b in zip(inf.tokens, free.tokens))
    assert all(a.tolist() == b.tolist() for a, b in zip(inf.slots, free.slots))
    counter.append(1)


def test_c5_routing_invariants(criterion):
    with criterion(5, "routing invariants over random batches") as c:
        counter = []
        _routing_case(counter=counter)
        assert len(counter) >= 1000
        c.detail = f"{len(counter)} batches"


# ---------------------------------------------------------------------------
# 6. loss-free bias dynamics

LB_CELLS = {"lb=1e-2,gamma=0": (1e-2, 0.0), "lb=1e-4,gamma=0": (1e-4, 0.0), "lb=1e-4,gamma=1e-3": (1e-4, 1e-3)}
SKEWED = SyntheticCorpus(vocab=64, seq_len=65, skew=1.0)


@pytest.mark.slow
def test_c6_loss_free_bias_dynamics(criterion, tmp_path):
    with criterion(6, "imbalance ordering across load-balance settings") as c:
        train = TrainConfig.desk(steps=300, batch_size=16, seq_len=64, peak_lr=3e-3, warmup_steps=50)
        runs, cell_of = [], {}
        for label, (lb, gamma) in LB_CELLS.items():
            layer = MoELayerSpec.homogeneous(8, F(1, 2), lb_weight=lb, bias_step=gamma)
            for seed in range(5):
                run = RunSpec(TINY_ARCH.with_layer(layer), train, SKEWED, seed)
                runs.append(run)
                cell_of[run.run_id] = label
        summaries = run_sweep(SweepManifest("lb", "custom", str(tmp_path), runs))
        assert all(s.status == "ok" for s in summaries)
        med = {label: float(np.median([s.final_imbalance for s in summaries if cell_of[s.run_id] == label]))
               for label in LB_CELLS}
        c.detail = ", ".join(f"{k}: {v:.3f}" for k, v in med.items())
        assert med["lb=1e-2,gamma=0"] < med["lb=1e-4,gamma=0"]
        assert med["lb=1e-4,gamma=1e-3"] < med["lb=1e-4,gamma=0"]


# ---------------------------------------------------------------------------
# 7. training sanity and determinism


@pytest.mark.slow
def test_c7_training_sanity(criterion):
    with criterion(7, "held-out CE drops >= 30% in 500 steps; reruns bitwise equal") as c:
        splits = gen_corpus(SyntheticCorpus(vocab=64, seq_len=65))
        cfg = TrainConfig.desk(steps=500, batch_size=16, seq_len=64, peak_lr=3e-3, warmup_steps=50)
        evaluate = lambda m: macro_avg_ce(m, splits.heldout)  # noqa: E731
        parts = []
        for label, layer in [("dense", MoELayerSpec.dense()), ("s=4", MoELayerSpec.homogeneous(8, F(1, 2)))]:
            arch = TINY_ARCH.with_layer(layer)
            init_ce, _ = evaluate(build(arch, 0))
            records = train_run(build(arch, 0), batches(splits, 16, 0), cfg, evaluate=evaluate).records
            final_ce = records[-1].heldout_ce
            drop = 1 - final_ce / init_ce
            parts.append(f"{label} {init_ce:.3f}->{final_ce:.3f} ({drop:.0%})")
            assert drop >= 0.30, parts[-1]
            if label == "s=4":
                again = train_run(build(arch, 0), batches(splits, 16, 0), cfg, evaluate=evaluate).records
                assert [r.to_json() for r in again] == [r.to_json() for r in records]
                parts.append("rerun identical")
        c.detail = "; ".join(parts)


# ---------------------------------------------------------------------------
# 8. oracle equivalence

ORACLE_LAYERS = [
    MoELayerSpec.homogeneous(4, F(1, 2)),
    MoELayerSpec.homogeneous(8, F(1, 8)),
    MoELayerSpec(pools=(ExpertPoolSpec(4, F(1, 2), 1), ExpertPoolSpec(8, F(1, 4), 2))),
    MoELayerSpec(pools=(ExpertPoolSpec(8, F(1, 4), 2),), generalist=F(1, 2)),
    MoELayerSpec.homogeneous(4, F(1, 4), routing=Routing("capacity", F(1, 2))),
]


def test_c8_oracle_equivalence(criterion):
    with criterion(8, "forward pass vs per-token brute-force combine") as c:
        worst = 0.0
        with ad.precision(np.float64):
            for case in range(100):
                spec = ORACLE_LAYERS[case % len(ORACLE_LAYERS)]
                arch = ModelArchSpec("o", layers=2, model_dim=16, heads=2, vocab=8, max_seq_len=8, layer_spec=spec)
                rng = np.random.default_rng(case)
                layer = MoELayer.init(spec, arch, rng)
                for rs in layer.router_states():
                    rs.bias[:] = rng.normal(scale=0.01, size=rs.bias.shape)
                h = rng.normal(size=(int(rng.integers(1, 24)), 16))
                got = moe_forward(Tensor(h), layer).out.data
                ref = oracles.moe_layer(h, layer)
                err = np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)
                assert err <= 1e-5, (case, err)
                worst = max(worst, err)
        spec = MoELayerSpec.homogeneous(1, 1, dense_granular_mode="equal_weight")
        arch = ModelArchSpec("o", layers=2, model_dim=16, heads=2, vocab=8, max_seq_len=8, layer_spec=spec)
        layer = MoELayer.init(spec, arch, np.random.default_rng(0))
        h = Tensor(np.random.default_rng(1).normal(size=(9, 16)))
        assert moe_forward(h, layer).out.data.tobytes() == layer.pools[0].experts[0](h).data.tobytes()
        c.detail = f"100 cases, max rel err {worst:.1e}; equal-weight n=1 bitwise"


# ---------------------------------------------------------------------------
# 9. schedule and optimizer


def test_c9_schedule_and_optimizer(criterion):
    with criterion(9, "learning-rate schedule and Adam step") as c:
        cfg = TrainConfig.desk(steps=1000, peak_lr=4e-4, warmup_steps=50)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(1000, cfg) == 0.1 * 4e-4
        mid = 525
        formula = 4e-4 * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * (mid - 50) / 950)))
        assert abs(lr_at(mid, cfg) - formula) <= 1e-12
        assert abs(lr_at(mid, cfg) - 0.55 * 4e-4) <= 1e-12
        p = np.array([1.0])
        adam_step(p, np.array([1.0]), AdamState(np.zeros(1), np.zeros(1)), 1e-3)
        # m = 0.1, v = 0.05; corrected both to 1: step = lr * 1 / (1 + eps)
        assert abs(p[0] - (1.0 - 1e-3 / (1.0 + 1e-8))) <= 1e-9
        c.detail = f"lr(mid) = {lr_at(mid, cfg):.6e}, adam -> {p[0]:.9f}"
