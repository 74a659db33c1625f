"""Headline acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
The training checks take minutes; deselect them with ``-m "not slow"``.
"""

import time

import numpy as np
import pytest

import oracles
from capsattn import tensor as T
from capsattn.capsule import CapsuleLayer, CapsuleLayerConfig, param_count
from capsattn.gradcheck import TOY_FULL, grad_check
from capsattn.model import PLACEMENT_VARIANTS, ModelConfig, PlacementMap, build_model
from capsattn.routing import EmHyper, RoutingConfig, dynamic_route, em_route, squash
from capsattn.sweep import BASELINE, placement_base, sweep
from capsattn.tasks import TaskSpec
from capsattn.train import TrainConfig, train
from capsattn.tensor import Tensor

GRAD_SCOPES = ("squash", "dynamic_route", "em_route", "capsule_dynamic", "capsule_em")
GRAD_SEEDS = range(1, 11)


def test_routing_invariants(criterion):
    with criterion("routing invariants, 1000 configs") as c:
        rng = np.random.default_rng(2024)
        started = time.perf_counter()
        worst_row, worst_norm, min_gap, alpha_lo, alpha_hi = 0.0, 0.0, np.inf, 1.0, 0.0
        for _ in range(1000):
            h, l = rng.choice([2, 4, 8], size=2)
            d = int(rng.choice([4, 16, 64]))
            iters = int(rng.integers(1, 4))
            votes = Tensor((rng.standard_normal((4, h, l, d)) * rng.uniform(0.1, 3.0)).astype(np.float32))

            v, trace = dynamic_route(votes, iters)
            assert trace.iterations == iters
            worst_row = max(worst_row, trace.max_row_error())
            worst_norm = max(worst_norm, float(np.linalg.norm(v.data.astype(np.float64), axis=-1).max()))

            mu, trace = em_route(votes, Tensor(rng.standard_normal(l)), Tensor(rng.standard_normal(l)), iters)
            floor = EmHyper().floor(votes.dtype)
            worst_row = max(worst_row, trace.max_row_error())
            min_gap = min(min_gap, min(float((s - floor).min()) for s in trace.sigma2))
            alpha_lo = min(alpha_lo, min(float(a.min()) for a in trace.alpha))
            alpha_hi = max(alpha_hi, max(float(a.max()) for a in trace.alpha))
        elapsed = time.perf_counter() - started
        c.detail = (f"max |row sum - 1| {worst_row:.1e}, max |v| {worst_norm:.6f}, "
                    f"min sigma2 - floor {min_gap:.1e}, alpha in [{alpha_lo:.1e}, 1 - {1 - alpha_hi:.1e}], {elapsed:.1f}s")
        assert worst_row <= 1e-6
        assert worst_norm < 1
        assert min_gap >= 0
        assert 0 < alpha_lo and alpha_hi < 1
        assert elapsed < 60


def test_oracle_equivalence(criterion):
    with criterion("routing oracle equivalence, 100 instances each") as c:
        rng = np.random.default_rng(77)
        started = time.perf_counter()
        err_dyn = err_em = 0.0
        with T.precision(np.float64):
            for _ in range(100):
                h, l, d = (int(x) for x in rng.integers(2, 6, size=3))
                iters = int(rng.integers(1, 4))
                votes = rng.standard_normal((2, h, l, d)) * rng.uniform(0.3, 2.0)

                v, trace = dynamic_route(Tensor(votes), iters)
                for p in range(2):
                    ref_v, ref_c, ref_vs = oracles.dynamic_routing(votes[p], iters)
                    err_dyn = max(err_dyn, np.abs(v.data[p] - ref_v).max())
                    for t in range(iters):
                        err_dyn = max(err_dyn, np.abs(trace.c[t][p] - ref_c[t]).max(),
                                      np.abs(trace.v[t][p] - ref_vs[t]).max())

                ba, bm = rng.standard_normal(l), rng.standard_normal(l)
                hyper = EmHyper()
                mu, trace = em_route(Tensor(votes), Tensor(ba), Tensor(bm), iters, hyper)
                for p in range(2):
                    ref_mu, ref = oracles.em_routing(votes[p], ba, bm, hyper.schedule(iters), hyper.floor(np.float64))
                    err_em = max(err_em, np.abs(mu.data[p] - ref_mu).max())
                    for t in range(iters):
                        err_em = max(err_em, np.abs(trace.c[t][p] - ref["c"][t]).max(),
                                     np.abs(trace.sigma2[t][p] - ref["var"][t]).max(),
                                     np.abs(trace.alpha[t][p] - ref["alpha"][t]).max())
        elapsed = time.perf_counter() - started
        c.detail = f"dynamic max err {err_dyn:.1e} (tol 1e-10), EM max err {err_em:.1e} (tol 1e-8), {elapsed:.1f}s"
        assert err_dyn <= 1e-10
        assert err_em <= 1e-8
        assert elapsed < 60


def test_gradient_checks(criterion):
    with criterion("gradient checks, seeds 1-10") as c:
        started = time.perf_counter()
        worst = {}
        for seed in GRAD_SEEDS:
            for scope in GRAD_SCOPES:
                worst[scope] = max(worst.get(scope, 0.0), grad_check(scope, seed).max_rel)
            for routing in ("dynamic", "em"):
                key = f"full_{routing}"
                worst[key] = max(worst.get(key, 0.0), grad_check("full", seed, routing_kind=routing).max_rel)
        elapsed = time.perf_counter() - started
        c.detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.0f}s"
        assert max(worst.values()) < 1e-4
        assert elapsed < 300


def test_structural_param_counts(criterion):
    with criterion("param counts at d=512, h=l=8, d_ff=2048") as c:
        dyn = param_count(CapsuleLayerConfig(RoutingConfig("dynamic", 8, 8, 512), 2048))
        em_cfg = CapsuleLayerConfig(RoutingConfig("em", 8, 8, 512), 2048)
        em = param_count(em_cfg)
        c.detail = f"dynamic {dyn:,}, EM pose {em:,}"
        assert em_cfg.routing.pose_mode
        assert dyn == 2_361_856
        assert em == 2_103_824
        assert em < dyn


def test_identities(criterion):
    with criterion("identity checks") as c:
        rng = np.random.default_rng(8)
        for kind in ("dynamic", "em"):
            cfg = CapsuleLayerConfig(RoutingConfig(kind, 4, 4, 32), 24)
            layer = CapsuleLayer(cfg, rng)
            layer.ffn.w2.data[...] = 0
            layer.ffn.b2.data[...] = 0
            u = Tensor(rng.standard_normal((3, 5, 4, 8)).astype(np.float32))
            assert np.array_equal(layer(u).data, u.data.reshape(3, 5, 32)), f"{kind} residual identity"

        base = ModelConfig(routing="em", placement=PlacementMap())
        src = rng.integers(3, 20, size=(4, 9))
        tgt = rng.integers(3, 20, size=(4, 9))
        stock = build_model(base.with_(routing="none"), seed=5)(src, tgt).data
        empty = build_model(base, seed=5)(src, tgt).data
        assert np.array_equal(stock, empty), "empty placement differs from stock"

        with T.precision(np.float64):
            s = squash(Tensor([3.0, 4.0])).data
        c.detail = f"zero-FFN O == u (dynamic, em), empty placement == stock, squash([3,4]) = {s.tolist()}"
        np.testing.assert_allclose(s, [0.576923, 0.769231], atol=1e-6)
        np.testing.assert_allclose(s, [15 / 26, 20 / 26], atol=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("routing", ["none", "dynamic", "em"])
def test_copy_task_learns(routing, criterion, tmp_path):
    with criterion(f"copy task, routing={routing}, placement ed2,dec2") as c:
        cfg = TrainConfig(
            model=ModelConfig(routing=routing, placement="ed2,dec2"),
            task=TaskSpec("copy", 20, 1, 12),
            steps=5000,
            target_acc=0.99,
            seed=42,
        )
        res = train(cfg, tmp_path)
        c.detail = (f"held-out token_acc {res.eval['token_acc']:.4f} after {res.step} steps, "
                    f"{res.wall_time:.0f}s")
        assert res.eval["token_acc"] >= 0.99
        assert res.step <= 5000
        assert res.wall_time < 600


@pytest.mark.slow
def test_placement_grid(criterion, tmp_path):
    with criterion("placement grid, 11 variants + baseline") as c:
        started = time.perf_counter()
        base = placement_base(steps=500)
        variants = [BASELINE, *PLACEMENT_VARIANTS]
        worst = 0.0
        for v in variants:
            placement = PlacementMap() if v == BASELINE else PlacementMap.parse(v)
            build_model(base.model.with_(placement=placement), seed=0)
            cfg = TOY_FULL.with_(depth=6, placement=placement)
            report = grad_check("full", seed=1, config=cfg, max_coords=2)
            assert report.ok(), f"{v}: {report.max_rel:.2e}"
            worst = max(worst, report.max_rel)
        rows = sweep("placement", base, seeds=(1,), variants=variants, out_dir=tmp_path)
        elapsed = time.perf_counter() - started
        c.detail = f"{len(rows)} rows, grad max rel {worst:.1e}, {elapsed / 60:.1f} min"
        assert len(rows) == 12
        assert all(r.status == "ok" for r in rows)
        assert len((tmp_path / "results.csv").read_text().splitlines()) == 13
        assert len(list((tmp_path / "runs").iterdir())) == 12
        assert elapsed < 1800


def test_determinism(criterion, tmp_path):
    with criterion("determinism, byte-identical run files") as c:
        cfg = TrainConfig(steps=60, log_every=20, ckpt_every=30, eval_samples=64, seed=9)
        train(cfg, tmp_path / "a")
        train(cfg, tmp_path / "b")
        names = ("metrics.csv", "eval.csv", "checkpoint.caps")
        same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
        c.detail = ", ".join(f"{n} {'identical' if s else 'DIFFERS'}" for n, s in zip(names, same))
        assert all(same)
