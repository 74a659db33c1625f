import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from capsattn import kernels, routing
from capsattn import tensor as T
from capsattn.errors import ConfigError
from capsattn.gradcheck import check
from capsattn.routing import EmHyper, RoutingConfig, compute_votes, dynamic_route, em_e_step, em_m_step, em_route, squash
from capsattn.tensor import Tensor


def _f64(x):
    return Tensor(np.asarray(x, dtype=np.float64))


class TestSquash:
    def test_zero(self, f64):
        assert squash(Tensor([0.0, 0.0])).data.tolist() == [0.0, 0.0]

    def test_three_four(self, f64):
        np.testing.assert_allclose(squash(Tensor([3.0, 4.0])).data, [0.576923, 0.769231], atol=1e-6)
        np.testing.assert_allclose(squash(Tensor([3.0, 4.0])).data, [15 / 26, 20 / 26], atol=1e-9)

    def test_large_norm(self, f64):
        v = squash(Tensor([100.0, 0.0])).data
        assert abs(np.linalg.norm(v) - 10000 / 10001) < 1e-12

    def test_monotone_norm(self, f64):
        norms = [np.linalg.norm(squash(Tensor([r, 0.0, 0.0])).data) for r in np.geomspace(1e-3, 1e3, 40)]
        assert all(a < b for a, b in zip(norms, norms[1:]))
        assert norms[-1] < 1

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
    def test_norm_below_one_same_direction(self, s):
        with T.precision(np.float64):
            v = squash(Tensor(s)).data
        s = np.asarray(s)
        assert np.linalg.norm(v) < 1
        if np.linalg.norm(s) > 1e-6:
            cos = v @ s / (np.linalg.norm(v) * np.linalg.norm(s))
            assert cos > 1 - 1e-9


class TestVotes:
    def test_identity_transforms(self, f64, rng):
        h = 3
        u = rng.standard_normal((5, h, 4))
        w = np.broadcast_to(np.eye(4), (h, h, 4, 4)).copy()
        votes = compute_votes(Tensor(u), Tensor(w)).votes.data
        for j in range(h):
            np.testing.assert_allclose(votes[:, :, j], u, atol=1e-15)

    def test_zero_transforms(self, rng):
        votes = compute_votes(Tensor(rng.standard_normal((5, 2, 4))), Tensor(np.zeros((2, 3, 4, 6)))).votes
        assert votes.shape == (5, 2, 3, 6)
        assert not votes.data.any()

    def test_vector_mode_against_pair_loop(self, f64, rng):
        u = rng.standard_normal((2, 3, 4, 6))
        w = rng.standard_normal((4, 2, 6, 5))
        votes = compute_votes(Tensor(u), Tensor(w)).votes.data
        for idx in np.ndindex(2, 3):
            for i in range(4):
                for j in range(2):
                    np.testing.assert_allclose(votes[idx][i, j], u[idx][i] @ w[i, j], atol=1e-13)

    def test_pose_mode_against_pair_loop(self, f64, rng):
        u = rng.standard_normal((3, 4, 9))
        w = rng.standard_normal((4, 4, 3, 3))
        votes = compute_votes(Tensor(u), Tensor(w), pose=True).votes.data
        for p in range(3):
            for i in range(4):
                for j in range(4):
                    np.testing.assert_allclose(votes[p, i, j], (u[p, i].reshape(3, 3) @ w[i, j]).ravel(), atol=1e-13)

    def test_pose_mode_needs_square(self, rng):
        with pytest.raises(ConfigError):
            compute_votes(Tensor(rng.standard_normal((3, 2, 6))), Tensor(np.zeros((2, 2, 2, 3))), pose=True)

    def test_config_pose_selection(self):
        assert RoutingConfig("em", 8, 8, 512).pose_mode
        assert RoutingConfig("em", 8, 8, 512).transform_shape() == (8, 8, 8, 8)
        assert not RoutingConfig("em", 4, 2, 64).pose_mode
        assert RoutingConfig("em", 4, 2, 64).transform_shape() == (4, 2, 16, 32)
        assert not RoutingConfig("dynamic", 8, 8, 512).pose_mode

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(d_model=30), dict(kind="spread")])
    def test_config_errors(self, kw):
        base = dict(kind="dynamic", h=4, l=4, d_model=32, iterations=3)
        base.update(kw)
        with pytest.raises(ConfigError):
            RoutingConfig(**base)


class TestDynamic:
    def test_hand_case(self, f64):
        votes = np.zeros((2, 2, 2))
        votes[..., 0] = 1.0
        v, trace = dynamic_route(_f64(votes), iterations=1)
        np.testing.assert_allclose(trace.c[0], 0.5)
        np.testing.assert_allclose(v.data, [[0.5, 0.0], [0.5, 0.0]], atol=1e-12)

    @pytest.mark.parametrize("iterations", [1, 2, 5])
    def test_identical_across_outputs_stays_uniform(self, f64, rng, iterations):
        per_input = rng.standard_normal((3, 1, 4))
        votes = np.repeat(per_input, 4, axis=1)
        v, trace = dynamic_route(_f64(votes), iterations)
        for c in trace.c:
            np.testing.assert_allclose(c, 0.25, atol=1e-15)
        np.testing.assert_allclose(v.data, np.repeat(v.data[:1], 4, axis=0), atol=1e-15)

    def test_symmetric_heads_identity_transforms(self, f64, rng):
        h = 4
        u = np.repeat(rng.standard_normal((2, 1, 4)), h, axis=1)
        w = np.broadcast_to(np.eye(4), (h, h, 4, 4)).copy()
        votes = compute_votes(Tensor(u), Tensor(w))
        _, trace = dynamic_route(votes, 3)
        for c in trace.c:
            np.testing.assert_allclose(c, 1 / h, atol=1e-15)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, f64, seed):
        rng = np.random.default_rng(seed)
        votes = rng.standard_normal((3, 4, 4, 5)) * 0.7
        v, trace = dynamic_route(_f64(votes), 3)
        for p in range(3):
            ref_v, ref_c, ref_vs = oracles.dynamic_routing(votes[p], 3)
            np.testing.assert_allclose(v.data[p], ref_v, atol=1e-10, rtol=0)
            for t in range(3):
                np.testing.assert_allclose(trace.c[t][p], ref_c[t], atol=1e-10, rtol=0)
                np.testing.assert_allclose(trace.v[t][p], ref_vs[t], atol=1e-10, rtol=0)

    def test_logits_reset_between_calls(self, f64, rng):
        votes = _f64(rng.standard_normal((2, 3, 3, 4)))
        a, _ = dynamic_route(votes, 3)
        b, _ = dynamic_route(votes, 3)
        np.testing.assert_array_equal(a.data, b.data)

    def test_iterations_validated(self):
        with pytest.raises(ConfigError):
            dynamic_route(Tensor(np.zeros((1, 2, 2, 2))), 0)


class TestEmSteps:
    def test_degenerate_cluster(self, f64):
        votes = np.full((3, 2, 4), 1.5)
        c = np.full((3, 2), 0.5)
        mu, sig, alpha = em_m_step(_f64(votes), _f64(c), 0.0, 0.0, 0.01, 1e-8)
        np.testing.assert_allclose(mu.data, 1.5, atol=1e-15)
        np.testing.assert_array_equal(sig.data, 1e-8)

    def test_two_vote_cost(self, f64):
        votes = np.array([[[0.0], [0.0]], [[2.0], [2.0]]])  # h=2, l=2, d=1
        c = np.full((2, 2), 0.5)
        mu, sig, alpha = em_m_step(_f64(votes), _f64(c), 0.0, 0.0, 1.0, 1e-8)
        np.testing.assert_allclose(mu.data, [[1.0], [1.0]], atol=1e-15)
        np.testing.assert_allclose(sig.data, [[1.0], [1.0]], atol=1e-15)
        cost = -np.log(alpha.data / (1 - alpha.data))
        expected = (1 + math.log(2 * math.pi)) / 2
        np.testing.assert_allclose(cost, expected, atol=1e-12)
        np.testing.assert_allclose(cost, 1.41894, atol=1e-5)

    def test_lambda_to_zero(self, f64, rng):
        votes, c = rng.standard_normal((4, 3, 5)) * 10, rng.dirichlet(np.ones(3), size=4)
        _, _, alpha = em_m_step(_f64(votes), _f64(c), 3.0, -2.0, 1e-12, 1e-8)
        np.testing.assert_allclose(alpha.data, 0.5, atol=1e-9)

    def test_equal_densities(self, f64, rng):
        votes = np.repeat(rng.standard_normal((4, 1, 3)), 3, axis=1)
        mu = np.zeros((3, 3))
        sig = np.ones((3, 3))
        alpha = np.array([0.2, 0.5, 0.9])
        c = em_e_step(_f64(votes), _f64(mu), _f64(sig), _f64(alpha)).data
        np.testing.assert_allclose(c, np.tile(alpha / alpha.sum(), (4, 1)), atol=1e-14)

    def test_concentrates_on_matching_gaussian(self, f64, rng):
        votes = rng.standard_normal((2, 3, 4))
        mu = np.full((3, 4), 50.0)
        mu[1] = votes[0, 1]
        sig = np.ones((3, 4))
        sig[1] = 1e-6
        c = em_e_step(_f64(votes[:1]), _f64(mu), _f64(sig), _f64(np.full(3, 0.5))).data
        assert c[0, 1] > 1 - 1e-12

    def test_single_output(self, f64, rng):
        c = em_e_step(_f64(rng.standard_normal((5, 1, 3))), _f64(np.zeros((1, 3))), _f64(np.ones((1, 3))),
                      _f64([0.3])).data
        np.testing.assert_array_equal(c, 1.0)

    def test_underflow_normalised(self, f64, rng):
        votes = rng.standard_normal((2, 3, 4)) * 1e4
        c = em_e_step(_f64(votes), _f64(np.zeros((3, 4))), _f64(np.full((3, 4), 1e-8)), _f64([1e-300, 0.5, 0.5])).data
        assert np.isfinite(c).all()
        np.testing.assert_allclose(c.sum(-1), 1.0, atol=1e-12)


class TestEmRoute:
    def test_single_iteration_is_mean(self, f64, rng):
        votes = rng.standard_normal((5, 4, 3, 2))
        mu, trace = em_route(_f64(votes), iterations=1)
        np.testing.assert_allclose(mu.data, votes.mean(axis=1), atol=1e-14)
        assert trace.iterations == 1

    def test_identical_inputs(self, f64, rng):
        h, l = 4, 4
        u = np.repeat(rng.standard_normal((3, 1, 4)), h, axis=1)
        w = np.repeat(rng.standard_normal((1, l, 4, 4)), h, axis=0)
        votes = compute_votes(Tensor(u), Tensor(w)).votes
        mu, _ = em_route(votes, iterations=3)
        np.testing.assert_allclose(mu.data, votes.data[:, 0], atol=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_oracle(self, f64, seed):
        rng = np.random.default_rng(seed)
        votes = rng.standard_normal((3, 4, 4, 5))
        ba, bm = rng.standard_normal(4), rng.standard_normal(4)
        hyper = EmHyper(lambda_schedule=(0.5, 1.0, 2.0))
        mu, trace = em_route(_f64(votes), _f64(ba), _f64(bm), 3, hyper)
        for p in range(3):
            ref_mu, ref = oracles.em_routing(votes[p], ba, bm, (0.5, 1.0, 2.0), 1e-8)
            np.testing.assert_allclose(mu.data[p], ref_mu, atol=1e-8, rtol=0)
            for t in range(3):
                np.testing.assert_allclose(trace.c[t][p], ref["c"][t], atol=1e-8, rtol=0)
                np.testing.assert_allclose(trace.sigma2[t][p], ref["var"][t], atol=1e-8, rtol=0)
                np.testing.assert_allclose(trace.alpha[t][p], ref["alpha"][t], atol=1e-8, rtol=0)

    def test_defaults(self):
        hyper = EmHyper()
        assert hyper.schedule(3) == pytest.approx((0.01, 0.02, 0.03))
        assert hyper.floor(np.float32) == 1e-4
        assert hyper.floor(np.float64) == 1e-8

    def test_schedule_validation(self):
        with pytest.raises(ConfigError):
            EmHyper(lambda_schedule=(0.1, 0.2)).schedule(3)
        with pytest.raises(ConfigError):
            EmHyper(lambda_schedule=(0.1, -0.2)).schedule(2)


def _random_votes(rng, h, l, d, positions=3):
    return rng.standard_normal((positions, h, l, d)) * rng.uniform(0.1, 3.0)


@given(st.sampled_from([2, 4, 8]), st.sampled_from([2, 4, 8]), st.sampled_from([4, 16]),
       st.integers(1, 3), st.integers(0, 2**32 - 1))
def test_invariants(h, l, d, iterations, seed):
    rng = np.random.default_rng(seed)
    votes = Tensor(_random_votes(rng, h, l, d))
    v, trace = dynamic_route(votes, iterations)
    assert trace.iterations == iterations
    assert trace.max_row_error() <= 1e-6
    assert all((c >= 0).all() for c in trace.c)
    assert (np.linalg.norm(v.data, axis=-1) < 1).all()

    mu, trace = em_route(votes, Tensor(rng.standard_normal(l)), Tensor(rng.standard_normal(l)), iterations)
    floor = EmHyper().floor(votes.dtype)
    assert trace.max_row_error() <= 1e-6
    assert all((s >= floor).all() for s in trace.sigma2)
    assert all(((a > 0) & (a < 1)).all() for a in trace.alpha)


@pytest.mark.parametrize("kind", ["dynamic", "em"])
def test_output_permutation_equivariance(f64, rng, kind):
    h, l = 4, 4
    cfg = RoutingConfig(kind, h, l, 16, 3)
    u = Tensor(rng.standard_normal((3, h, 4)))
    w = rng.standard_normal(cfg.transform_shape())
    ba, bm = rng.standard_normal(l), rng.standard_normal(l)
    perm = rng.permutation(l)
    out, _ = routing.route(compute_votes(u, Tensor(w), cfg.pose_mode), cfg, _f64(ba), _f64(bm))
    out_p, _ = routing.route(compute_votes(u, Tensor(w[:, perm]), cfg.pose_mode), cfg, _f64(ba[perm]), _f64(bm[perm]))
    # exact up to the reordered sum over j in the normalisation
    np.testing.assert_allclose(out_p.data, out.data[:, perm], rtol=0, atol=1e-13)


@pytest.mark.parametrize("kind", ["dynamic", "em"])
def test_positionwise_independence(f64, rng, kind):
    votes = rng.standard_normal((6, 3, 2, 4))
    perm = rng.permutation(6)
    run = dynamic_route if kind == "dynamic" else em_route
    a, _ = run(_f64(votes))
    b, _ = run(_f64(votes[perm]))
    np.testing.assert_array_equal(b.data, a.data[perm])


@pytest.mark.parametrize("kind", ["dynamic", "em"])
def test_fused_matches_composed(f64, rng, kind):
    votes = rng.standard_normal((2, 3, 4, 4, 5))
    ba, bm = rng.standard_normal(4), rng.standard_normal(4)
    r = rng.standard_normal((2, 3, 4, 5))
    results = []
    for fused in (True, False):
        x, a, b = _f64(votes), _f64(ba), _f64(bm)
        for t in (x, a, b):
            t.requires_grad = True
        if kind == "dynamic":
            out, trace = dynamic_route(x, 3, fused=fused)
        else:
            out, trace = em_route(x, a, b, 3, EmHyper(lambda_schedule=(0.3, 0.6, 0.9)), fused=fused)
        (out * r).sum().backward()
        results.append((out.data, trace, x.grad, a.grad, b.grad))
    (o1, t1, g1, a1, b1), (o2, t2, g2, a2, b2) = results
    np.testing.assert_allclose(o1, o2, atol=1e-12)
    np.testing.assert_allclose(g1, g2, atol=1e-10)
    for c1, c2 in zip(t1.c, t2.c):
        np.testing.assert_allclose(c1, c2, atol=1e-12)
    if kind == "em":
        np.testing.assert_allclose(a1, a2, atol=1e-10)
        np.testing.assert_allclose(b1, b2, atol=1e-10)


@pytest.mark.skipif(len(kernels.available()) < 2, reason="compiled kernels not built")
@pytest.mark.parametrize("kind", ["dynamic", "em"])
def test_backends_agree(f64, rng, kind):
    votes = rng.standard_normal((5, 4, 3, 6))
    ba, bm = rng.standard_normal(3), rng.standard_normal(3)
    r = rng.standard_normal((5, 3, 6))
    outs = {}
    for name in kernels.available():
        x, a, b = _f64(votes), _f64(ba), _f64(bm)
        for t in (x, a, b):
            t.requires_grad = True
        if kind == "dynamic":
            out, _ = dynamic_route(x, 3, backend=name)
        else:
            out, _ = em_route(x, a, b, 3, EmHyper(lambda_schedule=(0.5, 1.0, 1.5)), backend=name)
        (out * r).sum().backward()
        outs[name] = (out.data, x.grad, a.grad, b.grad)
    ref = outs["python"]
    for name, got in outs.items():
        for x, y in zip(got, ref):
            if y is not None:
                np.testing.assert_allclose(x, y, atol=1e-12, rtol=1e-10)


def test_backend_selection():
    assert "python" in kernels.available()
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


@pytest.mark.parametrize("kind", ["dynamic", "em"])
@pytest.mark.parametrize("fused", [True, False])
def test_gradients_through_three_iterations(kind, fused):
    with T.precision(np.float64):
        rng = np.random.default_rng(11)
        votes = Tensor(rng.standard_normal((2, 3, 3, 4)) * 0.6)
        ba, bm = Tensor(rng.standard_normal(3)), Tensor(rng.standard_normal(3))
        r = rng.standard_normal((2, 3, 4))
        if kind == "dynamic":
            leaves = [("votes", votes)]

            def loss():
                return (dynamic_route(votes, 3, fused=fused)[0] * r).sum()
        else:
            leaves = [("votes", votes), ("beta_alpha", ba), ("beta_mu", bm)]

            def loss():
                return (em_route(votes, ba, bm, 3, EmHyper(lambda_schedule=(0.5, 1.0, 1.5)), fused=fused)[0] * r).sum()

        res = check(loss, leaves)
    assert max(b.max_rel for b in res) < 1e-4


def test_trace_records(f64, rng):
    _, trace = em_route(_f64(rng.standard_normal((2, 3, 3, 4, 4))), iterations=2)
    recs = list(trace.records())
    assert len(recs) == 2 * 3 * 2
    assert [(r["position"], r["iteration"]) for r in recs[:3]] == [(0, 0), (0, 1), (1, 0)]
    assert len(recs[0]["c"]) == 12 and len(recs[0]["v"]) == 16
    assert len(recs[0]["sigma2"]) == 16 and len(recs[0]["alpha"]) == 4
