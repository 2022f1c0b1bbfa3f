import math

import numpy as np
import pytest

import oracles
from vif.attender import Attender, DiagGaussian, kl_divergence, mean_sample, reparameterize
from vif.backbone import Backbone, BackboneConfig, ModalityLayout
from vif.errors import ContractError, DimensionError, NumericError
from vif.inject import default_plan, make_pair_module, run_injected
from vif.tensor import Tensor, grad_check, sum_


def gauss(mu, lv):
    return DiagGaussian(Tensor(np.asarray(mu, float)), Tensor(np.asarray(lv, float)))


def test_zero_inputs_zero_heads_give_standard_normal():
    att = Attender(8, n_components=2, latent_dim=3, n_heads=2, seed=0, zero_heads=True)
    g = att.encode_prior(Tensor(np.zeros((4, 8))), Tensor(np.zeros((2, 8))))
    assert np.array_equal(g.mu.data, np.zeros(6)) and np.array_equal(g.log_var.data, np.zeros(6))


def test_output_shapes(rng):
    att = Attender(8, n_components=4, latent_dim=3, n_heads=2, seed=1)
    V, Q, A = (Tensor(rng.normal(size=(n, 8))) for n in (9, 3, 1))
    for g in (att.encode_prior(V, Q), att.encode_posterior(V, Q, A)):
        assert g.mu.shape == (12,) and g.log_var.shape == (12,)
    gb = att.encode_prior(Tensor(rng.normal(size=(5, 9, 8))), Tensor(rng.normal(size=(5, 3, 8))))
    assert gb.mu.shape == (5, 12)


def test_branches_have_disjoint_parameters():
    att = Attender(8, 2, 3, 2, seed=0)
    pr, po = att.prior.named_params(), att.posterior.named_params()
    assert not set(pr) & set(po)
    assert not {id(t) for t in pr.values()} & {id(t) for t in po.values()}
    assert [k.split(".", 2)[2] for k in pr] == [k.split(".", 2)[2] for k in po]


def test_permuting_visual_tokens_leaves_output_unchanged(rng):
    att = Attender(8, 2, 3, 2, seed=2)
    V, Q = rng.normal(size=(9, 8)), rng.normal(size=(3, 8))
    perm = rng.permutation(9)
    a = att.encode_prior(Tensor(V), Tensor(Q))
    b = att.encode_prior(Tensor(V[perm]), Tensor(Q))
    assert np.allclose(a.mu.data, b.mu.data, atol=1e-13, rtol=0)
    assert np.allclose(a.log_var.data, b.log_var.data, atol=1e-13, rtol=0)


def test_empty_spans_are_rejected(rng):
    att = Attender(8, 2, 3, 2)
    V, Q = Tensor(rng.normal(size=(9, 8))), Tensor(rng.normal(size=(3, 8)))
    with pytest.raises(ContractError):
        att.encode_posterior(V, Q, Tensor(np.zeros((0, 8))))
    with pytest.raises(ContractError):
        att.encode_prior(V, Tensor(np.zeros((0, 8))))
    with pytest.raises(DimensionError):
        att.encode_prior(Tensor(rng.normal(size=(9, 6))), Q)


def test_posterior_with_tied_weights_and_no_answer_equals_prior(rng):
    att = Attender(8, 2, 3, 2, seed=3)
    for k, t in att.prior.params.items():
        att.posterior.params[k].data = t.data.copy()
    V, Q = Tensor(rng.normal(size=(9, 8))), Tensor(rng.normal(size=(3, 8)))
    a = att.encode_prior(V, Q)
    b = att.posterior.encode(V, Q)  # the posterior branch fed [Q] with a zero-length answer
    assert np.array_equal(a.mu.data, b.mu.data) and np.array_equal(a.log_var.data, b.log_var.data)


def test_prior_never_sees_the_answer(rng):
    cfg = BackboneConfig(vocab_size=12, n_layers=4, n_heads=2, d_model=8, max_seq=16, grid_h=3, grid_w=3)
    bb = Backbone(cfg, 0)
    plan = default_plan(4)
    mods = {p: make_pair_module(p, 8, n_components=2, latent_dim=3, n_heads=2, seed=1) for p in plan.pairs}
    lay = ModalityLayout.build(3, 3, 2, 1)
    t1 = rng.integers(0, 12, size=(2, lay.T))
    t2 = t1.copy()
    t2[:, -1] = (t2[:, -1] + 5) % 12
    r1 = run_injected(bb, t1, lay, plan, mods, z_source="posterior", rng=np.random.default_rng(0))
    r2 = run_injected(bb, t2, lay, plan, mods, z_source="posterior", rng=np.random.default_rng(0))
    for pair in plan.pairs:
        p1, p2 = r1.outcomes[pair].prior, r2.outcomes[pair].prior
        assert np.array_equal(p1.mu.data, p2.mu.data) and np.array_equal(p1.log_var.data, p2.log_var.data)
        assert not np.array_equal(r1.outcomes[pair].posterior.mu.data, r2.outcomes[pair].posterior.mu.data)


# -- reparameterization -----------------------------------------------------

def test_reparameterize_identity_and_determinism(rng):
    g = gauss(rng.normal(size=6), rng.normal(size=6))
    s1, s2 = reparameterize(g, seed=11), reparameterize(g, seed=11)
    assert np.array_equal(s1.epsilon, s2.epsilon)
    assert np.array_equal(s1.z.data, g.mu.data + np.exp(g.log_var.data / 2) * s1.epsilon)
    assert np.array_equal(mean_sample(g).z.data, g.mu.data)


def test_reparameterize_collapsed_variance():
    g = gauss([0.3, -2.0], [-30.0, -30.0])
    s = reparameterize(g, seed=0)
    assert np.abs(s.z.data - g.mu.data).max() < 1e-6


def test_reparameterize_moments():
    s = reparameterize(gauss(np.zeros(100_000), np.zeros(100_000)), seed=5)
    assert abs(s.z.data.mean()) < 0.02
    assert abs(s.z.data.var() - 1.0) < 0.05


def test_reparameterize_gradient():
    eps_seed = 4

    def f(p):
        z = reparameterize(DiagGaussian(p[0], p[1]), seed=eps_seed).z
        return sum_(z * z * Tensor(np.arange(1.0, 6.0)))

    rng = np.random.default_rng(0)
    assert grad_check(f, [rng.normal(size=5), rng.normal(size=5)]) < 1e-4


# -- KL ---------------------------------------------------------------------

def test_kl_identity_is_exactly_zero(rng):
    mu, lv = rng.normal(size=7), rng.normal(size=7)
    assert kl_divergence(gauss(mu, lv), gauss(mu, lv)).item() == 0.0


def test_kl_hand_value():
    assert kl_divergence(gauss([1.0], [0.0]), gauss([0.0], [0.0])).item() == 0.5


def test_kl_matches_scalar_oracle(rng):
    for _ in range(20):
        a = [rng.normal(size=5) for _ in range(4)]
        got = kl_divergence(gauss(a[0], a[1]), gauss(a[2], a[3])).item()
        assert math.isclose(got, oracles.kl_diag(*a), rel_tol=1e-12, abs_tol=1e-14)


def test_kl_batch_average(rng):
    mq, lq, mp, lp = (rng.normal(size=(3, 4)) for _ in range(4))
    got = kl_divergence(gauss(mq, lq), gauss(mp, lp)).item()
    want = np.mean([oracles.kl_diag(mq[i], lq[i], mp[i], lp[i]) for i in range(3)])
    assert math.isclose(got, want, rel_tol=1e-12)


def test_kl_nonnegative_on_many_pairs():
    rng = np.random.default_rng(0)
    mq, lq, mp, lp = (rng.normal(0, 2, size=(10_000, 3)) for _ in range(4))
    kl = 0.5 * ((lp - lq) + (np.exp(lq) + (mq - mp) ** 2) / np.exp(lp) - 1).sum(-1)
    # the batched op averages; check per pair through single-item calls on a subsample and the vector bound
    assert (kl >= 0).all()
    for i in range(0, 10_000, 97):
        assert kl_divergence(gauss(mq[i], lq[i]), gauss(mp[i], lp[i])).item() >= 0.0


def test_kl_errors():
    with pytest.raises(DimensionError):
        kl_divergence(gauss([0.0], [0.0]), gauss([0.0, 1.0], [0.0, 0.0]))
    with pytest.raises(NumericError):
        kl_divergence(gauss([np.nan], [0.0]), gauss([0.0], [0.0]))


def test_kl_gradient(rng):
    pts = [rng.normal(size=4) for _ in range(4)]
    f = lambda p: kl_divergence(DiagGaussian(p[0], p[1]), DiagGaussian(p[2], p[3]))
    assert grad_check(f, pts) < 1e-4
