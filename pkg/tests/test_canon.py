import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from canonkit import tensor as T
from canonkit.canon import (
    CanonConfig,
    add_reference_parameter,
    apply_canonicalized,
    canonicalize,
    canonicalize_batch,
    delta_prior,
    direct_canonicalize,
    energies,
    energy_condition_check,
    gumbel_select,
    orbit_embeddings,
    orbit_separation_loss,
    pairwise_similarity,
    prior_loss_delta,
    prior_loss_kl,
    select,
    st_select,
    top2_gap,
)
from canonkit.errors import ConfigError, DimensionError
from canonkit.nets import backbone_spec, gcnn_spec, init_params, predictor_forward, predictor_spec
from canonkit.symmetry import IDENTITY, act_image, act_output, compose, make_group, orbit
from canonkit.tensor import Tensor
from oracles import energies_oracle, kl_oracle

C4, D4, C1 = make_group("c4"), make_group("d4"), make_group("c1")
SPEC = backbone_spec(widths=(4, 6), embed_dim=8, image_size=6)
CFG = CanonConfig(embed_dim=8, vref_seed=3)


def params(seed=0, spec=SPEC, bias=0.05):
    p = init_params(spec, seed)
    for k in p:
        if k.endswith("bias"):
            p[k].data = p[k].data + bias
    return p


# ---------------------------------------------------------------- energies


def test_energies_constant_image_bitwise_equal():
    e = energies(params(), SPEC, np.full((1, 6, 6), 0.4), D4, CFG).data
    assert len(set(e.tolist())) == 1


def test_energies_c1():
    res = canonicalize(params(), SPEC, np.random.default_rng(0).random((1, 6, 6)), C1, CFG)
    assert res.energies.shape == (1,) and res.probs.tolist() == [1.0]
    assert res.selected == IDENTITY


@pytest.mark.parametrize("group", [C4, D4], ids=lambda g: g.name)
def test_energies_match_scalar_oracle(group, rng):
    spec = backbone_spec(widths=(3,), embed_dim=5, image_size=4)
    cfg = CanonConfig(embed_dim=5, tau=0.7, vref_seed=11)
    p = params(1, spec)
    x = rng.random((1, 4, 4))
    raw = {k: v.data for k, v in p.items()}
    expect = energies_oracle(raw, cfg.reference_vector(), x, [(g.r, g.f) for g in group], cfg.tau)
    np.testing.assert_allclose(energies(p, spec, x, group, cfg).data, expect, atol=1e-10)


def test_energies_unnormalized_option(rng):
    cfg = CanonConfig(embed_dim=8, vref_seed=3, normalize_embeddings=False)
    p = params()
    x = rng.random((1, 6, 6))
    _, emb, e = orbit_embeddings(p, SPEC, x, C4, cfg)
    np.testing.assert_allclose(e.data[0], emb.data[0] @ cfg.reference_vector(), atol=1e-13)


def test_reference_dimension_mismatch(rng):
    with pytest.raises(DimensionError):
        energies(params(), SPEC, rng.random((1, 6, 6)), C4, CanonConfig(embed_dim=5))
    with pytest.raises(DimensionError):
        CanonConfig(embed_dim=3, v_R=[1.0, 2.0])


@pytest.mark.parametrize("kw", [{"tau": 0}, {"gumbel_temp": -1}, {"v_R_mode": "x"}, {"st_mode": "soft"},
                                {"lambda_opt": -1}, {"selection": "argmin"}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        CanonConfig(**kw)


def test_learned_reference_is_a_parameter(rng):
    cfg = CanonConfig(embed_dim=8, v_R_mode="learned")
    p = add_reference_parameter(params(), cfg)
    assert "v_R" in p
    prior_loss_delta(p, SPEC, rng.random((2, 1, 6, 6)), C4, cfg).backward()
    assert p["v_R"].grad is not None and np.abs(p["v_R"].grad).sum() > 0


# ---------------------------------------------------------------- selection


def test_select_unique_max_and_ties():
    assert select(T.softmax(Tensor([5.0, 1, 1, 1])).data) == 0
    assert select(np.full(4, 0.25)) == 0
    assert select(np.array([0.1, 0.4, 0.4, 0.1])) == 1


def test_canonicalize_constant_image_selects_identity():
    x = np.full((1, 6, 6), 0.2)
    res = canonicalize(params(), SPEC, x, D4, CFG)
    assert res.selected == IDENTITY and res.canonical.tobytes() == x.tobytes()


@pytest.mark.parametrize("group", [C4, D4], ids=lambda g: g.name)
def test_canonical_is_orbit_entry_and_probs_normalized(group, rng):
    x = rng.random((1, 6, 6))
    res = canonicalize(params(), SPEC, x, group, CFG)
    assert abs(res.probs.sum() - 1) <= 1e-12
    assert res.canonical.tobytes() == orbit(x, group)[res.selected_index].tobytes()
    assert res.selected_index == int(np.argmax(res.energies))


@given(st.integers(0, 2**32 - 1), st.sampled_from([C4, D4]))
def test_canonicalization_equivariance(seed, group):
    r = np.random.default_rng(seed)
    p = params(int(r.integers(100)))
    x = r.random((1, 6, 6))
    base = canonicalize(p, SPEC, x, group, CFG)
    if np.sum(base.energies == base.energies.max()) > 1:
        return
    for g1 in group:
        moved = canonicalize(p, SPEC, act_image(g1, x), group, CFG)
        assert moved.canonical.tobytes() == base.canonical.tobytes()
        assert moved.selected == compose(g1, base.selected)


def test_batch_matches_single(rng):
    p = params()
    x = rng.random((4, 1, 6, 6))
    bc = canonicalize_batch(p, SPEC, x, D4, CFG)
    for n in range(4):
        single = canonicalize(p, SPEC, x[n], D4, CFG)
        assert single.selected_index == bc.selected[n]
        assert single.canonical.tobytes() == bc.canonical[n].tobytes()


# ---------------------------------------------------------------- canonicalized prediction


def _closure(p, group):
    return lambda x: canonicalize(p, SPEC, x, group, CFG)


def test_apply_invariant_and_c1(rng):
    pspec = predictor_spec(widths=(3,), image_size=6)
    pp = init_params(pspec, 2)
    p = params()
    x = rng.random((1, 6, 6))
    res = canonicalize(p, SPEC, x, D4, CFG)
    out = apply_canonicalized(pp, pspec, _closure(p, D4), x, "invariant")
    assert out.tobytes() == predictor_forward(pp, pspec, res.canonical).data.tobytes()
    out1 = apply_canonicalized(pp, pspec, _closure(p, C1), x, "invariant")
    assert out1.tobytes() == predictor_forward(pp, pspec, x).data.tobytes()


def test_apply_dense_equivariance(rng):
    pspec = predictor_spec(widths=(3,), head="dense", out_channels=2, image_size=6)
    pp = init_params(pspec, 4)
    p = params(5)
    checked = 0
    for _ in range(5):
        x = rng.random((1, 6, 6))
        e = canonicalize(p, SPEC, x, D4, CFG).energies
        if np.sum(e == e.max()) > 1:
            continue
        fx = apply_canonicalized(pp, pspec, _closure(p, D4), x, "dense")
        for g in D4:
            fgx = apply_canonicalized(pp, pspec, _closure(p, D4), act_image(g, x), "dense")
            assert fgx.tobytes() == act_output(g, fx, "dense").tobytes()
        checked += 1
    assert checked >= 4


# ---------------------------------------------------------------- straight-through


def test_st_forward_bitwise(rng):
    orbits = [rng.standard_normal((1, 3, 3)) for _ in range(4)]
    probs = T.softmax(Tensor(rng.standard_normal(4)))
    out = st_select(probs, orbits, 2)
    assert out.data.tobytes() == orbits[2].tobytes()


def _grad_wrt_logits(z0, build):
    z = Tensor(z0, requires_grad=True)
    build(z).backward()
    return z.grad


def test_st_gradient_equals_soft_mixture_gradient(rng):
    orbits = [rng.standard_normal((1, 3, 3)) for _ in range(4)]
    w = rng.standard_normal((1, 3, 3))
    z0 = rng.standard_normal(4)

    def hard(z):
        return T.sum(T.mul(st_select(T.softmax(z), orbits, 1), Tensor(w)))

    def soft(z):
        p = T.softmax(z)
        terms = [T.scale(T.take(p, i), float(np.sum(orbits[i] * w))) for i in range(4)]
        total = terms[0]
        for t in terms[1:]:
            total = T.add(total, t)
        return total

    np.testing.assert_allclose(_grad_wrt_logits(z0, hard), _grad_wrt_logits(z0, soft), atol=1e-14)


def test_st_one_hot_coincides_with_mixture(rng):
    orbits = np.stack([rng.standard_normal((2, 2)) for _ in range(3)])
    probs = Tensor(np.array([0.0, 1.0, 0.0]), requires_grad=True)
    out = st_select(probs, list(orbits), 1)
    mixture = np.tensordot(probs.data, orbits, axes=1)
    assert out.data.tobytes() == mixture.tobytes()


def test_st_uniform_identical_entries_uniform_gradient():
    entry = np.arange(4.0).reshape(1, 2, 2)
    probs = Tensor(np.full(4, 0.25), requires_grad=True)
    T.sum(T.mul(st_select(probs, [entry] * 4, 0), Tensor(entry))).backward()
    assert len(set(probs.grad.tolist())) == 1


def test_st_batched_gradient_to_orbits(rng):
    probs = Tensor(T.softmax(Tensor(rng.standard_normal((2, 3)))).data, requires_grad=True)
    orbits = Tensor(rng.standard_normal((2, 3, 1, 2, 2)), requires_grad=True)
    g = rng.standard_normal((2, 1, 2, 2))
    T.sum(T.mul(st_select(probs, orbits, np.array([0, 2])), Tensor(g))).backward()
    np.testing.assert_allclose(orbits.grad, probs.data[:, :, None, None, None] * g[:, None], atol=1e-15)
    np.testing.assert_allclose(probs.grad, np.einsum("ngchw,nchw->ng", orbits.data, g), atol=1e-14)


def test_st_shape_mismatch(rng):
    with pytest.raises(DimensionError):
        st_select(T.softmax(Tensor(np.zeros(3))), [np.zeros((1, 2, 2))] * 4, 0)


# ---------------------------------------------------------------- Gumbel


def test_gumbel_one_hot_always_selects(rng):
    orbits = [np.full((1, 2, 2), float(i)) for i in range(4)]
    probs = Tensor(np.array([0.0, 0.0, 1.0, 0.0]))
    for _ in range(50):
        out, idx = gumbel_select(probs, orbits, 1.0, rng)
        assert idx == 2 and out.data.tobytes() == orbits[2].tobytes()


def test_gumbel_uniform_frequencies_within_3_sigma():
    rng = np.random.default_rng(99)
    n, k = 10_000, 4
    probs = Tensor(np.full((n, k), 1.0 / k))
    orbits = np.zeros((n, k, 1, 1, 1))
    _, idx = gumbel_select(probs, orbits, 1.0, rng)
    counts = np.bincount(idx, minlength=k)
    sigma = math.sqrt(n * (1 / k) * (1 - 1 / k))
    assert np.all(np.abs(counts - n / k) < 3 * sigma)


def test_gumbel_small_temperature_recovers_argmax(rng):
    orbits = [rng.standard_normal((1, 2, 2)) for _ in range(4)]
    probs = T.softmax(Tensor(rng.standard_normal(4)))
    seed = 5
    noise = np.random.default_rng(seed).uniform(np.finfo(np.float64).tiny, 1.0, size=4)
    perturbed = np.log(probs.data) - np.log(-np.log(noise))
    out, idx = gumbel_select(probs, orbits, 1e-6, np.random.default_rng(seed))
    assert idx == int(np.argmax(perturbed))
    weights = T.softmax(Tensor(perturbed), 1e-6).data
    np.testing.assert_allclose(weights, np.eye(4)[idx], atol=1e-12)


def test_gumbel_bad_temperature(rng):
    with pytest.raises(ConfigError):
        gumbel_select(Tensor(np.full(2, 0.5)), [np.zeros((1, 1))] * 2, 0.0, rng)


# ---------------------------------------------------------------- losses


def test_separation_single_element_group(rng):
    assert orbit_separation_loss(params(), SPEC, rng.random((2, 1, 6, 6)), C1, CFG).item() == 0.0


def test_pairwise_similarity_analytic():
    assert pairwise_similarity(T.l2_normalize(Tensor([[[1.0, 0.0], [0.0, 1.0]]]))).item() == 0.0
    v = pairwise_similarity(T.l2_normalize(Tensor([[[0.6, 0.8], [0.8, 0.6]]]))).item()
    assert v == pytest.approx(0.96, abs=1e-15)


def test_pairwise_similarity_mean_over_pairs_and_batch(rng):
    e = rng.standard_normal((3, 4, 5))
    expect = np.mean([[e[n, i] @ e[n, j] for i, j in itertools.combinations(range(4), 2)] for n in range(3)])
    assert pairwise_similarity(Tensor(e)).item() == pytest.approx(expect, abs=1e-13)


@given(st.integers(0, 2**32 - 1))
def test_separation_bounded(seed):
    r = np.random.default_rng(seed)
    v = orbit_separation_loss(params(int(r.integers(50))), SPEC, r.random((2, 1, 6, 6)), D4, CFG).item()
    assert -1.0 <= v <= 1.0


def test_prior_delta_values():
    assert delta_prior(Tensor(np.full(4, 0.25))).item() == pytest.approx(1.386294, abs=1e-6)
    assert delta_prior(Tensor([1.0, 0.0, 0.0, 0.0])).item() == 0.0
    assert delta_prior(Tensor([0.4, 0.2, 0.2, 0.2])).item() == pytest.approx(0.916291, abs=1e-6)


def test_prior_kl_values():
    q = np.array([0.4, 0.2, 0.2, 0.2])
    assert prior_loss_kl(q, Tensor(q)).item() == pytest.approx(0.0, abs=1e-15)
    got = prior_loss_kl(np.full(4, 0.25), Tensor(q)).item()
    assert got == pytest.approx(kl_oracle([0.25] * 4, q), abs=1e-14)
    assert got == pytest.approx(0.049856, abs=1e-6)


@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=8))
def test_prior_kl_delta_equals_delta_prior(w):
    q = np.asarray(w) / np.sum(w)
    delta = np.eye(len(q))[0]
    assert abs(prior_loss_kl(delta, Tensor(q)).item() - delta_prior(Tensor(q)).item()) <= 1e-12


def test_prior_kl_validation():
    with pytest.raises(ConfigError):
        prior_loss_kl(np.array([0.5, 0.6]), Tensor(np.array([0.5, 0.5])))
    with pytest.raises(DimensionError):
        prior_loss_kl(np.array([0.5, 0.5]), Tensor(np.full(3, 1 / 3)))


def test_prior_loss_delta_through_backbone(rng):
    x = rng.random((3, 1, 6, 6))
    p = params()
    bc = canonicalize_batch(p, SPEC, x, C4, CFG)
    expect = -np.mean(np.log(bc.probs.data[:, 0]))
    assert prior_loss_delta(p, SPEC, x, C4, CFG).item() == pytest.approx(expect, abs=1e-14)


# ---------------------------------------------------------------- direct approach


GSPEC = gcnn_spec("c4", widths=(3, 4), image_size=6)


def test_direct_constant_selects_identity():
    x = np.full((1, 6, 6), 0.5)
    res = direct_canonicalize(init_params(GSPEC, 0), GSPEC, x, C4)
    assert res.selected == IDENTITY and res.embeddings.size == 0


def test_direct_rejects_c1():
    with pytest.raises(ConfigError):
        direct_canonicalize(init_params(GSPEC, 0), GSPEC, np.zeros((1, 6, 6)), C1)


@pytest.mark.parametrize("name", ["c4", "d4"])
def test_direct_selection_equivariance(name, rng):
    group = make_group(name)
    spec = gcnn_spec(name, widths=(3, 4), image_size=6)
    p = init_params(spec, 1)
    checked = 0
    for _ in range(6):
        x = rng.random((1, 6, 6))
        base = direct_canonicalize(p, spec, x, group)
        top = np.sort(base.energies)
        if top[-1] - top[-2] <= 1e-3:
            continue
        for g1 in group:
            moved = direct_canonicalize(p, spec, act_image(g1, x), group)
            assert moved.selected == compose(g1, base.selected)
            assert moved.canonical.tobytes() == base.canonical.tobytes()
        checked += 1
    assert checked >= 3


# ---------------------------------------------------------------- energy condition


def test_energy_condition_exact_all_pairs(rng):
    p = params(2)
    for _ in range(3):
        x = rng.random((1, 6, 6))
        for g, g1 in itertools.product(D4, D4):
            assert energy_condition_check(p, SPEC, x, g, g1, D4, CFG) == 0.0


def test_energy_condition_trivial_cases(rng):
    p = params()
    x = rng.random((1, 6, 6))
    assert energy_condition_check(p, SPEC, x, D4[3], IDENTITY, D4, CFG) == 0.0
    assert energy_condition_check(p, SPEC, np.ones((1, 6, 6)), D4[5], D4[2], D4, CFG) == 0.0
    with pytest.raises(ConfigError):
        energy_condition_check(p, SPEC, x, D4[5], IDENTITY, C4, CFG)


@given(st.integers(0, 2**32 - 1))
def test_argmax_probs_equals_argmax_energies(seed):
    r = np.random.default_rng(seed)
    bc = canonicalize_batch(params(int(r.integers(20))), SPEC, r.random((3, 1, 6, 6)), D4,
                            CanonConfig(embed_dim=8, tau=float(r.uniform(0.05, 5))))
    np.testing.assert_array_equal(bc.selected, np.argmax(bc.energies.data, axis=-1))


def test_top2_gap():
    np.testing.assert_allclose(top2_gap(np.array([[1.0, 3.0, 2.5], [0.0, 0.0, -1.0]])), [0.5, 0.0])
