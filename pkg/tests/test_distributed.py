import numpy as np
import pytest

import cfmcast.distributed as dist
from cfmcast.centralized import alternating_optimize, summse_precoders
from cfmcast.distributed import (best_response_target, damped_update, exact_local_precoder,
                                 local_precoder_br, local_precoder_gs, local_precoder_mmse,
                                 project_power, run_bidirectional)
from cfmcast.scenario import ConfigurationError, Grouping, random_feasible_precoders
from cfmcast.training import (PilotLengthError, dl_effective, make_pilot_book, ul_echo,
                              ul_group_specific, ul_ue_specific)

from conftest import crandn, relerr, small_instance

RHO_UE, RHO_BS = 1.0, 0.5


def _snapshots(h, grouping, v, w, book, mu=None, noise=0.0, rng=None, group=False):
    """Noise-controlled UL-1 (or UL-2), DL and UL-3 blocks for one iteration."""
    rng = rng or np.random.default_rng(0)
    mu = np.ones(h.shape[1]) if mu is None else mu
    if group:
        ul, _ = ul_group_specific(h, v, grouping, book, RHO_UE, noise, rng)
    else:
        ul, _ = ul_ue_specific(h, v, book, RHO_UE, noise, rng)
    y_dl = dl_effective(h, w, grouping, book, RHO_BS, noise, rng)[0].received
    ul3 = ul_echo(h, v, y_dl, mu, RHO_UE, noise, rng)
    return ul, ul3


def _feasible(rng, B, G, M):
    return random_feasible_precoders(B, G, M, RHO_BS, rng) * 0.8


# --- perfect-CSI references -------------------------------------------------------

def test_exact_local_single_bs_is_summse(rng):
    h, grouping, v, _ = small_instance(rng, B=1, M=4)
    w, lam = summse_precoders(h, v, grouping, np.ones(4), 1e-3)
    got = exact_local_precoder(h, v, grouping, np.ones(4), lam[0], np.zeros_like(w), 0)
    assert relerr(got, w[0]) <= 1e-8


def test_exact_local_zero_others(rng):
    h, grouping, v, w = small_instance(rng)
    w[1] = 0.0
    a = exact_local_precoder(h, v, grouping, np.ones(4), 0.3, w, 0)
    b = exact_local_precoder(h[:1], v, grouping, np.ones(4), 0.3, w[:1], 0)
    assert relerr(a, b) <= 1e-12


def test_exact_local_fixed_point_is_centralized(rng):
    for _ in range(10):
        h, grouping, v, _ = small_instance(rng, B=3)
        mu = rng.uniform(0.5, 2, 4)
        w, lam = summse_precoders(h, v, grouping, mu, 0.05)
        for b in range(3):
            got = exact_local_precoder(h, v, grouping, mu, lam[b], w, b)
            assert np.linalg.norm(got - w[b]) <= 1e-8 * np.linalg.norm(w)


def test_target_vanishes_at_centralized_optimum(rng):
    h, grouping, v, _ = small_instance(rng, B=3)
    w, lam = summse_precoders(h, v, grouping, np.ones(4), 0.05)
    for b in range(3):
        step = best_response_target(h, v, grouping, np.ones(4), lam[b], w, b)
        assert np.linalg.norm(step) <= 1e-6 * np.linalg.norm(w[b])
        np.testing.assert_allclose(damped_update(w[b], step, 0.5), w[b], atol=1e-6 * np.abs(w).max())


def test_target_is_increment_to_exact(rng):
    h, grouping, v, w = small_instance(rng, B=1)
    step = best_response_target(h, v, grouping, np.ones(4), 0.2, w, 0)
    exact = exact_local_precoder(h, v, grouping, np.ones(4), 0.2, w, 0)
    assert relerr(damped_update(w[0], step, 1.0), exact) <= 1e-10


def test_target_zero_previous(rng):
    h, grouping, v, w = small_instance(rng)
    zero = np.zeros_like(w)
    a = best_response_target(h, v, grouping, np.ones(4), 0.2, zero, 1)
    b = exact_local_precoder(h, v, grouping, np.ones(4), 0.2, zero, 1)
    assert relerr(a, b) <= 1e-12


def test_damped_update_examples():
    np.testing.assert_array_equal(damped_update([1.0, 0.0], [0.0, 2.0], 0.5), [1.0, 1.0])
    np.testing.assert_array_equal(damped_update([1.0, 2.0], [3.0, 4.0], 1.0), [4.0, 6.0])
    np.testing.assert_array_equal(damped_update([1.0, 2.0], [0.0, 0.0], 0.3), [1.0, 2.0])
    for alpha in (0.0, -0.1, 1.01):
        with pytest.raises(ConfigurationError):
            damped_update([1.0], [1.0], alpha)


def test_project_power(rng):
    w = crandn(rng, 3, 2, 4)
    out = project_power(w, 1.0)
    power = np.sum(np.abs(out) ** 2, axis=(1, 2))
    assert np.all(power <= 1.0 + 1e-12)
    keep = np.sum(np.abs(w) ** 2, axis=(1, 2)) <= 1.0
    np.testing.assert_array_equal(out[keep], w[keep])


# --- estimated local precoders ------------------------------------------------------

def test_br_matches_target_noiseless(rng):
    book = make_pilot_book(16, 4, 2, 2, required=("ul1+ul3",))
    for _ in range(20):
        h, grouping, v, _ = small_instance(rng)
        w = _feasible(rng, 2, 2, 2)
        mu = rng.uniform(0.5, 2.0, 4)
        ul1, ul3 = _snapshots(h, grouping, v, w, book, mu)
        for b in range(2):
            lam = float(rng.uniform(0.01, 1.0))
            got, _, _ = local_precoder_br(ul1.received[b], ul3.received[b], ul1.beta, ul3.beta,
                                          lam, 0.0, book, grouping, mu, w[b])
            want = best_response_target(h, v, grouping, mu, lam, w, b)
            assert relerr(got, want) <= 1e-8


def test_unit_weights_drop_out(rng, monkeypatch):
    book = make_pilot_book(16, 4, 2, 2, required=())
    np.testing.assert_array_equal(book.weight_matrix(np.ones(4)), np.eye(16))
    h, grouping, v, _ = small_instance(rng)
    w = _feasible(rng, 2, 2, 2)
    ul1, ul3 = _snapshots(h, grouping, v, w, book, noise=1e-3)
    args = (ul1.received[0], ul3.received[0], ul1.beta, ul3.beta, 0.1, 1e-3, book, grouping,
            np.ones(4), w[0])
    with_d = local_precoder_br(*args)[0]
    monkeypatch.setattr(type(book), "weight_matrix", lambda self, mu: None)
    assert relerr(local_precoder_br(*args)[0], with_d) <= 1e-12


def test_gs_equals_br_for_singleton_groups(rng):
    book = make_pilot_book(16, 4, 4, 2, required=("ul2+ul3", "ul1+ul3"))
    h, _, v, _ = small_instance(rng, G=4)
    grouping = Grouping.from_labels(np.arange(4))
    w = _feasible(rng, 2, 4, 2)
    ul1, ul3 = _snapshots(h, grouping, v, w, book, noise=1e-3, rng=np.random.default_rng(1))
    ul2, _ = _snapshots(h, grouping, v, w, book, noise=1e-3, rng=np.random.default_rng(1),
                        group=True)
    np.testing.assert_allclose(ul2.received, ul1.received, rtol=0, atol=1e-15)
    for b in range(2):
        a = local_precoder_br(ul1.received[b], ul3.received[b], ul1.beta, ul3.beta, 0.2, 1e-3,
                              book, grouping, np.ones(4), w[b])[0]
        c = local_precoder_gs(ul2.received[b], ul3.received[b], ul2.beta, ul3.beta, 0.2, 1e-3,
                              book, w[b])[0]
        assert relerr(c, a) <= 1e-12
        want = best_response_target(h, v, grouping, np.ones(4), 0.2, w, b)
        ul1n, ul3n = _snapshots(h, grouping, v, w, book)
        ul2n, _ = _snapshots(h, grouping, v, w, book, group=True)
        gs = local_precoder_gs(ul2n.received[b], ul3n.received[b], ul2n.beta, ul3n.beta, 0.2,
                               0.0, book, w[b])[0]
        assert relerr(gs, want) <= 1e-8


def test_noise_bias_correction():
    rng = np.random.default_rng(6)
    M, tau, noise, trials = 3, 16, 2e-3, 10_000
    acc = np.zeros((M, M), dtype=complex)
    for _ in range(trials):
        y = np.sqrt(noise / 2) * (rng.standard_normal((M, tau)) + 1j * rng.standard_normal((M, tau)))
        acc += y @ y.conj().T
    mean = acc / trials
    assert abs(np.real(np.trace(mean)) / (M * tau * noise) - 1) < 0.03
    corrected = dist._training_gram(np.zeros((M, tau)), tau, noise) + mean
    assert np.linalg.norm(corrected) < 0.03 * tau * noise * np.sqrt(M)


def test_gs_minimum_pilot_budget():
    rng = np.random.default_rng(0)
    K, G, B, M, N = 32, 8, 4, 2, 2
    h = crandn(rng, B, K, M, N)
    grouping = Grouping.from_labels(np.arange(K) % G)
    book = make_pilot_book(2 * G, K, G, N, required=("ul2+ul3",))
    _, trace = run_bidirectional(h, grouping, "group_specific", pilots=book, rho_bs=RHO_BS,
                                 rho_ue=RHO_UE, noise_bs=1e-3, noise_ue=1e-3, num_iterations=2,
                                 init_combiners=crandn(rng, K, N),
                                 init_precoders=_feasible(rng, B, G, M))
    assert len(trace.records) == 2
    with pytest.raises(PilotLengthError):
        run_bidirectional(h, grouping, "best_response", pilots=book, rho_bs=RHO_BS,
                          rho_ue=RHO_UE, noise_bs=1e-3, noise_ue=1e-3, num_iterations=1,
                          init_combiners=crandn(rng, K, N), init_precoders=_feasible(rng, B, G, M))


def test_mmse_single_bs_matches_centralized(rng):
    book = make_pilot_book(16, 4, 2, 2, required=())
    for _ in range(10):
        h, grouping, v, _ = small_instance(rng, B=1, M=3)
        ul1, _ = ul_ue_specific(h, v, book, RHO_UE, 0.0, rng)
        w, _, _ = local_precoder_mmse(ul1.received[0], ul1.beta, None, 0.0, book, grouping,
                                     np.ones(4), rho_bs=1e-2)
        ref, _ = summse_precoders(h, v, grouping, np.ones(4), 1e-2)
        assert relerr(w, ref[0]) <= 1e-6


def test_mmse_stateless_and_zero_signal(rng):
    book = make_pilot_book(16, 4, 2, 2, required=())
    h, grouping, v, _ = small_instance(rng)
    ul1, _ = ul_ue_specific(h, v, book, RHO_UE, 1e-3, rng)
    a = local_precoder_mmse(ul1.received[0], ul1.beta, None, 1e-3, book, grouping, np.ones(4),
                            rho_bs=RHO_BS)
    b = local_precoder_mmse(ul1.received[0], ul1.beta, None, 1e-3, book, grouping, np.ones(4),
                            rho_bs=RHO_BS)
    np.testing.assert_array_equal(a[0], b[0])
    zero, _, _ = local_precoder_mmse(np.zeros((2, 16)), ul1.beta, None, 0.0, book, grouping,
                                     np.ones(4), rho_bs=RHO_BS)
    assert not np.any(zero)


def test_non_psd_gram_flagged(rng):
    book = make_pilot_book(16, 4, 2, 2, required=())
    h, grouping, v, _ = small_instance(rng, scale=1e-8)
    ul1, _ = ul_ue_specific(h, v, book, RHO_UE, 1.0, rng)
    *_, flagged = local_precoder_mmse(ul1.received[0], ul1.beta, None, 1.0, book, grouping,
                                      np.ones(4), rho_bs=RHO_BS)
    assert flagged


# --- the iterative scheme -----------------------------------------------------------

def _run(h, grouping, variant, book, v0, w0, **kw):
    args = dict(pilots=book, rho_bs=RHO_BS, rho_ue=RHO_UE, noise_bs=1e-3, noise_ue=1e-3,
                num_iterations=5, init_combiners=v0, init_precoders=w0)
    args.update(kw)
    return run_bidirectional(h, grouping, variant, **args)


def test_single_bs_noiseless_matches_centralized():
    for trial in range(5):
        rng = np.random.default_rng(trial)
        h = crandn(rng, 1, 4, 2, 1)
        grouping = Grouping.from_labels(np.arange(4) % 2)
        v0 = crandn(rng, 4, 1)
        v0 /= np.abs(v0)
        w0 = random_feasible_precoders(1, 2, 2, 0.1, rng)
        book = make_pilot_book(6, 4, 2, 1, required=("ul1+ul3",))
        _, tr = _run(h, grouping, "best_response", book, v0, w0, rho_bs=0.1, noise_bs=0.0,
                     noise_ue=0.0, num_iterations=50, alpha=1.0)
        _, tc = alternating_optimize(h, grouping, "sum_mse", rho_bs=0.1, noise_ue=0.0,
                                     num_iterations=50, init_combiners=v0)
        assert abs(tr.column("sum_mse")[-1] - tc.column("sum_mse")[-1]) <= 1e-6


def test_local_mmse_never_echoes(rng, monkeypatch):
    def forbidden(*a, **k):
        raise AssertionError("UL-3 used by local_mmse")

    monkeypatch.setattr(dist, "ul_echo", forbidden)
    h, grouping, v, _ = small_instance(rng)
    book = make_pilot_book(16, 4, 2, 2, required=())
    _, trace = _run(h, grouping, "local_mmse", book, v, _feasible(rng, 2, 2, 2))
    assert len(trace.records) == 5


@pytest.mark.parametrize("variant,fn", [("best_response", "local_precoder_br"),
                                        ("group_specific", "local_precoder_gs"),
                                        ("local_mmse", "local_precoder_mmse")])
def test_no_backhaul_interface(rng, monkeypatch, variant, fn):
    """Per-BS updates only see that BS's own blocks and previous precoders."""
    B, M, G, tau = 3, 2, 2, 16
    real = getattr(dist, fn)
    seen = []

    def spy(*args, **kw):
        arrays = [a for a in args if isinstance(a, np.ndarray)]
        for a in arrays:
            assert a.shape[0] != B or a.ndim < 3, "multi-BS array passed to a local update"
        seen.append([a.shape for a in arrays])
        return real(*args, **kw)

    monkeypatch.setattr(dist, fn, spy)
    h, grouping, v, _ = small_instance(rng, B=B, M=M)
    book = make_pilot_book(tau, 4, G, 2, required=())
    _run(h, grouping, variant, book, v, _feasible(rng, B, G, M), num_iterations=2)
    assert len(seen) == 2 * B
    assert all((M, tau) in shapes for shapes in seen)


@pytest.mark.parametrize("variant", dist.VARIANTS)
def test_power_feasible_every_iteration(rng, variant):
    h, grouping, v, _ = small_instance(rng, B=4)
    book = make_pilot_book(16, 4, 2, 2, required=())
    powers = []
    _run(h, grouping, variant, book, v, _feasible(rng, 4, 2, 2), num_iterations=10,
         on_iteration=lambda s: powers.append(np.sum(np.abs(s.precoders) ** 2, axis=(1, 2))))
    assert len(powers) == 10
    assert np.all(np.array(powers) <= RHO_BS * (1 + 1e-9))


def test_fixed_point_consistency(rng):
    """At the centralized optimum with exact estimates the update barely moves."""
    h, grouping, v, _ = small_instance(rng, B=3)
    book = make_pilot_book(16, 4, 2, 2, required=())
    w, lam = summse_precoders(h, v, grouping, np.ones(4), 0.05)
    ul1, ul3 = _snapshots(h, grouping, v, w, book)
    for b in range(3):
        step, _, _ = local_precoder_br(ul1.received[b], ul3.received[b], ul1.beta, ul3.beta,
                                       None, 0.0, book, grouping, np.ones(4), w[b], rho_bs=0.05)
        assert np.linalg.norm(0.5 * step) <= 1e-6 * np.linalg.norm(w[b])


def test_bad_variant_and_alpha(rng):
    h, grouping, v, _ = small_instance(rng)
    book = make_pilot_book(16, 4, 2, 2, required=())
    w0 = _feasible(rng, 2, 2, 2)
    with pytest.raises(ConfigurationError):
        _run(h, grouping, "flooding", book, v, w0)
    with pytest.raises(ConfigurationError):
        _run(h, grouping, "best_response", book, v, w0, alpha=0.0)
