"""Distributed precoder designs driven by bi-directional over-the-air training.

Every BS ``b`` only sees its own received pilot blocks and the network-wide
power factors ``beta``. The coupling between BSs, which a CPU would resolve
with full CSI, reaches BS ``b`` through the UL-3 echo of the previous
downlink training round.

Notation: ``a[b, k] = H[b, k] v_k`` is UE ``k``'s effective uplink channel at
BS ``b``; per-BS precoders are ``(G, M)`` blocks and all precoders together
are ``(B, G, M)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .centralized import BeamformerState, dual_floor, rx_combiners_ls, scalar_power_dual
from .metrics import RunTrace, link_stats, overhead
from .scenario import ConfigurationError, Grouping
from .training import (
    PilotBook,
    TrainingSnapshot,
    dl_effective,
    phase_rng,
    ul_echo,
    ul_group_specific,
    ul_ue_specific,
)

VARIANTS = ("best_response", "group_specific", "local_mmse")


@dataclass
class DistributedIterState:
    """What the BSs hold after ``iteration`` completed iterations."""

    precoders: np.ndarray  # (B, G, M)
    alpha: float
    iteration: int = 0
    snapshots: dict[str, TrainingSnapshot] = field(default_factory=dict)
    lam: np.ndarray | None = None  # (B,)
    regularized: int = 0

    def advance(self, precoders, snapshots, lam, regularized: int = 0) -> None:
        self.precoders = precoders
        self.snapshots = dict(snapshots)
        self.lam = lam
        self.regularized = regularized
        self.iteration += 1


# ---------------------------------------------------------------------------
# perfect-CSI reference forms


def _effective(h, combiners):
    return np.einsum("bkmn,kn->bkm", h, combiners)


def _local_gram(a_b, mu):
    return np.einsum("k,km,kn->mn", mu, a_b, a_b.conj())


def _own_terms(a_b, mu, grouping: Grouping):
    """``sum_{k in g} mu_k a[b, k]`` for every group, shape ``(G, M)``."""
    return grouping.indicator().T @ (mu[:, None] * a_b)


def _cross_terms(a, b: int, mu, precoders, exclude_own: bool):
    """``sum_c sum_k mu_k a[b,k] a[c,k]^H w[c,g]``, shape ``(G, M)``."""
    inner = np.einsum("ckm,cgm->ckg", a.conj(), precoders)
    if exclude_own:
        inner[b] = 0.0
    return np.einsum("k,km,kg->gm", mu, a[b], inner.sum(axis=0))


def _solve_local(gram, rhs, *, rho_bs: float | None = None, lam: float | None = None):
    """Rows of ``(gram + lam I)^-1 rhs^T``, for ``rhs`` of shape ``(G, M)``.

    With ``lam=None`` the dual is chosen so the result meets ``rho_bs``
    (floor when already within budget). A Gram matrix with a nonpositive
    eigenvalue, possible after noise-bias removal, is shifted to PSD first
    and reported through the returned flag.

    Returns
    -------
    (w, lam, flagged) with ``w`` of shape ``(G, M)``.
    """
    gram = 0.5 * (gram + gram.conj().T)
    s, u = np.linalg.eigh(gram)
    flagged = bool(s[0] <= 0.0) and lam is None
    if flagged:
        s = s - s[0]
    z = u.conj().T @ rhs.T  # (M, G)
    if lam is None:
        if rho_bs is None:
            raise ValueError("give either lam or rho_bs")
        floor = dual_floor(float(np.mean(s)))
        lam = scalar_power_dual(s, np.sum(np.abs(z) ** 2, axis=1), rho_bs, floor)
    elif np.any(s + lam <= 0.0):
        raise ValueError("lam does not make the local matrix positive definite")
    w = u @ (z / (s + lam)[:, None])
    return w.T.copy(), float(lam), flagged


def exact_local_precoder(h, combiners, grouping: Grouping, mu, lam_b: float, precoders,
                         b: int) -> np.ndarray:
    """BS ``b``'s stationary precoders given the other BSs' precoders.

    ``w[b,g] = (R_b + lam_b I)^-1 (sum_{k in g} mu_k a[b,k] - X[b,g])`` with
    ``R_b = sum_k mu_k a[b,k] a[b,k]^H`` and cross terms
    ``X[b,g] = sum_{c != b} sum_k mu_k a[b,k] a[c,k]^H w[c,g]``.
    The entries ``precoders[b]`` are ignored. Returns ``(G, M)``.
    """
    a = _effective(h, combiners)
    mu = np.asarray(mu, dtype=float)
    rhs = _own_terms(a[b], mu, grouping) - _cross_terms(a, b, mu, precoders, exclude_own=True)
    return _solve_local(_local_gram(a[b], mu), rhs, lam=lam_b)[0]


def best_response_target(h, combiners, grouping: Grouping, mu, lam_b: float, prev_precoders,
                         b: int) -> np.ndarray:
    """Increment ``w*[b]`` towards the best response with one-iteration-old cross terms.

    ``w*[b,g] = (R_b + lam_b I)^-1 (sum_{k in g} mu_k a[b,k]
    - sum_c sum_k mu_k a[b,k] a[c,k]^H w'[c,g] - lam_b w'[b,g])``, where
    ``w'`` are the previous precoders of all BSs, own included. Adding it
    to ``w'[b]`` yields :func:`exact_local_precoder` evaluated at ``w'``.
    """
    a = _effective(h, combiners)
    mu = np.asarray(mu, dtype=float)
    rhs = (_own_terms(a[b], mu, grouping)
           - _cross_terms(a, b, mu, prev_precoders, exclude_own=False)
           - lam_b * prev_precoders[b])
    return _solve_local(_local_gram(a[b], mu), rhs, lam=lam_b)[0]


def project_power(precoders, rho_bs: float) -> np.ndarray:
    """Scale every BS whose precoders exceed ``rho_bs`` back onto the budget."""
    w = np.asarray(precoders)
    power = np.sum(np.abs(w) ** 2, axis=tuple(range(1, w.ndim)))
    scale = np.where(power > rho_bs, np.sqrt(rho_bs / np.maximum(power, np.finfo(float).tiny)), 1.0)
    return w * scale.reshape((-1,) + (1,) * (w.ndim - 1))


def damped_update(w_prev, w_target, alpha: float, rho_bs: float | None = None) -> np.ndarray:
    """``w_prev + alpha * w_target``, projected onto the per-BS budget if given.

    ``w_target`` is an increment, as returned by :func:`best_response_target`.
    """
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"damping alpha must lie in (0, 1], got {alpha}")
    w = np.asarray(w_prev) + alpha * np.asarray(w_target)
    return w if rho_bs is None else project_power(w, rho_bs)


# ---------------------------------------------------------------------------
# estimates from over-the-air training at one BS


def _training_gram(y, tau: int, noise_bs: float, weight=None):
    """``Y D Y^H - tau noise_bs I`` (``D = I`` when ``weight`` is None)."""
    g = y @ y.conj().T if weight is None else y @ weight @ y.conj().T
    return g - tau * noise_bs * np.eye(y.shape[0])


def _echo_term(y3, beta_ul: float, beta3: float, group_pilots):
    """``(beta_ul / sqrt(beta3)) Y3 p_g`` for every group, shape ``(G, M)``."""
    if beta3 <= 0.0:
        return np.zeros((group_pilots.shape[0], y3.shape[0]), dtype=complex)
    return (beta_ul / np.sqrt(beta3)) * (y3 @ group_pilots.T).T


def _with_memory(gram, rhs, w_prev, kappa, rho_bs, lam_b):
    """Increment for ``(gram + kappa lam I) w_dis = rhs - kappa lam w_prev``.

    With ``lam_b=None`` the dual makes the undamped iterate ``w_prev + w_dis``
    meet the budget; it solves ``(gram + kappa lam I) w = rhs + gram w_prev``.
    """
    full, lam, flagged = _solve_local(gram / kappa, (rhs + w_prev @ gram.T) / kappa,
                                      rho_bs=rho_bs, lam=lam_b)
    return full - w_prev, lam, flagged


def local_precoder_br(y1, y3, beta1: float, beta3: float, lam_b: float | None, noise_bs: float,
                      pilots: PilotBook, grouping: Grouping, mu, w_prev_b, *,
                      rho_bs: float | None = None):
    """Best-response increment of one BS from its UL-1 and UL-3 blocks.

    Solves ``(Y1 D Y1^H + tau (beta1 lam - noise_bs) I) w_dis =
    sqrt(beta1) sum_{k in g} mu_k Y1 p_k - (beta1 / sqrt(beta3)) Y3 p_g
    - beta1 tau lam w_prev`` for every group ``g``, where ``D`` carries
    ``mu_k`` at UE ``k``'s pilot. ``lam_b=None`` picks the dual locally so
    that ``w_prev + w_dis`` meets ``rho_bs``.

    Parameters
    ----------
    y1, y3 : (M, tau) received UL-1 and UL-3 blocks of this BS
    w_prev_b : (G, M) this BS's precoders from the previous iteration

    Returns
    -------
    (w_dis, lam, flagged) with ``w_dis`` of shape ``(G, M)``.
    """
    mu = np.asarray(mu, dtype=float)
    tau = pilots.tau
    gram = _training_gram(y1, tau, noise_bs, pilots.weight_matrix(mu))
    corr = (y1 @ pilots.ue_pilots.T).T  # (K, M): Y1 p_k
    own = np.sqrt(beta1) * (grouping.indicator().T @ (mu[:, None] * corr))
    rhs = own - _echo_term(y3, beta1, beta3, pilots.group_pilots)
    return _with_memory(gram, rhs, np.asarray(w_prev_b), tau * beta1, rho_bs, lam_b)


def local_precoder_gs(y2, y3, beta2: float, beta3: float, lam_b: float | None, noise_bs: float,
                      pilots: PilotBook, w_prev_b, *, rho_bs: float | None = None):
    """Group-specific-pilot counterpart of :func:`local_precoder_br` (all ``mu_k = 1``).

    Uses ``Y2 Y2^H`` as Gram matrix and ``sqrt(beta2) Y2 p'_g`` as own-group
    term, with ``p'_g`` the uplink group pilot.
    """
    tau = pilots.tau
    gram = _training_gram(y2, tau, noise_bs)
    own = np.sqrt(beta2) * (y2 @ pilots.ul_group_pilots.T).T
    rhs = own - _echo_term(y3, beta2, beta3, pilots.group_pilots)
    return _with_memory(gram, rhs, np.asarray(w_prev_b), tau * beta2, rho_bs, lam_b)


def local_precoder_mmse(y1, beta1: float, lam_b: float | None, noise_bs: float,
                        pilots: PilotBook, grouping: Grouping, mu, *,
                        rho_bs: float | None = None):
    """Local MMSE precoders of one BS: no echo term and no memory.

    Returns ``(w, lam, flagged)``; ``w`` is the precoder itself, not an
    increment.
    """
    mu = np.asarray(mu, dtype=float)
    tau = pilots.tau
    kappa = tau * beta1
    gram = _training_gram(y1, tau, noise_bs, pilots.weight_matrix(mu))
    corr = (y1 @ pilots.ue_pilots.T).T
    own = np.sqrt(beta1) * (grouping.indicator().T @ (mu[:, None] * corr))
    return _solve_local(gram / kappa, own / kappa, rho_bs=rho_bs, lam=lam_b)


# ---------------------------------------------------------------------------
# the iterative scheme


def run_bidirectional(h, grouping: Grouping, variant: str, *, pilots: PilotBook, rho_bs: float,
                      rho_ue: float, noise_bs: float, noise_ue: float, num_iterations: int,
                      init_combiners, init_precoders, alpha: float = 0.5, mu=None,
                      rng_for: Callable[[int, str], np.random.Generator] | None = None,
                      noiseless: bool = False, r_tot: float = 1000.0,
                      on_iteration: Callable[[DistributedIterState], None] | None = None):
    """Iterate bi-directional training and per-BS precoder updates.

    Iteration ``i`` runs UL-1 (UL-2 for ``group_specific``) with the current
    combiners, UL-3 echoing the DL block of iteration ``i - 1`` (skipped by
    ``local_mmse``), the per-BS precoder update, DL training with the new
    precoders and the LS combiner update at every UE. Before iteration 1 the
    initial precoders are broadcast once so the first echo has content.

    Parameters
    ----------
    h : (B, K, M, N) true channels; only used to synthesize received blocks
        and to score every iteration
    rng_for : ``f(iteration, phase) -> Generator`` giving the noise stream of
        each training phase; iteration 0 is the initial broadcast
    noiseless : train without noise (scoring still uses ``noise_ue``)

    Returns
    -------
    (BeamformerState, RunTrace)
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown distributed variant {variant!r}")
    if not 0.0 < alpha <= 1.0:
        raise ConfigurationError(f"damping alpha must lie in (0, 1], got {alpha}")
    pilots.require({"best_response": "ul1+ul3", "group_specific": "ul2+ul3",
                    "local_mmse": "ul1"}[variant])
    pilots.require("dl")
    B, K, M, N = h.shape
    G = grouping.num_groups
    mu = np.ones(K) if mu is None else np.asarray(mu, dtype=float)
    if rng_for is None:
        def rng_for(i, phase):
            return phase_rng(0, 0, i, phase)
    nb = 0.0 if noiseless else noise_bs
    nu = 0.0 if noiseless else noise_ue
    own_dl = pilots.group_pilots[grouping.group_of]
    r_ce = overhead(variant, K, G, N)

    v = np.array(init_combiners, dtype=complex)
    state = DistributedIterState(precoders=np.array(init_precoders, dtype=complex), alpha=alpha)
    y_dl = dl_effective(h, state.precoders, grouping, pilots, rho_bs, nu, rng_for(0, "dl"))[0].received
    trace = RunTrace(method=variant)
    for i in range(1, num_iterations + 1):
        snaps: dict[str, TrainingSnapshot] = {}
        w_prev = state.precoders
        w_new = np.empty_like(w_prev)
        lam = np.empty(B)
        flags = 0
        if variant == "group_specific":
            snaps["ul2"], _ = ul_group_specific(h, v, grouping, pilots, rho_ue, nb, rng_for(i, "ul2"))
        else:
            snaps["ul1"], _ = ul_ue_specific(h, v, pilots, rho_ue, nb, rng_for(i, "ul1"))
        if variant != "local_mmse":
            snaps["ul3"] = ul_echo(h, v, y_dl, mu, rho_ue, nb, rng_for(i, "ul3"))
        for b in range(B):
            if variant == "best_response":
                step, lam[b], flag = local_precoder_br(
                    snaps["ul1"].received[b], snaps["ul3"].received[b], snaps["ul1"].beta,
                    snaps["ul3"].beta, None, nb, pilots, grouping, mu, w_prev[b], rho_bs=rho_bs)
                w_new[b] = w_prev[b] + alpha * step
            elif variant == "group_specific":
                step, lam[b], flag = local_precoder_gs(
                    snaps["ul2"].received[b], snaps["ul3"].received[b], snaps["ul2"].beta,
                    snaps["ul3"].beta, None, nb, pilots, w_prev[b], rho_bs=rho_bs)
                w_new[b] = w_prev[b] + alpha * step
            else:
                w_new[b], lam[b], flag = local_precoder_mmse(
                    snaps["ul1"].received[b], snaps["ul1"].beta, None, nb, pilots, grouping, mu,
                    rho_bs=rho_bs)
            flags += flag
        w_new = project_power(w_new, rho_bs)
        dl = dl_effective(h, w_new, grouping, pilots, rho_bs, nu, rng_for(i, "dl"))[0]
        y_dl = dl.received
        snaps["dl"] = dl
        v, n_ridge = rx_combiners_ls(y_dl, own_dl)
        state.advance(w_new, snaps, lam, flags + n_ridge)
        trace.append(link_stats(h, w_new, v, grouping, noise_ue, mu), r_ce=r_ce, r_tot=r_tot,
                     regularized=flags + n_ridge)
        if on_iteration is not None:
            on_iteration(state)
    return BeamformerState(state.precoders, v), trace
