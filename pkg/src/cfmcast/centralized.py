"""Centralized alternating optimization of multicast precoders and combiners.

The precoder step minimizes either the (weighted) sum MSE or the sum over
groups of the worst in-group MSE under per-BS power constraints; the combiner
step is the per-UE MMSE receiver. Per-BS power duals are found by projected
Newton ascent on the dual function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.optimize import brentq

from .metrics import RunTrace, link_stats, mse_all, sum_group_mse
from .scenario import Grouping

log = logging.getLogger(__name__)

POWER_TOL = 1e-6
MAX_NEWTON = 100


class PowerDualError(RuntimeError):
    """Newton iterations did not meet the per-BS power conditions."""


@dataclass
class BeamformerState:
    precoders: np.ndarray  # (B, G, M)
    combiners: np.ndarray  # (K, N)

    def per_bs_power(self) -> np.ndarray:
        return np.sum(np.abs(self.precoders) ** 2, axis=(1, 2))


@dataclass
class DualState:
    """Subgradient state of the sum-group MSE precoder step."""

    nu: np.ndarray  # (K,), sums to one inside every group
    lam: np.ndarray | None = None  # (B,)
    step0: float = 0.1
    count: int = 0

    @classmethod
    def uniform(cls, grouping: Grouping, step0: float = 0.1) -> "DualState":
        sizes = np.array([m.size for m in grouping.members], dtype=float)
        return cls(nu=1.0 / sizes[grouping.group_of], step0=step0)


def _her_solve(a, b):
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(a), b)
    except (np.linalg.LinAlgError, ValueError):
        return scipy.linalg.lstsq(a, b)[0]


def dual_floor(mean_diag: float) -> float:
    """Smallest admissible power dual given the Gram matrix's mean diagonal."""
    # the lower clamp keeps the floor well clear of denormals for zero matrices
    return 1e-12 * max(float(mean_diag), np.sqrt(np.finfo(float).tiny))


def scalar_power_dual(s, z2, rho: float, floor: float) -> float:
    """Root of ``sum_i z2[i] / (s[i] + lam)^2 = rho`` on ``lam >= floor``.

    ``s`` are the (nonnegative) eigenvalues of the regularized block and
    ``z2`` the energies of the right-hand side in that eigenbasis. The power
    is strictly decreasing in ``lam``; returns ``floor`` when already feasible.
    """
    s = np.maximum(np.asarray(s, dtype=float), 0.0)
    z2 = np.asarray(z2, dtype=float)

    def power(lam):
        return float(np.sum(z2 / (s + lam) ** 2))

    if not np.any(z2) or power(floor) <= rho:
        return floor
    hi = max(np.sqrt(z2.sum() / rho), floor) * 2.0
    f = lambda t: np.log(power(np.exp(t))) - np.log(rho)  # noqa: E731
    return float(np.exp(brentq(f, np.log(floor), np.log(hi), xtol=1e-14, rtol=1e-15, maxiter=500)))


def _powers(sol, num_bs):
    BM, G = sol.shape
    return np.sum(np.abs(sol.reshape(num_bs, BM // num_bs, G)) ** 2, axis=(1, 2))


def _kkt_error(p, lam, rho, scale, floor):
    """Relative infeasibility and relative duality gap of the dual point ``lam``.

    The floor acts as a fixed ridge, so for the Lagrangian minimizer
    ``w(lam)`` the duality gap of the ridged problem is
    ``sum_b (lam_b - floor) (rho - p_b)``; once ``w(lam)`` is feasible it
    bounds the suboptimality of ``w(lam)``.
    """
    infeasible = float(np.max(np.maximum(p - rho, 0.0))) / rho
    gap = float((lam - floor) @ np.maximum(rho - p, 0.0)) / scale
    return infeasible, gap


def _newton_duals(evaluate, num_bs, rho, floor, lam, scale, tol, max_iter, target):
    """Projected Newton ascent on the dual function in ``x = log(lam / floor) >= 0``.

    ``evaluate(lam) -> (solution, p, dp, q)`` returns the per-BS powers
    ``p``, their Jacobian ``dp[b, c] = d p_b / d lam_c`` (symmetric, negative
    semidefinite) and ``q`` with dual function ``q - rho * sum(lam)``. Its
    gradient in ``lam`` is ``p - rho``. Curvature along directions where the
    dual is flat (the zero-forcing limit) is lifted by a spectral shift.
    """
    x = np.log(np.maximum(lam, floor) / floor)

    def dual(x_):
        lam_ = floor * np.exp(x_)
        out = evaluate(lam_)
        return out, out[3] - rho * float(lam_.sum())

    (sol, p, dp, q), val = dual(x)
    for _ in range(max_iter):
        lam = floor * np.exp(x)
        infeasible, gap = _kkt_error(p, lam, rho, scale, floor)
        if infeasible <= target and gap <= target:
            break
        grad = lam * (p - rho)
        hess = lam[:, None] * dp * lam[None, :] + np.diag(grad)
        free = ~((x <= 0.0) & (grad < 0.0))
        step = np.zeros(num_bs)
        if free.any():
            a = -hess[np.ix_(free, free)]
            a = 0.5 * (a + a.T)
            evals, evecs = np.linalg.eigh(a)
            shift = max(0.0, -evals[0]) + 1e-10 * max(evals[-1], np.finfo(float).tiny)
            coef = evecs.T @ grad[free]
            denom = evals + shift
            flat = denom <= 0.0  # no curvature at all: take the longest allowed step
            coef[~flat] /= denom[~flat]
            coef[flat] = 20.0 * np.sign(coef[flat])
            step[free] = evecs @ coef
        step = np.clip(step, -20.0, 20.0)
        noise = 1e-14 * (abs(q) + rho * float(lam.sum()))
        t = 1.0
        while True:
            cand = np.maximum(x + t * step, 0.0)
            out, c_val = dual(cand)
            gain = float(grad @ (cand - x))
            if c_val >= val + 1e-4 * gain or gain <= noise or t < 1e-8:
                break
            t *= 0.5
        if np.array_equal(cand, x) or (c_val < val - noise and t < 1e-8):
            break  # stalled
        x, (sol, p, dp, q), val = cand, out, c_val
    lam = floor * np.exp(x)
    infeasible, gap = _kkt_error(p, lam, rho, scale, floor)
    if max(infeasible, gap) > tol:
        raise PowerDualError(f"power duals not converged within {max_iter} Newton steps "
                             f"(relative infeasibility {infeasible:.3g}, duality gap {gap:.3g})")
    return sol, lam


def _solve_duals(evaluate, num_bs, rho, floor, lam0, scale, cold, tol, max_iter, target):
    """Newton ascent from the warm start ``lam0``, restarting cold if that fails."""
    cold = np.full(num_bs, max(cold, floor))
    if lam0 is not None:
        warm = np.maximum(np.asarray(lam0, dtype=float).copy(), floor)
        try:
            return _newton_duals(evaluate, num_bs, rho, floor, warm, scale, tol, max_iter, target)
        except PowerDualError:
            log.debug("warm-started power duals failed; restarting cold")
    return _newton_duals(evaluate, num_bs, rho, floor, cold, scale, tol, max_iter, target)


def power_dual_solve(gram, rhs, rho: float, num_bs: int, *, lam0=None, tol: float = POWER_TOL,
                     max_iter: int = MAX_NEWTON, floor: float | None = None, target: float = 1e-12):
    """Per-BS power duals for ``(gram + blockdiag(lam_b I)) w = rhs``.

    The duals maximize the dual function of
    ``min w^H gram w - 2 Re(rhs^H w)`` subject to ``||w_b||^2 <= rho`` for
    every ``M``-row block ``b``. At the returned point the precoders are
    feasible and the duality gap is small, so either ``lam_b`` sits at the
    floor or BS ``b`` transmits ``rho`` up to that gap. When zero forcing
    is feasible the optimal duals are not unique; the gap still certifies
    the precoders.

    Parameters
    ----------
    gram : (B*M, B*M) Hermitian PSD matrix
    rhs : (B*M, G) right-hand sides, one column per group
    rho : per-BS power budget
    num_bs : number of ``M``-row blocks

    Returns
    -------
    solution : (B*M, G) precoders at the returned duals
    lam : (B,) duals with relative infeasibility and duality gap within
        ``tol``; iterations continue down to ``target`` when possible.

    See Also
    --------
    power_dual_solve_lowrank : same problem with ``gram = F F^H``,
        ``rhs = F T``; numerically preferable when ``gram`` is rank deficient.
    """
    gram = np.asarray(gram)
    rhs = np.asarray(rhs)
    if rhs.ndim == 1:
        rhs = rhs[:, None]
    BM, G = rhs.shape
    M = BM // num_bs
    floor = dual_floor(np.real(np.trace(gram)) / BM) if floor is None else floor
    eye = np.eye(BM)

    def evaluate(lam_):
        c = gram + np.diag(np.repeat(lam_, M))
        try:
            inv = scipy.linalg.cho_solve(scipy.linalg.cho_factor(c), eye)
        except np.linalg.LinAlgError:
            inv = np.linalg.pinv(c, hermitian=True)
        sol = inv @ rhs
        blocks = sol.reshape(num_bs, M, G)
        p = np.sum(np.abs(blocks) ** 2, axis=(1, 2))
        dp = -2.0 * np.einsum("bmg,bmcn,cng->bc", blocks.conj(),
                              inv.reshape(num_bs, M, num_bs, M), blocks).real
        return sol, p, dp, -float(np.real(np.vdot(rhs, sol)))

    scale = np.linalg.norm(rhs) ** 2 / max(np.linalg.eigvalsh(gram)[-1], floor)
    return _solve_duals(evaluate, num_bs, rho, floor, lam0, scale,
                        np.linalg.norm(rhs) / np.sqrt(rho), tol, max_iter, target)


def power_dual_solve_lowrank(factor, coeffs, rho: float, num_bs: int, *, lam0=None,
                             tol: float = POWER_TOL, max_iter: int = MAX_NEWTON,
                             floor: float | None = None, target: float = 1e-12):
    """:func:`power_dual_solve` for ``gram = F F^H`` and ``rhs = F T``.

    The objective is ``sum_g ||F^H w_g - t_g||^2``. With
    ``L = blockdiag(lam_b I)`` and the thin SVD ``L^-1/2 F = U diag(s) V^H``
    every quantity is a sum of positive terms:
    ``w = L^-1/2 U diag(s / (1 + s^2)) V^H T``, the dual function is
    ``sum |V^H T|^2 / (1 + s^2) - rho sum(lam)`` and
    ``(L + F F^H)^-1 = L^-1/2 [I - U U^H + U diag(1 / (1 + s^2)) U^H] L^-1/2``.
    This stays accurate when the duals sit near the floor, where the
    solution approaches the zero-forcing limit.
    """
    f = np.asarray(factor)
    t = np.asarray(coeffs)
    if t.ndim == 1:
        t = t[:, None]
    BM = f.shape[0]
    G = t.shape[1]
    M = BM // num_bs
    floor = dual_floor(float(np.sum(np.abs(f) ** 2)) / BM) if floor is None else floor
    if not np.any(f) or not np.any(t):
        return np.zeros((BM, G), dtype=complex), np.full(num_bs, floor)
    idx = np.arange(num_bs)

    def evaluate(lam_):
        r = 1.0 / np.sqrt(np.repeat(lam_, M))
        u, sv, vh = np.linalg.svd(r[:, None] * f, full_matrices=False)
        # numerically null directions would be amplified by r near the floor
        sv = np.where(sv > sv[0] * max(f.shape) * np.finfo(float).eps, sv, 0.0) if sv.size else sv
        vt = vh @ t
        damp = 1.0 / (1.0 + sv ** 2)
        sol = r[:, None] * (u @ ((sv * damp)[:, None] * vt))
        blocks = sol.reshape(num_bs, M, G)
        p = np.sum(np.abs(blocks) ** 2, axis=(1, 2))
        # columns: w_g restricted to block c, for every (c, g)
        e = np.zeros((num_bs, M, num_bs, G), dtype=complex)
        e[idx, :, idx, :] = blocks
        es = r[:, None] * e.reshape(BM, num_bs * G)
        ue = u.conj().T @ es
        ce = r[:, None] * (es - u @ ue + u @ (damp[:, None] * ue))
        dp = -2.0 * np.einsum("bmg,bmcg->bc", blocks.conj(), ce.reshape(num_bs, M, num_bs, G)).real
        return sol, p, 0.5 * (dp + dp.T), float(np.sum(damp[:, None] * np.abs(vt) ** 2))

    scale = float(np.sum(np.abs(t) ** 2))
    return _solve_duals(evaluate, num_bs, rho, floor, lam0, scale,
                        np.linalg.norm(f @ t) / np.sqrt(rho), tol, max_iter, target)


def _stack_effective(h, combiners):
    """Rows ``H_k v_k`` (aggregated over BSs), shape ``(K, B*M)``."""
    B, K, M, N = h.shape
    return np.einsum("bkmn,kn->kbm", h, combiners).reshape(K, B * M)


def precoder_factors(h, combiners, grouping: Grouping, weights):
    """``(F, T)`` with ``F F^H = sum_k c_k a_k a_k^H`` and ``F T = sum_{k in g} c_k a_k``.

    ``a_k = H_k v_k`` is UE ``k``'s aggregated effective uplink channel.
    """
    a = _stack_effective(h, combiners)
    root = np.sqrt(np.asarray(weights, dtype=float))
    return a.T * root, root[:, None] * grouping.indicator()


def precoder_system(h, combiners, grouping: Grouping, weights):
    """Dense Gram ``sum_k c_k a_k a_k^H`` and right-hand sides ``sum_{k in g} c_k a_k``."""
    f, t = precoder_factors(h, combiners, grouping, weights)
    return f @ f.conj().T, f @ t


def _unstack(sol, num_bs):
    BM, G = sol.shape
    return sol.reshape(num_bs, BM // num_bs, G).transpose(0, 2, 1).copy()


def summse_precoders(h, combiners, grouping: Grouping, mu, rho_bs: float, *, lam0=None,
                     tol: float = POWER_TOL, max_iter: int = MAX_NEWTON):
    """Weighted sum-MSE optimal precoders for fixed combiners.

    Returns ``(W, lam)`` with ``W`` of shape ``(B, G, M)``.
    """
    if not np.any(combiners):
        raise ValueError("all combiners are zero")
    f, t = precoder_factors(h, combiners, grouping, mu)
    sol, lam = power_dual_solve_lowrank(f, t, rho_bs, h.shape[0], lam0=lam0, tol=tol,
                                        max_iter=max_iter)
    return _unstack(sol, h.shape[0]), lam


def project_simplex(y) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``{x >= 0, sum(x) = 1}``."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, y.size + 1) > 0)[0][-1]
    return np.maximum(y - css[rho] / (rho + 1.0), 0.0)


def project_group_simplex(nu, grouping: Grouping) -> np.ndarray:
    out = np.empty_like(np.asarray(nu, dtype=float))
    for m in grouping.members:
        out[m] = project_simplex(np.asarray(nu)[m])
    return out


def sumgroup_precoders(h, combiners, grouping: Grouping, rho_bs: float, noise_ue: float,
                       duals: DualState | None = None, steps: int = 20, *,
                       tol: float = POWER_TOL, max_iter: int = MAX_NEWTON):
    """Precoders for the min-max (sum-group MSE) step via projected subgradient on ``nu``.

    Each of the ``steps`` inner iterations solves the weighted sum-MSE system
    with weights ``nu``, then moves ``nu`` along ``MSE_k - max_{g_k} MSE``
    (normalized to unit max-norm, since MSEs shrink with SNR) with step
    ``step0 / sqrt(j)`` and projects every group onto the simplex. The
    returned precoders are the best feasible inner iterate.
    """
    if duals is None:
        duals = DualState.uniform(grouping)
    nu = project_group_simplex(duals.nu, grouping)
    lam = duals.lam
    count = duals.count
    best_obj, best_w = np.inf, None
    for _ in range(steps):
        w, lam = summse_precoders(h, combiners, grouping, nu, rho_bs, lam0=lam, tol=tol,
                                  max_iter=max_iter)
        mse = mse_all(h, w, combiners, grouping, noise_ue)
        obj = sum_group_mse(mse, grouping)
        if obj < best_obj:
            best_obj, best_w = obj, w
        count += 1
        worst = np.array([mse[m].max() for m in grouping.members])
        grad = mse - worst[grouping.group_of]
        scale = np.max(np.abs(grad))
        if scale > 0:
            nu = project_group_simplex(nu + duals.step0 / np.sqrt(count) * grad / scale, grouping)
    return best_w, DualState(nu=nu, lam=lam, step0=duals.step0, count=count)


def mmse_combiner(h_agg, precoders_agg, group: int, noise_ue: float) -> np.ndarray:
    """``(sum_g H^H w_g w_g^H H + noise I)^-1 H^H w_{g_k}`` for one UE.

    ``h_agg`` is ``(B*M, N)``, ``precoders_agg`` is ``(B*M, G)``.
    """
    hw = np.asarray(h_agg).conj().T @ np.asarray(precoders_agg)  # (N, G)
    if not (np.all(np.isfinite(hw)) and np.isfinite(noise_ue)):
        raise ValueError("non-finite channel, precoder or noise input")
    cov = hw @ hw.conj().T + noise_ue * np.eye(hw.shape[0])
    return np.linalg.solve(cov, hw[:, group])


def mmse_combiners(h, precoders, grouping: Grouping, noise_ue: float) -> np.ndarray:
    """MMSE combiner of every UE, shape ``(K, N)``."""
    hw = np.einsum("bkmn,bgm->kgn", h.conj(), precoders)
    if not (np.all(np.isfinite(hw)) and np.isfinite(noise_ue)):
        raise ValueError("non-finite channel, precoder or noise input")
    K, G, N = hw.shape
    cov = np.einsum("kgn,kgp->knp", hw, hw.conj()) + noise_ue * np.eye(N)
    own = hw[np.arange(K), grouping.group_of]
    return np.linalg.solve(cov, own[..., None])[..., 0]


def rx_combiner_ls(y_dl, pilot, *, return_flag: bool = False):
    """Receive combiner ``(Y Y^H)^-1 Y p`` from a DL training block ``Y`` (``N x tau``).

    A ridge of ``1e-12 * trace / N`` is added when the Gram matrix is
    numerically singular; ``return_flag=True`` also reports whether it was.
    """
    y = np.asarray(y_dl)
    gram = y @ y.conj().T
    n = gram.shape[0]
    ridge = 1e-12 * float(np.real(np.trace(gram))) / n
    flagged = False
    if np.linalg.eigvalsh(gram)[0] <= ridge:
        gram = gram + max(ridge, np.finfo(float).tiny) * np.eye(n)
        flagged = True
    v = np.linalg.solve(gram, y @ np.asarray(pilot))
    return (v, flagged) if return_flag else v


def rx_combiners_ls(y_dl, pilots_per_ue):
    """Batch version over UEs; returns ``(V, number_of_ridge_fallbacks)``."""
    out = np.empty(y_dl.shape[:2], dtype=complex)
    count = 0
    for k in range(y_dl.shape[0]):
        out[k], flagged = rx_combiner_ls(y_dl[k], pilots_per_ue[k], return_flag=True)
        count += flagged
    return out, count


def alternating_optimize(h, grouping: Grouping, objective: str, *, rho_bs: float, noise_ue: float,
                         num_iterations: int, init_combiners, mu=None, h_true=None,
                         subgradient_steps: int = 20, step0: float = 0.1,
                         evaluate=None, method: str | None = None,
                         tol: float = POWER_TOL, max_iter: int = MAX_NEWTON):
    """Alternate precoder and combiner steps for a fixed iteration budget.

    Parameters
    ----------
    h : (B, K, M, N) channels seen by the optimizer (true or estimated)
    objective : ``"sum_mse"`` or ``"sum_group_mse"``
    h_true : channels used to score each iteration (defaults to ``h``)
    evaluate : optional ``f(W, V) -> (V_eval, n_flags)`` replacing the
        optimizer's combiners when scoring, e.g. a DL training round
        followed by the LS receiver.

    Returns
    -------
    (BeamformerState, RunTrace). ``trace.objective_history`` holds the
    objective on ``h`` after every half-step, starting with a precoder step.
    """
    if objective not in ("sum_mse", "sum_group_mse"):
        raise ValueError(f"unknown objective {objective!r}")
    K = h.shape[1]
    mu = np.ones(K) if mu is None else np.asarray(mu, dtype=float)
    h_true = h if h_true is None else h_true
    v = np.array(init_combiners, dtype=complex)
    trace = RunTrace(method=method or f"centralized_{objective}")
    duals = DualState.uniform(grouping, step0)
    lam = None

    def score(w_, v_):
        m = mse_all(h, w_, v_, grouping, noise_ue)
        return float(mu @ m) if objective == "sum_mse" else sum_group_mse(m, grouping)

    w = np.zeros((h.shape[0], grouping.num_groups, h.shape[2]), dtype=complex)
    for _ in range(num_iterations):
        if not np.any(v):
            w = np.zeros_like(w)
        elif objective == "sum_mse":
            w, lam = summse_precoders(h, v, grouping, mu, rho_bs, lam0=lam, tol=tol,
                                      max_iter=max_iter)
        else:
            w, duals = sumgroup_precoders(h, v, grouping, rho_bs, noise_ue, duals,
                                          subgradient_steps, tol=tol, max_iter=max_iter)
        trace.objective_history.append(score(w, v))
        v = mmse_combiners(h, w, grouping, noise_ue)
        trace.objective_history.append(score(w, v))
        v_eval, flags = (v, 0) if evaluate is None else evaluate(w, v)
        trace.append(link_stats(h_true, w, v_eval, grouping, noise_ue, mu), regularized=flags)
    return BeamformerState(w, v), trace
