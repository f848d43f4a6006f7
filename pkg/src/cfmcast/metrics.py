"""Per-UE MSE/SINR, sum-group rate and overhead-adjusted rate."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scenario import Grouping

# pilot symbols spent per bi-directional iteration
OVERHEAD_FORMULAS = {
    "best_response": lambda K, G, N: K + 2 * G,  # UL-1 + UL-3 + DL
    "group_specific": lambda K, G, N: 3 * G,  # UL-2 + UL-3 + DL
    "local_mmse": lambda K, G, N: K + G,  # UL-1 + DL
}


def effective_gains(h, precoders, combiners) -> np.ndarray:
    """``E[k, g] = v_k^H H_k^H w_g`` summed over BSs, shape ``(K, G)``."""
    hw = np.einsum("bkmn,bgm->kgn", h.conj(), precoders)
    return np.einsum("kn,kgn->kg", np.conj(combiners), hw)


def mse_all(h, precoders, combiners, grouping: Grouping, noise_ue: float) -> np.ndarray:
    """Closed-form MSE of every UE for unit-power independent group symbols."""
    e = effective_gains(h, precoders, combiners)
    own = e[np.arange(e.shape[0]), grouping.group_of]
    v_norm2 = np.sum(np.abs(combiners) ** 2, axis=1)
    return np.sum(np.abs(e) ** 2, axis=1) - 2.0 * own.real + noise_ue * v_norm2 + 1.0


def mse_ue(h, precoders, combiner, k: int, grouping: Grouping, noise_ue: float) -> float:
    e = np.einsum("n,bmn,bgm->g", np.conj(combiner), h[:, k].conj(), precoders)
    g_k = grouping.group_of[k]
    return float(np.sum(np.abs(e) ** 2) - 2.0 * e[g_k].real
                 + noise_ue * np.sum(np.abs(combiner) ** 2) + 1.0)


def sinr_all(h, precoders, combiners, grouping: Grouping, noise_ue: float) -> np.ndarray:
    """SINR of every UE; UEs with a zero combiner get 0."""
    e = np.abs(effective_gains(h, precoders, combiners)) ** 2
    K = e.shape[0]
    signal = e[np.arange(K), grouping.group_of]
    interference = e.sum(axis=1) - signal
    denom = interference + noise_ue * np.sum(np.abs(combiners) ** 2, axis=1)
    out = np.zeros(K)
    ok = denom > 0
    out[ok] = signal[ok] / denom[ok]
    # a noiseless, interference-free link has unbounded SINR
    out[~ok & (signal > 0)] = np.inf
    return out


def sinr_ue(h, precoders, combiner, k: int, grouping: Grouping, noise_ue: float) -> float:
    """SINR of UE ``k`` with combiner ``combiner``; 0 for a zero combiner."""
    v = np.asarray(combiner)
    e = np.abs(np.einsum("n,bmn,bgm->g", v.conj(), h[:, k].conj(), precoders)) ** 2
    signal = e[grouping.group_of[k]]
    denom = e.sum() - signal + noise_ue * np.sum(np.abs(v) ** 2)
    if denom > 0:
        return float(signal / denom)
    return np.inf if signal > 0 else 0.0


def group_min_rates(sinrs, grouping: Grouping) -> np.ndarray:
    rates = np.log2(1.0 + np.asarray(sinrs, dtype=float))
    return np.array([rates[m].min() for m in grouping.members])


def sum_group_rate(sinrs, grouping: Grouping) -> float:
    """Sum over groups of the weakest member's rate [bps/Hz]."""
    return float(group_min_rates(sinrs, grouping).sum())


def sum_group_mse(mses, grouping: Grouping) -> float:
    mses = np.asarray(mses)
    return float(sum(mses[m].max() for m in grouping.members))


def overhead(method: str, num_ue: int, num_groups: int, num_ue_antennas: int = 1) -> int:
    """Pilot symbols per iteration (``r_ce``) of a bi-directional method."""
    try:
        return OVERHEAD_FORMULAS[method](num_ue, num_groups, num_ue_antennas)
    except KeyError:
        raise ValueError(f"no per-iteration overhead defined for {method!r}") from None


def effective_rate(rate: float, iteration: int, r_ce: float, r_tot: float) -> float:
    """``(1 - i r_ce / r_tot) R``, clamped at zero once training eats the block."""
    if rate < 0 or iteration < 0 or r_ce < 0 or r_tot <= 0:
        raise ValueError("effective_rate needs R, i, r_ce >= 0 and r_tot > 0")
    return max(0.0, 1.0 - iteration * r_ce / r_tot) * rate


@dataclass
class LinkStats:
    mse: np.ndarray
    sinr: np.ndarray
    group_min_rate: np.ndarray
    sum_group_rate: float
    sum_mse: float
    sum_group_mse: float

    @property
    def group_min_sinr(self) -> np.ndarray:
        return 2.0 ** self.group_min_rate - 1.0


def link_stats(h, precoders, combiners, grouping: Grouping, noise_ue: float, mu=None) -> LinkStats:
    """All performance functionals for one beamformer state on channels ``h``.

    ``sum_mse`` is weighted by ``mu`` (all ones by default).
    """
    mse = mse_all(h, precoders, combiners, grouping, noise_ue)
    sinr = sinr_all(h, precoders, combiners, grouping, noise_ue)
    rates = group_min_rates(sinr, grouping)
    mu = np.ones_like(mse) if mu is None else np.asarray(mu, dtype=float)
    return LinkStats(mse=mse, sinr=sinr, group_min_rate=rates,
                     sum_group_rate=float(rates.sum()), sum_mse=float(mu @ mse),
                     sum_group_mse=sum_group_mse(mse, grouping))


@dataclass
class IterationRecord:
    iteration: int
    sum_mse: float
    sum_group_mse: float
    group_min_sinr: np.ndarray
    sum_group_rate: float
    effective_rate: float
    regularized: int = 0  # count of ridge fallbacks hit in this iteration


@dataclass
class RunTrace:
    """Per-iteration metrics of one method on one drop."""

    method: str
    drop: int = 0
    seed: int = 0
    fingerprint: str = ""
    channel_digest: str = ""
    records: list[IterationRecord] = field(default_factory=list)
    objective_history: list[float] = field(default_factory=list)

    def append(self, stats: LinkStats, r_ce: float = 0.0, r_tot: float = 1.0,
               fixed_overhead: float = 0.0, regularized: int = 0) -> IterationRecord:
        """Add the next iteration; overhead is ``i*r_ce + fixed_overhead`` symbols."""
        i = len(self.records) + 1
        frac = max(0.0, 1.0 - (i * r_ce + fixed_overhead) / r_tot)
        rec = IterationRecord(i, stats.sum_mse, stats.sum_group_mse, stats.group_min_sinr,
                              stats.sum_group_rate, frac * stats.sum_group_rate, regularized)
        self.records.append(rec)
        return rec

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])
