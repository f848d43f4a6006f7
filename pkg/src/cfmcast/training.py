"""Pilot books, precoded-pilot transmissions and least-squares estimators.

All training phases share one pilot dimension ``tau``. Uplink sequences
(UE-specific ``p_k`` or uplink group pilots) occupy the first pilot indices
and the downlink group pilots ``p_g`` (which UEs also echo back in UL-3)
occupy the last ``G`` indices. Hence a design that sends UL-1 together with
UL-3 needs ``tau >= K + G`` orthogonal dimensions while one that sends UL-2
with UL-3 needs only ``tau >= 2G``.

Transmit power of a pilot block ``X`` (``N x tau``) is its average
per-symbol power ``||X||_F^2 / tau``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import ConfigurationError, Grouping


class PilotLengthError(ConfigurationError):
    """The pilot dimension is too short for the requested training phase."""


class DegenerateInputError(ValueError):
    """Every transmitter has an all-zero payload, so no power scaling exists."""


class PowerConstraintError(RuntimeError):
    """A generated transmit signal exceeds its power budget."""


class SequencingError(RuntimeError):
    """A phase was run without the snapshot it depends on."""


POWER_SLACK = 1e-9

# phase -> (pilot family, minimum tau as a function of (K, G, N))
_REQUIREMENTS = {
    "ul": ("antenna", lambda K, G, N: K * N),
    "ul1": ("ue", lambda K, G, N: K),
    "ul2": ("ul_group", lambda K, G, N: G),
    "dl": ("group", lambda K, G, N: G),
    "ul3": ("group", lambda K, G, N: G),
    "ul1+ul3": ("ue", lambda K, G, N: K + G),
    "ul2+ul3": ("ul_group", lambda K, G, N: 2 * G),
}


@dataclass(frozen=True)
class PilotBook:
    """Orthogonal pilot families sharing the dimension ``tau``.

    Families that do not fit in ``tau`` are ``None``. ``rotation`` is the
    unitary applied to the canonical sequences (identity for the canonical
    scheme).
    """

    tau: int
    num_ue: int
    num_groups: int
    num_ue_antennas: int
    ue_matrix_pilots: np.ndarray | None  # (K, tau, N)
    ue_pilots: np.ndarray | None  # (K, tau)
    ul_group_pilots: np.ndarray | None  # (G, tau)
    group_pilots: np.ndarray  # (G, tau), used in DL and echoed in UL-3
    rotation: np.ndarray

    def require(self, phase: str) -> None:
        family, minimum = _REQUIREMENTS[phase]
        need = minimum(self.num_ue, self.num_groups, self.num_ue_antennas)
        if self.tau < need:
            raise PilotLengthError(
                f"insufficient pilot length for phase {phase!r}: tau={self.tau} < {need}")

    def ue_index(self) -> np.ndarray:
        """Canonical pilot index carrying each UE's sequence."""
        return np.arange(self.num_ue)

    def weight_matrix(self, mu) -> np.ndarray:
        """``tau x tau`` weight matrix with ``mu[k]`` at UE ``k``'s pilot index.

        Entries at indices not assigned to a UE are 1.
        """
        d = np.ones(self.tau)
        d[self.ue_index()] = np.asarray(mu, dtype=float)
        return (self.rotation * d) @ self.rotation.conj().T


def make_pilot_book(tau: int, num_ue: int, num_groups: int, num_ue_antennas: int = 1,
                    scheme: str = "canonical", rng: np.random.Generator | None = None,
                    required=("ul1", "dl")) -> PilotBook:
    """Build scaled-basis pilot sequences of length ``tau``.

    ``required`` lists phases (keys of the requirement table, e.g. ``"ul1"``,
    ``"ul2+ul3"``) whose pilot budget is validated eagerly. With
    ``scheme="unitary"`` every sequence is rotated by a random unitary drawn
    from ``rng``.
    """
    tau, K, G, N = int(tau), int(num_ue), int(num_groups), int(num_ue_antennas)
    if scheme == "canonical":
        rot = np.eye(tau, dtype=complex)
    elif scheme == "unitary":
        if rng is None:
            raise ValueError("the unitary scheme needs an rng")
        a = rng.standard_normal((tau, tau)) + 1j * rng.standard_normal((tau, tau))
        q, r = np.linalg.qr(a)
        rot = q * (np.diag(r) / np.abs(np.diag(r)))
    else:
        raise ValueError(f"unknown pilot scheme {scheme!r}")
    if G > tau:
        raise PilotLengthError(f"insufficient pilot length: tau={tau} < G={G}")
    basis = np.sqrt(tau) * rot  # column t is the t-th scaled basis sequence

    def take(indices):
        return basis[:, indices].T.copy()

    antenna = None
    if K * N <= tau:
        antenna = take(np.arange(K * N)).reshape(K, N, tau).transpose(0, 2, 1).copy()
    book = PilotBook(
        tau=tau, num_ue=K, num_groups=G, num_ue_antennas=N,
        ue_matrix_pilots=antenna,
        ue_pilots=take(np.arange(K)) if K <= tau else None,
        ul_group_pilots=take(np.arange(G)),
        group_pilots=take(np.arange(tau - G, tau)),
        rotation=rot,
    )
    for phase in required:
        book.require(phase)
    return book


@dataclass
class TrainingSnapshot:
    """Received training block of one phase plus the power factor used."""

    phase: str
    received: np.ndarray  # (B, M, tau) uplink or (K, N, tau) downlink
    beta: float | None = None
    iteration: int | None = None

    def to_dict(self) -> dict:
        """Debug dump with matrices as row-major ``[re, im]`` pairs."""
        flat = self.received.reshape(self.received.shape[0], -1)
        return {
            "phase": self.phase,
            "iteration": self.iteration,
            "beta": self.beta,
            "shape": list(self.received.shape),
            "matrices": [[[float(z.real), float(z.imag)] for z in row] for row in flat],
        }


def _noise(rng, shape, variance):
    if variance == 0.0:
        return np.zeros(shape, dtype=complex)
    return np.sqrt(variance / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def block_power(x: np.ndarray) -> np.ndarray:
    """Average per-symbol power of pilot blocks ``(..., rows, tau)``."""
    return np.sum(np.abs(x) ** 2, axis=(-2, -1)) / x.shape[-1]


def _audit(x, budget, what):
    worst = float(np.max(block_power(x))) if x.size else 0.0
    if worst > budget * (1.0 + POWER_SLACK):
        raise PowerConstraintError(f"{what}: transmit power {worst:.6g} exceeds {budget:.6g}")


def power_scaling(phase: str, rho_ue: float, *, combiners=None, y_dl=None, mu=None,
                  num_antennas: int | None = None) -> float:
    """Largest network-common scaling keeping every UE within ``rho_ue``.

    * ``"ul"``: ``rho_ue / N`` (pass ``num_antennas``),
    * ``"ul1"``/``"ul2"``: ``rho_ue / max_k ||v_k||^2``,
    * ``"ul3"``: ``rho_ue / max_k P(mu_k v_k v_k^H Y_k)`` with ``P`` the
      average per-symbol power of the echoed block.
    """
    if phase == "ul":
        if not num_antennas:
            raise ValueError("phase 'ul' needs num_antennas")
        return rho_ue / num_antennas
    if phase in ("ul1", "ul2"):
        peak = float(np.max(np.sum(np.abs(np.asarray(combiners)) ** 2, axis=1)))
    elif phase == "ul3":
        peak = float(np.max(block_power(echo_payload(combiners, y_dl, mu))))
    else:
        raise ValueError(f"unknown phase {phase!r}")
    if not peak > 0.0 or not np.isfinite(peak):
        raise DegenerateInputError(f"phase {phase!r}: all transmit payloads are zero")
    return rho_ue / peak


def echo_payload(combiners, y_dl, mu) -> np.ndarray:
    """Unscaled UL-3 payload ``mu_k v_k v_k^H Y_k``, shape ``(K, N, tau)``."""
    v = np.asarray(combiners)
    proj = np.einsum("kn,kt->knt", v, np.einsum("kn,knt->kt", v.conj(), y_dl))
    return np.asarray(mu, dtype=float)[:, None, None] * proj


def ul_antenna_specific(h, pilots: PilotBook, rho_ue: float, noise_bs: float, rng):
    """Antenna-specific uplink training and the LS estimates of every ``H[b,k]``.

    Returns ``(snapshot, h_hat)`` with ``h_hat`` shaped like ``h``.
    """
    pilots.require("ul")
    P = pilots.ue_matrix_pilots  # (K, tau, N)
    B, K, M, N = h.shape
    beta = power_scaling("ul", rho_ue, num_antennas=N)
    x = np.sqrt(beta) * P.conj().transpose(0, 2, 1)  # (K, N, tau)
    _audit(x, rho_ue, "UL")
    y = np.einsum("bkmn,knt->bmt", h, x) + _noise(rng, (B, M, pilots.tau), noise_bs)
    h_hat = np.einsum("bmt,ktn->bkmn", y, P) / (pilots.tau * np.sqrt(beta))
    return TrainingSnapshot("ul", y, beta), h_hat


def ul_ue_specific(h, combiners, pilots: PilotBook, rho_ue: float, noise_bs: float, rng,
                   beta: float | None = None):
    """UL-1: UEs send ``sqrt(beta) v_k p_k^H``; LS estimates of ``h[b,k] = H[b,k] v_k``.

    Returns ``(snapshot, h_eff_hat)`` with ``h_eff_hat`` of shape ``(B, K, M)``.
    """
    pilots.require("ul1")
    v = np.asarray(combiners)
    if beta is None:
        beta = power_scaling("ul1", rho_ue, combiners=v)
    x = np.sqrt(beta) * np.einsum("kn,kt->knt", v, pilots.ue_pilots.conj())
    _audit(x, rho_ue, "UL-1")
    B, K, M, N = h.shape
    y = np.einsum("bkmn,knt->bmt", h, x) + _noise(rng, (B, M, pilots.tau), noise_bs)
    est = np.einsum("bmt,kt->bkm", y, pilots.ue_pilots) / (pilots.tau * np.sqrt(beta))
    return TrainingSnapshot("ul1", y, beta), est


def ul_group_specific(h, combiners, grouping: Grouping, pilots: PilotBook, rho_ue: float,
                      noise_bs: float, rng, beta: float | None = None):
    """UL-2: UEs send ``sqrt(beta) v_k p_{g_k}^H``; LS estimates of ``f[b,g]``.

    Returns ``(snapshot, f_hat)`` with ``f_hat`` of shape ``(B, G, M)``.
    """
    pilots.require("ul2")
    v = np.asarray(combiners)
    if beta is None:
        beta = power_scaling("ul2", rho_ue, combiners=v)
    seq = pilots.ul_group_pilots[grouping.group_of]  # (K, tau)
    x = np.sqrt(beta) * np.einsum("kn,kt->knt", v, seq.conj())
    _audit(x, rho_ue, "UL-2")
    B, K, M, N = h.shape
    y = np.einsum("bkmn,knt->bmt", h, x) + _noise(rng, (B, M, pilots.tau), noise_bs)
    est = np.einsum("bmt,gt->bgm", y, pilots.ul_group_pilots) / (pilots.tau * np.sqrt(beta))
    return TrainingSnapshot("ul2", y, beta), est


def dl_effective(h, precoders, grouping: Grouping, pilots: PilotBook, rho_bs: float,
                 noise_ue: float, rng):
    """DL: BSs send ``sum_g w[b,g] p_g^H``; LS estimates of ``g_k``.

    Returns ``(snapshot, g_hat)`` with ``g_hat`` of shape ``(K, N)``.
    """
    pilots.require("dl")
    w = np.asarray(precoders)
    x = np.einsum("bgm,gt->bmt", w, pilots.group_pilots.conj())
    per_bs = np.sum(np.abs(w) ** 2, axis=(1, 2))
    if np.any(per_bs > rho_bs * (1.0 + POWER_SLACK)):
        raise PowerConstraintError(f"DL precoders exceed the BS budget: max {per_bs.max():.6g} > {rho_bs:.6g}")
    B, K, M, N = h.shape
    y = np.einsum("bkmn,bmt->knt", h.conj(), x) + _noise(rng, (K, N, pilots.tau), noise_ue)
    own = pilots.group_pilots[grouping.group_of]  # (K, tau)
    est = np.einsum("knt,kt->kn", y, own) / pilots.tau
    return TrainingSnapshot("dl", y), est


def ul_echo(h, combiners, y_dl, mu, rho_ue: float, noise_bs: float, rng,
            beta: float | None = None):
    """UL-3: every UE re-sends its DL block through ``mu_k v_k v_k^H``.

    ``y_dl`` is the ``(K, N, tau)`` block received in the latest DL phase.
    """
    if y_dl is None:
        raise SequencingError("UL-3 needs the received DL block of the same round")
    payload = echo_payload(combiners, y_dl, mu)
    if beta is None:
        if not np.any(payload):
            beta = 0.0  # nothing to echo, the BSs hear noise only
        else:
            beta = power_scaling("ul3", rho_ue, combiners=combiners, y_dl=y_dl, mu=mu)
    x = np.sqrt(beta) * payload
    _audit(x, rho_ue, "UL-3")
    B, K, M, N = h.shape
    y = np.einsum("bkmn,knt->bmt", h, x) + _noise(rng, (B, M, y_dl.shape[-1]), noise_bs)
    return TrainingSnapshot("ul3", y, beta)


PHASE_CODES = {"ul": 0, "ul1": 1, "ul2": 2, "ul3": 3, "dl": 4}


def phase_rng(seed: int, drop: int, iteration: int, phase: str) -> np.random.Generator:
    """Noise stream of one training phase, keyed by ``(seed, drop, iteration, phase)``.

    The key omits the method, so two methods running the same phase in the
    same iteration of a drop draw identical noise.
    """
    return np.random.default_rng([int(seed), int(drop), int(iteration), PHASE_CODES[phase]])
