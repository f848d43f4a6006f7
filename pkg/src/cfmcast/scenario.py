"""Network configuration, geometry, multicast grouping and channel draws.

All arrays follow one layout convention used across the package:

* channels ``H`` have shape ``(B, K, M, N)``; ``H[b, k]`` is the uplink
  channel between UE ``k`` and BS ``b``,
* precoders ``W`` have shape ``(B, G, M)``,
* combiners ``V`` have shape ``(K, N)``.

Powers are given in dB/dBm in :class:`ScenarioConfig` and converted to linear
watts once, through the ``*_w`` properties.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ConfigurationError(ValueError):
    """Raised for inconsistent or invalid scenario parameters."""


def dbm_to_watt(value_dbm: float) -> float:
    """Convert dBm to watts; ``-inf`` maps to exactly zero."""
    if value_dbm == -math.inf:
        return 0.0
    return 10.0 ** ((value_dbm - 30.0) / 10.0)


def db_to_linear(value_db):
    return 10.0 ** (np.asarray(value_db, dtype=float) / 10.0)


@dataclass(frozen=True)
class ScenarioConfig:
    """Scalar parameters of one simulated network and its algorithms.

    The defaults correspond to the desk-scale profile; see :func:`preset` for
    the full-size network.
    """

    num_bs: int = 9
    num_bs_antennas: int = 4
    num_ue: int = 8
    num_ue_antennas: int = 2
    num_groups: int = 4
    grid_spacing: float = 100.0
    pathloss_offset_db: float = -48.0
    pathloss_exponent_coeff: float = 30.0
    rho_bs_dbm: float = 30.0
    rho_ue_dbm: float = 20.0
    noise_bs_dbm: float = -95.0
    noise_ue_dbm: float = -95.0
    tau: int = 16
    alpha: float = 0.5
    mu_weights: tuple[float, ...] | None = None
    num_iterations: int = 50
    r_tot: int = 1000
    seed: int = 0
    num_drops: int = 20
    # algorithm knobs
    subgradient_steps: int = 20
    subgradient_step0: float = 0.1
    grouping: str = "random"
    min_distance: float = 1.0

    def __post_init__(self):
        if self.mu_weights is not None:
            object.__setattr__(self, "mu_weights", tuple(float(m) for m in self.mu_weights))
        self.validate()

    def validate(self) -> None:
        for name in ("num_bs", "num_bs_antennas", "num_ue", "num_ue_antennas",
                     "num_groups", "tau", "num_iterations", "num_drops", "r_tot"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        side = math.isqrt(self.num_bs)
        if side * side != self.num_bs:
            raise ConfigurationError(f"num_bs={self.num_bs} is not a perfect square")
        if self.num_groups > self.num_ue:
            raise ConfigurationError("num_groups cannot exceed num_ue")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        for name in ("rho_bs_dbm", "rho_ue_dbm", "grid_spacing", "pathloss_offset_db",
                     "pathloss_exponent_coeff", "min_distance", "subgradient_step0"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigurationError(f"{name} must be finite")
        for name in ("noise_bs_dbm", "noise_ue_dbm"):
            value = getattr(self, name)
            if math.isnan(value) or value == math.inf:
                raise ConfigurationError(f"{name} must be finite or -inf")
        if self.grid_spacing <= 0 or self.min_distance <= 0:
            raise ConfigurationError("grid_spacing and min_distance must be positive")
        if self.mu_weights is not None:
            if len(self.mu_weights) != self.num_ue:
                raise ConfigurationError("mu_weights needs one entry per UE")
            if any(not (m > 0 and math.isfinite(m)) for m in self.mu_weights):
                raise ConfigurationError("all mu_weights must be positive")
        if self.grouping not in ("random", "geographic"):
            raise ConfigurationError(f"unknown grouping strategy {self.grouping!r}")
        if self.subgradient_steps < 1:
            raise ConfigurationError("subgradient_steps must be >= 1")

    # linear-scale views
    @property
    def rho_bs_w(self) -> float:
        return dbm_to_watt(self.rho_bs_dbm)

    @property
    def rho_ue_w(self) -> float:
        return dbm_to_watt(self.rho_ue_dbm)

    @property
    def noise_bs_w(self) -> float:
        return dbm_to_watt(self.noise_bs_dbm)

    @property
    def noise_ue_w(self) -> float:
        return dbm_to_watt(self.noise_ue_dbm)

    @property
    def mu(self) -> np.ndarray:
        if self.mu_weights is None:
            return np.ones(self.num_ue)
        return np.asarray(self.mu_weights, dtype=float)

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        if out["mu_weights"] is not None:
            out["mu_weights"] = list(out["mu_weights"])
        return out

    def fingerprint(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True, allow_nan=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)


def load_config(path) -> ScenarioConfig:
    """Read a JSON configuration file; unknown keys are rejected."""
    with open(Path(path), encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError("configuration file must hold a JSON object")
    return ScenarioConfig.from_dict(data)


def save_config(config: ScenarioConfig, path) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def preset(name: str) -> ScenarioConfig:
    """Named parameter sets.

    ``"paper"`` is the 25-BS network (M=8, K=32, N=2, G=8); ``"desk"`` is a
    reduced network that runs in seconds per drop.
    """
    if name == "desk":
        return ScenarioConfig()
    if name == "paper":
        return ScenarioConfig(
            num_bs=25, num_bs_antennas=8, num_ue=32, num_ue_antennas=2, num_groups=8,
            tau=64, num_iterations=100, num_drops=100,
        )
    raise ConfigurationError(f"unknown preset {name!r} (expected 'paper' or 'desk')")


@dataclass(frozen=True)
class Geometry:
    bs_positions: np.ndarray  # (B, 2) meters
    ue_positions: np.ndarray  # (K, 2) meters
    distances: np.ndarray  # (B, K) meters, floored


@dataclass(frozen=True)
class Grouping:
    """Partition of the UEs into non-overlapping multicast groups."""

    members: tuple[np.ndarray, ...]
    group_of: np.ndarray

    @classmethod
    def from_labels(cls, group_of) -> "Grouping":
        group_of = np.asarray(group_of, dtype=int)
        num_groups = int(group_of.max()) + 1
        members = tuple(np.flatnonzero(group_of == g) for g in range(num_groups))
        if any(m.size == 0 for m in members):
            raise ConfigurationError("every group needs at least one UE")
        return cls(members=members, group_of=group_of)

    @property
    def num_groups(self) -> int:
        return len(self.members)

    @property
    def num_ue(self) -> int:
        return self.group_of.size

    def indicator(self) -> np.ndarray:
        """``(K, G)`` 0/1 membership matrix."""
        out = np.zeros((self.num_ue, self.num_groups))
        out[np.arange(self.num_ue), self.group_of] = 1.0
        return out


@dataclass(frozen=True)
class ChannelSet:
    h: np.ndarray  # (B, K, M, N) complex
    large_scale: np.ndarray  # (B, K) linear gains

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.h.shape

    def aggregated(self, k: int) -> np.ndarray:
        """Vertical stack of ``H[0, k] .. H[B-1, k]``, shape ``(B*M, N)``."""
        B, _, M, N = self.h.shape
        return self.h[:, k].reshape(B * M, N)

    def digest(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.h).tobytes()).hexdigest()[:16]


def build_geometry(config: ScenarioConfig, rng: np.random.Generator) -> Geometry:
    """Square BS grid plus UEs dropped uniformly over the grid's bounding square.

    With a single BS the bounding square degenerates, so UEs are dropped in a
    ``grid_spacing``-wide square centred on it.
    """
    side = math.isqrt(config.num_bs)
    if side * side != config.num_bs:
        raise ConfigurationError(f"num_bs={config.num_bs} is not a perfect square")
    ticks = np.arange(side) * config.grid_spacing
    bs = np.array([(x, y) for x in ticks for y in ticks], dtype=float)
    if side == 1:
        lo, hi = -config.grid_spacing / 2, config.grid_spacing / 2
    else:
        lo, hi = 0.0, ticks[-1]
    ue = rng.uniform(lo, hi, size=(config.num_ue, 2))
    dist = np.linalg.norm(bs[:, None, :] - ue[None, :, :], axis=-1)
    return Geometry(bs, ue, np.maximum(dist, config.min_distance))


def assign_groups(config: ScenarioConfig, rng: np.random.Generator,
                  geometry: Geometry | None = None) -> Grouping:
    """Equal-size partition of the UEs into ``num_groups`` groups.

    ``config.grouping == "random"`` shuffles the UEs; ``"geographic"`` sorts
    them by polar angle around the grid centre (requires ``geometry``) so each
    group occupies a sector.
    """
    K, G = config.num_ue, config.num_groups
    if K % G:
        raise ConfigurationError(f"num_ue={K} is not divisible by num_groups={G}")
    if config.grouping == "random":
        order = rng.permutation(K)
    else:
        if geometry is None:
            raise ConfigurationError("geographic grouping needs the geometry")
        centre = geometry.bs_positions.mean(axis=0)
        rel = geometry.ue_positions - centre
        order = np.argsort(np.arctan2(rel[:, 1], rel[:, 0]), kind="stable")
    group_of = np.empty(K, dtype=int)
    group_of[order] = np.arange(K) // (K // G)
    return Grouping.from_labels(group_of)


def path_gain(d, config: ScenarioConfig):
    """Large-scale power gain ``offset - coeff*log10(d)`` [dB] in linear scale."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    gain_db = config.pathloss_offset_db - config.pathloss_exponent_coeff * np.log10(d)
    out = db_to_linear(gain_db)
    return float(out) if out.ndim == 0 else out


def draw_channels(geometry: Geometry, config: ScenarioConfig,
                  rng: np.random.Generator, large_scale=None) -> ChannelSet:
    """Uncorrelated Rayleigh fading: ``vec(H[b,k]) ~ CN(0, delta[b,k] I)``.

    ``large_scale`` overrides the path-gain table (used by tests).
    """
    delta = path_gain(geometry.distances, config) if large_scale is None else np.asarray(large_scale, float)
    B, K = delta.shape
    shape = (B, K, config.num_bs_antennas, config.num_ue_antennas)
    std = np.sqrt(delta / 2.0)[:, :, None, None]
    h = std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return ChannelSet(h=h, large_scale=delta)


def random_unit_combiners(num_ue: int, num_antennas: int, rng: np.random.Generator) -> np.ndarray:
    """Isotropic random unit-norm combiners, shape ``(K, N)``."""
    v = rng.standard_normal((num_ue, num_antennas)) + 1j * rng.standard_normal((num_ue, num_antennas))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def random_feasible_precoders(num_bs: int, num_groups: int, num_antennas: int,
                              rho_bs: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian precoders scaled so every BS transmits exactly ``rho_bs``."""
    shape = (num_bs, num_groups, num_antennas)
    w = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    power = np.sum(np.abs(w) ** 2, axis=(1, 2), keepdims=True)
    return w * np.sqrt(rho_bs / power)
