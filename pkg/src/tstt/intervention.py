"""Hypothetical pulse-oximeter devices as group-specific error laws.

A device (arm) gives each group ``g`` a normal measurement error
``N(mu_g, sigma_g**2)``; intervened SpO2 is ``clamp(sao2 + error, 0, 100)``.

Random numbers for the g-computation are *common* across arms: each record
owns a fixed set of standard-normal deviates ``u`` (see
:class:`RecordStreams`), and every arm maps them through
``mu_g + sigma_g * u``. Arm contrasts are then free of independent simulation
noise, and a contrast of an arm with itself is exactly zero.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import ndtri

from .cohort import Record
from .errors import ConfigError

# defaults: error law of the advantaged group and the bias grid
MU0 = 0.62
SIGMA0 = 1.61
DELTA_MUS = (2.0, 1.0, 0.0)
DELTA_SIGMAS = (3.0, 1.5, 0.0)


@dataclass(frozen=True)
class InterventionArm:
    name: str
    mu0: float
    sigma0: float
    mu1: float
    sigma1: float

    def __post_init__(self):
        if not (self.sigma0 > 0 and self.sigma1 > 0):
            raise ConfigError(f"arm {self.name!r}: error SDs must be positive (got {self.sigma0}, {self.sigma1})")

    @classmethod
    def from_deltas(cls, name, mu0, sigma0, delta_mu, delta_sigma) -> "InterventionArm":
        return cls(str(name), float(mu0), float(sigma0), float(mu0 + delta_mu), float(sigma0 + delta_sigma))

    @property
    def delta_mu(self) -> float:
        return self.mu1 - self.mu0

    @property
    def delta_sigma(self) -> float:
        return self.sigma1 - self.sigma0

    @property
    def is_unbiased(self) -> bool:
        return self.delta_mu == 0 and self.delta_sigma == 0

    def mu(self, group):
        return np.where(np.asarray(group) == 1, self.mu1, self.mu0)

    def sigma(self, group):
        return np.where(np.asarray(group) == 1, self.sigma1, self.sigma0)


@dataclass(frozen=True)
class ArmSet:
    """Ordered arms with exactly one reference."""

    arms: tuple[InterventionArm, ...]
    reference_name: str

    def __post_init__(self):
        names = [a.name for a in self.arms]
        if len(set(names)) != len(names):
            raise ConfigError(f"arm names must be unique: {names}")
        if names.count(self.reference_name) != 1:
            raise ConfigError(f"reference arm {self.reference_name!r} not among arms {names}")

    def __iter__(self) -> Iterator[InterventionArm]:
        return iter(self.arms)

    def __len__(self):
        return len(self.arms)

    def __getitem__(self, name: str) -> InterventionArm:
        for arm in self.arms:
            if arm.name == name:
                return arm
        raise KeyError(name)

    @property
    def reference(self) -> InterventionArm:
        return self[self.reference_name]

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.arms]

    def reordered(self, names: Sequence[str]) -> "ArmSet":
        return replace(self, arms=tuple(self[n] for n in names))

    @classmethod
    def from_config(cls, spec: Mapping | None) -> "ArmSet":
        """Parse ``{"mu0", "sigma0", "arms": [{"name", "delta_mu", "delta_sigma", "reference"?}]}``.

        Without an ``arms`` list the nine default devices are built. If no arm
        is flagged ``reference`` the first arm with zero bias is used.
        """
        spec = dict(spec or {})
        mu0 = float(spec.get("mu0", MU0))
        sigma0 = float(spec.get("sigma0", SIGMA0))
        if "arms" not in spec:
            return standard_arm_set(mu0, sigma0, spec.get("delta_mus", DELTA_MUS),
                                    spec.get("delta_sigmas", DELTA_SIGMAS))
        arms, ref = [], []
        try:
            for item in spec["arms"]:
                arm = InterventionArm.from_deltas(item["name"], mu0, sigma0, float(item["delta_mu"]),
                                                  float(item["delta_sigma"]))
                arms.append(arm)
                if item.get("reference"):
                    ref.append(arm.name)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid arm definition: {exc}") from exc
        if len(ref) > 1:
            raise ConfigError(f"exactly one reference arm allowed, got {ref}")
        if not ref:
            unbiased = [a.name for a in arms if a.is_unbiased]
            if not unbiased:
                raise ConfigError("no reference arm flagged and no arm with zero bias")
            ref = unbiased[:1]
        return cls(tuple(arms), ref[0])

    def to_config(self) -> dict:
        return {"mu0": self.reference.mu0, "sigma0": self.reference.sigma0,
                "arms": [{"name": a.name, "delta_mu": a.delta_mu, "delta_sigma": a.delta_sigma,
                          "reference": a.name == self.reference_name} for a in self.arms]}


def standard_arm_set(mu0=MU0, sigma0=SIGMA0, delta_mus: Iterable[float] = DELTA_MUS,
                     delta_sigmas: Iterable[float] = DELTA_SIGMAS) -> ArmSet:
    """Full factorial of (delta_mu, delta_sigma) with the (0, 0) arm as reference.

    Arms are named ``z0`` (reference), then mean-only bias, SD-only bias and
    combined bias in the order the deltas are given, which numbers the default
    grid ``z0 .. z8``.
    """
    if not sigma0 > 0:
        raise ConfigError("sigma0 must be positive")
    dmus = [float(d) for d in delta_mus]
    dsigs = [float(d) for d in delta_sigmas]
    for ds in dsigs:
        if not sigma0 + ds > 0:
            raise ConfigError(f"sigma0 + delta_sigma = {sigma0 + ds} is not positive")
    pairs = [(0.0, 0.0)] if (0.0 in dmus and 0.0 in dsigs) else []
    if not pairs:
        raise ConfigError("the bias grid must include delta_mu = 0 and delta_sigma = 0 for the reference arm")
    pairs += [(dm, 0.0) for dm in dmus if dm != 0 and 0.0 in dsigs]
    pairs += [(0.0, ds) for ds in dsigs if ds != 0]
    pairs += [(dm, ds) for dm in dmus if dm != 0 for ds in dsigs if ds != 0]
    arms = tuple(InterventionArm.from_deltas(f"z{i}", mu0, sigma0, dm, ds) for i, (dm, ds) in enumerate(pairs))
    return ArmSet(arms, "z0")


def spo2_from_deviates(arm: InterventionArm, group, sao2, u):
    """Map standard-normal deviates to intervened SpO2 under ``arm``."""
    group = np.asarray(group)
    sao2 = np.asarray(sao2, dtype=float)
    u = np.asarray(u, dtype=float)
    mu = arm.mu(group)
    sigma = arm.sigma(group)
    if u.ndim == sao2.ndim + 1:
        sao2 = sao2[..., None]
        mu = np.asarray(mu)[..., None]
        sigma = np.asarray(sigma)[..., None]
    return np.clip(sao2 + mu + sigma * u, 0.0, 100.0)


def draw_spo2(arm: InterventionArm, group, sao2, rng: np.random.Generator):
    """One intervened SpO2 per ``sao2`` value: ``clamp(sao2 + N(mu_g, sigma_g^2), 0, 100)``."""
    u = rng.standard_normal(np.shape(sao2))
    out = spo2_from_deviates(arm, group, sao2, u)
    return float(out) if np.ndim(out) == 0 else out


def role_swap(obj):
    """Exchange the exposure and SaO2 slots of a record or a frame of records."""
    if isinstance(obj, Record):
        return replace(obj, spo2=obj.sao2, sao2=obj.spo2)
    if isinstance(obj, pd.DataFrame):
        out = obj.copy()
        out["spo2"], out["sao2"] = obj["sao2"].to_numpy(), obj["spo2"].to_numpy()
        return out
    raise TypeError(f"role_swap expects a Record or DataFrame, got {type(obj).__name__}")


# ---------------------------------------------------------------------------
# record-keyed common random numbers
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _hash64(value) -> int:
    return int.from_bytes(hashlib.blake2b(repr(value).encode(), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RecordStreams:
    """Standard-normal deviates keyed by (seed, stream, person_id, window, draw).

    Every record gets the same deviates no matter how the cohort is ordered,
    subset, split across workers or which arm asks for them.
    """

    seed: int = 0
    stream: str = "spo2"

    def record_keys(self, person_ids, windows) -> np.ndarray:
        codes, uniques = pd.factorize(pd.Series(person_ids, dtype=object), sort=False)
        person_hash = np.array([_hash64(p) for p in uniques], dtype=np.uint64)[codes]
        base = np.uint64(_hash64((int(self.seed), self.stream)))
        with np.errstate(over="ignore"):
            key = _mix64(person_hash ^ base)
            return _mix64(key ^ (np.asarray(windows, dtype=np.int64).astype(np.uint64) * _M1))

    def normals(self, person_ids, windows, draws: int) -> np.ndarray:
        """``(n_records, draws)`` array of N(0, 1) deviates."""
        if draws < 1:
            raise ConfigError("number of draws must be at least 1")
        keys = self.record_keys(person_ids, windows)
        with np.errstate(over="ignore"):
            counters = np.arange(1, draws + 1, dtype=np.uint64) * _GOLDEN
            bits = _mix64(keys[:, None] ^ counters[None, :])
        uniform = ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
        return ndtri(uniform)

    def for_frame(self, frame: pd.DataFrame, draws: int) -> np.ndarray:
        return self.normals(frame["person_id"].to_numpy(), frame["window"].to_numpy(), draws)
