"""SLA tiers, admission control, deterministic subsampling, license matching.

A tier buys two things: a compute reservation on the serving node and a
sampling rate on the consumer's delivered flow.  Sampling is count-based
error diffusion, so after N samples at rate p/q exactly floor(N*p/q) have
been admitted, deterministically and order-preservingly.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Any

from .tilegrid import quadkey_contains
from .envelope import LicenseTag


class InsufficientResources(Exception):
    """Admission refused; ``resource`` names the first limiting resource."""

    def __init__(self, resource: str, message: str | None = None):
        super().__init__(message or f"insufficient {resource}")
        self.resource = resource


class AlreadyReleased(Exception):
    """A reservation was released twice."""


class UnknownTier(KeyError):
    """Requested tier name is not in the catalog."""


def as_rate(value: Any) -> Fraction:
    """Normalize a config rate (number, decimal string, or 'p/q') to a Fraction.

    Floats go through their shortest decimal repr, so 0.1 means exactly 1/10.
    """
    if isinstance(value, Fraction):
        rate = value
    elif isinstance(value, float):
        rate = Fraction(repr(value))
    elif isinstance(value, (int, str)):
        rate = Fraction(value)
    else:
        raise ValueError(f"cannot interpret sampling rate {value!r}")
    if not 0 < rate <= 1:
        raise ValueError(f"sampling rate {rate} outside (0, 1]")
    return rate


@dataclass(frozen=True)
class SlaTier:
    """Named service level: sampling rate plus per-replica compute profile."""

    name: str
    sampling_rate: Fraction
    cpu_millicores: int
    memory_mb: int
    gpu: bool = False
    max_replicas: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "sampling_rate", as_rate(self.sampling_rate))
        if self.cpu_millicores <= 0 or self.memory_mb <= 0:
            raise ValueError("cpu_millicores and memory_mb must be positive")
        if self.max_replicas < 1:
            raise ValueError("max_replicas must be >= 1")

    @property
    def gpu_units(self) -> int:
        return 1 if self.gpu else 0


def default_tier_catalog() -> dict[str, SlaTier]:
    """Shipped defaults; deployments override via config."""
    return {
        "small": SlaTier("small", Fraction(1, 10), 250, 256, gpu=False, max_replicas=1),
        "medium": SlaTier("medium", Fraction(1, 2), 500, 512, gpu=False, max_replicas=2),
        "large": SlaTier("large", Fraction(1), 1000, 1024, gpu=True, max_replicas=4),
    }


def tier_catalog_from_config(entries: list[dict[str, Any]] | dict[str, Any]) -> dict[str, SlaTier]:
    """Build a catalog from config entries (list of objects or name->object map)."""
    if isinstance(entries, dict):
        entries = [{"name": name, **spec} for name, spec in entries.items()]
    catalog: dict[str, SlaTier] = {}
    for spec in entries:
        tier = SlaTier(
            name=spec["name"],
            sampling_rate=as_rate(spec["sampling_rate"]),
            cpu_millicores=int(spec["cpu_millicores"]),
            memory_mb=int(spec["memory_mb"]),
            gpu=bool(spec.get("gpu", False)),
            max_replicas=int(spec.get("max_replicas", 1)),
        )
        catalog[tier.name] = tier
    return catalog


@dataclass(frozen=True)
class ConsumerTerms:
    """What the consumer intends to do with the data."""

    commercial_use: bool = False
    redistribution: bool = False


def license_permits(lic: LicenseTag, terms: ConsumerTerms,
                    delivery_tile: str, now_ms: int) -> bool:
    """True iff the owner's license covers this consumer, place, and time.

    Each consumer intention must be granted; a geo scope must contain the
    delivery tile; an expiry must lie in the future.
    """
    if terms.commercial_use and not lic.commercial_use:
        return False
    if terms.redistribution and not lic.redistribution:
        return False
    if lic.geo_scope is not None and not quadkey_contains(lic.geo_scope, delivery_tile):
        return False
    if lic.expiry_ms is not None and now_ms >= lic.expiry_ms:
        return False
    return True


@dataclass(frozen=True)
class SamplerState:
    """Error-diffusion sampler: accepted == floor(seen * rate) at all times."""

    rate: Fraction
    seen: int = 0
    accepted: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "rate", as_rate(self.rate))


def sample_admit(state: SamplerState) -> tuple[bool, SamplerState]:
    """Count one sample; admit iff the exact quota floor(seen*rate) advanced."""
    seen = state.seen + 1
    quota = (seen * state.rate.numerator) // state.rate.denominator
    admit = quota > state.accepted
    return admit, replace(state, seen=seen, accepted=quota if admit else state.accepted)


@dataclass
class Reservation:
    """Currently held slice of a node's capacity; released exactly once."""

    cpu_millicores: int
    memory_mb: int
    gpu_units: int
    released: bool = False


class Capacity:
    """Free compute on one node; grants and releases are atomic."""

    def __init__(self, cpu_millicores: int, memory_mb: int, gpu_units: int = 0):
        if min(cpu_millicores, memory_mb, gpu_units) < 0:
            raise ValueError("capacity amounts must be non-negative")
        self.total_cpu_millicores = cpu_millicores
        self.total_memory_mb = memory_mb
        self.total_gpu_units = gpu_units
        self._free_cpu = cpu_millicores
        self._free_mem = memory_mb
        self._free_gpu = gpu_units
        self._lock = threading.Lock()

    @property
    def cpu_millicores_free(self) -> int:
        return self._free_cpu

    @property
    def memory_mb_free(self) -> int:
        return self._free_mem

    @property
    def gpu_units_free(self) -> int:
        return self._free_gpu

    def _limiting(self, cpu: int, mem: int, gpu: int) -> str | None:
        if cpu > self._free_cpu:
            return "cpu"
        if mem > self._free_mem:
            return "memory"
        if gpu > self._free_gpu:
            return "gpu"
        return None

    def take(self, cpu: int, mem: int, gpu: int) -> None:
        """Atomically subtract; raises with the first limiting resource named."""
        with self._lock:
            limiting = self._limiting(cpu, mem, gpu)
            if limiting is not None:
                raise InsufficientResources(limiting)
            self._free_cpu -= cpu
            self._free_mem -= mem
            self._free_gpu -= gpu

    def give(self, cpu: int, mem: int, gpu: int) -> None:
        with self._lock:
            self._free_cpu += cpu
            self._free_mem += mem
            self._free_gpu += gpu
            if (self._free_cpu > self.total_cpu_millicores
                    or self._free_mem > self.total_memory_mb
                    or self._free_gpu > self.total_gpu_units):
                raise AssertionError("capacity released beyond initial totals")


def admit_request(tier: SlaTier, cap: Capacity) -> Reservation:
    """Reserve one replica's worth of the tier's profile, or refuse.

    Raises:
        InsufficientResources: the deployment request must be refused here;
            ``resource`` names what ran out first (cpu, then memory, then gpu).
    """
    cap.take(tier.cpu_millicores, tier.memory_mb, tier.gpu_units)
    return Reservation(tier.cpu_millicores, tier.memory_mb, tier.gpu_units)


def release_reservation(reservation: Reservation, cap: Capacity) -> None:
    """Return a grant to the pool; a second release raises AlreadyReleased."""
    if reservation.released:
        raise AlreadyReleased("reservation already released")
    reservation.released = True
    cap.give(reservation.cpu_millicores, reservation.memory_mb, reservation.gpu_units)
