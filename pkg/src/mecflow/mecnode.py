"""One MEC platform instance.

The node owns the producer-facing ingest path (parse, clock normalization,
privacy scrub, demand gating), the per-datatype pipelines (via
:class:`~mecflow.lifecycle.LifecycleManager`), and the per-consumer egress
taps that apply ROI, license, and SLA sampling to the processed stream.

The demand gate is the platform's efficiency contract: a sample whose
datatype has no live pipeline is dropped at the front door, unprocessed,
unbilled, and unpublished.
"""

from __future__ import annotations

import re
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from . import envelope as env_mod
from .broker import Broker, Subscription
from .envelope import BlacklistPolicy, Envelope, DEFAULT_BLACKLIST
from .lifecycle import (
    BanList,
    LifecycleManager,
    PipelineDescriptor,
    PipelineState,
    Transform,
    TrustStore,
)
from .policy import (
    Capacity,
    ConsumerTerms,
    SamplerState,
    SlaTier,
    UnknownTier,
    license_permits,
    sample_admit,
)
from .tilegrid import latlon_to_tile, tile_to_quadkey, validate_quadkey

MEC_ID_RE = re.compile(r"^[a-z0-9-]{1,64}$")

ACCEPTED = "accepted"
DISCARDED = "discarded"
REJECTED = "rejected"

DESTINATION_CLOUD = "cloud"
DESTINATION_LOCAL = "local"

TAP_QUEUE_CAPACITY = 10_000


@dataclass(frozen=True)
class IngestResult:
    """Outcome of one ingest attempt."""

    status: str
    reason: str | None = None


@dataclass(frozen=True)
class MecConfig:
    """Static identity and limits of one node."""

    mec_id: str
    tile: str
    cpu_millicores: int = 4000
    memory_mb: int = 8192
    gpu_units: int = 1
    blacklist: BlacklistPolicy = DEFAULT_BLACKLIST
    idle_grace_ms: int = 30_000
    clock_bound_ms: int = env_mod.DEFAULT_CLOCK_BOUND_MS
    endpoint: str = ""

    def __post_init__(self) -> None:
        if not MEC_ID_RE.match(self.mec_id):
            raise ValueError(f"mec_id {self.mec_id!r} must match {MEC_ID_RE.pattern}")
        validate_quadkey(self.tile)

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "MecConfig":
        cap = obj.get("capacity", {})
        blacklist = obj.get("blacklist")
        return cls(
            mec_id=obj["mec_id"],
            tile=obj["tile"],
            cpu_millicores=int(cap.get("cpu_millicores", 4000)),
            memory_mb=int(cap.get("memory_mb", 8192)),
            gpu_units=int(cap.get("gpu_units", 1)),
            blacklist=(BlacklistPolicy(frozenset(blacklist))
                       if blacklist is not None else DEFAULT_BLACKLIST),
            idle_grace_ms=int(obj.get("idle_grace_ms", 30_000)),
            clock_bound_ms=int(obj.get("clock_bound_ms", env_mod.DEFAULT_CLOCK_BOUND_MS)),
            endpoint=obj.get("endpoint", ""),
        )


@dataclass
class EgressTap:
    """Per-consumer filtered view of one pipeline's processed output.

    Forwarding order is fixed: ROI, then license, then SLA sampling; the
    sampler only counts envelopes that survived ROI and license, so the
    delivered proportion tracks the consumer's own flow.
    """

    consumer_ref: str
    datatype: str
    instance_id: str
    tier: SlaTier
    terms: ConsumerTerms
    roi: frozenset[str]
    roi_level: int
    destination: str
    sampler: SamplerState
    subscription: Subscription
    relay_hops: int
    on_deliver: Callable[[Envelope], None] | None = None
    delivered_bytes: int = 0
    forwarded_count: int = 0
    roi_filtered: int = 0
    license_filtered: int = 0
    sampled_out: int = 0
    reported_bytes: int = 0
    deliveries: deque[Envelope] = field(
        default_factory=lambda: deque(maxlen=TAP_QUEUE_CAPACITY))


@dataclass(frozen=True)
class ConsumerUsage:
    delivered_bytes: int
    destination: str
    datatype: str


@dataclass(frozen=True)
class PipelineUsage:
    datatype: str
    compute_mcpu_ms: int
    consumer_refs: tuple[str, ...]


@dataclass(frozen=True)
class UsageReport:
    """Delta accounting window pushed from a node to the cloud hub."""

    mec_id: str
    seq: int
    window_end_ms: int
    consumers: dict[str, ConsumerUsage]
    pipelines: dict[str, PipelineUsage]
    produced: dict[str, int]

    def to_obj(self) -> dict[str, Any]:
        return {
            "mec_id": self.mec_id,
            "seq": self.seq,
            "window_end_ms": self.window_end_ms,
            "consumers": {
                ref: {"delivered_bytes": u.delivered_bytes,
                      "destination": u.destination,
                      "datatype": u.datatype}
                for ref, u in sorted(self.consumers.items())
            },
            "pipelines": {
                iid: {"datatype": p.datatype,
                      "compute_mcpu_ms": p.compute_mcpu_ms,
                      "consumer_refs": list(p.consumer_refs)}
                for iid, p in sorted(self.pipelines.items())
            },
            "produced": dict(sorted(self.produced.items())),
        }

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "UsageReport":
        return cls(
            mec_id=obj["mec_id"],
            seq=int(obj["seq"]),
            window_end_ms=int(obj["window_end_ms"]),
            consumers={
                ref: ConsumerUsage(int(u["delivered_bytes"]), u["destination"],
                                   u["datatype"])
                for ref, u in obj.get("consumers", {}).items()
            },
            pipelines={
                iid: PipelineUsage(p["datatype"], int(p["compute_mcpu_ms"]),
                                   tuple(p["consumer_refs"]))
                for iid, p in obj.get("pipelines", {}).items()
            },
            produced={dt: int(v) for dt, v in obj.get("produced", {}).items()},
        )


class MecNode:
    """Producer ingestion, demand gating, pipelines, and egress on one node."""

    def __init__(self, config: MecConfig, catalog: dict[str, PipelineDescriptor],
                 trust_store: TrustStore, tier_catalog: dict[str, SlaTier], clock,
                 *, ban_list: BanList | None = None,
                 on_ban: Callable[[str, str], None] | None = None,
                 transforms: dict[str, Transform] | None = None):
        self.config = config
        self.clock = clock
        self.tier_catalog = dict(tier_catalog)
        self.broker = Broker()
        self.capacity = Capacity(config.cpu_millicores, config.memory_mb,
                                 config.gpu_units)
        self.lifecycle = LifecycleManager(
            config.mec_id, self.broker, self.capacity, catalog, trust_store, clock,
            ban_list=ban_list, idle_grace_ms=config.idle_grace_ms,
            on_ban=on_ban, transforms=transforms)
        self._lock = threading.RLock()
        self._taps: dict[str, EgressTap] = {}
        self._retired_taps: list[EgressTap] = []
        self._report_seq = 0
        self._reported_meters: dict[str, int] = {}
        self._reported_produced: dict[str, int] = {}

        self.ingested = 0
        self.accepted = 0
        self.discarded_no_demand = 0
        self.rejected = 0
        self.rejected_by_producer: dict[tuple[str, str], int] = {}
        self.produced_bytes: dict[str, int] = {}

    @property
    def mec_id(self) -> str:
        return self.config.mec_id

    # -- upload path ----------------------------------------------------------

    def ingest(self, raw: bytes | str) -> IngestResult:
        """Admit one producer sample.

        parse -> clock normalization -> privacy scrub -> demand gate.  Only
        samples whose datatype currently has a live pipeline are published
        (to ``mec/<id>/raw/<datatype>``); everything else is immediately
        discarded.  Malformed or implausible input is rejected and counted
        against the producer.
        """
        with self._lock:
            self.ingested += 1
        try:
            env = env_mod.parse_envelope(raw)
        except env_mod.MalformedEnvelope:
            return self._reject("malformed", "unknown")
        except env_mod.SchemaViolation:
            return self._reject("schema", _best_effort_producer(raw))

        try:
            env = env_mod.normalize_timestamp(env, self.clock.now_ms(),
                                              self.config.clock_bound_ms)
        except env_mod.ClockImplausible:
            return self._reject("clock", env.producer_id)

        env = env_mod.scrub(env, self.config.blacklist)

        inst = self.lifecycle.running_for(env.datatype)
        if inst is None or inst.state is not PipelineState.RUNNING:
            with self._lock:
                self.discarded_no_demand += 1
            return IngestResult(DISCARDED, "no-demand")

        self.broker.publish(self.lifecycle.raw_topic(env.datatype), env)
        with self._lock:
            self.accepted += 1
            self.produced_bytes[env.datatype] = \
                self.produced_bytes.get(env.datatype, 0) + env.size_bytes
        return IngestResult(ACCEPTED)

    def _reject(self, reason: str, producer_id: str) -> IngestResult:
        with self._lock:
            self.rejected += 1
            key = (producer_id, reason)
            self.rejected_by_producer[key] = self.rejected_by_producer.get(key, 0) + 1
        return IngestResult(REJECTED, reason)

    # -- consumer egress --------------------------------------------------------

    def attach_consumer(self, consumer_ref: str, datatype: str,
                        tier: SlaTier | str, terms: ConsumerTerms,
                        roi: frozenset[str] | set[str],
                        destination: str = DESTINATION_CLOUD,
                        on_deliver: Callable[[Envelope], None] | None = None,
                        ) -> EgressTap:
        """Create a filtered egress tap, deploying or reusing the pipeline.

        Raises:
            UnknownTier: tier name not in this node's catalog.
            ValueError: empty or mixed-level ROI, duplicate consumer ref,
                or bad destination.
            UnknownDatatype, BannedImage, InsufficientResources: from the
                pipeline acquisition.
        """
        if isinstance(tier, str):
            if tier not in self.tier_catalog:
                raise UnknownTier(tier)
            tier = self.tier_catalog[tier]
        if destination not in (DESTINATION_CLOUD, DESTINATION_LOCAL):
            raise ValueError(f"unknown destination {destination!r}")
        roi = frozenset(roi)
        if not roi:
            raise ValueError("roi must be non-empty")
        levels = {len(validate_quadkey(k)) for k in roi}
        if len(levels) != 1:
            raise ValueError("roi keys must all be at one level")

        with self._lock:
            if consumer_ref in self._taps:
                raise ValueError(f"consumer ref {consumer_ref!r} already attached")
            inst = self.lifecycle.acquire_pipeline(datatype, tier, consumer_ref)
            tap = EgressTap(
                consumer_ref=consumer_ref,
                datatype=datatype,
                instance_id=inst.id,
                tier=tier,
                terms=terms,
                roi=roi,
                roi_level=levels.pop(),
                destination=destination,
                sampler=SamplerState(tier.sampling_rate),
                subscription=self.broker.subscribe(self.lifecycle.proc_topic(datatype)),
                relay_hops=0 if destination == DESTINATION_LOCAL else 1,
                on_deliver=on_deliver,
            )
            self._taps[consumer_ref] = tap
            return tap

    def serve_local(self, consumer_ref: str, datatype: str, tier: SlaTier | str,
                    terms: ConsumerTerms, roi: frozenset[str] | set[str],
                    on_deliver: Callable[[Envelope], None] | None = None) -> EgressTap:
        """Low-latency direct access: same filters, delivery stays on the node."""
        return self.attach_consumer(consumer_ref, datatype, tier, terms, roi,
                                    destination=DESTINATION_LOCAL,
                                    on_deliver=on_deliver)

    def detach_consumer(self, consumer_ref: str) -> bool:
        """Remove a tap and release its pipeline reference."""
        with self._lock:
            tap = self._taps.pop(consumer_ref, None)
            if tap is None:
                return False
            self.broker.unsubscribe(tap.subscription.id)
            self.lifecycle.release_pipeline(tap.instance_id, consumer_ref)
            # retired taps keep their counters: final deltas still get
            # reported, and totals stay auditable after detach
            self._retired_taps.append(tap)
            return True

    def tap(self, consumer_ref: str) -> EgressTap | None:
        with self._lock:
            return self._taps.get(consumer_ref)

    def _pump_taps(self) -> int:
        with self._lock:
            taps = [self._taps[k] for k in sorted(self._taps)]
        forwarded = 0
        now = self.clock.now_ms()
        for tap in taps:
            for _, env in tap.subscription.drain():
                tile = latlon_to_tile(env.position, tap.roi_level)
                key = tile_to_quadkey(tile)
                if key not in tap.roi:
                    tap.roi_filtered += 1
                    continue
                if not license_permits(env.license, tap.terms, key, now):
                    tap.license_filtered += 1
                    continue
                admit, tap.sampler = sample_admit(tap.sampler)
                if not admit:
                    tap.sampled_out += 1
                    continue
                tap.delivered_bytes += env.size_bytes
                tap.forwarded_count += 1
                tap.deliveries.append(env)
                if tap.on_deliver is not None:
                    tap.on_deliver(env)
                forwarded += 1
        return forwarded

    def pump(self, limit: int | None = None) -> dict[str, int]:
        """Move messages through pipelines, then through taps."""
        processed = self.lifecycle.pump(limit)
        self._pump_taps()
        return processed

    def process_tick(self, elapsed_ms: int) -> dict[str, Any]:
        """One simulation step: pump, meter, autoscale, reap."""
        processed = self.pump()
        running = [i for i in self.lifecycle.instances()
                   if i.state is PipelineState.RUNNING]
        for inst in running:
            self.lifecycle.meter_compute(inst, elapsed_ms)
            rate = processed.get(inst.id, 0) * 1000.0 / elapsed_ms if elapsed_ms else 0.0
            self.lifecycle.autoscale(inst, rate)
        reaped = self.lifecycle.reap_idle()
        return {"processed": processed, "reaped": reaped}

    # -- downlink ---------------------------------------------------------------

    def downlink(self, datatype: str, notification: Any) -> int:
        """Broadcast an alarm/notification to subscribed devices; no pipeline."""
        return self.broker.broadcast_downlink(datatype, notification)

    def subscribe_downlink(self, datatype: str,
                           capacity: int | None = None) -> Subscription:
        """Device-side subscription to ``downlink/<datatype>``."""
        return self.broker.subscribe(f"downlink/{datatype}", capacity)

    # -- accounting ---------------------------------------------------------------

    def report_usage(self, now_ms: int | None = None) -> UsageReport:
        """Produce the next delta window (consumed bytes, compute, produced volume).

        Committing: each call advances the reporting watermark, so every
        byte and millicore-millisecond appears in exactly one report.
        """
        now = self.clock.now_ms() if now_ms is None else now_ms
        with self._lock:
            self._report_seq += 1
            consumers: dict[str, ConsumerUsage] = {}
            for tap in self._retired_taps:
                delta = tap.delivered_bytes - tap.reported_bytes
                tap.reported_bytes = tap.delivered_bytes
                if delta:
                    consumers[tap.consumer_ref] = ConsumerUsage(
                        delta, tap.destination, tap.datatype)
            for ref in sorted(self._taps):
                tap = self._taps[ref]
                delta = tap.delivered_bytes - tap.reported_bytes
                tap.reported_bytes = tap.delivered_bytes
                if ref in consumers:
                    delta += consumers[ref].delivered_bytes
                consumers[ref] = ConsumerUsage(delta, tap.destination, tap.datatype)

            pipelines: dict[str, PipelineUsage] = {}
            for inst in self.lifecycle.instances():
                delta = inst.compute_meter_mcpu_ms - self._reported_meters.get(inst.id, 0)
                self._reported_meters[inst.id] = inst.compute_meter_mcpu_ms
                if delta or inst.state is PipelineState.RUNNING:
                    pipelines[inst.id] = PipelineUsage(
                        inst.datatype, delta, tuple(sorted(inst.consumer_tiers)))

            produced: dict[str, int] = {}
            for dt in sorted(self.produced_bytes):
                delta = self.produced_bytes[dt] - self._reported_produced.get(dt, 0)
                self._reported_produced[dt] = self.produced_bytes[dt]
                if delta:
                    produced[dt] = delta

            return UsageReport(self.mec_id, self._report_seq, now,
                               consumers, pipelines, produced)

    def apply_ban(self, image_ref: str, reason: str) -> bool:
        """Accept a hub-propagated ban; idempotent, always acknowledged."""
        self.lifecycle.ban_list.add(image_ref, reason, self.clock.now_ms())
        return True

    def consumer_totals(self) -> dict[str, dict[str, Any]]:
        """Lifetime per-consumer delivery counters, active and retired taps."""
        with self._lock:
            totals: dict[str, dict[str, Any]] = {}
            for tap in self._retired_taps + [self._taps[k] for k in sorted(self._taps)]:
                entry = totals.setdefault(tap.consumer_ref, {
                    "delivered_bytes": 0, "forwarded": 0,
                    "destination": tap.destination, "datatype": tap.datatype,
                })
                entry["delivered_bytes"] += tap.delivered_bytes
                entry["forwarded"] += tap.forwarded_count
            return totals

    def metrics(self) -> dict[str, Any]:
        with self._lock:
            taps = {
                ref: {
                    "delivered_bytes": tap.delivered_bytes,
                    "forwarded": tap.forwarded_count,
                    "roi_filtered": tap.roi_filtered,
                    "license_filtered": tap.license_filtered,
                    "sampled_out": tap.sampled_out,
                    "destination": tap.destination,
                }
                for ref, tap in sorted(self._taps.items())
            }
            return {
                "mec_id": self.mec_id,
                "ingested": self.ingested,
                "accepted": self.accepted,
                "discarded_no_demand": self.discarded_no_demand,
                "rejected": self.rejected,
                "produced_bytes": dict(sorted(self.produced_bytes.items())),
                "taps": taps,
                "lifecycle": self.lifecycle.metrics(),
                "broker": self.broker.metrics(),
                "capacity": {
                    "cpu_millicores_free": self.capacity.cpu_millicores_free,
                    "memory_mb_free": self.capacity.memory_mb_free,
                    "gpu_units_free": self.capacity.gpu_units_free,
                },
            }


def _best_effort_producer(raw: bytes | str) -> str:
    """Pull a producer id out of an invalid message for reject counters."""
    import json
    try:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        obj = json.loads(raw)
        pid = obj.get("producer_id") if isinstance(obj, dict) else None
        return pid if isinstance(pid, str) and pid else "unknown"
    except Exception:
        return "unknown"
