"""Deterministic scenario engine for the whole platform.

A scenario describes nodes, moving producers, scheduled consumers, and
hosted-service trials; :func:`run_scenario` executes it tick by tick on a
simulated clock against the same node/hub code that serves the HTTP APIs.
Identical scenario + seed gives bit-identical metrics and export files.

The ``always_on`` baseline mode provisions a pipeline for every produced
datatype up front, regardless of demand; comparing its compute meter with
the demand-driven run quantifies what on-demand provisioning saves.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

from .broker import Subscription
from .clockutil import SimClock
from .cloudhub import (
    SCOPE_ADMIN,
    SCOPE_CONSUME,
    SCOPE_PRODUCE,
    AccessToken,
    AllAttachesFailed,
    CloudHub,
    DirectNodeLink,
    NoMatchingMec,
    NoServingMec,
    TokenStore,
)
from .envelope import (
    DEFAULT_BLACKLIST,
    BlacklistPolicy,
    Envelope,
    LicenseTag,
    serialize_envelope,
)
from .lifecycle import (
    BannedImage,
    HostedServiceDescriptor,
    PipelineDescriptor,
    PipelineState,
    TrustSandbox,
    generate_signer,
    sign_payload,
)
from .mecnode import ACCEPTED, DISCARDED, MecConfig, MecNode, REJECTED
from .policy import (
    ConsumerTerms,
    InsufficientResources,
    SlaTier,
    default_tier_catalog,
    tier_catalog_from_config,
)
from .tilegrid import (
    BoundingBox,
    GeoPosition,
    cover_roi,
    latlon_to_tile,
    tile_to_quadkey,
)

DEFAULT_START_EPOCH_MS = 1_600_000_000_000
DEFAULT_REGISTRATION_LEVEL = 14
DEFAULT_ROI_LEVEL = 14
DEFAULT_RESOLVE_PERIOD_MS = 5_000
DEFAULT_HEARTBEAT_PERIOD_MS = 10_000

ADMIN_TOKEN = "tok-admin"
PRODUCE_TOKEN = "tok-produce"
CONSUME_TOKEN = "tok-consume"

METERS_PER_DEGREE = 111_320.0


class ScenarioInvalid(ValueError):
    """Scenario violates a structural constraint; message names it."""


class IoFailure(OSError):
    """Metrics export could not write its files."""


# --------------------------------------------------------------------------
# Scenario description


@dataclass(frozen=True)
class Waypoint:
    lat: float
    lon: float
    speed_mps: float | None = None
    dwell_ms: int = 0


@dataclass(frozen=True)
class ProducerSpec:
    """A vehicle or roadside unit pushing one datatype along a trace."""

    producer_id: str
    datatype: str
    rate_hz: float
    payload_bytes: int
    license: LicenseTag
    trace: tuple[Waypoint, ...]
    resolve_period_ms: int = DEFAULT_RESOLVE_PERIOD_MS
    clock_offset_ms: int = 0
    unreported_skew_ms: int = 0
    payload_fields: dict[str, Any] = field(default_factory=dict)
    opaque: bool = False


@dataclass(frozen=True)
class ConsumerSpec:
    """A third-party application consuming one datatype over a region."""

    consumer_id: str
    datatype: str
    tier: str
    terms: ConsumerTerms
    roi_bbox: BoundingBox
    start_ms: int
    stop_ms: int
    destination: str = "cloud"


@dataclass(frozen=True)
class ServiceBehavior:
    """What a hosted-service candidate actually does in its trust run."""

    subscribe_topics: tuple[str, ...]
    publish_topic: str
    publish_bytes: int
    crash: bool = False


@dataclass(frozen=True)
class HostedServiceTrial:
    """One third-party container submitted for trust verification."""

    service_id: str
    declared_topics: tuple[str, ...]
    declared_volume_bytes: int
    image_ref: str
    target_mec: str
    behavior: ServiceBehavior
    at_ms: int = 0


@dataclass(frozen=True)
class MecSpec:
    """One node: location (tile is derived at the registration level) and size."""

    mec_id: str
    lat: float
    lon: float
    cpu_millicores: int = 4000
    memory_mb: int = 8192
    gpu_units: int = 1
    tile: str | None = None


@dataclass(frozen=True)
class Scenario:
    seed: int
    duration_ms: int
    tick_ms: int
    mecs: tuple[MecSpec, ...]
    producers: tuple[ProducerSpec, ...] = ()
    consumers: tuple[ConsumerSpec, ...] = ()
    hosted_services: tuple[HostedServiceTrial, ...] = ()
    registration_level: int = DEFAULT_REGISTRATION_LEVEL
    roi_level: int = DEFAULT_ROI_LEVEL
    start_epoch_ms: int = DEFAULT_START_EPOCH_MS
    tiers: dict[str, SlaTier] = field(default_factory=default_tier_catalog)
    blacklist: BlacklistPolicy = DEFAULT_BLACKLIST
    idle_grace_ms: int = 30_000
    clock_bound_ms: int = 60_000
    heartbeat_period_ms: int = DEFAULT_HEARTBEAT_PERIOD_MS
    baseline_tier: str = "small"
    per_replica_capacity_msgs_per_s: float = 50.0

    def validate(self) -> None:
        if self.tick_ms <= 0 or self.duration_ms <= 0:
            raise ScenarioInvalid("tick_ms and duration_ms must be positive")
        if self.duration_ms % self.tick_ms != 0:
            raise ScenarioInvalid("tick_ms must divide duration_ms")
        if not 1 <= self.registration_level <= 23 or not 1 <= self.roi_level <= 23:
            raise ScenarioInvalid("registration_level and roi_level must be in [1, 23]")
        if not self.mecs:
            raise ScenarioInvalid("at least one MEC is required")
        if len({m.mec_id for m in self.mecs}) != len(self.mecs):
            raise ScenarioInvalid("mec_id values must be unique")
        if len({p.producer_id for p in self.producers}) != len(self.producers):
            raise ScenarioInvalid("producer_id values must be unique")
        if len({c.consumer_id for c in self.consumers}) != len(self.consumers):
            raise ScenarioInvalid("consumer_id values must be unique")
        if self.baseline_tier not in self.tiers:
            raise ScenarioInvalid(f"baseline tier {self.baseline_tier!r} not in catalog")
        for p in self.producers:
            if p.rate_hz <= 0:
                raise ScenarioInvalid(f"producer {p.producer_id}: rate_hz must be > 0")
            if not p.trace:
                raise ScenarioInvalid(f"producer {p.producer_id}: trace must be non-empty")
            if p.payload_bytes < 0:
                raise ScenarioInvalid(f"producer {p.producer_id}: payload_bytes < 0")
            for wp in p.trace[:-1]:
                if wp.speed_mps is None or wp.speed_mps <= 0:
                    raise ScenarioInvalid(
                        f"producer {p.producer_id}: every non-final waypoint "
                        f"needs speed_mps > 0")
        for c in self.consumers:
            if not 0 <= c.start_ms < c.stop_ms <= self.duration_ms:
                raise ScenarioInvalid(
                    f"consumer {c.consumer_id}: need 0 <= start < stop <= duration")
            if c.tier not in self.tiers:
                raise ScenarioInvalid(
                    f"consumer {c.consumer_id}: tier {c.tier!r} not in catalog")
            if c.destination not in ("cloud", "local"):
                raise ScenarioInvalid(
                    f"consumer {c.consumer_id}: bad destination {c.destination!r}")
        mec_ids = {m.mec_id for m in self.mecs}
        for trial in self.hosted_services:
            if trial.target_mec not in mec_ids:
                raise ScenarioInvalid(
                    f"hosted service {trial.service_id}: unknown target MEC")
            if not trial.declared_topics:
                raise ScenarioInvalid(
                    f"hosted service {trial.service_id}: declared_topics empty")

    # -- JSON (the scenario file format) ------------------------------------

    @classmethod
    def from_obj(cls, obj: dict[str, Any]) -> "Scenario":
        try:
            tiers = default_tier_catalog()
            if "tiers" in obj:
                tiers.update(tier_catalog_from_config(obj["tiers"]))
            scenario = cls(
                seed=int(obj["seed"]),
                duration_ms=int(obj["duration_ms"]),
                tick_ms=int(obj["tick_ms"]),
                registration_level=int(obj.get("registration_level",
                                               DEFAULT_REGISTRATION_LEVEL)),
                roi_level=int(obj.get("roi_level", DEFAULT_ROI_LEVEL)),
                start_epoch_ms=int(obj.get("start_epoch_ms", DEFAULT_START_EPOCH_MS)),
                tiers=tiers,
                blacklist=(BlacklistPolicy(frozenset(obj["blacklist"]))
                           if "blacklist" in obj else DEFAULT_BLACKLIST),
                idle_grace_ms=int(obj.get("idle_grace_ms", 30_000)),
                clock_bound_ms=int(obj.get("clock_bound_ms", 60_000)),
                heartbeat_period_ms=int(obj.get("heartbeat_period_ms",
                                                DEFAULT_HEARTBEAT_PERIOD_MS)),
                baseline_tier=obj.get("baseline_tier", "small"),
                per_replica_capacity_msgs_per_s=float(
                    obj.get("per_replica_capacity_msgs_per_s", 50.0)),
                mecs=tuple(_mec_from_obj(m) for m in obj["mecs"]),
                producers=tuple(_producer_from_obj(p) for p in obj.get("producers", [])),
                consumers=tuple(_consumer_from_obj(c) for c in obj.get("consumers", [])),
                hosted_services=tuple(_trial_from_obj(t)
                                      for t in obj.get("hosted_services", [])),
            )
        except ScenarioInvalid:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioInvalid(f"bad scenario: {exc}") from exc
        scenario.validate()
        return scenario

    @classmethod
    def from_json(cls, text: str | bytes) -> "Scenario":
        try:
            obj = json.loads(text)
        except ValueError as exc:
            raise ScenarioInvalid(f"scenario is not valid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise ScenarioInvalid("scenario must be a JSON object")
        return cls.from_obj(obj)


def _mec_from_obj(obj: dict[str, Any]) -> MecSpec:
    cap = obj.get("capacity", {})
    return MecSpec(
        mec_id=obj["mec_id"],
        lat=float(obj.get("lat", 0.0)),
        lon=float(obj.get("lon", 0.0)),
        cpu_millicores=int(cap.get("cpu_millicores", 4000)),
        memory_mb=int(cap.get("memory_mb", 8192)),
        gpu_units=int(cap.get("gpu_units", 1)),
        tile=obj.get("tile"),
    )


def _license_from_obj(obj: dict[str, Any]) -> LicenseTag:
    return LicenseTag(
        commercial_use=bool(obj.get("commercial_use", False)),
        redistribution=bool(obj.get("redistribution", False)),
        geo_scope=obj.get("geo_scope"),
        expiry_ms=obj.get("expiry_ms"),
    )


def _producer_from_obj(obj: dict[str, Any]) -> ProducerSpec:
    return ProducerSpec(
        producer_id=obj["producer_id"],
        datatype=obj["datatype"],
        rate_hz=float(obj["rate_hz"]),
        payload_bytes=int(obj.get("payload_bytes", 64)),
        license=_license_from_obj(obj.get("license", {})),
        trace=tuple(Waypoint(float(w["lat"]), float(w["lon"]),
                             w.get("speed_mps"), int(w.get("dwell_ms", 0)))
                    for w in obj["trace"]),
        resolve_period_ms=int(obj.get("resolve_period_ms", DEFAULT_RESOLVE_PERIOD_MS)),
        clock_offset_ms=int(obj.get("clock_offset_ms", 0)),
        unreported_skew_ms=int(obj.get("unreported_skew_ms", 0)),
        payload_fields=obj.get("payload_fields", {}),
        opaque=bool(obj.get("opaque", False)),
    )


def _consumer_from_obj(obj: dict[str, Any]) -> ConsumerSpec:
    terms = obj.get("terms", {})
    south, west, north, east = obj["roi_bbox"]
    return ConsumerSpec(
        consumer_id=obj["consumer_id"],
        datatype=obj["datatype"],
        tier=obj["tier"],
        terms=ConsumerTerms(bool(terms.get("commercial_use", False)),
                            bool(terms.get("redistribution", False))),
        roi_bbox=BoundingBox(float(south), float(west), float(north), float(east)),
        start_ms=int(obj["start_ms"]),
        stop_ms=int(obj["stop_ms"]),
        destination=obj.get("destination", "cloud"),
    )


def _trial_from_obj(obj: dict[str, Any]) -> HostedServiceTrial:
    behavior = obj["behavior"]
    declared = tuple(obj["declared_topics"])
    return HostedServiceTrial(
        service_id=obj["service_id"],
        declared_topics=declared,
        declared_volume_bytes=int(obj["declared_volume_bytes"]),
        image_ref=obj["image_ref"],
        target_mec=obj["target_mec"],
        behavior=ServiceBehavior(
            subscribe_topics=tuple(behavior.get("subscribe_topics", declared)),
            publish_topic=behavior.get("publish_topic", declared[0]),
            publish_bytes=int(behavior.get("publish_bytes", 0)),
            crash=bool(behavior.get("crash", False)),
        ),
        at_ms=int(obj.get("at_ms", 0)),
    )


# --------------------------------------------------------------------------
# Movement


def _leg_meters(a: Waypoint, b: Waypoint) -> float:
    """Flat-earth leg length; good enough at vehicle scales."""
    mid_lat = math.radians((a.lat + b.lat) / 2.0)
    dx = (b.lon - a.lon) * METERS_PER_DEGREE * math.cos(mid_lat)
    dy = (b.lat - a.lat) * METERS_PER_DEGREE
    return math.hypot(dx, dy)


def vehicle_position(spec: ProducerSpec, t_ms: int) -> GeoPosition:
    """Piecewise-linear position along the trace; held at the final waypoint.

    Each waypoint dwells for its ``dwell_ms`` and then travels to the next
    waypoint at its ``speed_mps``.
    """
    t = float(t_ms)
    trace = spec.trace
    for i, wp in enumerate(trace):
        if t <= wp.dwell_ms:
            return GeoPosition(wp.lat, wp.lon)
        t -= wp.dwell_ms
        if i == len(trace) - 1:
            break
        nxt = trace[i + 1]
        leg_ms = _leg_meters(wp, nxt) / wp.speed_mps * 1000.0
        if t < leg_ms:
            f = t / leg_ms
            return GeoPosition(wp.lat + (nxt.lat - wp.lat) * f,
                               wp.lon + (nxt.lon - wp.lon) * f)
        t -= leg_ms
    last = trace[-1]
    return GeoPosition(last.lat, last.lon)


def count_handovers(resolved: list[str | None]) -> int:
    """Adjacent pairs in a serving-MEC resolution sequence that differ."""
    return sum(1 for a, b in zip(resolved, resolved[1:]) if a != b)


# --------------------------------------------------------------------------
# Run metrics


@dataclass
class TickRow:
    tick: int
    instances: int
    accepted: int
    discarded: int
    forwarded_bytes: int


@dataclass
class RunMetrics:
    """Everything a scenario run measures.  ingested == accepted + discarded + rejected."""

    ingested: int = 0
    accepted: int = 0
    discarded_no_demand: int = 0
    rejected: int = 0
    unrouted: int = 0
    forwarded_bytes: dict[str, int] = field(default_factory=dict)
    forwarded_count: dict[str, int] = field(default_factory=dict)
    billing: dict[str, dict[str, int]] = field(default_factory=dict)
    pipelines_deployed: int = 0
    pipelines_reaped: int = 0
    peak_instances: int = 0
    handovers: dict[str, int] = field(default_factory=dict)
    compute_mcpu_ms: dict[str, int] = field(default_factory=dict)
    unattributed_compute_mcpu_ms: int = 0
    hosted_trials: dict[str, str] = field(default_factory=dict)
    subscription_failures: dict[str, str] = field(default_factory=dict)
    subscription_ids: dict[str, str] = field(default_factory=dict)
    lifecycle_events: list[list[Any]] = field(default_factory=list)
    ticks: list[TickRow] = field(default_factory=list)

    @property
    def total_compute_mcpu_ms(self) -> int:
        return sum(self.compute_mcpu_ms.values())

    def to_obj(self) -> dict[str, Any]:
        return {
            "ingested": self.ingested,
            "accepted": self.accepted,
            "discarded_no_demand": self.discarded_no_demand,
            "rejected": self.rejected,
            "unrouted": self.unrouted,
            "forwarded_bytes": dict(sorted(self.forwarded_bytes.items())),
            "forwarded_count": dict(sorted(self.forwarded_count.items())),
            "billing": {k: dict(sorted(v.items()))
                        for k, v in sorted(self.billing.items())},
            "pipelines_deployed": self.pipelines_deployed,
            "pipelines_reaped": self.pipelines_reaped,
            "peak_instances": self.peak_instances,
            "handovers": dict(sorted(self.handovers.items())),
            "compute_mcpu_ms": dict(sorted(self.compute_mcpu_ms.items())),
            "total_compute_mcpu_ms": self.total_compute_mcpu_ms,
            "unattributed_compute_mcpu_ms": self.unattributed_compute_mcpu_ms,
            "hosted_trials": dict(sorted(self.hosted_trials.items())),
            "subscription_failures": dict(sorted(self.subscription_failures.items())),
            "subscription_ids": dict(sorted(self.subscription_ids.items())),
            "lifecycle_events": [list(e) for e in self.lifecycle_events],
        }


@dataclass
class SimulationResult:
    """Metrics plus live handles and (optionally) captured traffic."""

    metrics: RunMetrics
    hub: CloudHub
    nodes: dict[str, MecNode]
    deliveries: dict[str, list[Envelope]] = field(default_factory=dict)
    ingest_events: list[tuple[int, str, str, str]] = field(default_factory=list)
    resolutions: dict[str, list[str | None]] = field(default_factory=dict)


def export_metrics(metrics: RunMetrics, out_dir) -> list[str]:
    """Write ``summary.json`` and ``ticks.csv``; stable bytes for stable input."""
    from pathlib import Path

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        summary_path = out / "summary.json"
        with open(summary_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(metrics.to_obj(), fh, sort_keys=True, indent=2)
            fh.write("\n")
        ticks_path = out / "ticks.csv"
        with open(ticks_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["tick", "instances", "accepted", "discarded",
                             "forwarded_bytes"])
            for row in metrics.ticks:
                writer.writerow([row.tick, row.instances, row.accepted,
                                 row.discarded, row.forwarded_bytes])
    except OSError as exc:
        raise IoFailure(f"cannot write metrics to {out}: {exc}") from exc
    return [str(summary_path), str(ticks_path)]


# --------------------------------------------------------------------------
# The engine


class _ProducerRuntime:
    def __init__(self, spec: ProducerSpec, epoch_ms: int):
        self.spec = spec
        self.epoch_ms = epoch_ms
        self.period_ms = Fraction(1000) / Fraction(repr(spec.rate_hz))
        self.emitted = 0
        self.next_resolve_ms = 0
        self.serving: str | None = None
        self.resolutions: list[str | None] = []

    def next_emit_ms(self) -> int:
        return int(self.period_ms * self.emitted)

    def make_envelope(self, t_ms: int) -> Envelope:
        spec = self.spec
        pos = vehicle_position(spec, t_ms)
        true_ms = self.epoch_ms + t_ms
        payload: Any
        if spec.opaque:
            payload = bytes([self.emitted % 256]) * spec.payload_bytes
        else:
            payload = {
                "seq": self.emitted,
                "producer": spec.producer_id,
                **spec.payload_fields,
                "pad": "x" * spec.payload_bytes,
            }
        return Envelope(
            producer_id=spec.producer_id,
            datatype=spec.datatype,
            timestamp_ms=true_ms + spec.unreported_skew_ms - spec.clock_offset_ms,
            clock_offset_ms=spec.clock_offset_ms,
            position=pos,
            license=spec.license,
            payload=payload,
        )


class _SimulatedService:
    """Declarative sandbox candidate used for hosted-service trials."""

    def __init__(self, behavior: ServiceBehavior):
        self.behavior = behavior

    def run(self, sandbox: TrustSandbox) -> None:
        subs: list[Subscription] = [sandbox.subscribe(t)
                                    for t in self.behavior.subscribe_topics]
        if self.behavior.crash:
            raise RuntimeError("synthetic service crash")
        sandbox.feed()
        for sub in subs:
            sub.drain()
        remaining = self.behavior.publish_bytes
        while remaining > 0:
            chunk = min(65536, remaining)
            sandbox.publish(self.behavior.publish_topic, bytes(chunk))
            remaining -= chunk


def build_catalog(scenario: Scenario) -> tuple[dict[str, PipelineDescriptor], "TrustStoreBundle"]:
    """Signed pipeline descriptors for every datatype the scenario touches.

    The signing key is derived from the scenario seed, so descriptor bytes
    and signatures are reproducible run to run.
    """
    from .lifecycle import TrustStore

    seed_bytes = hashlib.sha256(f"mecflow-signer:{scenario.seed}".encode()).digest()
    private, public = generate_signer(seed_bytes)
    trust = TrustStore({"scenario-signer": public})
    datatypes = sorted({p.datatype for p in scenario.producers}
                       | {c.datatype for c in scenario.consumers})
    catalog: dict[str, PipelineDescriptor] = {}
    for datatype in datatypes:
        unsigned = PipelineDescriptor(
            datatype, f"registry.local/pipelines/{datatype}:1", "scenario-signer",
            b"", scenario.per_replica_capacity_msgs_per_s)
        signature = sign_payload(private, unsigned.signing_payload())
        catalog[datatype] = PipelineDescriptor(
            datatype, unsigned.image_ref, "scenario-signer", signature,
            scenario.per_replica_capacity_msgs_per_s)
    return catalog, TrustStoreBundle(trust, private)


@dataclass
class TrustStoreBundle:
    store: Any
    private_key: Any


def _signed_trial_descriptor(trial: HostedServiceTrial,
                             bundle: TrustStoreBundle) -> HostedServiceDescriptor:
    unsigned = HostedServiceDescriptor(
        trial.service_id, frozenset(trial.declared_topics),
        trial.declared_volume_bytes, trial.image_ref, "scenario-signer", b"x")
    signature = sign_payload(bundle.private_key, unsigned.signing_payload())
    return HostedServiceDescriptor(
        trial.service_id, frozenset(trial.declared_topics),
        trial.declared_volume_bytes, trial.image_ref, "scenario-signer", signature)


def default_token_store() -> TokenStore:
    return TokenStore([
        AccessToken(ADMIN_TOKEN, frozenset({SCOPE_ADMIN})),
        AccessToken(PRODUCE_TOKEN, frozenset({SCOPE_PRODUCE})),
        AccessToken(CONSUME_TOKEN, frozenset({SCOPE_CONSUME})),
    ])


def run_scenario(scenario: Scenario, *, baseline: bool = False,
                 capture: bool = False) -> SimulationResult:
    """Execute a scenario end to end on a simulated clock.

    Per tick, in order: heartbeats, consumer start/stop and hosted-service
    trials, producer resolution and emission, node processing (pump, meter,
    autoscale, reap), usage reporting to the hub, metrics sampling.

    With ``capture=True`` every forwarded envelope and every ingest event
    is retained on the result for fine-grained assertions.
    """
    scenario.validate()
    clock = SimClock(scenario.start_epoch_ms)
    tokens = default_token_store()
    hub = CloudHub(scenario.tiers, tokens, clock)
    catalog, bundle = build_catalog(scenario)

    metrics = RunMetrics()
    result_deliveries: dict[str, list[Envelope]] = {}
    ingest_events: list[tuple[int, str, str, str]] = []

    nodes: dict[str, MecNode] = {}
    for spec in scenario.mecs:
        tile = spec.tile or tile_to_quadkey(
            latlon_to_tile(GeoPosition(spec.lat, spec.lon), scenario.registration_level))
        config = MecConfig(
            mec_id=spec.mec_id, tile=tile,
            cpu_millicores=spec.cpu_millicores, memory_mb=spec.memory_mb,
            gpu_units=spec.gpu_units, blacklist=scenario.blacklist,
            idle_grace_ms=scenario.idle_grace_ms,
            clock_bound_ms=scenario.clock_bound_ms)
        node = MecNode(config, catalog, bundle.store, scenario.tiers, clock,
                       on_ban=lambda ref, reason: hub.propagate_ban(ref, reason))
        nodes[spec.mec_id] = node
        hub.register_mec(ADMIN_TOKEN, spec.mec_id, tile, link=DirectNodeLink(node))

    node_ids = sorted(nodes)

    if baseline:
        produced_datatypes = sorted({p.datatype for p in scenario.producers})
        tier = scenario.tiers[scenario.baseline_tier]
        for mec_id in node_ids:
            for datatype in produced_datatypes:
                try:
                    nodes[mec_id].lifecycle.acquire_pipeline(
                        datatype, tier, "always-on")
                except InsufficientResources:
                    metrics.subscription_failures[f"always-on:{mec_id}:{datatype}"] = \
                        "InsufficientResources"

    producers = [_ProducerRuntime(p, scenario.start_epoch_ms)
                 for p in sorted(scenario.producers, key=lambda p: p.producer_id)]
    consumer_specs = sorted(scenario.consumers, key=lambda c: c.consumer_id)
    trials = sorted(scenario.hosted_services, key=lambda t: (t.at_ms, t.service_id))
    trial_idx = 0

    active_subs: dict[str, str] = {}  # consumer_id -> subscription_id
    prev_accepted = prev_discarded = 0
    prev_forwarded = 0

    def total_forwarded_bytes() -> int:
        return sum(entry["delivered_bytes"]
                   for mec_id in node_ids
                   for entry in nodes[mec_id].consumer_totals().values())

    ticks = scenario.duration_ms // scenario.tick_ms
    for tick in range(ticks):
        t = tick * scenario.tick_ms
        clock.set(scenario.start_epoch_ms + t)
        now = clock.now_ms()

        # 1. heartbeats
        if t % scenario.heartbeat_period_ms == 0:
            for mec_id in node_ids:
                hub.heartbeat(ADMIN_TOKEN, mec_id)

        # 2. consumer stop/start (stops first so churn frees capacity)
        for spec in consumer_specs:
            if spec.stop_ms <= t and spec.consumer_id in active_subs:
                hub.unsubscribe(active_subs.pop(spec.consumer_id))
        for spec in consumer_specs:
            if spec.start_ms <= t < spec.stop_ms \
                    and spec.consumer_id not in active_subs \
                    and spec.consumer_id not in metrics.subscription_failures:
                roi = cover_roi(spec.roi_bbox, scenario.roi_level)
                try:
                    sub = hub.subscribe(CONSUME_TOKEN, spec.datatype, spec.tier,
                                        spec.terms, roi, spec.destination)
                except (NoMatchingMec, AllAttachesFailed) as exc:
                    metrics.subscription_failures[spec.consumer_id] = \
                        f"{type(exc).__name__}: {exc}"
                    continue
                active_subs[spec.consumer_id] = sub.subscription_id
                metrics.subscription_ids[spec.consumer_id] = sub.subscription_id
                if capture:
                    sink = result_deliveries.setdefault(spec.consumer_id, [])
                    for mec_id in sub.matched_mec_ids:
                        tap = nodes[mec_id].tap(sub.subscription_id)
                        if tap is not None:
                            tap.on_deliver = sink.append

        # 3. hosted-service trials due now
        while trial_idx < len(trials) and trials[trial_idx].at_ms <= t:
            trial = trials[trial_idx]
            trial_idx += 1
            node = nodes[trial.target_mec]
            desc = _signed_trial_descriptor(trial, bundle)
            try:
                verdict = node.lifecycle.deploy_hosted_service(
                    desc, _SimulatedService(trial.behavior))
            except BannedImage:
                metrics.hosted_trials[trial.service_id] = "banned:already-banned"
            else:
                metrics.hosted_trials[trial.service_id] = (
                    "trusted" if verdict.trusted else f"banned:{verdict.reason}")

        # 4. producers: re-resolve serving MEC, then emit this tick's samples
        for producer in producers:
            while producer.next_resolve_ms <= t:
                pos = vehicle_position(producer.spec, producer.next_resolve_ms)
                try:
                    record = hub.resolve_serving_mec(PRODUCE_TOKEN, pos)
                    producer.serving = record.mec_id
                except NoServingMec:
                    producer.serving = None
                producer.resolutions.append(producer.serving)
                producer.next_resolve_ms += producer.spec.resolve_period_ms

            while producer.next_emit_ms() < t + scenario.tick_ms:
                emit_ms = producer.next_emit_ms()
                env = producer.make_envelope(emit_ms)
                producer.emitted += 1
                if producer.serving is None:
                    metrics.unrouted += 1
                    continue
                outcome = nodes[producer.serving].ingest(serialize_envelope(env))
                if capture:
                    ingest_events.append((emit_ms, producer.serving,
                                          producer.spec.producer_id, outcome.status))

        # 5. node processing
        for mec_id in node_ids:
            nodes[mec_id].process_tick(scenario.tick_ms)

        # 6. usage reports
        for mec_id in node_ids:
            hub.ingest_usage(mec_id, nodes[mec_id].report_usage(now))

        # 7. per-tick sample
        instances = sum(
            1 for mec_id in node_ids
            for inst in nodes[mec_id].lifecycle.instances()
            if inst.state is PipelineState.RUNNING)
        accepted = sum(nodes[m].accepted for m in node_ids)
        discarded = sum(nodes[m].discarded_no_demand for m in node_ids)
        forwarded = total_forwarded_bytes()
        metrics.ticks.append(TickRow(tick, instances,
                                     accepted - prev_accepted,
                                     discarded - prev_discarded,
                                     forwarded - prev_forwarded))
        prev_accepted, prev_discarded, prev_forwarded = accepted, discarded, forwarded
        metrics.peak_instances = max(metrics.peak_instances, instances)

    # end of run: process scheduled stops exactly at duration, final report
    clock.set(scenario.start_epoch_ms + scenario.duration_ms)
    for spec in consumer_specs:
        if spec.stop_ms <= scenario.duration_ms and spec.consumer_id in active_subs:
            hub.unsubscribe(active_subs.pop(spec.consumer_id))
    for mec_id in node_ids:
        hub.ingest_usage(mec_id, nodes[mec_id].report_usage(clock.now_ms()))

    # -- aggregate ----------------------------------------------------------

    for mec_id in node_ids:
        node = nodes[mec_id]
        metrics.ingested += node.ingested
        metrics.accepted += node.accepted
        metrics.discarded_no_demand += node.discarded_no_demand
        metrics.rejected += node.rejected
        metrics.pipelines_deployed += node.lifecycle.deployed_count
        metrics.pipelines_reaped += node.lifecycle.reaped_count
        for inst in node.lifecycle.instances():
            key = f"{mec_id}/{inst.datatype}"
            metrics.compute_mcpu_ms[key] = (metrics.compute_mcpu_ms.get(key, 0)
                                            + inst.compute_meter_mcpu_ms)
        for ts, kind, instance_id, datatype in node.lifecycle.events:
            metrics.lifecycle_events.append(
                [ts - scenario.start_epoch_ms, kind, mec_id, instance_id, datatype])

    metrics.lifecycle_events.sort(key=lambda e: (e[0], e[2], e[3], e[1]))
    metrics.unattributed_compute_mcpu_ms = hub.unattributed_compute_mcpu_ms

    sub_to_consumer = {sid: cid for cid, sid in metrics.subscription_ids.items()}
    for mec_id in node_ids:
        for ref, entry in sorted(nodes[mec_id].consumer_totals().items()):
            consumer_id = sub_to_consumer.get(ref, ref)
            metrics.forwarded_bytes[consumer_id] = (
                metrics.forwarded_bytes.get(consumer_id, 0) + entry["delivered_bytes"])
            metrics.forwarded_count[consumer_id] = (
                metrics.forwarded_count.get(consumer_id, 0) + entry["forwarded"])
    for consumer_id, sub_id in sorted(metrics.subscription_ids.items()):
        bill = hub.billing_report(sub_id)
        metrics.billing[consumer_id] = {
            "bytes": bill["bytes"],
            "compute_mcpu_ms": bill["compute_mcpu_ms"],
        }

    resolutions: dict[str, list[str | None]] = {}
    for producer in producers:
        metrics.handovers[producer.spec.producer_id] = \
            count_handovers(producer.resolutions)
        resolutions[producer.spec.producer_id] = producer.resolutions

    return SimulationResult(metrics=metrics, hub=hub, nodes=nodes,
                            deliveries=result_deliveries,
                            ingest_events=ingest_events,
                            resolutions=resolutions)
