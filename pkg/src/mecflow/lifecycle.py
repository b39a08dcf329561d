"""Demand-driven life cycle for data pipelines and hosted services on one node.

A pipeline exists only while at least one consumer references its datatype
(plus an idle grace period).  Deployment is simulated: an instance is an
in-process worker that drains the node's raw topic for its datatype,
applies a per-datatype transform, and publishes to the processed topic.

Workload admission is signature-gated: descriptors carry a detached
Ed25519 signature over their canonical encoding, verified against a pinned
trust store.  Third-party services additionally pass a sandboxed trust run
(topic subscriptions and published volume must match their declaration) or
the image is banned everywhere.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Protocol

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .broker import Broker, Subscription
from .envelope import Envelope, canonical_json, payload_size
from .policy import (
    Capacity,
    InsufficientResources,
    Reservation,
    SlaTier,
    admit_request,
    release_reservation,
)

DEFAULT_IDLE_GRACE_MS = 30_000
DEFAULT_VOLUME_TOLERANCE = 0.10
DEFAULT_REPLICA_CAPACITY_MSGS_PER_S = 50.0


class UnknownSigner(Exception):
    """Descriptor names a key id that is not pinned in the trust store."""


class SignatureInvalid(Exception):
    """Descriptor signature did not verify; the workload is refused."""


class BannedImage(Exception):
    """Image ref is on the (globally shared) ban list."""


class UnknownDatatype(KeyError):
    """No descriptor exists for the requested datatype."""


class UnknownConsumerRef(KeyError):
    """Instance does not hold the given consumer reference."""


class SandboxFailure(Exception):
    """The candidate crashed during its trust run."""


class PipelineState(str, Enum):
    VERIFYING = "verifying"
    DEPLOYING = "deploying"
    RUNNING = "running"
    DRAINING = "draining"
    TERMINATED = "terminated"


# --------------------------------------------------------------------------
# Descriptors, signing, trust store


@dataclass(frozen=True)
class PipelineDescriptor:
    """One deployable data function; the name is the datatype it processes."""

    datatype: str
    image_ref: str
    signer_key_id: str
    signature: bytes
    per_replica_capacity_msgs_per_s: float = DEFAULT_REPLICA_CAPACITY_MSGS_PER_S

    def signing_payload(self) -> bytes:
        """Canonical encoding covered by the detached signature."""
        return canonical_json({
            "datatype": self.datatype,
            "image_ref": self.image_ref,
            "per_replica_capacity_msgs_per_s": self.per_replica_capacity_msgs_per_s,
            "signer_key_id": self.signer_key_id,
        }).encode("utf-8")


@dataclass(frozen=True)
class HostedServiceDescriptor:
    """Third-party container declaration: topics it will touch and how loudly."""

    service_id: str
    declared_topics: frozenset[str]
    declared_volume_bytes: int
    image_ref: str
    signer_key_id: str
    signature: bytes

    def __post_init__(self) -> None:
        if not self.declared_topics:
            raise ValueError("declared_topics must be non-empty")
        if self.declared_volume_bytes < 0:
            raise ValueError("declared_volume_bytes must be non-negative")

    def signing_payload(self) -> bytes:
        return canonical_json({
            "service_id": self.service_id,
            "declared_topics": sorted(self.declared_topics),
            "declared_volume_bytes": self.declared_volume_bytes,
            "image_ref": self.image_ref,
            "signer_key_id": self.signer_key_id,
        }).encode("utf-8")


def save_pipeline_descriptor(desc: PipelineDescriptor, path) -> None:
    """Write a descriptor file plus its detached-signature sidecar.

    The file body is exactly the canonical signed encoding (UTF-8, sorted
    keys, no insignificant whitespace); ``<path>.sig`` holds the signature
    as hex text.
    """
    from pathlib import Path

    path = Path(path)
    path.write_bytes(desc.signing_payload())
    path.with_suffix(path.suffix + ".sig").write_text(desc.signature.hex() + "\n")


def load_pipeline_descriptor(path) -> PipelineDescriptor:
    """Read a descriptor file and its ``.sig`` sidecar (no verification here)."""
    import json
    from pathlib import Path

    path = Path(path)
    obj = json.loads(path.read_bytes())
    signature = bytes.fromhex(
        path.with_suffix(path.suffix + ".sig").read_text().strip())
    return PipelineDescriptor(
        datatype=obj["datatype"],
        image_ref=obj["image_ref"],
        signer_key_id=obj["signer_key_id"],
        signature=signature,
        per_replica_capacity_msgs_per_s=obj["per_replica_capacity_msgs_per_s"],
    )


class TrustStore:
    """Pinned signer keys: key id -> raw Ed25519 public key bytes."""

    def __init__(self, keys: dict[str, bytes] | None = None):
        self._keys = dict(keys or {})

    @classmethod
    def from_config(cls, entries: dict[str, str]) -> "TrustStore":
        """Build from a config map of key id -> hex-encoded public key."""
        return cls({key_id: bytes.fromhex(hexkey) for key_id, hexkey in entries.items()})

    def pin(self, key_id: str, public_key: bytes) -> None:
        self._keys[key_id] = public_key

    def public_key(self, key_id: str) -> Ed25519PublicKey:
        try:
            raw = self._keys[key_id]
        except KeyError:
            raise UnknownSigner(f"signer key id {key_id!r} is not pinned") from None
        return Ed25519PublicKey.from_public_bytes(raw)


def generate_signer(seed: bytes | None = None) -> tuple[Ed25519PrivateKey, bytes]:
    """New signing key; with ``seed`` (32 bytes) the key is deterministic.

    Returns the private key and the raw public key bytes to pin.
    """
    if seed is None:
        private = Ed25519PrivateKey.generate()
    else:
        if len(seed) != 32:
            raise ValueError("seed must be exactly 32 bytes")
        private = Ed25519PrivateKey.from_private_bytes(seed)
    public = private.public_key().public_bytes_raw()
    return private, public


def sign_payload(private: Ed25519PrivateKey, payload: bytes) -> bytes:
    return private.sign(payload)


def verify_signature(message: bytes, signature: bytes, signer_key_id: str,
                     trust_store: TrustStore) -> bool:
    """True iff ``signature`` is valid for ``message`` under the pinned key.

    Raises:
        UnknownSigner: the key id is not pinned (treated as a verification
            failure by every caller, but distinguishable).
    """
    public = trust_store.public_key(signer_key_id)
    try:
        public.verify(signature, message)
        return True
    except InvalidSignature:
        return False


@dataclass(frozen=True)
class BanEntry:
    image_ref: str
    reason: str
    banned_ms: int


class BanList:
    """Append-only set of image refs that failed trust verification."""

    def __init__(self) -> None:
        self._entries: list[BanEntry] = []
        self._refs: set[str] = set()
        self._lock = threading.Lock()

    def add(self, image_ref: str, reason: str, now_ms: int) -> bool:
        """Record a ban; idempotent. Returns True if the ref was new."""
        with self._lock:
            if image_ref in self._refs:
                return False
            self._refs.add(image_ref)
            self._entries.append(BanEntry(image_ref, reason, now_ms))
            return True

    def __contains__(self, image_ref: str) -> bool:
        with self._lock:
            return image_ref in self._refs

    def entries(self) -> list[BanEntry]:
        with self._lock:
            return list(self._entries)


# --------------------------------------------------------------------------
# Pipeline instances


@dataclass
class PipelineInstance:
    """A running (simulated) containerized data function for one datatype."""

    id: str
    datatype: str
    image_ref: str
    state: PipelineState
    replicas: int = 1
    consumer_tiers: dict[str, SlaTier] = field(default_factory=dict)
    reservation: Reservation | None = None
    cpu_millicores_per_replica: int = 0
    memory_mb_per_replica: int = 0
    gpu_units_per_replica: int = 0
    per_replica_capacity_msgs_per_s: float = DEFAULT_REPLICA_CAPACITY_MSGS_PER_S
    compute_meter_mcpu_ms: int = 0
    idle_since_ms: int | None = None
    created_ms: int = 0
    terminated_ms: int | None = None
    peak_consumer_refs: int = 0
    processed_total: int = 0
    subscription: Subscription | None = None

    @property
    def consumer_refs(self) -> set[str]:
        return set(self.consumer_tiers)

    @property
    def compute_meter_mcpu_s(self) -> float:
        return self.compute_meter_mcpu_ms / 1000.0


Transform = Callable[[Envelope], Envelope]


def annotate_transform(mec_id: str, datatype: str) -> Transform:
    """Default data function: tag structured payloads, pass opaque ones through."""
    marker = f"{mec_id}/{datatype}"

    def transform(env: Envelope) -> Envelope:
        if env.opaque:
            return env
        payload = {**env.payload, "processed_by": marker}
        return replace(env, payload=payload, size_bytes=payload_size(payload))

    return transform


# --------------------------------------------------------------------------
# Trust sandbox for hosted third-party services


class SandboxCandidate(Protocol):
    def run(self, sandbox: "TrustSandbox") -> None: ...


def message_size(message: Any) -> int:
    if isinstance(message, Envelope):
        return message.size_bytes
    if isinstance(message, (bytes, bytearray)):
        return len(message)
    return len(canonical_json(message).encode("utf-8"))


class TrustSandbox:
    """Isolated broker proxy that records a candidate's subscriptions and output."""

    def __init__(self, declared_topics: frozenset[str], feed_messages: int = 16):
        self._broker = Broker()
        self._declared = declared_topics
        self._feed_messages = feed_messages
        self.subscribed_topics: set[str] = set()
        self.published_bytes = 0

    def subscribe(self, pattern: str, capacity: int | None = None) -> Subscription:
        self.subscribed_topics.add(pattern)
        return self._broker.subscribe(pattern, capacity)

    def publish(self, topic: str, message: Any) -> int:
        self.published_bytes += message_size(message)
        return self._broker.publish(topic, message)

    def feed(self) -> int:
        """Push synthetic samples into every declared topic (after subscribing)."""
        n = 0
        for topic in sorted(self._declared):
            for i in range(self._feed_messages):
                self._broker.publish(topic, {"synthetic": i})
                n += 1
        return n


@dataclass(frozen=True)
class TrustVerdict:
    """Outcome of a trust run: trusted, or banned with the failed check."""

    trusted: bool
    reason: str | None
    observed_topics: frozenset[str]
    observed_volume_bytes: int


# --------------------------------------------------------------------------
# The manager


class LifecycleManager:
    """Owns every pipeline state transition on one node.

    Mutations are serialized by an internal lock; reads for metrics are
    snapshots.  Workers are pumped, not threaded: callers (the node's tick
    in simulation, a pump thread in service mode) drive :meth:`pump`.
    """

    def __init__(self, mec_id: str, broker: Broker, capacity: Capacity,
                 catalog: dict[str, PipelineDescriptor], trust_store: TrustStore,
                 clock, *, ban_list: BanList | None = None,
                 idle_grace_ms: int = DEFAULT_IDLE_GRACE_MS,
                 volume_tolerance: float = DEFAULT_VOLUME_TOLERANCE,
                 on_ban: Callable[[str, str], None] | None = None,
                 transforms: dict[str, Transform] | None = None):
        self.mec_id = mec_id
        self.broker = broker
        self.capacity = capacity
        self.catalog = dict(catalog)
        self.trust_store = trust_store
        self.clock = clock
        self.ban_list = ban_list if ban_list is not None else BanList()
        self.idle_grace_ms = idle_grace_ms
        self.volume_tolerance = volume_tolerance
        self.on_ban = on_ban
        self._transforms = dict(transforms or {})
        self._lock = threading.RLock()
        self._instances: dict[str, PipelineInstance] = {}
        self._active_by_datatype: dict[str, PipelineInstance] = {}
        self._hosted: dict[str, HostedServiceDescriptor] = {}
        self._seq = 0
        self.deployed_count = 0
        self.reaped_count = 0
        self.saturation_count = 0
        self.events: list[tuple[int, str, str, str]] = []

    # -- queries ------------------------------------------------------------

    def running_for(self, datatype: str) -> PipelineInstance | None:
        """The non-terminated instance for a datatype, if any."""
        with self._lock:
            return self._active_by_datatype.get(datatype)

    def instance(self, instance_id: str) -> PipelineInstance:
        with self._lock:
            return self._instances[instance_id]

    def instances(self) -> list[PipelineInstance]:
        with self._lock:
            return [self._instances[k] for k in sorted(self._instances)]

    def raw_topic(self, datatype: str) -> str:
        return f"mec/{self.mec_id}/raw/{datatype}"

    def proc_topic(self, datatype: str) -> str:
        return f"mec/{self.mec_id}/proc/{datatype}"

    # -- verification -------------------------------------------------------

    def _verify_descriptor(self, payload: bytes, signature: bytes, key_id: str) -> None:
        try:
            ok = verify_signature(payload, signature, key_id, self.trust_store)
        except UnknownSigner as exc:
            raise SignatureInvalid(str(exc)) from exc
        if not ok:
            raise SignatureInvalid(f"signature invalid for signer {key_id!r}")

    # -- pipeline life cycle ------------------------------------------------

    def acquire_pipeline(self, datatype: str, tier: SlaTier,
                         consumer_ref: str) -> PipelineInstance:
        """Reuse the datatype's live instance or deploy a fresh one.

        Reuse never makes a new reservation: one pipeline serves every
        consumer of the datatype regardless of their tiers; per-consumer
        SLA and licensing are applied downstream at the egress taps.

        Raises:
            UnknownDatatype: no descriptor for the datatype.
            BannedImage: the descriptor's image is on the ban list.
            SignatureInvalid: the descriptor failed signature verification.
            InsufficientResources: the node cannot host a new instance.
        """
        with self._lock:
            desc = self.catalog.get(datatype)
            if desc is None:
                raise UnknownDatatype(datatype)
            if desc.image_ref in self.ban_list:
                raise BannedImage(f"image {desc.image_ref!r} is banned")

            existing = self._active_by_datatype.get(datatype)
            if existing is not None:
                existing.consumer_tiers[consumer_ref] = tier
                existing.peak_consumer_refs = max(existing.peak_consumer_refs,
                                                  len(existing.consumer_tiers))
                existing.idle_since_ms = None
                return existing

            now = self.clock.now_ms()
            self._seq += 1
            inst = PipelineInstance(
                id=f"{self.mec_id}-{datatype}-{self._seq}",
                datatype=datatype,
                image_ref=desc.image_ref,
                state=PipelineState.VERIFYING,
                per_replica_capacity_msgs_per_s=desc.per_replica_capacity_msgs_per_s,
                created_ms=now,
            )
            self._instances[inst.id] = inst

            try:
                self._verify_descriptor(desc.signing_payload(), desc.signature,
                                        desc.signer_key_id)
                inst.reservation = admit_request(tier, self.capacity)
            except (SignatureInvalid, InsufficientResources):
                inst.state = PipelineState.TERMINATED
                inst.terminated_ms = now
                raise

            inst.state = PipelineState.DEPLOYING
            inst.cpu_millicores_per_replica = tier.cpu_millicores
            inst.memory_mb_per_replica = tier.memory_mb
            inst.gpu_units_per_replica = tier.gpu_units
            inst.subscription = self.broker.subscribe(self.raw_topic(datatype))
            inst.state = PipelineState.RUNNING
            inst.consumer_tiers[consumer_ref] = tier
            inst.peak_consumer_refs = 1
            self._active_by_datatype[datatype] = inst
            self.deployed_count += 1
            self.events.append((now, "deploy", inst.id, datatype))
            return inst

    def release_pipeline(self, instance_id: str, consumer_ref: str) -> PipelineState:
        """Drop one consumer reference; the reaper tears down idle instances."""
        with self._lock:
            inst = self._instances.get(instance_id)
            if inst is None or consumer_ref not in inst.consumer_tiers:
                raise UnknownConsumerRef(consumer_ref)
            del inst.consumer_tiers[consumer_ref]
            if not inst.consumer_tiers:
                inst.idle_since_ms = self.clock.now_ms()
            return inst.state

    def reap_idle(self, now_ms: int | None = None) -> list[str]:
        """Terminate every instance idle for at least the grace period."""
        now = self.clock.now_ms() if now_ms is None else now_ms
        reaped: list[str] = []
        with self._lock:
            for inst in sorted(self._active_by_datatype.values(), key=lambda i: i.id):
                if inst.consumer_tiers or inst.idle_since_ms is None:
                    continue
                if now - inst.idle_since_ms < self.idle_grace_ms:
                    continue
                inst.state = PipelineState.DRAINING
                if inst.subscription is not None:
                    self.broker.unsubscribe(inst.subscription.id)
                    inst.subscription = None
                if inst.reservation is not None:
                    release_reservation(inst.reservation, self.capacity)
                inst.state = PipelineState.TERMINATED
                inst.terminated_ms = now
                del self._active_by_datatype[inst.datatype]
                self.reaped_count += 1
                self.events.append((now, "reap", inst.id, inst.datatype))
                reaped.append(inst.id)
        return reaped

    def autoscale(self, instance: PipelineInstance | str,
                  observed_msgs_per_s: float) -> int:
        """Fit replica count to observed ingest rate, within tier and capacity.

        Target is ceil(rate / per-replica capacity), clamped to [1, min of
        the consumers' tier limits].  Growth that does not fit the node is
        capped at what fits and counted as saturation, not failed.
        """
        with self._lock:
            inst = self.instance(instance) if isinstance(instance, str) else instance
            if inst.state is not PipelineState.RUNNING:
                return inst.replicas
            desired = max(1, math.ceil(observed_msgs_per_s /
                                       inst.per_replica_capacity_msgs_per_s))
            if inst.consumer_tiers:
                desired = min(desired, min(t.max_replicas
                                           for t in inst.consumer_tiers.values()))
            else:
                desired = 1

            while inst.replicas < desired:
                try:
                    self.capacity.take(inst.cpu_millicores_per_replica,
                                       inst.memory_mb_per_replica,
                                       inst.gpu_units_per_replica)
                except InsufficientResources:
                    self.saturation_count += 1
                    break
                inst.replicas += 1
                self._grow_reservation(inst, +1)
            while inst.replicas > desired:
                self.capacity.give(inst.cpu_millicores_per_replica,
                                   inst.memory_mb_per_replica,
                                   inst.gpu_units_per_replica)
                inst.replicas -= 1
                self._grow_reservation(inst, -1)
            return inst.replicas

    def _grow_reservation(self, inst: PipelineInstance, delta: int) -> None:
        res = inst.reservation
        if res is not None:
            res.cpu_millicores += delta * inst.cpu_millicores_per_replica
            res.memory_mb += delta * inst.memory_mb_per_replica
            res.gpu_units += delta * inst.gpu_units_per_replica

    def meter_compute(self, instance: PipelineInstance | str, elapsed_ms: int) -> int:
        """Accumulate replicas x reserved mCPU x elapsed; integer mCPU-ms, exact."""
        with self._lock:
            inst = self.instance(instance) if isinstance(instance, str) else instance
            if inst.state is PipelineState.RUNNING and elapsed_ms > 0:
                inst.compute_meter_mcpu_ms += (inst.replicas
                                               * inst.cpu_millicores_per_replica
                                               * elapsed_ms)
            return inst.compute_meter_mcpu_ms

    def pump(self, limit: int | None = None) -> dict[str, int]:
        """Run every live worker once: raw topic -> transform -> proc topic.

        Returns messages processed per instance id.  Simulation calls this
        once per tick; service mode calls it from a pump thread.
        """
        with self._lock:
            live = [(i, i.subscription) for i in
                    sorted(self._active_by_datatype.values(), key=lambda i: i.id)
                    if i.state is PipelineState.RUNNING and i.subscription]
        processed: dict[str, int] = {}
        for inst, subscription in live:
            transform = self._transforms.get(inst.datatype) \
                or annotate_transform(self.mec_id, inst.datatype)
            topic = self.proc_topic(inst.datatype)
            count = 0
            for _, message in subscription.drain(limit):
                self.broker.publish(topic, transform(message))
                count += 1
            if count:
                inst.processed_total += count
                processed[inst.id] = count
        return processed

    # -- hosted third-party services -----------------------------------------

    def verify_hosted_service(self, desc: HostedServiceDescriptor,
                              candidate: SandboxCandidate) -> TrustVerdict:
        """Run the candidate in an isolated broker and check its declaration.

        Trusted iff it subscribed only to declared topics and its published
        volume is within the configured tolerance of the declared volume.
        Any failure (including a crash) bans the image globally.
        """
        sandbox = TrustSandbox(desc.declared_topics)
        crashed = False
        try:
            candidate.run(sandbox)
        except Exception:
            crashed = True

        observed = frozenset(sandbox.subscribed_topics)
        volume = sandbox.published_bytes
        if crashed:
            reason = "crash"
        elif not observed <= desc.declared_topics:
            reason = "undeclared-topic"
        elif abs(volume - desc.declared_volume_bytes) > \
                self.volume_tolerance * desc.declared_volume_bytes:
            reason = "volume-mismatch"
        else:
            reason = None

        if reason is not None:
            self.ban_list.add(desc.image_ref, reason, self.clock.now_ms())
            if self.on_ban is not None:
                self.on_ban(desc.image_ref, reason)
            return TrustVerdict(False, reason, observed, volume)
        return TrustVerdict(True, None, observed, volume)

    def deploy_hosted_service(self, desc: HostedServiceDescriptor,
                              candidate: SandboxCandidate | None = None) -> TrustVerdict:
        """Admit a third-party service: ban check, signature, then trust run.

        Raises:
            BannedImage: the image is already banned (no sandbox run happens).
            SignatureInvalid: descriptor signature failed.
        """
        if desc.image_ref in self.ban_list:
            raise BannedImage(f"image {desc.image_ref!r} is banned")
        self._verify_descriptor(desc.signing_payload(), desc.signature,
                                desc.signer_key_id)
        if candidate is None:
            verdict = TrustVerdict(True, None, frozenset(), 0)
        else:
            verdict = self.verify_hosted_service(desc, candidate)
        if verdict.trusted:
            with self._lock:
                self._hosted[desc.service_id] = desc
        return verdict

    def hosted_services(self) -> list[str]:
        with self._lock:
            return sorted(self._hosted)

    # -- metrics --------------------------------------------------------------

    def metrics(self) -> dict[str, Any]:
        with self._lock:
            by_state: dict[str, int] = {}
            for inst in self._instances.values():
                by_state[inst.state.value] = by_state.get(inst.state.value, 0) + 1
            return {
                "instances_by_state": by_state,
                "deployed_total": self.deployed_count,
                "reaped_total": self.reaped_count,
                "saturation_total": self.saturation_count,
                "compute_meter_mcpu_ms": {
                    inst.id: inst.compute_meter_mcpu_ms
                    for inst in self._instances.values()
                },
                "reserved_cpu_millicores": sum(
                    i.reservation.cpu_millicores for i in self._instances.values()
                    if i.reservation and not i.reservation.released),
            }
