"""The interoperable message format for car-captured samples.

Every sample travels as an :class:`Envelope`: one geo-tagged, licensed,
timestamped payload from one producer.  Ingest applies two normalizations
before anything else sees the data: producer-clock correction
(:func:`normalize_timestamp`) and privacy scrubbing (:func:`scrub`).
All transformations return new envelopes; nothing here mutates.

Wire format: a single UTF-8 JSON object with fields ``producer_id``,
``datatype``, ``timestamp_ms``, ``clock_offset_ms``, ``position:{lat,lon}``,
``license:{commercial_use,redistribution,geo_scope,expiry_ms}`` and either
``payload`` (structured object) or ``payload_b64`` (opaque bytes), plus an
optional ``privacy`` annotation.  No trailing bytes.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
import re
from dataclasses import dataclass, field, replace
from typing import Any

from .tilegrid import GeoPosition, validate_quadkey

DATATYPE_RE = re.compile(r"^[a-z0-9-]{1,64}$")

# Default bound on |corrected timestamp - node reference time|.
DEFAULT_CLOCK_BOUND_MS = 60_000

# Annotation applied to opaque payloads that cannot be key-scrubbed.
OPAQUE_UNSCREENED = "opaque-unscreened"

Payload = dict[str, Any] | bytes


class MalformedEnvelope(ValueError):
    """Input is not a single well-formed JSON object."""


class SchemaViolation(ValueError):
    """JSON parsed but a required field is missing or invalid."""


class ClockImplausible(ValueError):
    """Corrected timestamp is too far from the node's reference time."""


@dataclass(frozen=True)
class LicenseTag:
    """Usage grants declared by the data owner.

    ``geo_scope`` restricts use to deliveries whose tile lies inside that
    quadkey; ``expiry_ms`` invalidates the data from that instant on.
    """

    commercial_use: bool
    redistribution: bool
    geo_scope: str | None = None
    expiry_ms: int | None = None

    def __post_init__(self) -> None:
        if self.geo_scope is not None:
            validate_quadkey(self.geo_scope)
        if self.expiry_ms is not None and self.expiry_ms <= 0:
            raise ValueError("expiry_ms must be positive epoch milliseconds")


@dataclass(frozen=True)
class BlacklistPolicy:
    """Key names to remove wherever they appear in a structured payload."""

    keys: frozenset[str]

    def __post_init__(self) -> None:
        if any(not k for k in self.keys):
            raise ValueError("blacklist key names must be non-empty")


#: Operator-owned default; ships as config, not as a claim of completeness.
DEFAULT_BLACKLIST = BlacklistPolicy(frozenset({"vin", "plate", "driver_id"}))


@dataclass(frozen=True)
class Envelope:
    """One sample: who produced it, what it is, where, when, and under what terms."""

    producer_id: str
    datatype: str
    timestamp_ms: int
    clock_offset_ms: int
    position: GeoPosition
    license: LicenseTag
    payload: Payload
    size_bytes: int = field(default=-1)
    privacy: str | None = None

    def __post_init__(self) -> None:
        if not self.producer_id:
            raise ValueError("producer_id must be non-empty")
        if not DATATYPE_RE.match(self.datatype):
            raise ValueError(f"datatype {self.datatype!r} must match {DATATYPE_RE.pattern}")
        if self.timestamp_ms <= 0:
            raise ValueError("timestamp_ms must be positive")
        if self.size_bytes == -1:
            object.__setattr__(self, "size_bytes", payload_size(self.payload))
        elif self.size_bytes != payload_size(self.payload):
            raise ValueError("size_bytes does not match encoded payload length")

    @property
    def opaque(self) -> bool:
        return isinstance(self.payload, bytes)


def canonical_json(value: Any) -> str:
    """Deterministic JSON: sorted keys, no insignificant whitespace, UTF-8 text."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"),
                      ensure_ascii=False, allow_nan=False)


def payload_size(payload: Payload) -> int:
    """Encoded length in bytes: canonical JSON for structured, raw length for opaque."""
    if isinstance(payload, bytes):
        return len(payload)
    return len(canonical_json(payload).encode("utf-8"))


def _require(obj: dict[str, Any], key: str, kinds: type | tuple, what: str) -> Any:
    if key not in obj:
        raise SchemaViolation(f"missing field {key!r}")
    value = obj[key]
    # bool is an int subclass; never accept it where a number is required.
    if isinstance(value, bool) and kinds is not bool:
        raise SchemaViolation(f"field {key!r} must be {what}")
    if not isinstance(value, kinds):
        raise SchemaViolation(f"field {key!r} must be {what}")
    return value


_TOP_LEVEL_FIELDS = {"producer_id", "datatype", "timestamp_ms", "clock_offset_ms",
                     "position", "license", "payload", "payload_b64", "privacy"}


def parse_envelope(data: bytes | str) -> Envelope:
    """Decode and validate one wire message.

    Raises:
        MalformedEnvelope: not UTF-8, not JSON, trailing bytes, or not an object.
        SchemaViolation: missing/invalid field, bad position, bad license,
            or an unknown top-level field.
    """
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedEnvelope(f"not UTF-8: {exc}") from exc
    try:
        obj = json.loads(data, parse_constant=_reject_constant)
    except ValueError as exc:
        raise MalformedEnvelope(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise MalformedEnvelope("message body must be a JSON object")

    unknown = set(obj) - _TOP_LEVEL_FIELDS
    if unknown:
        raise SchemaViolation(f"unknown fields: {sorted(unknown)}")

    producer_id = _require(obj, "producer_id", str, "a string")
    datatype = _require(obj, "datatype", str, "a string")
    timestamp_ms = _require(obj, "timestamp_ms", int, "an integer")
    clock_offset_ms = obj.get("clock_offset_ms", 0)
    if isinstance(clock_offset_ms, bool) or not isinstance(clock_offset_ms, int):
        raise SchemaViolation("field 'clock_offset_ms' must be an integer")

    pos_obj = _require(obj, "position", dict, "an object")
    try:
        position = GeoPosition(float(pos_obj["lat"]), float(pos_obj["lon"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"invalid position: {exc}") from exc

    lic_obj = _require(obj, "license", dict, "an object")
    try:
        license_tag = LicenseTag(
            commercial_use=bool(lic_obj["commercial_use"]),
            redistribution=bool(lic_obj["redistribution"]),
            geo_scope=lic_obj.get("geo_scope"),
            expiry_ms=lic_obj.get("expiry_ms"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaViolation(f"invalid license: {exc}") from exc

    if ("payload" in obj) == ("payload_b64" in obj):
        raise SchemaViolation("exactly one of 'payload' or 'payload_b64' required")
    payload: Payload
    if "payload" in obj:
        payload = _require(obj, "payload", dict, "an object")
        _check_payload_values(payload)
    else:
        b64 = _require(obj, "payload_b64", str, "a base64 string")
        try:
            payload = base64.b64decode(b64, validate=True)
        except (binascii.Error, ValueError) as exc:
            raise SchemaViolation(f"invalid payload_b64: {exc}") from exc

    privacy = obj.get("privacy")
    if privacy is not None and not isinstance(privacy, str):
        raise SchemaViolation("field 'privacy' must be a string")

    try:
        return Envelope(producer_id, datatype, timestamp_ms, clock_offset_ms,
                        position, license_tag, payload, privacy=privacy)
    except ValueError as exc:
        raise SchemaViolation(str(exc)) from exc


def _reject_constant(name: str) -> Any:
    raise MalformedEnvelope(f"non-finite number {name!r} not allowed")


def _check_payload_values(value: Any) -> None:
    if isinstance(value, float) and not math.isfinite(value):
        raise SchemaViolation("payload numbers must be finite")
    elif isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise SchemaViolation("payload keys must be strings")
            _check_payload_values(item)
    elif isinstance(value, list):
        for item in value:
            _check_payload_values(item)


def serialize_envelope(env: Envelope) -> bytes:
    """Canonical wire encoding; inverse of :func:`parse_envelope`."""
    obj: dict[str, Any] = {
        "producer_id": env.producer_id,
        "datatype": env.datatype,
        "timestamp_ms": env.timestamp_ms,
        "clock_offset_ms": env.clock_offset_ms,
        "position": {"lat": env.position.lat, "lon": env.position.lon},
        "license": _license_to_obj(env.license),
    }
    if env.opaque:
        obj["payload_b64"] = base64.b64encode(env.payload).decode("ascii")
    else:
        obj["payload"] = env.payload
    if env.privacy is not None:
        obj["privacy"] = env.privacy
    return canonical_json(obj).encode("utf-8")


def _license_to_obj(lic: LicenseTag) -> dict[str, Any]:
    obj: dict[str, Any] = {
        "commercial_use": lic.commercial_use,
        "redistribution": lic.redistribution,
    }
    if lic.geo_scope is not None:
        obj["geo_scope"] = lic.geo_scope
    if lic.expiry_ms is not None:
        obj["expiry_ms"] = lic.expiry_ms
    return obj


def _scrub_value(value: Any, keys: frozenset[str]) -> Any:
    if isinstance(value, dict):
        return {k: _scrub_value(v, keys) for k, v in value.items() if k not in keys}
    if isinstance(value, list):
        return [_scrub_value(v, keys) for v in value]
    return value


def scrub(env: Envelope, policy: BlacklistPolicy) -> Envelope:
    """Remove blacklisted keys at every nesting depth, including inside arrays.

    Opaque payloads cannot be inspected; they pass through unchanged and are
    annotated ``opaque-unscreened`` instead.
    """
    if env.opaque:
        return replace(env, privacy=OPAQUE_UNSCREENED)
    cleaned = _scrub_value(env.payload, policy.keys)
    return replace(env, payload=cleaned, size_bytes=payload_size(cleaned))


def find_blacklisted(payload: Payload, policy: BlacklistPolicy) -> list[str]:
    """All blacklisted key names present at any depth (diagnostic helper)."""
    hits: list[str] = []

    def walk(value: Any) -> None:
        if isinstance(value, dict):
            for k, v in value.items():
                if k in policy.keys:
                    hits.append(k)
                walk(v)
        elif isinstance(value, list):
            for v in value:
                walk(v)

    if not isinstance(payload, bytes):
        walk(payload)
    return hits


def normalize_timestamp(env: Envelope, reference_ms: int | None = None,
                        max_skew_ms: int = DEFAULT_CLOCK_BOUND_MS) -> Envelope:
    """Fold the producer's reported clock offset into the timestamp.

    Idempotent: after one application the offset is zero.  When
    ``reference_ms`` is given, a corrected timestamp further than
    ``max_skew_ms`` from it raises :class:`ClockImplausible` and the sample
    must be rejected.
    """
    corrected = env.timestamp_ms + env.clock_offset_ms
    if corrected <= 0:
        raise ClockImplausible(f"corrected timestamp {corrected} not positive")
    if reference_ms is not None and abs(corrected - reference_ms) > max_skew_ms:
        raise ClockImplausible(
            f"corrected timestamp {corrected} deviates "
            f"{abs(corrected - reference_ms)} ms from reference {reference_ms}")
    if corrected == env.timestamp_ms and env.clock_offset_ms == 0:
        return env
    return replace(env, timestamp_ms=corrected, clock_offset_ms=0)
