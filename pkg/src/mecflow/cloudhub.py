"""Cloud platform layer: MEC registry, routing, tokens, bans, accounting.

The hub knows every registered node by the tile it serves, fans consumer
subscriptions out to the nodes whose tiles intersect the requested region,
aggregates usage reports into per-subscription accounts, and propagates
trust bans so a failed third-party image can never deploy anywhere.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Protocol

from .lifecycle import BanList
from .mecnode import DESTINATION_CLOUD, DESTINATION_LOCAL, UsageReport
from .policy import ConsumerTerms, SlaTier, UnknownTier
from .tilegrid import (
    GeoPosition,
    latlon_to_tile,
    quadkey_contains,
    quadkey_to_tile,
    tile_center,
    tile_to_quadkey,
    validate_quadkey,
)

if TYPE_CHECKING:
    from .mecnode import MecNode

SCOPE_PRODUCE = "produce"
SCOPE_CONSUME = "consume"
SCOPE_HOST_SERVICE = "host-service"
SCOPE_ADMIN = "admin"
ALL_SCOPES = frozenset({SCOPE_PRODUCE, SCOPE_CONSUME, SCOPE_HOST_SERVICE, SCOPE_ADMIN})

DEFAULT_STALE_MS = 30_000
DEFAULT_LIVE_RECENCY_MS = 30_000


class Unauthorized(Exception):
    """Missing, expired, or under-scoped token."""


class NoServingMec(LookupError):
    """No live node's tile contains the position."""


class NoMatchingMec(LookupError):
    """No live node's tile intersects the requested ROI."""


class AllAttachesFailed(Exception):
    """Every matched node refused the consumer attach."""

    def __init__(self, reasons: dict[str, str]):
        super().__init__(f"all attaches failed: {reasons}")
        self.reasons = reasons


class UnknownMec(KeyError):
    """Report or call names a node that never registered."""


class UnknownSubscription(KeyError):
    """No such subscription id was ever issued."""


@dataclass(frozen=True)
class AccessToken:
    """Statically issued bearer token with scopes and optional expiry."""

    token: str
    scopes: frozenset[str]
    expiry_ms: int | None = None

    def __post_init__(self) -> None:
        unknown = self.scopes - ALL_SCOPES
        if unknown:
            raise ValueError(f"unknown scopes: {sorted(unknown)}")


class TokenStore:
    """Issued tokens; both the hub and node APIs check against one of these."""

    def __init__(self, tokens: list[AccessToken] | None = None):
        self._tokens = {t.token: t for t in (tokens or [])}

    @classmethod
    def from_config(cls, entries: list[dict[str, Any]]) -> "TokenStore":
        return cls([
            AccessToken(e["token"], frozenset(e["scopes"]), e.get("expiry_ms"))
            for e in entries
        ])

    def add(self, token: AccessToken) -> None:
        self._tokens[token.token] = token

    def check(self, token: str | None, scope: str, now_ms: int) -> AccessToken:
        """Return the token record iff it is known, fresh, and carries ``scope``."""
        record = self._tokens.get(token or "")
        if record is None:
            raise Unauthorized("unknown token")
        if record.expiry_ms is not None and now_ms >= record.expiry_ms:
            raise Unauthorized("token expired")
        if scope not in record.scopes:
            raise Unauthorized(f"scope {scope!r} required")
        return record


class NodeLink(Protocol):
    """Hub-side handle for driving one node (in-process or over HTTP)."""

    def attach(self, consumer_ref: str, datatype: str, tier_name: str,
               terms: ConsumerTerms, roi: frozenset[str], destination: str) -> None: ...

    def detach(self, consumer_ref: str) -> bool: ...

    def apply_ban(self, image_ref: str, reason: str) -> bool: ...


class DirectNodeLink:
    """In-process link wrapping a :class:`~mecflow.mecnode.MecNode`."""

    def __init__(self, node: "MecNode"):
        self.node = node

    def attach(self, consumer_ref: str, datatype: str, tier_name: str,
               terms: ConsumerTerms, roi: frozenset[str], destination: str) -> None:
        self.node.attach_consumer(consumer_ref, datatype, tier_name, terms, roi,
                                  destination=destination)

    def detach(self, consumer_ref: str) -> bool:
        return self.node.detach_consumer(consumer_ref)

    def apply_ban(self, image_ref: str, reason: str) -> bool:
        return self.node.apply_ban(image_ref, reason)


@dataclass
class MecRecord:
    """Registry entry for one node."""

    mec_id: str
    tile: str
    endpoint: str
    link: NodeLink | None
    last_heartbeat_ms: int
    datatypes_live: dict[str, int] = field(default_factory=dict)

    def to_obj(self) -> dict[str, Any]:
        return {
            "mec_id": self.mec_id,
            "tile": self.tile,
            "endpoint": self.endpoint,
            "last_heartbeat_ms": self.last_heartbeat_ms,
            "datatypes_live": dict(sorted(self.datatypes_live.items())),
        }


@dataclass
class ConsumerSubscription:
    """One consumer's routed demand for a datatype over a region."""

    subscription_id: str
    token: str
    datatype: str
    tier_name: str
    terms: ConsumerTerms
    roi: frozenset[str]
    destination: str
    matched_mec_ids: list[str]
    created_ms: int
    active: bool = True

    def to_obj(self) -> dict[str, Any]:
        return {
            "subscription_id": self.subscription_id,
            "datatype": self.datatype,
            "tier": self.tier_name,
            "terms": {"commercial_use": self.terms.commercial_use,
                      "redistribution": self.terms.redistribution},
            "roi": sorted(self.roi),
            "destination": self.destination,
            "matched_mec_ids": list(self.matched_mec_ids),
            "created_ms": self.created_ms,
            "active": self.active,
        }


@dataclass
class Account:
    accrued_bytes: int = 0
    accrued_compute_mcpu_ms: int = 0


class CloudHub:
    """Registry, router, and ledger for a fleet of MEC nodes.

    All state mutations happen under one lock (logically serialized);
    usage ingestion is idempotent per (mec_id, report seq).
    """

    def __init__(self, tier_catalog: dict[str, SlaTier], token_store: TokenStore,
                 clock, *, stale_ms: int = DEFAULT_STALE_MS,
                 live_recency_ms: int = DEFAULT_LIVE_RECENCY_MS):
        self.tier_catalog = dict(tier_catalog)
        self.tokens = token_store
        self.clock = clock
        self.stale_ms = stale_ms
        self.live_recency_ms = live_recency_ms
        self.ban_list = BanList()
        self._lock = threading.RLock()
        self._mecs: dict[str, MecRecord] = {}
        self._subs: dict[str, ConsumerSubscription] = {}
        self._accounts: dict[str, Account] = {}
        self._sub_ids = itertools.count(1)
        self._last_report_seq: dict[str, int] = {}
        self.unattributed_compute_mcpu_ms = 0

    # -- registry -----------------------------------------------------------

    def register_mec(self, token: str, mec_id: str, tile: str, endpoint: str = "",
                     link: NodeLink | None = None) -> MecRecord:
        """Create or update a node record; the heartbeat is refreshed.

        Requires an admin-scoped token.
        """
        now = self.clock.now_ms()
        self.tokens.check(token, SCOPE_ADMIN, now)
        validate_quadkey(tile)
        with self._lock:
            record = self._mecs.get(mec_id)
            if record is None:
                record = MecRecord(mec_id, tile, endpoint, link, now)
                self._mecs[mec_id] = record
            else:
                record.tile = tile
                record.endpoint = endpoint
                if link is not None:
                    record.link = link
                record.last_heartbeat_ms = now
            return record

    def heartbeat(self, token: str, mec_id: str) -> None:
        now = self.clock.now_ms()
        self.tokens.check(token, SCOPE_ADMIN, now)
        with self._lock:
            record = self._mecs.get(mec_id)
            if record is None:
                raise UnknownMec(mec_id)
            record.last_heartbeat_ms = now

    def list_mecs(self, token: str) -> list[MecRecord]:
        now = self.clock.now_ms()
        self.tokens.check(token, SCOPE_ADMIN, now)
        with self._lock:
            return [self._mecs[k] for k in sorted(self._mecs)]

    def _live_records(self, now_ms: int) -> list[MecRecord]:
        return [self._mecs[k] for k in sorted(self._mecs)
                if now_ms - self._mecs[k].last_heartbeat_ms <= self.stale_ms]

    # -- routing --------------------------------------------------------------

    def resolve_serving_mec(self, token: str, pos: GeoPosition) -> MecRecord:
        """The live node whose registered tile contains the position.

        Among several containing tiles (e.g. nested registrations), the one
        whose tile center is nearest wins; ties break on mec_id.
        """
        now = self.clock.now_ms()
        self.tokens.check(token, SCOPE_PRODUCE, now)
        with self._lock:
            candidates = []
            for record in self._live_records(now):
                level = len(record.tile)
                key = tile_to_quadkey(latlon_to_tile(pos, level))
                if key != record.tile:
                    continue
                center = tile_center(quadkey_to_tile(record.tile))
                dist2 = (center.lat - pos.lat) ** 2 + (center.lon - pos.lon) ** 2
                candidates.append((dist2, record.mec_id, record))
            if not candidates:
                raise NoServingMec(f"no live MEC serves ({pos.lat}, {pos.lon})")
            candidates.sort(key=lambda c: (c[0], c[1]))
            return candidates[0][2]

    @staticmethod
    def _tile_intersects_roi(tile: str, roi: frozenset[str]) -> bool:
        return any(quadkey_contains(tile, key) or quadkey_contains(key, tile)
                   for key in roi)

    def browse(self, token: str, roi: frozenset[str] | set[str],
               datatype: str) -> list[dict[str, Any]]:
        """Live nodes whose tile intersects the ROI, with production recency.

        ``live`` in the result means the datatype was produced there within
        the recency bound, i.e. a subscription would see data immediately.
        """
        now = self.clock.now_ms()
        self.tokens.check(token, SCOPE_CONSUME, now)
        roi = frozenset(validate_quadkey(k) for k in roi)
        with self._lock:
            out = []
            for record in self._live_records(now):
                if not self._tile_intersects_roi(record.tile, roi):
                    continue
                seen = record.datatypes_live.get(datatype)
                out.append({
                    "mec_id": record.mec_id,
                    "datatype": datatype,
                    "live": seen is not None and now - seen <= self.live_recency_ms,
                })
            return out

    # -- subscriptions ---------------------------------------------------------

    def subscribe(self, token: str, datatype: str, tier_name: str,
                  terms: ConsumerTerms, roi: frozenset[str] | set[str],
                  destination: str = DESTINATION_CLOUD) -> ConsumerSubscription:
        """Fan a consumer's demand out to every live node covering the ROI.

        Partial success is success: the subscription records the nodes that
        attached.  If every matched node refuses, the whole subscription
        fails with the per-node reasons.
        """
        now = self.clock.now_ms()
        self.tokens.check(token, SCOPE_CONSUME, now)
        if tier_name not in self.tier_catalog:
            raise UnknownTier(tier_name)
        if destination not in (DESTINATION_CLOUD, DESTINATION_LOCAL):
            raise ValueError(f"unknown destination {destination!r}")
        roi = frozenset(validate_quadkey(k) for k in roi)
        if not roi:
            raise ValueError("roi must be non-empty")

        with self._lock:
            matched = [r for r in self._live_records(now)
                       if self._tile_intersects_roi(r.tile, roi)]
            if not matched:
                raise NoMatchingMec("no live MEC covers the ROI")
            sub_id = f"sub-{next(self._sub_ids):06d}"
            attached: list[str] = []
            reasons: dict[str, str] = {}
            for record in matched:
                if record.link is None:
                    reasons[record.mec_id] = "no-link"
                    continue
                try:
                    record.link.attach(sub_id, datatype, tier_name, terms, roi,
                                       destination)
                    attached.append(record.mec_id)
                except Exception as exc:
                    reasons[record.mec_id] = f"{type(exc).__name__}: {exc}"
            if not attached:
                raise AllAttachesFailed(reasons)
            sub = ConsumerSubscription(sub_id, token, datatype, tier_name, terms,
                                       roi, destination, attached, now)
            self._subs[sub_id] = sub
            self._accounts[sub_id] = Account()
            return sub

    def unsubscribe(self, subscription_id: str) -> bool:
        """Detach everywhere; accounts survive for late billing queries."""
        with self._lock:
            sub = self._subs.get(subscription_id)
            if sub is None or not sub.active:
                return False
            for mec_id in sub.matched_mec_ids:
                record = self._mecs.get(mec_id)
                if record is not None and record.link is not None:
                    record.link.detach(subscription_id)
            sub.active = False
            return True

    def get_subscription(self, subscription_id: str) -> ConsumerSubscription:
        with self._lock:
            sub = self._subs.get(subscription_id)
            if sub is None:
                raise UnknownSubscription(subscription_id)
            return sub

    # -- accounting ---------------------------------------------------------------

    def ingest_usage(self, mec_id: str, report: UsageReport) -> None:
        """Fold one node report into the accounts.

        Cloud-destination consumers accrue their tap's delivered bytes;
        local-destination consumers are billed from the node's declared
        produced volume for their datatype.  Pipeline compute is split
        equally (exactly, in integer mCPU-ms with deterministic remainders)
        among the consumers holding the pipeline during the window.
        """
        with self._lock:
            record = self._mecs.get(mec_id)
            if record is None or report.mec_id != mec_id:
                raise UnknownMec(mec_id)
            if report.seq <= self._last_report_seq.get(mec_id, 0):
                return  # replayed report; already accounted
            self._last_report_seq[mec_id] = report.seq

            for datatype, volume in report.produced.items():
                if volume > 0:
                    record.datatypes_live[datatype] = report.window_end_ms

            for ref in sorted(report.consumers):
                usage = report.consumers[ref]
                sub = self._subs.get(ref)
                if sub is None:
                    continue  # node-local consumer not managed by this hub
                if usage.destination == DESTINATION_LOCAL:
                    delta = report.produced.get(sub.datatype, 0)
                else:
                    delta = usage.delivered_bytes
                self._accounts[ref].accrued_bytes += delta

            for iid in sorted(report.pipelines):
                usage = report.pipelines[iid]
                delta = usage.compute_mcpu_ms
                if delta <= 0:
                    continue
                refs = sorted(usage.consumer_refs)
                if not refs:
                    self.unattributed_compute_mcpu_ms += delta
                    continue
                share, remainder = divmod(delta, len(refs))
                for i, ref in enumerate(refs):
                    amount = share + (1 if i < remainder else 0)
                    account = self._accounts.get(ref)
                    if account is None:
                        self.unattributed_compute_mcpu_ms += amount
                    else:
                        account.accrued_compute_mcpu_ms += amount

    def billing_report(self, subscription_id: str) -> dict[str, Any]:
        """Read-only account totals for one subscription."""
        with self._lock:
            if subscription_id not in self._accounts:
                raise UnknownSubscription(subscription_id)
            account = self._accounts[subscription_id]
            return {
                "subscription_id": subscription_id,
                "bytes": account.accrued_bytes,
                "compute_mcpu_ms": account.accrued_compute_mcpu_ms,
                "compute_mcpu_s": account.accrued_compute_mcpu_ms / 1000.0,
            }

    # -- trust ---------------------------------------------------------------------

    def propagate_ban(self, image_ref: str, reason: str) -> int:
        """Record a global ban and push it to every live node; returns acks."""
        now = self.clock.now_ms()
        self.ban_list.add(image_ref, reason, now)
        acked = 0
        with self._lock:
            live = self._live_records(now)
        for record in live:
            if record.link is not None and record.link.apply_ban(image_ref, reason):
                acked += 1
        return acked
