"""Demand-driven edge data platform for connected-vehicle telemetry.

MEC nodes ingest geo-tagged sensor samples, deploy processing pipelines
only while consumers demand them, and filter each consumer's flow by
region, license, and SLA sampling rate.  A cloud hub indexes nodes by map
tile, routes consumers, propagates trust bans, and accounts for consumed
bytes and compute.  A deterministic simulator drives the whole lifecycle,
including vehicle movement and MEC handover.
"""

from .broker import Broker, Subscription, topic_matches
from .clockutil import SimClock, WallClock
from .cloudhub import (
    AccessToken,
    CloudHub,
    ConsumerSubscription,
    DirectNodeLink,
    MecRecord,
    TokenStore,
)
from .envelope import (
    BlacklistPolicy,
    Envelope,
    LicenseTag,
    normalize_timestamp,
    parse_envelope,
    scrub,
    serialize_envelope,
)
from .lifecycle import (
    BanList,
    HostedServiceDescriptor,
    LifecycleManager,
    PipelineDescriptor,
    PipelineInstance,
    PipelineState,
    TrustStore,
    verify_signature,
)
from .mecnode import EgressTap, IngestResult, MecConfig, MecNode, UsageReport
from .policy import (
    Capacity,
    ConsumerTerms,
    SamplerState,
    SlaTier,
    admit_request,
    default_tier_catalog,
    license_permits,
    release_reservation,
    sample_admit,
)
from .tilegrid import (
    BoundingBox,
    GeoPosition,
    Tile,
    cover_roi,
    latlon_to_tile,
    quadkey_contains,
    quadkey_to_tile,
    tile_to_quadkey,
)

__version__ = "0.1.0"
