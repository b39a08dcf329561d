"""Shared fixtures: deterministic signer, catalogs, clocks, and node/hub builders."""

from __future__ import annotations

import hashlib

import pytest
from hypothesis import HealthCheck, settings as hypothesis_settings

from mecflow.clockutil import SimClock

# Wall-clock deadlines make property tests flaky on loaded machines.
hypothesis_settings.register_profile(
    "mecflow", deadline=None, suppress_health_check=[HealthCheck.too_slow])
hypothesis_settings.load_profile("mecflow")
from mecflow.cloudhub import AccessToken, CloudHub, TokenStore
from mecflow.envelope import Envelope, LicenseTag
from mecflow.lifecycle import (
    HostedServiceDescriptor,
    PipelineDescriptor,
    TrustStore,
    generate_signer,
    sign_payload,
)
from mecflow.mecnode import MecConfig, MecNode
from mecflow.policy import default_tier_catalog
from mecflow.tilegrid import GeoPosition, latlon_to_tile, tile_to_quadkey

EPOCH_MS = 1_600_000_000_000

ADMIN = "tok-admin"
PRODUCE = "tok-produce"
CONSUME = "tok-consume"

# A fixed reference point (northern Spain) used across the node tests.
HOME = GeoPosition(43.29, -1.98)


@pytest.fixture
def clock():
    return SimClock(EPOCH_MS)


@pytest.fixture(scope="session")
def signer():
    private, public = generate_signer(hashlib.sha256(b"mecflow-tests").digest())
    return private, public


@pytest.fixture
def trust_store(signer):
    _, public = signer
    return TrustStore({"test-signer": public})


@pytest.fixture
def make_descriptor(signer):
    private, _ = signer

    def build(datatype: str, image_ref: str | None = None,
              per_replica: float = 50.0) -> PipelineDescriptor:
        image = image_ref or f"registry.local/pipelines/{datatype}:1"
        unsigned = PipelineDescriptor(datatype, image, "test-signer", b"",
                                      per_replica)
        signature = sign_payload(private, unsigned.signing_payload())
        return PipelineDescriptor(datatype, image, "test-signer", signature,
                                  per_replica)

    return build


@pytest.fixture
def make_service_descriptor(signer):
    private, _ = signer

    def build(service_id: str, declared_topics: set[str], declared_volume: int,
              image_ref: str | None = None) -> HostedServiceDescriptor:
        image = image_ref or f"registry.local/services/{service_id}:1"
        unsigned = HostedServiceDescriptor(service_id, frozenset(declared_topics),
                                           declared_volume, image, "test-signer",
                                           b"x")
        signature = sign_payload(private, unsigned.signing_payload())
        return HostedServiceDescriptor(service_id, frozenset(declared_topics),
                                       declared_volume, image, "test-signer",
                                       signature)

    return build


@pytest.fixture
def catalog(make_descriptor):
    return {dt: make_descriptor(dt) for dt in ("cam", "denm", "video", "lidar")}


@pytest.fixture
def tiers():
    return default_tier_catalog()


@pytest.fixture
def home_tile():
    return tile_to_quadkey(latlon_to_tile(HOME, 14))


@pytest.fixture
def make_node(catalog, trust_store, tiers, clock, home_tile):
    def build(mec_id: str = "m1", tile: str | None = None, **config_kwargs) -> MecNode:
        config = MecConfig(mec_id=mec_id, tile=tile or home_tile, **config_kwargs)
        return MecNode(config, catalog, trust_store, tiers, clock)

    return build


@pytest.fixture
def token_store():
    return TokenStore([
        AccessToken(ADMIN, frozenset({"admin"})),
        AccessToken(PRODUCE, frozenset({"produce"})),
        AccessToken(CONSUME, frozenset({"consume"})),
    ])


@pytest.fixture
def hub(tiers, token_store, clock):
    return CloudHub(tiers, token_store, clock)


@pytest.fixture
def make_envelope(clock):
    def build(producer_id: str = "p1", datatype: str = "cam",
              position: GeoPosition = HOME,
              license_tag: LicenseTag | None = None,
              payload=None, timestamp_ms: int | None = None,
              clock_offset_ms: int = 0) -> Envelope:
        return Envelope(
            producer_id=producer_id,
            datatype=datatype,
            timestamp_ms=timestamp_ms if timestamp_ms is not None else clock.now_ms(),
            clock_offset_ms=clock_offset_ms,
            position=position,
            license=license_tag or LicenseTag(True, True),
            payload=payload if payload is not None else {"speed": 50},
        )

    return build
