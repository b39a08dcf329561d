"""Cloud hub: registry, routing, tokens, subscriptions, accounting, bans."""

from __future__ import annotations

import pytest

from mecflow.cloudhub import (
    AccessToken,
    AllAttachesFailed,
    CloudHub,
    DirectNodeLink,
    NoMatchingMec,
    NoServingMec,
    TokenStore,
    Unauthorized,
    UnknownMec,
    UnknownSubscription,
)
from mecflow.envelope import serialize_envelope
from mecflow.lifecycle import BannedImage, PipelineState
from mecflow.mecnode import ConsumerUsage, PipelineUsage, UsageReport
from mecflow.policy import ConsumerTerms, UnknownTier
from mecflow.tilegrid import (
    GeoPosition,
    latlon_to_tile,
    quadkey_to_tile,
    tile_center,
    tile_to_quadkey,
)

from conftest import ADMIN, CONSUME, HOME, PRODUCE

TERMS = ConsumerTerms()


def home_key(level: int = 14) -> str:
    return tile_to_quadkey(latlon_to_tile(HOME, level))


@pytest.fixture
def registered(hub, make_node):
    node = make_node("m1")
    hub.register_mec(ADMIN, "m1", node.config.tile, link=DirectNodeLink(node))
    return node


class TestTokens:
    def test_unknown_token(self, hub):
        with pytest.raises(Unauthorized):
            hub.register_mec("nope", "m1", "1202")

    def test_missing_scope_uniform_and_side_effect_free(self, hub):
        with pytest.raises(Unauthorized):
            hub.register_mec(CONSUME, "m1", "1202")
        with pytest.raises(Unauthorized):
            hub.browse(PRODUCE, {"1202"}, "cam")
        with pytest.raises(Unauthorized):
            hub.resolve_serving_mec(CONSUME, HOME)
        with pytest.raises(Unauthorized):
            hub.subscribe(ADMIN, "cam", "small", TERMS, {"1202"})
        # the refused register left no record behind
        assert hub.list_mecs(ADMIN) == []

    def test_expired_token(self, tiers, clock):
        store = TokenStore([AccessToken("t", frozenset({"admin"}),
                                        expiry_ms=clock.now_ms())])
        hub = CloudHub(tiers, store, clock)
        with pytest.raises(Unauthorized):
            hub.register_mec("t", "m1", "1202")

    def test_scopes_validated(self):
        with pytest.raises(ValueError):
            AccessToken("t", frozenset({"root"}))


class TestRegistry:
    def test_register_and_reregister(self, hub):
        record = hub.register_mec(ADMIN, "m1", "1202", endpoint="a")
        assert record.tile == "1202"
        again = hub.register_mec(ADMIN, "m1", "1202", endpoint="b")
        assert again is record
        assert again.endpoint == "b"
        assert len(hub.list_mecs(ADMIN)) == 1

    def test_stale_mec_excluded_everywhere(self, hub, registered, clock):
        key = home_key()
        assert hub.browse(CONSUME, {key}, "cam") != []
        clock.advance(31_000)  # past the 30 s staleness bound, no heartbeat
        assert hub.browse(CONSUME, {key}, "cam") == []
        with pytest.raises(NoServingMec):
            hub.resolve_serving_mec(PRODUCE, HOME)
        with pytest.raises(NoMatchingMec):
            hub.subscribe(CONSUME, "cam", "small", TERMS, {key})

    def test_heartbeat_revives(self, hub, registered, clock):
        clock.advance(31_000)
        hub.heartbeat(ADMIN, "m1")
        assert hub.browse(CONSUME, {home_key()}, "cam") != []

    def test_heartbeat_unknown_mec(self, hub):
        with pytest.raises(UnknownMec):
            hub.heartbeat(ADMIN, "zz")


class TestResolve:
    def test_single_containing_tile(self, hub, registered):
        assert hub.resolve_serving_mec(PRODUCE, HOME).mec_id == "m1"

    def test_outside_all_tiles(self, hub, registered):
        with pytest.raises(NoServingMec):
            hub.resolve_serving_mec(PRODUCE, GeoPosition(-43.0, 120.0))

    def test_nested_tiles_deeper_wins_at_its_center(self, hub):
        shallow = home_key(10)
        deep = home_key(14)
        hub.register_mec(ADMIN, "wide", shallow)
        hub.register_mec(ADMIN, "deep", deep)
        at_deep_center = tile_center(quadkey_to_tile(deep))
        assert hub.resolve_serving_mec(PRODUCE, at_deep_center).mec_id == "deep"

    def test_same_tile_tie_breaks_on_mec_id(self, hub):
        key = home_key()
        hub.register_mec(ADMIN, "m-b", key)
        hub.register_mec(ADMIN, "m-a", key)
        assert hub.resolve_serving_mec(PRODUCE, HOME).mec_id == "m-a"


class TestBrowse:
    def test_intersection_both_directions(self, hub):
        hub.register_mec(ADMIN, "m120", "120")
        hub.register_mec(ADMIN, "m121", "121")
        # ROI key deeper than the registered tile
        results = hub.browse(CONSUME, {"1210"}, "cam")
        assert [r["mec_id"] for r in results] == ["m121"]
        # ROI key shallower than the registered tile
        results = hub.browse(CONSUME, {"12"}, "cam")
        assert [r["mec_id"] for r in results] == ["m120", "m121"]

    def test_empty_intersection(self, hub, registered):
        assert hub.browse(CONSUME, {"3333"}, "cam") == []

    def test_live_flag_tracks_recent_production(self, hub, registered, clock):
        key = home_key()
        (before,) = hub.browse(CONSUME, {key}, "cam")
        assert before["live"] is False
        report = UsageReport("m1", 1, clock.now_ms(), {}, {}, {"cam": 512})
        hub.ingest_usage("m1", report)
        (after,) = hub.browse(CONSUME, {key}, "cam")
        assert after["live"] is True
        (other,) = hub.browse(CONSUME, {key}, "video")
        assert other["live"] is False
        clock.advance(31_000)
        hub.heartbeat(ADMIN, "m1")
        (later,) = hub.browse(CONSUME, {key}, "cam")
        assert later["live"] is False  # production recency expired


class TestSubscribe:
    def test_end_to_end_attach_deploys_pipeline(self, hub, registered):
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        assert sub.matched_mec_ids == ["m1"]
        inst = registered.lifecycle.running_for("cam")
        assert inst is not None and inst.state is PipelineState.RUNNING
        assert inst.consumer_refs == {sub.subscription_id}

    def test_tier_too_large_all_fail(self, hub, make_node):
        node = make_node("m1", cpu_millicores=100)
        hub.register_mec(ADMIN, "m1", node.config.tile, link=DirectNodeLink(node))
        with pytest.raises(AllAttachesFailed) as err:
            hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        assert "InsufficientResources" in err.value.reasons["m1"]

    def test_no_matching_mec(self, hub, registered):
        with pytest.raises(NoMatchingMec):
            hub.subscribe(CONSUME, "cam", "small", TERMS, {"0000"})

    def test_unknown_tier(self, hub, registered):
        with pytest.raises(UnknownTier):
            hub.subscribe(CONSUME, "cam", "gold", TERMS, {home_key()})

    def test_partial_success_is_success(self, hub, make_node):
        full = make_node("m-full", cpu_millicores=100)
        ok = make_node("m-ok")
        hub.register_mec(ADMIN, "m-full", full.config.tile, link=DirectNodeLink(full))
        hub.register_mec(ADMIN, "m-ok", ok.config.tile, link=DirectNodeLink(ok))
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        assert sub.matched_mec_ids == ["m-ok"]

    def test_matched_equals_live_intersecting(self, hub, make_node, clock):
        near = make_node("m-near")
        hub.register_mec(ADMIN, "m-near", near.config.tile,
                         link=DirectNodeLink(near))
        hub.register_mec(ADMIN, "m-far", "0000")
        stale = make_node("m-stale")
        hub.register_mec(ADMIN, "m-stale", stale.config.tile,
                         link=DirectNodeLink(stale))
        clock.advance(20_000)
        hub.heartbeat(ADMIN, "m-near")
        hub.heartbeat(ADMIN, "m-far")
        clock.advance(15_000)  # m-stale heartbeat now 35 s old
        hub.heartbeat(ADMIN, "m-near")
        hub.heartbeat(ADMIN, "m-far")
        sub = hub.subscribe(CONSUME, "cam", "small", TERMS, {home_key()})
        assert sub.matched_mec_ids == ["m-near"]

    def test_unsubscribe_detaches_and_reaps_after_grace(self, hub, registered,
                                                        clock):
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        inst = registered.lifecycle.running_for("cam")
        assert hub.unsubscribe(sub.subscription_id) is True
        assert hub.unsubscribe(sub.subscription_id) is False
        assert hub.unsubscribe("sub-999999") is False
        clock.advance(30_000)
        registered.lifecycle.reap_idle()
        assert inst.state is PipelineState.TERMINATED


class TestAccounting:
    def test_unknown_mec_report_rejected(self, hub):
        report = UsageReport("ghost", 1, 0, {}, {}, {})
        with pytest.raises(UnknownMec):
            hub.ingest_usage("ghost", report)

    def test_bytes_accrue_for_cloud_consumers(self, hub, registered, clock):
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        ref = sub.subscription_id
        report = UsageReport("m1", 1, clock.now_ms(),
                             {ref: ConsumerUsage(300, "cloud", "cam")}, {}, {})
        hub.ingest_usage("m1", report)
        assert hub.billing_report(ref)["bytes"] == 300

    def test_replayed_seq_is_idempotent(self, hub, registered, clock):
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        ref = sub.subscription_id
        report = UsageReport("m1", 1, clock.now_ms(),
                             {ref: ConsumerUsage(300, "cloud", "cam")}, {}, {})
        hub.ingest_usage("m1", report)
        hub.ingest_usage("m1", report)
        assert hub.billing_report(ref)["bytes"] == 300

    def test_compute_split_equally(self, hub, registered, clock):
        a = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        b = hub.subscribe(CONSUME, "cam", "small", TERMS, {home_key()})
        report = UsageReport(
            "m1", 1, clock.now_ms(), {},
            {"m1-cam-1": PipelineUsage("cam", 1_000_000,
                                       (a.subscription_id, b.subscription_id))},
            {})
        hub.ingest_usage("m1", report)
        assert hub.billing_report(a.subscription_id)["compute_mcpu_ms"] == 500_000
        assert hub.billing_report(b.subscription_id)["compute_mcpu_ms"] == 500_000

    def test_split_remainder_deterministic_and_exact(self, hub, registered, clock):
        a = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        b = hub.subscribe(CONSUME, "cam", "small", TERMS, {home_key()})
        refs = sorted([a.subscription_id, b.subscription_id])
        report = UsageReport("m1", 1, clock.now_ms(), {},
                             {"m1-cam-1": PipelineUsage("cam", 1001, tuple(refs))},
                             {})
        hub.ingest_usage("m1", report)
        first = hub.billing_report(refs[0])["compute_mcpu_ms"]
        second = hub.billing_report(refs[1])["compute_mcpu_ms"]
        assert (first, second) == (501, 500)
        assert first + second == 1001

    def test_orphan_compute_goes_unattributed(self, hub, registered, clock):
        report = UsageReport("m1", 1, clock.now_ms(), {},
                             {"m1-cam-1": PipelineUsage("cam", 777, ())}, {})
        hub.ingest_usage("m1", report)
        assert hub.unattributed_compute_mcpu_ms == 777

    def test_local_consumer_billed_from_produced_volume(self, hub, registered,
                                                        clock):
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()},
                            destination="local")
        ref = sub.subscription_id
        report = UsageReport("m1", 1, clock.now_ms(),
                             {ref: ConsumerUsage(42, "local", "cam")},
                             {}, {"cam": 9000})
        hub.ingest_usage("m1", report)
        # declared produced volume, not the tap's 42 bytes
        assert hub.billing_report(ref)["bytes"] == 9000

    def test_billing_lifecycle(self, hub, registered):
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        bill = hub.billing_report(sub.subscription_id)
        assert bill["bytes"] == 0 and bill["compute_mcpu_ms"] == 0
        with pytest.raises(UnknownSubscription):
            hub.billing_report("sub-424242")

    def test_billing_survives_unsubscribe(self, hub, registered, clock):
        sub = hub.subscribe(CONSUME, "cam", "large", TERMS, {home_key()})
        ref = sub.subscription_id
        hub.ingest_usage("m1", UsageReport(
            "m1", 1, clock.now_ms(), {ref: ConsumerUsage(64, "cloud", "cam")},
            {}, {}))
        hub.unsubscribe(ref)
        assert hub.billing_report(ref)["bytes"] == 64


class TestBans:
    def test_propagates_to_every_live_mec(self, hub, make_node, catalog):
        nodes = [make_node(f"m{i}") for i in range(3)]
        for node in nodes:
            hub.register_mec(ADMIN, node.mec_id, node.config.tile,
                             link=DirectNodeLink(node))
        acks = hub.propagate_ban("registry.local/services/evil:1", "volume-mismatch")
        assert acks == 3
        for node in nodes:
            assert "registry.local/services/evil:1" in node.lifecycle.ban_list

    def test_duplicate_ban_still_acked(self, hub, registered):
        assert hub.propagate_ban("img:x", "a") == 1
        assert hub.propagate_ban("img:x", "a") == 1

    def test_banned_pipeline_image_cannot_deploy_anywhere(self, hub, make_node,
                                                          catalog):
        nodes = [make_node(f"m{i}") for i in range(3)]
        for node in nodes:
            hub.register_mec(ADMIN, node.mec_id, node.config.tile,
                             link=DirectNodeLink(node))
        hub.propagate_ban(catalog["cam"].image_ref, "test")
        for node in nodes:
            with pytest.raises(BannedImage):
                node.attach_consumer("c1", "cam", "small", TERMS,
                                     {node.config.tile})
