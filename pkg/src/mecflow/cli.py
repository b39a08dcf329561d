"""Command-line entry points.

``mecflow tile ...``   quadkey debugging helpers
``mecflow sim run``    run a scenario file, export metrics
``mecflow node serve`` serve one MEC node's HTTP API from a config file
``mecflow hub serve``  serve the cloud hub's HTTP API from a config file

Exit codes: 0 success, 2 invalid scenario/config, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any

from .clockutil import WallClock
from .cloudhub import CloudHub, TokenStore
from .envelope import DEFAULT_BLACKLIST, BlacklistPolicy
from .httpapi import ApiServer, HubSync, NodeWorker, make_hub_api, make_node_api
from .lifecycle import (
    PipelineDescriptor,
    TrustStore,
    generate_signer,
    load_pipeline_descriptor,
    sign_payload,
)
from .mecnode import MecConfig, MecNode
from .policy import default_tier_catalog, tier_catalog_from_config
from .simharness import IoFailure, Scenario, ScenarioInvalid, export_metrics, run_scenario
from .tilegrid import (
    BoundingBox,
    GeoPosition,
    Tile,
    cover_roi,
    latlon_to_tile,
    tile_to_quadkey,
)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_INVALID = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mecflow",
                                     description=__doc__.splitlines()[0])
    top = parser.add_subparsers(dest="command", required=True)

    tile = top.add_parser("tile", help="quadkey/tile math helpers")
    tile_sub = tile.add_subparsers(dest="tile_command", required=True)

    encode = tile_sub.add_parser("encode", help="tile x/y/level -> quadkey")
    encode.add_argument("--x", type=int, required=True)
    encode.add_argument("--y", type=int, required=True)
    encode.add_argument("--level", type=int, required=True)

    locate = tile_sub.add_parser("locate", help="lat/lon/level -> quadkey")
    locate.add_argument("--lat", type=float, required=True)
    locate.add_argument("--lon", type=float, required=True)
    locate.add_argument("--level", type=int, required=True)

    cover = tile_sub.add_parser("cover", help="bbox S,W,N,E -> quadkey set")
    cover.add_argument("--bbox", required=True, metavar="S,W,N,E")
    cover.add_argument("--level", type=int, required=True)

    sim = top.add_parser("sim", help="deterministic scenario runs")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)
    run = sim_sub.add_parser("run", help="execute a scenario file")
    run.add_argument("--scenario", required=True, help="scenario JSON file")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--baseline", choices=["always-on"],
                     help="provision pipelines for every produced datatype "
                          "up front instead of on demand")

    node = top.add_parser("node", help="MEC node service")
    node_sub = node.add_subparsers(dest="node_command", required=True)
    node_serve = node_sub.add_parser("serve", help="serve the node HTTP API")
    node_serve.add_argument("--config", required=True, help="node config JSON file")

    hub = top.add_parser("hub", help="cloud hub service")
    hub_sub = hub.add_subparsers(dest="hub_command", required=True)
    hub_serve = hub_sub.add_parser("serve", help="serve the hub HTTP API")
    hub_serve.add_argument("--config", required=True, help="hub config JSON file")

    return parser


# --------------------------------------------------------------------------
# tile


def _cmd_tile(args: argparse.Namespace) -> int:
    if args.tile_command == "encode":
        print(tile_to_quadkey(Tile(args.x, args.y, args.level)))
    elif args.tile_command == "locate":
        print(tile_to_quadkey(latlon_to_tile(GeoPosition(args.lat, args.lon),
                                             args.level)))
    elif args.tile_command == "cover":
        parts = [float(v) for v in args.bbox.split(",")]
        if len(parts) != 4:
            raise ValueError("--bbox wants four numbers: S,W,N,E")
        south, west, north, east = parts
        keys = cover_roi(BoundingBox(south, west, north, east), args.level)
        print(",".join(sorted(keys)))
    return EXIT_OK


# --------------------------------------------------------------------------
# sim


def _cmd_sim_run(args: argparse.Namespace) -> int:
    try:
        text = Path(args.scenario).read_text(encoding="utf-8")
    except OSError as exc:
        print(f"cannot read scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    scenario = Scenario.from_json(text)
    result = run_scenario(scenario, baseline=args.baseline == "always-on")
    files = export_metrics(result.metrics, args.out)
    m = result.metrics
    print(f"ingested={m.ingested} accepted={m.accepted} "
          f"discarded={m.discarded_no_demand} rejected={m.rejected} "
          f"deployed={m.pipelines_deployed} reaped={m.pipelines_reaped} "
          f"compute_mcpu_s={m.total_compute_mcpu_ms / 1000:.3f}")
    for path in files:
        print(f"wrote {path}")
    return EXIT_OK


# --------------------------------------------------------------------------
# serve


def _load_config(path: str) -> dict[str, Any]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ScenarioInvalid(f"cannot load config {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ScenarioInvalid("config must be a JSON object")
    return obj


def _node_from_config(cfg: dict[str, Any]) -> tuple[MecNode, dict[str, Any]]:
    clock = WallClock()
    if "tile" in cfg:
        tile = cfg["tile"]
    else:
        level = int(cfg.get("registration_level", 14))
        tile = tile_to_quadkey(latlon_to_tile(
            GeoPosition(float(cfg["lat"]), float(cfg["lon"])), level))

    config = MecConfig.from_obj({**cfg, "tile": tile})
    tiers = default_tier_catalog()
    if "tiers" in cfg:
        tiers.update(tier_catalog_from_config(cfg["tiers"]))

    trust = TrustStore.from_config(cfg.get("trust_store", {}))
    catalog: dict[str, PipelineDescriptor] = {}
    for path in cfg.get("descriptor_files", []):
        desc = load_pipeline_descriptor(path)
        catalog[desc.datatype] = desc
    if cfg.get("dev_sign") and cfg.get("descriptors"):
        # development convenience: sign inline descriptors with a fresh key
        private, public = generate_signer()
        trust.pin("dev-signer", public)
        for entry in cfg["descriptors"]:
            unsigned = PipelineDescriptor(
                entry["datatype"], entry["image_ref"], "dev-signer", b"",
                float(entry.get("per_replica_capacity_msgs_per_s", 50.0)))
            signature = sign_payload(private, unsigned.signing_payload())
            catalog[unsigned.datatype] = PipelineDescriptor(
                unsigned.datatype, unsigned.image_ref, "dev-signer", signature,
                unsigned.per_replica_capacity_msgs_per_s)

    node = MecNode(config, catalog, trust, tiers, clock)
    return node, cfg


def _cmd_node_serve(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    try:
        node, cfg = _node_from_config(cfg)
        tokens = TokenStore.from_config(cfg.get("tokens", []))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioInvalid(f"bad node config: {exc}") from exc

    server = ApiServer(make_node_api(node, tokens),
                       cfg.get("host", "127.0.0.1"), int(cfg.get("port", 8081)))
    worker = NodeWorker(node).start()
    sync = None
    hub_cfg = cfg.get("hub")
    if hub_cfg:
        sync = HubSync(node, hub_cfg["url"], hub_cfg["admin_token"],
                       endpoint=cfg.get("endpoint", server.url),
                       report_period_ms=int(hub_cfg.get("report_period_ms", 1000)),
                       heartbeat_period_ms=int(hub_cfg.get("heartbeat_period_ms",
                                                           10_000))).start()
    print(f"node {node.mec_id} serving on {server.url} (tile {node.config.tile})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        worker.stop()
        if sync is not None:
            sync.stop()
    return EXIT_OK


def _cmd_hub_serve(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    try:
        tiers = default_tier_catalog()
        if "tiers" in cfg:
            tiers.update(tier_catalog_from_config(cfg["tiers"]))
        tokens = TokenStore.from_config(cfg.get("tokens", []))
        hub = CloudHub(tiers, tokens, WallClock(),
                       stale_ms=int(cfg.get("stale_ms", 30_000)),
                       live_recency_ms=int(cfg.get("live_recency_ms", 30_000)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioInvalid(f"bad hub config: {exc}") from exc

    server = ApiServer(make_hub_api(hub, node_token=cfg.get("node_token")),
                       cfg.get("host", "127.0.0.1"), int(cfg.get("port", 8080)))
    print(f"hub serving on {server.url}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "tile":
            return _cmd_tile(args)
        if args.command == "sim":
            return _cmd_sim_run(args)
        if args.command == "node":
            return _cmd_node_serve(args)
        if args.command == "hub":
            return _cmd_hub_serve(args)
        parser.error(f"unknown command {args.command!r}")
    except ScenarioInvalid as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except IoFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
