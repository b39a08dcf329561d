"""CLI: tile helpers, scenario runs with exit codes, node/hub serve."""

from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import time

import httpx
import pytest

from mecflow.cli import EXIT_INVALID, EXIT_OK, main

from conftest import HOME

LAT, LON = HOME.lat, HOME.lon


def run_main(capsys, *argv) -> tuple[int, str]:
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, out


class TestTileCommands:
    def test_encode(self, capsys):
        code, out = run_main(capsys, "tile", "encode", "--x", "3", "--y", "5",
                             "--level", "3")
        assert code == EXIT_OK
        assert out.strip() == "213"

    def test_locate(self, capsys):
        code, out = run_main(capsys, "tile", "locate", "--lat", "0", "--lon", "0",
                             "--level", "1")
        assert code == EXIT_OK
        assert out.strip() == "3"

    def test_cover(self, capsys):
        code, out = run_main(capsys, "tile", "cover", "--bbox=-1,-1,1,1",
                             "--level", "2")
        assert code == EXIT_OK
        assert out.strip() == "03,12,21,30"

    def test_bad_tile_is_invalid_input(self, capsys):
        code, _ = run_main(capsys, "tile", "encode", "--x", "9", "--y", "0",
                           "--level", "1")
        assert code == EXIT_INVALID


def scenario_doc() -> dict:
    return {
        "seed": 5,
        "duration_ms": 10_000,
        "tick_ms": 1000,
        "mecs": [{"mec_id": "m1", "lat": LAT, "lon": LON}],
        "producers": [{
            "producer_id": "p1", "datatype": "cam", "rate_hz": 5,
            "payload_bytes": 16,
            "license": {"commercial_use": True, "redistribution": True},
            "trace": [{"lat": LAT, "lon": LON}],
        }],
        "consumers": [{
            "consumer_id": "c1", "datatype": "cam", "tier": "large",
            "terms": {},
            "roi_bbox": [LAT - 0.01, LON - 0.01, LAT + 0.01, LON + 0.01],
            "start_ms": 0, "stop_ms": 10_000,
        }],
    }


class TestSimRun:
    def test_run_writes_files_and_reruns_identically(self, tmp_path, capsys):
        scn = tmp_path / "scenario.json"
        scn.write_text(json.dumps(scenario_doc()))
        code, out = run_main(capsys, "sim", "run", "--scenario", str(scn),
                             "--out", str(tmp_path / "a"))
        assert code == EXIT_OK
        assert "accepted=50" in out
        code, _ = run_main(capsys, "sim", "run", "--scenario", str(scn),
                           "--out", str(tmp_path / "b"))
        assert code == EXIT_OK
        for name in ("summary.json", "ticks.csv"):
            assert (tmp_path / "a" / name).read_bytes() \
                == (tmp_path / "b" / name).read_bytes()

    def test_baseline_flag(self, tmp_path, capsys):
        doc = scenario_doc()
        doc.pop("consumers")
        scn = tmp_path / "scenario.json"
        scn.write_text(json.dumps(doc))
        code, _ = run_main(capsys, "sim", "run", "--scenario", str(scn),
                           "--out", str(tmp_path / "demand"))
        assert code == EXIT_OK
        code, _ = run_main(capsys, "sim", "run", "--scenario", str(scn),
                           "--out", str(tmp_path / "base"),
                           "--baseline", "always-on")
        assert code == EXIT_OK
        demand = json.loads((tmp_path / "demand" / "summary.json").read_text())
        base = json.loads((tmp_path / "base" / "summary.json").read_text())
        assert demand["total_compute_mcpu_ms"] == 0
        assert base["total_compute_mcpu_ms"] > 0

    def test_invalid_scenario_exits_2(self, tmp_path, capsys):
        scn = tmp_path / "bad.json"
        scn.write_text(json.dumps({"seed": 1}))
        code, _ = run_main(capsys, "sim", "run", "--scenario", str(scn),
                           "--out", str(tmp_path / "x"))
        assert code == EXIT_INVALID

    def test_missing_file_exits_2(self, tmp_path, capsys):
        code, _ = run_main(capsys, "sim", "run", "--scenario",
                           str(tmp_path / "nope.json"), "--out", str(tmp_path))
        assert code == EXIT_INVALID


class TestServeConfigs:
    def test_bad_node_config_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "node.json"
        cfg.write_text(json.dumps({"port": 0}))  # no identity at all
        assert main(["node", "serve", "--config", str(cfg)]) == EXIT_INVALID
        capsys.readouterr()

    def test_unreadable_config_exits_2(self, tmp_path, capsys):
        assert main(["hub", "serve", "--config",
                     str(tmp_path / "missing.json")]) == EXIT_INVALID
        capsys.readouterr()


@pytest.mark.slow
class TestServeProcesses:
    def wait_for(self, url: str, deadline_s: float = 15.0) -> None:
        deadline = time.time() + deadline_s
        while time.time() < deadline:
            try:
                if httpx.get(url, timeout=1.0).status_code == 200:
                    return
            except httpx.HTTPError:
                time.sleep(0.1)
        raise TimeoutError(url)

    def test_hub_and_node_processes_serve_traffic(self, tmp_path):
        tokens = [
            {"token": "adm", "scopes": ["admin"]},
            {"token": "con", "scopes": ["consume"]},
            {"token": "pro", "scopes": ["produce"]},
        ]
        hub_cfg = tmp_path / "hub.json"
        hub_cfg.write_text(json.dumps({
            "host": "127.0.0.1", "port": 18090,
            "tokens": tokens, "node_token": "con",
        }))
        node_cfg = tmp_path / "node.json"
        node_cfg.write_text(json.dumps({
            "mec_id": "m1", "lat": LAT, "lon": LON, "registration_level": 14,
            "host": "127.0.0.1", "port": 18091,
            "endpoint": "http://127.0.0.1:18091",
            "tokens": tokens,
            "dev_sign": True,
            "descriptors": [{"datatype": "cam", "image_ref": "img/cam:1"}],
            "hub": {"url": "http://127.0.0.1:18090", "admin_token": "adm",
                    "report_period_ms": 200},
        }))

        env = dict(os.environ)
        hub_proc = subprocess.Popen(
            [sys.executable, "-m", "mecflow.cli", "hub", "serve",
             "--config", str(hub_cfg)], env=env,
            stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
        node_proc = None
        try:
            self.wait_for("http://127.0.0.1:18090/mecs")
            node_proc = subprocess.Popen(
                [sys.executable, "-m", "mecflow.cli", "node", "serve",
                 "--config", str(node_cfg)], env=env,
                stdout=subprocess.PIPE, stderr=subprocess.STDOUT)
            self.wait_for("http://127.0.0.1:18091/health")

            auth = {"Authorization": "Bearer con"}
            deadline = time.time() + 10
            mecs = []
            while time.time() < deadline and not mecs:
                resp = httpx.get("http://127.0.0.1:18090/mecs",
                                 headers={"Authorization": "Bearer adm"})
                mecs = resp.json().get("mecs", [])
                time.sleep(0.1)
            assert [m["mec_id"] for m in mecs] == ["m1"]
            tile = mecs[0]["tile"]

            sub = httpx.post("http://127.0.0.1:18090/subscriptions", headers=auth,
                             json={"datatype": "cam", "tier": "large",
                                   "roi": [tile]}).json()
            assert sub["matched_mec_ids"] == ["m1"]

            body = json.dumps({
                "producer_id": "p1", "datatype": "cam",
                "timestamp_ms": int(time.time() * 1000), "clock_offset_ms": 0,
                "position": {"lat": LAT, "lon": LON},
                "license": {"commercial_use": True, "redistribution": True},
                "payload": {"speed": 42},
            }).encode()
            resp = httpx.post("http://127.0.0.1:18091/ingest", content=body,
                              headers={"Authorization": "Bearer pro"})
            assert resp.json()["status"] == "accepted"

            deadline = time.time() + 10
            billed = 0
            while time.time() < deadline and billed == 0:
                billed = httpx.get(
                    f"http://127.0.0.1:18090/subscriptions/"
                    f"{sub['subscription_id']}/billing",
                    headers=auth).json()["bytes"]
                time.sleep(0.1)
            assert billed > 0
        finally:
            for proc in (node_proc, hub_proc):
                if proc is not None:
                    proc.send_signal(signal.SIGINT)
            for proc in (node_proc, hub_proc):
                if proc is not None:
                    try:
                        proc.wait(timeout=5)
                    except subprocess.TimeoutExpired:
                        proc.kill()
