import csv
import json

import pytest

from nexusrcl.dataset import DatasetError, load_external_dataset
from nexusrcl.events import extract_features, ExtractionConfig


def write_fixture(root, n_windows=4, window_len=100, bad_rows=0):
    services = ["cart", "pay"]
    hosts = ["vm1"]
    (root / "topology.json").write_text(
        json.dumps(
            {
                "services": services,
                "hosts": hosts,
                "calls": [["cart", "pay"]],
                "deployments": [["cart", "vm1"], ["pay", "vm1"]],
                "host_links": [],
            }
        )
    )
    with open(root / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ts", "layer", "name", "metric", "value", "extra_col"])
        t = 1000
        for w in range(n_windows):
            for k in range(4):
                for svc in services:
                    writer.writerow([t + k * 25, "svc", svc, "latency", 10.0 + k, "x"])
                writer.writerow([t + k * 25, "node", "vm1", "cpu", 50.0 + k, "x"])
            t += window_len
        for _ in range(bad_rows):
            writer.writerow(["not-a-ts", "svc", "cart", "latency", "oops", "x"])
    with open(root / "logs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["ts", "layer", "name", "severity", "message"])
        writer.writerow([1010, "svc", "cart", "ERROR", "payment backend 10.0.0.2 refused"])
        writer.writerow([1120, "svc", "pay", "INFO", "ok"])
    return {
        "window_len_s": window_len,
        "metrics": {
            "path": "metrics.csv",
            "format": "csv",
            "columns": {"timestamp": "ts", "kind": "layer", "entity": "name", "metric": "metric", "value": "value"},
            "kind_values": {"service": "svc", "host": "node"},
        },
        "logs": {
            "path": "logs.csv",
            "format": "csv",
            "columns": {"timestamp": "ts", "kind": "layer", "entity": "name", "severity": "severity", "message": "message"},
            "kind_values": {"service": "svc", "host": "node"},
        },
        "topology": {"path": "topology.json"},
    }


class TestLoadExternalDataset:
    def test_round_trips_through_validation(self, tmp_path):
        mapping = write_fixture(tmp_path)
        bundles, report = load_external_dataset(tmp_path, mapping)
        assert len(bundles) == 4
        for b in bundles:
            assert b.validate() == []
        assert report.failed == []
        assert "extra_col" in report.unmapped_columns

    def test_entity_counts(self, tmp_path):
        mapping = write_fixture(tmp_path)
        bundles, _ = load_external_dataset(tmp_path, mapping)
        services = {e.name for e in bundles[0].topology.services}
        hosts = {e.name for e in bundles[0].topology.hosts}
        assert services == {"cart", "pay"}
        assert hosts == {"vm1"}

    def test_feeds_event_extraction(self, tmp_path):
        mapping = write_fixture(tmp_path, n_windows=6)
        bundles, _ = load_external_dataset(tmp_path, mapping)
        result = extract_features(bundles, ExtractionConfig(history_windows=3, log_min_pts=1))
        assert len(result.features) == 6

    def test_bad_rows_collected(self, tmp_path):
        mapping = write_fixture(tmp_path, bad_rows=1)
        bundles, report = load_external_dataset(tmp_path, mapping)
        assert len(report.failed) == 1

    def test_too_many_failures_abort(self, tmp_path):
        mapping = write_fixture(tmp_path, n_windows=1, bad_rows=10)
        with pytest.raises(DatasetError, match="10%"):
            load_external_dataset(tmp_path, mapping)

    def test_unknown_topology_entity_rejected(self, tmp_path):
        mapping = write_fixture(tmp_path)
        topo = json.loads((tmp_path / "topology.json").read_text())
        topo["calls"].append(["cart", "ghost"])
        (tmp_path / "topology.json").write_text(json.dumps(topo))
        with pytest.raises(DatasetError, match="ghost"):
            load_external_dataset(tmp_path, mapping)

    def test_per_window_deployment_overrides(self, tmp_path):
        mapping = write_fixture(tmp_path)
        topo = json.loads((tmp_path / "topology.json").read_text())
        topo["hosts"].append("vm2")
        topo["windows"] = [{"index": 2, "deployments": [["cart", "vm2"], ["pay", "vm1"]]}]
        (tmp_path / "topology.json").write_text(json.dumps(topo))
        bundles, _ = load_external_dataset(tmp_path, mapping)
        from nexusrcl.core import host, service

        assert (service("cart"), host("vm1")) in bundles[0].topology.e_sh
        assert (service("cart"), host("vm2")) in bundles[2].topology.e_sh
