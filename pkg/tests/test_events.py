import numpy as np
import pytest

from nexusrcl.core import LogRecord, MetricSeries, Severity, TimeWindow, host, service
from nexusrcl.events import (
    DimensionError,
    FeatureSpace,
    InsufficientDataError,
    LogClusterModel,
    deseasonalize,
    extract_log_events,
    extract_metric_events,
    extract_topology_change,
    filter_logs,
    filter_metrics,
    fit_log_clusters,
    fuse,
    mask_message,
    mean_variation,
    prune_log_clusters,
    seasonal_residual,
)

from reference import brute_dbscan, brute_mean_variation, brute_nsigma_events


def series(name, values, entity=None, t0=0, dt=10):
    entity = entity or service("svc")
    return MetricSeries(entity, name, tuple((t0 + i * dt, float(v)) for i, v in enumerate(values)))


class TestMeanVariation:
    def test_hand_example(self):
        assert mean_variation([1, 3, 2]) == pytest.approx(1.5)

    def test_constant_is_zero(self):
        assert mean_variation([4.0, 4.0, 4.0, 4.0]) == 0.0

    def test_single_pair(self):
        assert mean_variation([0, 10]) == pytest.approx(10.0)

    def test_needs_two_samples(self):
        with pytest.raises(InsufficientDataError):
            mean_variation([1.0])

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            values = rng.normal(size=rng.integers(2, 40)).tolist()
            assert mean_variation(values) == pytest.approx(brute_mean_variation(values), rel=1e-9)

    def test_window_clipping(self):
        s = series("cpu", [1, 3, 2, 100], t0=0, dt=10)
        window = TimeWindow(0, 30, 0)
        assert mean_variation(s, window) == pytest.approx(1.5)


class TestFilterMetrics:
    def test_homogeneous_all_retained(self):
        group = [series("m", [1, 2, 1, 2], entity=service(f"s{i}")) for i in range(4)]
        report = filter_metrics(group)
        assert len(report.retained) == 4

    def test_flat_series_dropped(self):
        noisy = [series("m", [1, 5, 2, 6], entity=service(f"s{i}")) for i in range(3)]
        flat = series("m", [3, 3, 3, 3], entity=service("flat"))
        report = filter_metrics(noisy + [flat])
        assert (service("flat"), "m") in report.dropped_zero_variance
        assert len(report.retained) == 3

    def test_jittery_series_dropped(self):
        calm = [series("m", [1.0, 1.1, 1.0, 1.1], entity=service(f"s{i}")) for i in range(5)]
        wild = series("m", [0, 100, 0, 100], entity=service("wild"))
        report = filter_metrics(calm + [wild])
        assert (service("wild"), "m") in report.dropped_high_variation

    def test_kinds_judged_separately(self):
        svc = [series("m", [1.0, 1.1, 1.0, 1.1], entity=service(f"s{i}")) for i in range(3)]
        hst = [series("m", [0, 50, 0, 50], entity=host(f"h{i}")) for i in range(3)]
        report = filter_metrics(svc + hst)
        # hosts are all equally wild, so none exceed twice their own average
        assert len(report.retained) == 6


class TestLogFiltering:
    def test_severity_and_ip_masking(self):
        logs = [
            LogRecord(service("a"), 1, Severity.INFO, "ok"),
            LogRecord(service("a"), 2, Severity.ERROR, "conn refused 10.0.0.1"),
        ]
        kept = filter_logs(logs)
        assert len(kept) == 1
        assert kept[0].message == "conn refused <IP>"

    def test_all_info_filtered(self):
        logs = [LogRecord(service("a"), 1, Severity.INFO, "fine")]
        assert filter_logs(logs) == []

    def test_numeric_masking(self):
        assert mask_message("order 12345 failed") == "order <NUM> failed"

    def test_uuid_and_hex_masking(self):
        assert mask_message("req 123e4567-e89b-12d3-a456-426614174000 done") == "req <UUID> done"
        assert mask_message("ptr 0xdeadbeef") == "ptr <HEX>"
        assert mask_message("trace deadbeef42cafe") == "trace <HEX>"

    def test_masking_idempotent(self):
        msg = "order 12345 from 10.0.0.1 via 0xff"
        assert mask_message(mask_message(msg)) == mask_message(msg)


class TestMetricEvents:
    def test_spike_after_flat_history(self):
        out = extract_metric_events([1, 1, 1, 10], history=3, n=3)
        assert out[3] == pytest.approx(9.0)

    def test_constant_series_zero(self):
        for n in (1.0, 2.0, 3.0):
            out = extract_metric_events([5.0] * 12, history=4, n=n)
            assert np.allclose(out, 0.0)

    def test_boundary_value_is_zero(self):
        # history [0, 2]: mean 1, std 1; with n=2 the boundary is 3
        out = extract_metric_events([0, 2, 3], history=2, n=2)
        assert out[2] == pytest.approx(0.0)

    def test_insufficient_history_gives_zero(self):
        out = extract_metric_events([7, 9, 8], history=5, n=3)
        assert out[0] == 0.0 and out[1] == 0.0 and out[2] != 0.0

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            values = rng.normal(size=rng.integers(3, 50)).tolist()
            history = int(rng.integers(2, 12))
            n = float(rng.uniform(0.5, 4.0))
            ours = extract_metric_events(values, history, n)
            assert np.allclose(ours, brute_nsigma_events(values, history, n), atol=1e-9)


def make_logs(message, count, entity=None, t0=0):
    entity = entity or service("svc")
    return [LogRecord(entity, t0 + i, Severity.ERROR, message) for i in range(count)]


class TestLogClusters:
    def test_two_messages_two_clusters(self):
        logs = make_logs("disk failure on node", 100) + make_logs("timeout calling backend", 100)
        model = fit_log_clusters(logs, eps=0.3, min_pts=5)
        assert model.k == 2
        assert all(c >= 0 for c in model.assignments.values())

    def test_two_clusters_match_bruteforce(self):
        logs = make_logs("disk failure on node", 100) + make_logs("timeout calling backend", 100)
        model = fit_log_clusters(logs, eps=0.3, min_pts=5)
        points = model.vectorizer.transform(
            ["disk failure on node"] * 100 + ["timeout calling backend"] * 100
        )
        ref = brute_dbscan(points.tolist(), 0.3, 5, metric="cosine")
        expanded = ["disk failure on node"] * 100 + ["timeout calling backend"] * 100
        ours = [model.assignments[m] for m in expanded]
        assert ours == ref

    def test_single_message_is_noise(self):
        model = fit_log_clusters(make_logs("rare event", 1), eps=0.3, min_pts=5)
        assert model.k == 0
        assert model.assignments["rare event"] == -1

    def test_deterministic(self):
        logs = make_logs("alpha beta", 30) + make_logs("gamma delta", 8) + make_logs("solo", 2)
        a = fit_log_clusters(logs, eps=0.3, min_pts=5)
        b = fit_log_clusters(logs, eps=0.3, min_pts=5)
        assert a.assignments == b.assignments
        assert np.array_equal(a.centroids, b.centroids)

    def test_model_json_round_trip(self):
        logs = make_logs("alpha beta", 30) + make_logs("gamma delta", 8)
        model = fit_log_clusters(logs, eps=0.3, min_pts=5)
        again = LogClusterModel.from_json(model.to_json())
        assert again.assignments == model.assignments
        assert np.allclose(again.centroids, model.centroids)
        assert again.assign("alpha beta") == model.assign("alpha beta")


class TestLogEvents:
    def model(self):
        logs = (
            make_logs("disk failure on node", 40)
            + make_logs("timeout calling backend", 40)
            + make_logs("queue overflow detected", 40)
        )
        return fit_log_clusters(logs, eps=0.3, min_pts=5)

    def test_single_cluster_fires(self):
        model = self.model()
        window = TimeWindow(0, 100, 0)
        logs = [LogRecord(service("a"), 5, Severity.ERROR, "timeout calling backend")]
        bits = extract_log_events(model, logs, window)
        k = model.assign("timeout calling backend")
        expected = np.zeros(model.k)
        expected[k] = 1.0
        assert np.array_equal(bits, expected)

    def test_empty_window_zero_vector(self):
        model = self.model()
        bits = extract_log_events(model, [], TimeWindow(0, 100, 0))
        assert np.array_equal(bits, np.zeros(model.k))

    def test_multihot_over_assignments(self):
        model = self.model()
        window = TimeWindow(0, 100, 0)
        logs = [
            LogRecord(service("a"), 1, Severity.ERROR, "disk failure on node"),
            LogRecord(service("a"), 2, Severity.ERROR, "disk failure on node"),
            LogRecord(service("a"), 3, Severity.ERROR, "queue overflow detected"),
        ]
        bits = extract_log_events(model, logs, window)
        assert bits.sum() == 2.0

    def test_order_invariance(self):
        model = self.model()
        window = TimeWindow(0, 100, 0)
        logs = [
            LogRecord(service("a"), 1, Severity.ERROR, "disk failure on node"),
            LogRecord(service("a"), 2, Severity.ERROR, "timeout calling backend"),
        ]
        assert np.array_equal(
            extract_log_events(model, logs, window),
            extract_log_events(model, list(reversed(logs)), window),
        )

    def test_unseen_message_near_cluster(self):
        model = self.model()
        window = TimeWindow(0, 100, 0)
        # overlapping tokens put this within eps of the timeout cluster
        logs = [LogRecord(service("a"), 1, Severity.ERROR, "timeout calling backend")]
        near = extract_log_events(model, logs, window)
        assert near.sum() == 1.0


class TestTopologyChange:
    def test_migration_counts_two(self):
        s = [service("a")]
        h = [host("h1"), host("h2")]
        out = extract_topology_change(s, h, [(s[0], h[1])], [(s[0], h[0])])
        assert out[s[0]] == 2.0

    def test_no_change_zero(self):
        s = [service("a")]
        h = [host("h1")]
        out = extract_topology_change(s, h, [(s[0], h[0])], [(s[0], h[0])])
        assert out[s[0]] == 0.0

    def test_scale_out_counts_one(self):
        s = [service("a")]
        h = [host("h1"), host("h2")]
        out = extract_topology_change(s, h, [(s[0], h[0]), (s[0], h[1])], [(s[0], h[0])])
        assert out[s[0]] == 1.0

    def test_first_window_zero(self):
        s = [service("a")]
        h = [host("h1")]
        out = extract_topology_change(s, h, [(s[0], h[0])], None)
        assert out[s[0]] == 0.0

    def test_unknown_entity_is_shape_error(self):
        with pytest.raises(DimensionError):
            extract_topology_change([service("a")], [host("h1")], [(service("x"), host("h1"))], None)

    def test_symmetric_in_swap(self):
        s = [service("a"), service("b")]
        h = [host("h1"), host("h2")]
        now = [(s[0], h[1]), (s[1], h[0])]
        prev = [(s[0], h[0]), (s[1], h[0])]
        fwd = extract_topology_change(s, h, now, prev)
        rev = extract_topology_change(s, h, prev, now)
        assert fwd == rev


class TestSeasonalResidual:
    def test_pure_sinusoid_removed(self):
        period = 24
        t = np.arange(period * 4)
        amp = 5.0
        values = 10.0 + amp * np.sin(2 * np.pi * t / period)
        residual, applied = seasonal_residual(values, period)
        assert applied
        assert np.max(np.abs(residual)) < 0.1 * amp

    def test_white_noise_variance_preserved(self):
        rng = np.random.default_rng(42)
        values = rng.normal(size=12 * 16)
        residual, applied = seasonal_residual(values, 12)
        assert applied
        ratio = residual.var() / values.var()
        assert 0.8 <= ratio <= 1.2

    def test_constant_residual_zero(self):
        residual, applied = seasonal_residual(np.full(48, 7.0), 12)
        assert applied
        assert np.allclose(residual, 0.0)

    def test_short_series_passes_through(self):
        values = np.asarray([1.0, 2.0, 3.0])
        residual, applied = seasonal_residual(values, 12)
        assert not applied
        assert np.array_equal(residual, values)

    def test_series_wrapper_infers_period(self):
        period_s = 120
        dt = 10
        t = np.arange(48)
        values = 3.0 * np.sin(2 * np.pi * t / 12)
        s = series("cpu", values, dt=dt)
        out, applied = deseasonalize(s, period_s)
        assert applied
        assert max(abs(v) for v in out.values()) < 0.3


class TestPruneClusters:
    def fitted(self):
        logs = make_logs("disk failure on node", 40) + make_logs("timeout calling backend", 40)
        return fit_log_clusters(logs, eps=0.3, min_pts=5)

    def test_constant_rate_cluster_removed(self):
        model = self.fitted()
        freqs = np.vstack([np.ones(10), np.asarray([0, 0, 0, 5, 0, 0, 0, 0, 0, 0])])
        pruned, kept = prune_log_clusters(model, freqs, delta=0.01)
        assert kept == [1]
        assert pruned.k == 1

    def test_bursty_cluster_retained(self):
        model = self.fitted()
        burst = np.zeros(10)
        burst[4] = 6
        freqs = np.vstack([burst, burst])
        pruned, kept = prune_log_clusters(model, freqs, delta=0.01)
        assert pruned.k == 2
        assert all(freqs[k].var() >= 0.01 for k in kept)

    def test_delta_zero_removes_nothing(self):
        model = self.fitted()
        freqs = np.zeros((2, 10))
        pruned, kept = prune_log_clusters(model, freqs, delta=0.0)
        assert pruned.k == 2 and kept == [0, 1]

    def test_assignments_remapped(self):
        model = self.fitted()
        freqs = np.vstack([np.ones(10), np.asarray([0, 0, 0, 5, 0, 0, 0, 0, 0, 0])])
        pruned, _ = prune_log_clusters(model, freqs, delta=0.01)
        assert pruned.assign("disk failure on node") == -1
        assert pruned.assign("timeout calling backend") == 0


class TestFuse:
    def space(self, a=3, k=2, b=2):
        return FeatureSpace(
            service_metrics=tuple(f"sm{i}" for i in range(a)),
            host_metrics=tuple(f"hm{i}" for i in range(b)),
            n_log_clusters=k,
        )

    def test_dimensions(self):
        space = FeatureSpace(tuple(f"m{i}" for i in range(20)), tuple(f"h{i}" for i in range(55)), 12)
        assert space.service_dim == 33
        assert space.host_dim == 55

    def test_all_quiet_zero_vectors(self):
        space = self.space()
        window = TimeWindow(0, 10, 0)
        s, h = service("a"), host("h1")
        out = fuse(
            space,
            window,
            metric_events={s: {m: 0.0 for m in space.service_metrics}, h: {m: 0.0 for m in space.host_metrics}},
            log_bits={s: np.zeros(2)},
            topo_change={s: 0.0},
            services=[s],
            hosts=[h],
        )
        assert np.array_equal(out.service_features[s], np.zeros(space.service_dim))
        assert np.array_equal(out.host_features[h], np.zeros(space.host_dim))

    def test_missing_channel_raises(self):
        space = self.space()
        with pytest.raises(DimensionError):
            fuse(
                space,
                TimeWindow(0, 10, 0),
                metric_events={},
                log_bits={},
                topo_change={},
                services=[service("a")],
                hosts=[],
            )

    def test_fixed_ordering(self):
        space = self.space(a=2, k=1, b=1)
        window = TimeWindow(0, 10, 0)
        s = service("a")
        out = fuse(
            space,
            window,
            metric_events={s: {"sm0": 1.0, "sm1": 2.0}},
            log_bits={s: np.asarray([1.0])},
            topo_change={s: 3.0},
            services=[s],
            hosts=[],
        )
        assert np.array_equal(out.service_features[s], np.asarray([1.0, 2.0, 1.0, 3.0]))
