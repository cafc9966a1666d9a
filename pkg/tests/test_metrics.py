"""Metrics: percentiles, goodput, cost efficiency, summaries, exports."""

import csv
import json

import pytest

from stagesim import (
    Coordinator,
    ConfigError,
    LLMClient,
    PrePostClient,
    Request,
    RoundRobinRouter,
    SLOSpec,
    StageKind,
    StageSpec,
    build_summary,
    decode_stage,
    export_chrome_trace,
    goodput,
    percentile,
    prefill_stage,
    single_site_topology,
    tokens_per_dollar,
)
from stagesim.metrics import (
    RequestRecord,
    STEP_TRACK_TID,
    write_request_csv,
    write_summary_json,
)
from stagesim.workload import PrePostParams

from helpers import pd_request, small_cluster, small_model


class TestPercentile:
    def test_nearest_rank_on_1_to_100(self):
        xs = list(range(1, 101))
        assert percentile(xs, 0.50) == 50
        assert percentile(xs, 0.90) == 90
        assert percentile(xs, 0.99) == 99
        assert percentile(xs, 1.0) == 100

    def test_rounds_rank_up(self):
        assert percentile([10, 20, 30], 0.50) == 20
        assert percentile([10, 20, 30], 0.34) == 20
        assert percentile([10, 20, 30], 0.33) == 10

    def test_single_sample(self):
        assert percentile([7.5], 0.01) == 7.5
        assert percentile([7.5], 1.0) == 7.5

    def test_input_order_is_irrelevant(self):
        assert percentile([3, 1, 2], 0.5) == percentile([1, 2, 3], 0.5)

    def test_empty_and_bad_p_raise(self):
        with pytest.raises(ConfigError):
            percentile([], 0.5)
        with pytest.raises(ConfigError):
            percentile([1.0], 0.0)
        with pytest.raises(ConfigError):
            percentile([1.0], 1.5)


def serviced_record(rid, ttft, n_tokens=1, tbt=0.01):
    ends = [ttft + i * tbt for i in range(n_tokens)]
    return RequestRecord(rid=rid, arrival=0.0, stages=[], status="serviced",
                         completion_t=ends[-1], decode_token_ends=ends)


class TestGoodput:
    def test_population_all_or_nothing(self):
        recs = [serviced_record(i, 0.1 * (i + 1)) for i in range(10)]
        slo = SLOSpec(ttft_p50=0.55, ttft_p90=0.95)
        assert goodput(recs, slo, horizon_s=5.0) == pytest.approx(2.0)
        tight = SLOSpec(ttft_p50=0.4, ttft_p90=0.95)
        assert goodput(recs, tight, horizon_s=5.0) == 0.0

    def test_population_tbt_gate(self):
        recs = [serviced_record(i, 0.1, n_tokens=5, tbt=0.05) for i in range(4)]
        loose = SLOSpec(0.2, 0.2, tbt_p99=0.06)
        tight = SLOSpec(0.2, 0.2, tbt_p99=0.04)
        assert goodput(recs, loose, 2.0) == pytest.approx(2.0)
        assert goodput(recs, tight, 2.0) == 0.0

    def test_per_request_counts_individually(self):
        recs = [serviced_record(i, 0.1 * (i + 1)) for i in range(10)]
        slo = SLOSpec(ttft_p50=0.0, ttft_p90=0.65)
        assert goodput(recs, slo, 2.0, mode="per_request") == pytest.approx(3.0)

    def test_rejected_requests_never_count(self):
        recs = [serviced_record(0, 0.1),
                RequestRecord(rid=1, arrival=0.0, stages=[], status="rejected")]
        slo = SLOSpec(1.0, 1.0)
        assert goodput(recs, slo, 1.0) == pytest.approx(1.0)

    def test_validation(self):
        with pytest.raises(ConfigError):
            goodput([], SLOSpec(1, 1), 0.0)
        with pytest.raises(ConfigError):
            goodput([serviced_record(0, 0.1)], SLOSpec(1, 1), 1.0, mode="mean")


class TestTokensPerDollar:
    def test_exact(self):
        # 2 devices at $1/h for half an hour costs $1
        assert tokens_per_dollar(1000, [(2, 1.0)], 1800.0) == pytest.approx(1000.0)

    def test_scales_inversely_with_cost(self):
        cheap = tokens_per_dollar(500, [(1, 2.0)], 3600.0)
        rich = tokens_per_dollar(500, [(4, 2.0)], 3600.0)
        assert cheap == pytest.approx(4 * rich)

    def test_zero_cost_raises(self):
        with pytest.raises(ConfigError):
            tokens_per_dollar(100, [(0, 0.0)], 60.0)


def run_small(n=3, n_in=10, n_out=4):
    reqs = [pd_request(i, 0.01 * i, n_in, n_out) for i in range(n)]
    clients = [LLMClient(0, cluster=small_cluster(), model=small_model())]
    res = Coordinator(reqs, clients, RoundRobinRouter()).run()
    return res, clients


class TestBuildSummary:
    def test_core_fields(self):
        res, clients = run_small()
        s = build_summary(res.ledger, clients, slo=None)
        assert s["requests"] == {"accepted": 3, "serviced": 3, "rejected": 0}
        assert s["makespan_s"] == pytest.approx(res.ledger.makespan)
        assert s["ttft_s"]["n"] == 3
        assert s["tokens"]["decoded"] == 12
        assert s["tokens"]["prefilled"] == 30
        assert s["communication"]["transfers"] == 0
        assert "goodput_rps" not in s

    def test_per_client_accounting(self):
        res, clients = run_small()
        entry = build_summary(res.ledger, clients, None)["per_client"]["0"]
        assert entry["steps"] == len(res.ledger.steps)
        assert entry["busy_s"] == pytest.approx(
            sum(st.end_t - st.start_t for st in res.ledger.steps))
        assert 0.0 < entry["busy_fraction"] <= 1.0
        assert entry["n_devices"] == 1
        assert entry["decode_tokens"] == 12

    def test_cost_efficiency_matches_direct_computation(self):
        res, clients = run_small()
        s = build_summary(res.ledger, clients, None)
        expect = tokens_per_dollar(12, [(1, 1.0)], s["makespan_s"])
        assert s["tokens_per_dollar"] == pytest.approx(expect)

    def test_costless_deployment_reports_zero(self):
        req = Request(id=0, arrival_time=0.0, pipeline=[
            StageSpec(StageKind.PREPROCESS,
                      PrePostParams(op_class="fixed_latency"))])
        clients = [PrePostClient(0)]
        res = Coordinator([req], clients, RoundRobinRouter()).run()
        s = build_summary(res.ledger, clients, None)
        assert s["tokens_per_dollar"] == 0.0

    def test_goodput_included_when_slo_given(self):
        res, clients = run_small()
        s = build_summary(res.ledger, clients, SLOSpec(10.0, 10.0))
        assert s["goodput_rps"] == pytest.approx(3 / s["makespan_s"])

    def test_summary_is_json_serializable(self):
        res, clients = run_small()
        json.dumps(build_summary(res.ledger, clients, SLOSpec(1.0, 1.0)))


class TestLatencyDecomposition:
    def test_e2e_equals_stage_time_plus_transfer_stall(self):
        # one request, two clients in different racks, no queueing anywhere:
        # the only dead time between stages is the transfer stall
        req = Request(id=0, arrival_time=0.0, pipeline=[
            StageSpec(StageKind.PREPROCESS,
                      PrePostParams(op_class="linear_text", length_tokens=500)),
            prefill_stage(100), decode_stage(3),
        ])
        from stagesim.hardware import (LINK_INTER_RACK, LINK_INTRA_PLATFORM,
                                       LINK_INTRA_RACK, ClientInterconnect,
                                       Placement)
        from stagesim import LinkSpec
        topo = ClientInterconnect(
            placements={9: Placement(0, 0), 0: Placement(0, 1)},
            links={LINK_INTRA_PLATFORM: LinkSpec(400e9, 1e-6),
                   LINK_INTRA_RACK: LinkSpec(200e9, 1e-5),
                   LINK_INTER_RACK: LinkSpec(128e9, 0.020)})
        clients = [PrePostClient(9), LLMClient(0, cluster=small_cluster(),
                                                model=small_model())]
        res = Coordinator([req], clients, RoundRobinRouter(),
                          topology=topo).run()
        rec = res.ledger.requests[0]
        stage_time = sum(s.end_t - s.start_t for s in rec.stages)
        assert rec.transfer_s > 0
        assert rec.e2e == pytest.approx(stage_time + rec.transfer_s, abs=1e-9)


class TestChromeTrace:
    def trace(self):
        res, _ = run_small()
        return export_chrome_trace(res.ledger), res

    def test_schema(self):
        doc, _ = self.trace()
        assert set(doc) == {"traceEvents", "displayTimeUnit"}
        for ev in doc["traceEvents"]:
            assert ev["ph"] == "X"
            assert isinstance(ev["ts"], int) and isinstance(ev["dur"], int)
            assert ev["dur"] >= 0
            assert {"name", "cat", "pid", "tid", "args"} <= set(ev)
        json.dumps(doc)

    def test_stage_events_keyed_by_client_and_request(self):
        doc, res = self.trace()
        stage_evs = [e for e in doc["traceEvents"] if e["cat"] == "stage"]
        assert len(stage_evs) == sum(len(r.stages)
                                     for r in res.ledger.requests.values())
        for ev in stage_evs:
            assert ev["pid"] == 0
            assert ev["tid"] in res.ledger.requests
            assert ev["name"] in ("prefill", "decode")

    def test_step_lane_is_non_overlapping(self):
        doc, res = self.trace()
        steps = [e for e in doc["traceEvents"] if e["tid"] == STEP_TRACK_TID]
        assert len(steps) == len(res.ledger.steps)
        for a, b in zip(steps, steps[1:]):
            assert a["ts"] + a["dur"] <= b["ts"]

    def test_events_sorted_within_tracks(self):
        doc, _ = self.trace()
        keys = [(e["pid"], e["tid"], e["ts"]) for e in doc["traceEvents"]]
        assert keys == sorted(keys)

    def test_microsecond_rounding(self):
        doc, res = self.trace()
        first = min((s for r in res.ledger.requests.values() for s in r.stages),
                    key=lambda s: s.start_t)
        ev = min((e for e in doc["traceEvents"] if e["cat"] == "stage"),
                 key=lambda e: e["ts"])
        assert ev["ts"] == round(first.start_t * 1e6)

    def test_empty_ledger(self):
        from stagesim import MetricsLedger
        doc = export_chrome_trace(MetricsLedger([]))
        assert doc["traceEvents"] == []


class TestWriters:
    def test_request_csv(self, tmp_path):
        res, _ = run_small()
        path = tmp_path / "requests.csv"
        write_request_csv(res.ledger, str(path))
        with open(path) as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert rows[0]["status"] == "serviced"
        assert rows[0]["stages"] == "prefill;decode"
        assert int(rows[0]["decode_tokens"]) == 4

    def test_summary_json_roundtrip(self, tmp_path):
        res, clients = run_small()
        s = build_summary(res.ledger, clients, None)
        path = tmp_path / "summary.json"
        write_summary_json(s, str(path))
        with open(path) as fh:
            assert json.load(fh) == json.loads(json.dumps(s))
