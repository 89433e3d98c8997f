import json

import pytest

from tridrive.errors import ConfigError, FormatError, PipelineError
from tridrive.llm import ScriptedLlmClient, StubLlmClient
from tridrive.model import load_dataset, save_dataset
from tridrive.ope import identity_prob_table, save_prob_table
from tridrive.pipeline import (
    PipelineConfig,
    assign_split,
    filter_split,
    generate_candidates,
    load_spec_dir,
    pareto_from_rows,
    pipeline_config_from_json,
    run_digest,
    run_pipeline,
    score_specs,
    sha256_file,
)
from tridrive.rewards import reward_spec_to_json
from tridrive.synth import CohortConfig, generate, reference_spec

SMALL = CohortConfig(n_patients=60, horizon_min=12, horizon_max=24, seed=5)


@pytest.fixture(scope="module")
def small_dataset_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "cohort.json"
    save_dataset(generate(SMALL), path)
    return path


def _config(dataset_path, **overrides):
    base = dict(
        dataset=str(dataset_path), rounds=4, candidates=6, bootstrap=80, bins=5, seed=3
    )
    base.update(overrides)
    return PipelineConfig(**base)


class TestSplits:
    def test_assignment_deterministic(self):
        assert assign_split("patient-1") == assign_split("patient-1")

    def test_partition_complete_and_disjoint(self, small_dataset_path):
        ds = load_dataset(small_dataset_path)
        parts = {
            name: {t.patient_id for t in filter_split(ds, name).trajectories}
            for name in ("policy_train", "reward_train", "policy_test", "reward_test")
        }
        ids = [pid for part in parts.values() for pid in part]
        assert sorted(ids) == sorted(t.patient_id for t in ds.trajectories)

    def test_proportions_roughly_7111(self):
        counts = {"policy_train": 0, "reward_train": 0, "policy_test": 0, "reward_test": 0}
        for i in range(4000):
            counts[assign_split(f"p{i}")] += 1
        assert 0.65 <= counts["policy_train"] / 4000 <= 0.75
        for name in ("reward_train", "policy_test", "reward_test"):
            assert 0.06 <= counts[name] / 4000 <= 0.14

    def test_unknown_split_rejected(self, small_dataset_path):
        with pytest.raises(ConfigError):
            filter_split(load_dataset(small_dataset_path), "validation")


class TestGenerateCandidates:
    def test_quarantine_with_diagnostics(self, small_dataset_path, tmp_path):
        ds = load_dataset(small_dataset_path)
        good = json.dumps(reward_spec_to_json(reference_spec(SMALL)))
        responses = [good, "not json", good, '{"survival": {}}', "{}"]
        client = ScriptedLlmClient(responses, cycle=False)
        valid, quarantined = generate_candidates(
            ds, ds.feature_ids(), client, 5, tmp_path / "specs"
        )
        assert [sid for sid, _ in valid] == ["spec_000", "spec_002"]
        assert quarantined == 3
        qfiles = sorted((tmp_path / "specs" / "quarantine").glob("*.json"))
        assert len(qfiles) == 3
        doc = json.loads(qfiles[0].read_text())
        assert doc["candidate_index"] == 1
        assert "reason" in doc and doc["response"] == "not json"

    def test_spec_must_cover_selected_features(self, small_dataset_path, tmp_path):
        ds = load_dataset(small_dataset_path)
        spec = reference_spec(SMALL)
        del spec.survival["nr0"], spec.confidence_tau["nr0"]
        client = ScriptedLlmClient([json.dumps(reward_spec_to_json(spec))])
        valid, quarantined = generate_candidates(
            ds, ds.feature_ids(), client, 1, tmp_path / "specs"
        )
        assert valid == [] and quarantined == 1

    def test_identical_run_identical_hashes(self, small_dataset_path, tmp_path):
        ds = load_dataset(small_dataset_path)
        for sub in ("a", "b"):
            generate_candidates(ds, ds.feature_ids(), StubLlmClient(), 4, tmp_path / sub)
        hashes_a = {p.name: sha256_file(p) for p in (tmp_path / "a").glob("*.json")}
        hashes_b = {p.name: sha256_file(p) for p in (tmp_path / "b").glob("*.json")}
        assert hashes_a == hashes_b

    def test_load_spec_dir_round_trip(self, small_dataset_path, tmp_path):
        ds = load_dataset(small_dataset_path)
        valid, _ = generate_candidates(ds, ds.feature_ids(), StubLlmClient(), 3, tmp_path)
        loaded = load_spec_dir(tmp_path)
        assert [sid for sid, _ in loaded] == [sid for sid, _ in valid]
        assert [s for _, s in loaded] == [s for _, s in valid]


class TestScoreAndPareto:
    def test_degenerate_spec_flagged_not_fatal(self, small_dataset_path):
        ds = load_dataset(small_dataset_path)
        spec = reference_spec(SMALL)
        rows = score_specs(ds, [("good", spec)])
        assert "error" not in rows[0]
        # identical trajectories force a constant reward: craft by scoring a
        # dataset with two clones
        clone = load_dataset(small_dataset_path)
        clone.trajectories = [ds.trajectories[0]] * 3
        rows = score_specs(clone, [("deg", spec)])
        assert rows[0]["spec_id"] == "deg" and "error" in rows[0]

    def test_spec_with_foreign_feature_flagged(self, small_dataset_path):
        ds = load_dataset(small_dataset_path)
        spec = reference_spec(CohortConfig(n_normal=4))  # nr3 does not exist here
        rows = score_specs(ds, [("foreign", spec)])
        assert rows[0]["spec_id"] == "foreign" and "error" in rows[0]

    def test_pareto_from_rows_skips_invalid(self):
        rows = [
            {"spec_id": "a", "j_surv": 0.9, "j_conf": 0.1, "j_comp": 0.5},
            {"spec_id": "b", "error": "degenerate"},
            {"spec_id": "c", "j_surv": 0.2, "j_conf": 0.9, "j_comp": 0.6},
        ]
        result = pareto_from_rows(rows)
        assert set(result.crowding) == {"a", "c"}

    def test_all_invalid_is_pipeline_error(self):
        with pytest.raises(PipelineError):
            pareto_from_rows([{"spec_id": "a", "error": "x"}])


class TestPipelineRun:
    def test_full_run_produces_champion_and_outputs(self, small_dataset_path, tmp_path):
        manifest = run_pipeline(_config(small_dataset_path), tmp_path / "run")
        assert manifest["champion"] is not None
        assert all(
            manifest["stages"][s]["status"] == "complete"
            for s in ("stats", "features", "candidates", "fitness", "selection", "ope")
        )
        out = tmp_path / "run"
        for rel in (
            "manifest.json",
            "stats/metadata.json",
            "features/report.json",
            "candidates/index.json",
            "fitness/report.json",
            "selection/report.json",
            "ope/wis.json",
            "ope/mortality_curve.csv",
        ):
            assert (out / rel).exists(), rel

    def test_two_runs_hash_identical(self, small_dataset_path, tmp_path):
        run_pipeline(_config(small_dataset_path), tmp_path / "r1")
        run_pipeline(_config(small_dataset_path), tmp_path / "r2")
        assert run_digest(tmp_path / "r1") == run_digest(tmp_path / "r2")

    def test_identical_rerun_is_noop(self, small_dataset_path, tmp_path):
        out = tmp_path / "run"
        run_pipeline(_config(small_dataset_path), out)
        stamps = {
            p: p.stat().st_mtime_ns for p in out.rglob("*.json") if "timing" not in p.name
        }
        run_pipeline(_config(small_dataset_path), out)
        after = {p: p.stat().st_mtime_ns for p in out.rglob("*.json") if "timing" not in p.name}
        assert stamps == after

    def test_failed_stage_resumes_without_recompute(self, small_dataset_path, tmp_path):
        out = tmp_path / "run"
        probs_path = tmp_path / "probs.json"
        config = _config(small_dataset_path, probs=[str(probs_path)])
        with pytest.raises(FormatError):
            run_pipeline(config, out)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["stages"]["selection"]["status"] == "complete"
        assert manifest["stages"]["ope"]["status"] == "failed"

        early = [
            out / "stats/metadata.json",
            out / "features/report.json",
            out / "fitness/report.json",
            out / "selection/report.json",
        ]
        stamps = {p: p.stat().st_mtime_ns for p in early}

        save_prob_table(identity_prob_table(load_dataset(small_dataset_path)), probs_path)
        manifest = run_pipeline(config, out)
        assert manifest["stages"]["ope"]["status"] == "complete"
        assert {p: p.stat().st_mtime_ns for p in early} == stamps

    def test_changed_inputs_rejected_in_same_directory(self, small_dataset_path, tmp_path):
        out = tmp_path / "run"
        run_pipeline(_config(small_dataset_path), out)
        with pytest.raises(ConfigError, match="fresh directory"):
            run_pipeline(_config(small_dataset_path, seed=4), out)

    def test_split_filtering_applies(self, small_dataset_path, tmp_path):
        config = _config(small_dataset_path, split="policy_train", bins=3)
        manifest = run_pipeline(config, tmp_path / "run")
        stats = json.loads((tmp_path / "run/stats/metadata.json").read_text())
        expected = len(
            filter_split(load_dataset(small_dataset_path), "policy_train").trajectories
        )
        assert stats["summary"]["n_patients"] == expected
        assert manifest["champion"]


class TestHttpPipeline:
    def test_full_run_through_http_client(self, small_dataset_path, tmp_path):
        import threading
        from http.server import BaseHTTPRequestHandler, HTTPServer

        from tridrive.llm import StubLlmClient

        stub = StubLlmClient()

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                body = self.rfile.read(int(self.headers["Content-Length"]))
                prompt = json.loads(body)["prompt"]
                text = stub.complete(prompt).encode("utf-8")
                self.send_response(200)
                self.send_header("Content-Type", "text/plain")
                self.end_headers()
                self.wfile.write(text)

            def log_message(self, *args):
                pass

        server = HTTPServer(("127.0.0.1", 0), Handler)
        threading.Thread(target=server.serve_forever, daemon=True).start()
        try:
            config = pipeline_config_from_json(
                {
                    "dataset": str(small_dataset_path),
                    "client": "http",
                    "llm": {
                        "endpoint": f"http://127.0.0.1:{server.server_port}/complete",
                        "backoff": 0.01,
                    },
                    "rounds": 3,
                    "candidates": 4,
                    "bootstrap": 60,
                    "bins": 4,
                    "seed": 2,
                }
            )
            manifest = run_pipeline(config, tmp_path / "run")
        finally:
            server.shutdown()
        assert manifest["champion"]
        assert all(s["status"] == "complete" for s in manifest["stages"].values())


class TestPipelineSeries:
    def test_multiple_prob_tables_emit_series(self, small_dataset_path, tmp_path):
        ds = load_dataset(small_dataset_path)
        p1, p2 = tmp_path / "ckpt1.json", tmp_path / "ckpt2.json"
        save_prob_table(identity_prob_table(ds), p1)
        save_prob_table(identity_prob_table(ds), p2)
        config = _config(small_dataset_path, probs=[str(p1), str(p2)])
        run_pipeline(config, tmp_path / "run")
        series = (tmp_path / "run/ope/wis_series.csv").read_text().splitlines()
        assert series[0] == "checkpoint,policy,value,ci_low,ci_high"
        assert len(series) == 3


class TestPipelineConfigIO:
    def test_unknown_keys_rejected(self):
        with pytest.raises(FormatError, match="unknown keys"):
            pipeline_config_from_json({"dataset": "d.json", "model": "x"})
        with pytest.raises(FormatError, match="llm"):
            pipeline_config_from_json({"dataset": "d.json", "llm": {"url": "x"}})
        with pytest.raises(FormatError, match="metric"):
            pipeline_config_from_json({"dataset": "d.json", "metric": {"beta": 1}})

    def test_threshold_validated(self):
        with pytest.raises(ConfigError):
            pipeline_config_from_json({"dataset": "d.json", "threshold": 1.01})

    def test_probs_string_promoted_to_list(self):
        config = pipeline_config_from_json({"dataset": "d.json", "probs": "p.json"})
        assert config.probs == ["p.json"]
