"""End-to-end CLI flows, exit codes, and provenance reproduction."""

import json

import numpy as np
import pytest

from raggate.cli import main
from raggate.gates import StepStat
from raggate.retrieval import EmbeddingIndex, save_index
from raggate.traces import TraceRecord, write_traces

from replay_fixture import build_records


def run_cli(*argv):
    return main([str(a) for a in argv])


def make_trace(tmp_path, records, name="trace.jsonl"):
    path = tmp_path / name
    write_traces(records, path)
    return path


def zero_gap_records():
    records = []
    for i in range(4):
        records.append(
            TraceRecord(
                query_id=f"z{i}",
                question="q",
                gold_answers=["a"],
                steps=[StepStat(entropy_nats=[1.0, 0.5, 0.3][t], gap=0.0) for t in range(3)],
                answer_no_ctx="a",
                answer_with_ctx="a",
                out_tokens_no_ctx=2,
                out_tokens_with_ctx=3,
            )
        )
    return records


class TestScoreCommand:
    def test_margin_all_zero_gaps(self, tmp_path, capsys):
        trace = make_trace(tmp_path, zero_gap_records())
        out = tmp_path / "scores.tsv"
        assert run_cli("score", "--trace", trace, "--gate", "margin", "--out", out) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 4
        assert all(line.split("\t")[1] == "1.0" for line in lines)

    def test_entropy_mean_oracle(self, tmp_path):
        trace = make_trace(tmp_path, zero_gap_records())
        out = tmp_path / "scores.tsv"
        assert run_cli("score", "--trace", trace, "--gate", "entropy", "--out", out) == 0
        value = float(out.read_text().splitlines()[0].split("\t")[1])
        assert value == pytest.approx(0.6, abs=1e-12)

    def test_unknown_gate_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as err:
            run_cli("score", "--trace", "x", "--gate", "sigmoid", "--out", "y")
        assert err.value.code == 2

    def test_k_exceeding_draft_is_data_error(self, tmp_path):
        trace = make_trace(tmp_path, zero_gap_records())
        assert run_cli("score", "--trace", trace, "--gate", "margin", "--k", 9, "--out", tmp_path / "s") == 3


class TestCalibrateCommand:
    def test_quantile_mode(self, tmp_path, capsys):
        scores = tmp_path / "scores.tsv"
        scores.write_text("".join(f"q{i}\t{(i + 1) / 10}\n" for i in range(10)))
        out = tmp_path / "calib.json"
        assert run_cli("calibrate", "--scores", scores, "--rho", 0.2, "--out", out) == 0
        printed = capsys.readouterr().out.strip()
        assert float(printed) == 0.8
        assert json.loads(out.read_text())["tau"] == 0.8

    def test_accuracy_mode(self, tmp_path, capsys):
        dev = tmp_path / "dev.tsv"
        dev.write_text("q1\t0.9\t0\t1\nq2\t0.1\t1\t0\n")
        assert run_cli("calibrate", "--dev", dev, "--grid", "0.0,0.5") == 0
        assert float(capsys.readouterr().out.strip()) == 0.5

    def test_requires_exactly_one_mode(self, tmp_path):
        assert run_cli("calibrate", "--rho", 0.5) == 2

    def test_scores_mode_needs_rho(self, tmp_path):
        scores = tmp_path / "scores.tsv"
        scores.write_text("q1\t0.5\n")
        assert run_cli("calibrate", "--scores", scores) == 2

    def test_dev_mode_needs_grid(self, tmp_path):
        dev = tmp_path / "dev.tsv"
        dev.write_text("q1\t0.5\t0\t1\n")
        assert run_cli("calibrate", "--dev", dev) == 2


class TestIndexCommands:
    def _embeddings(self, tmp_path, n=6, dim=4):
        rng = np.random.default_rng(71)
        rows = rng.normal(size=(n, dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        index = EmbeddingIndex(dim=dim, vectors=rows, ids=np.arange(n))
        path = tmp_path / "embeddings.bin"
        save_index(index, path)
        return path, index

    def test_chunk_build_search_flow(self, tmp_path, capsys):
        articles = tmp_path / "articles.jsonl"
        articles.write_text(
            "\n".join(
                json.dumps({"title": f"T{i}", "text": f"w{i} " * 300}) for i in range(6)
            )
            + "\n"
        )
        passages = tmp_path / "passages.jsonl"
        assert run_cli("index", "chunk", "--articles", articles, "--out", passages) == 0

        emb_path, index = self._embeddings(tmp_path, n=len(passages.read_text().splitlines()))
        built = tmp_path / "index.bin"
        assert run_cli("index", "build", "--embeddings", emb_path, "--passages", passages, "--out", built) == 0
        assert built.read_bytes() == emb_path.read_bytes()

        query = tmp_path / "query.json"
        query.write_text(json.dumps(list(map(float, index.vectors[2]))))
        capsys.readouterr()
        assert run_cli("index", "search", "--index", built, "--query", query, "--topk", 1) == 0
        top_id = int(capsys.readouterr().out.split("\t")[0])
        assert top_id == 2

    def test_build_rejects_mismatched_ids(self, tmp_path):
        emb_path, _ = self._embeddings(tmp_path, n=3)
        passages = tmp_path / "passages.jsonl"
        passages.write_text('{"id": 7, "title": "A", "body": "x"}\n')
        assert run_cli("index", "build", "--embeddings", emb_path, "--passages", passages, "--out", tmp_path / "i") == 3

    def test_search_missing_index_is_data_error(self, tmp_path):
        query = tmp_path / "query.json"
        query.write_text("[1.0, 0.0]")
        assert run_cli("index", "search", "--index", tmp_path / "none.bin", "--query", query) == 3

    def test_search_writes_output_file(self, tmp_path):
        emb_path, index = self._embeddings(tmp_path, n=4)
        query = tmp_path / "query.json"
        query.write_text(json.dumps(list(map(float, index.vectors[1]))))
        out = tmp_path / "hits.tsv"
        assert run_cli("index", "search", "--index", emb_path, "--query", query, "--topk", 2, "--out", out) == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 2 and lines[0].split("\t")[0] == "1"


class TestRunCommand:
    def test_missing_trace_file(self, tmp_path):
        assert (
            run_cli(
                "run", "--trace", tmp_path / "none.jsonl", "--out-dir", tmp_path / "out",
                "--gate", "margin", "--tau", 0.5,
            )
            == 3
        )

    def test_missing_tau_is_config_error(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        assert run_cli("run", "--trace", trace, "--out-dir", tmp_path / "out", "--gate", "margin") == 2

    def test_sentinels_reproduce_baseline_policies(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        outputs = {}
        for name, extra in {
            "always_tau": ["--tau=-inf"],
            "always_policy": ["--tau", "0.5", "--policy", "always"],
            "never_tau": ["--tau", "inf"],
            "never_policy": ["--tau", "0.5", "--policy", "never"],
        }.items():
            out = tmp_path / name
            assert run_cli("run", "--trace", trace, "--out-dir", out, "--gate", "margin", *extra) == 0
            outputs[name] = (out / "records.jsonl").read_text()
        always_records = [json.loads(l) for l in outputs["always_tau"].splitlines()]
        assert all(r["retrieved"] for r in always_records)
        never_records = [json.loads(l) for l in outputs["never_tau"].splitlines()]
        assert not any(r["retrieved"] for r in never_records)

        def strip_scores(text):
            return [
                {k: v for k, v in json.loads(line).items() if k != "score"}
                for line in text.splitlines()
            ]

        assert strip_scores(outputs["always_tau"]) == strip_scores(outputs["always_policy"])
        assert strip_scores(outputs["never_tau"]) == strip_scores(outputs["never_policy"])

    def test_provenance_reproduces_run(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        first = tmp_path / "first"
        assert (
            run_cli(
                "run", "--trace", trace, "--out-dir", first, "--gate", "margin",
                "--tau", 0.3, "--seed", 11,
            )
            == 0
        )
        resolved = first / "resolved_config.json"
        config = json.loads(resolved.read_text())
        second = tmp_path / "second"
        config["output_dir"] = str(second)
        config_path = tmp_path / "rerun.json"
        config_path.write_text(json.dumps(config))
        assert run_cli("run", "--config", config_path) == 0
        assert (first / "records.jsonl").read_bytes() == (second / "records.jsonl").read_bytes()
        assert (first / "summary.json").read_bytes() == (second / "summary.json").read_bytes()

    def test_unknown_config_field_rejected(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"trace_path": str(trace), "surprise": 1}))
        assert run_cli("run", "--config", config_path) == 2

    def test_null_for_config_section_rejected(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"trace_path": str(trace), "gate": None}))
        assert run_cli("run", "--config", config_path) == 2

    def test_run_with_retrieval_stack(self, tmp_path):
        from replay_fixture import basis_retriever_parts
        from raggate.retrieval import write_passages

        index, passages = basis_retriever_parts()
        index_path = tmp_path / "index.bin"
        save_index(index, index_path)
        passages_path = tmp_path / "passages.jsonl"
        write_passages(list(passages.values()), passages_path)
        trace = make_trace(tmp_path, build_records())
        out = tmp_path / "out"
        assert (
            run_cli(
                "run", "--trace", trace, "--out-dir", out, "--gate", "margin", "--tau", 0.5,
                "--index", index_path, "--passages", passages_path, "--topk", 1,
                "--ctx-budget", 12,
            )
            == 0
        )
        records = [json.loads(l) for l in (out / "records.jsonl").read_text().splitlines()]
        retrieved = [r for r in records if r["retrieved"]]
        assert retrieved and all(0 < r["context_tokens"] <= 12 for r in retrieved)


class TestSweepCommand:
    def test_csv_report(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        out = tmp_path / "report.csv"
        assert (
            run_cli(
                "sweep", "--trace", trace, "--gate", "margin", "--grid=-inf,0.2,0.5,inf",
                "--format", "csv", "--out", out,
            )
            == 0
        )
        lines = out.read_text().splitlines()
        assert lines[0] == "tau,em,f1,retrieval_rate,delta_latency_s,mean_tokens"
        assert len(lines) == 5

    def test_linspace_grid(self, tmp_path, capsys):
        trace = make_trace(tmp_path, build_records())
        assert run_cli("sweep", "--trace", trace, "--gate", "margin", "--grid", "0:1:5") == 0
        assert len(capsys.readouterr().out.splitlines()) == 6

    def test_bad_grid_is_usage_error(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        assert run_cli("sweep", "--trace", trace, "--gate", "margin", "--grid", "a,b") == 2
        assert run_cli("sweep", "--trace", trace, "--gate", "margin", "--grid", "0:1:0") == 2
        assert run_cli("sweep", "--trace", trace, "--gate", "margin", "--grid", "0:1") == 2

    def test_k_truncation_changes_nothing_on_uniform_drafts(self, tmp_path, capsys):
        # fixture drafts repeat one gap per record, so any k gives the same scores
        trace = make_trace(tmp_path, build_records())
        outputs = []
        for k in (5, 20):
            assert run_cli("sweep", "--trace", trace, "--gate", "margin", "--grid", "0.2,0.8", "--k", k) == 0
            outputs.append(capsys.readouterr().out)
        a = [line.split(",")[3] for line in outputs[0].splitlines()[1:]]
        b = [line.split(",")[3] for line in outputs[1].splitlines()[1:]]
        assert a == b


class TestSimulateCommand:
    def spec_file(self, tmp_path, **overrides):
        spec = {
            "population": {
                "n": 2000,
                "tau_star": 0.6,
                "delta_low": {"kind": "uniform", "a": -0.4, "b": 0.0},
                "delta_high": {"kind": "uniform", "a": 0.0, "b": 0.4},
                "u_dist": {"kind": "uniform", "a": 0.0, "b": 1.0},
                "a0_base": 0.5,
                "seed": 23,
            },
            "consistency": {"rho_list": [0.2], "n_calib": 500, "n_eval": 500, "trials": 10, "tol": 0.05},
        }
        spec.update(overrides)
        path = tmp_path / "spec.json"
        path.write_text(json.dumps(spec))
        return path

    def test_simulate_writes_reports(self, tmp_path, capsys):
        spec = self.spec_file(tmp_path)
        out = tmp_path / "reports"
        assert run_cli("simulate", "--spec", spec, "--format", "csv", "--out-dir", out) == 0
        stdout = capsys.readouterr().out
        assert "weak_dominance_over_never" in stdout
        dominance = (out / "dominance.csv").read_text().splitlines()
        assert dominance[1].split(",")[1] == "pass"
        assert (out / "consistency.csv").exists()
        policies = json.loads((out / "policies.json").read_text())
        assert policies["acc_gate"] >= max(policies["acc_never"], policies["acc_always"]) - 1e-12
        resolved = json.loads((out / "resolved_spec.json").read_text())
        assert resolved["population"]["seed"] == 23

    def test_unknown_spec_field(self, tmp_path):
        path = tmp_path / "spec.json"
        path.write_text(json.dumps({"population": {}, "evil": 1}))
        assert run_cli("simulate", "--spec", path) == 2


class TestRecheckRuns:
    def _varied_trace(self, tmp_path):
        # confident for 10 steps, then flat: the running margin score
        # crosses 0.4 only once 10 zero-gap steps are in view
        steps = [StepStat(entropy_nats=0.0, gap=50.0)] * 10 + [StepStat(entropy_nats=0.0, gap=0.0)] * 10
        record = TraceRecord(
            query_id="drift",
            question="q",
            gold_answers=["grounded"],
            steps=steps,
            answer_no_ctx="plain",
            answer_with_ctx="grounded",
            out_tokens_no_ctx=2,
            out_tokens_with_ctx=3,
        )
        return make_trace(tmp_path, [record])

    def test_recheck_fires_through_cli(self, tmp_path):
        trace = self._varied_trace(tmp_path)
        out = tmp_path / "out"
        code = run_cli(
            "run", "--trace", trace, "--out-dir", out, "--gate", "margin",
            "--tau", "0.4", "--k", "10", "--recheck-stride", "5",
        )
        assert code == 0
        (record,) = [json.loads(l) for l in (out / "records.jsonl").read_text().splitlines()]
        assert record["recheck_fired"] is True
        assert record["retrieved"] is True
        assert record["draft_tokens"] == 20
        assert record["answer"] == "grounded"

    def test_plain_run_does_not_retrieve(self, tmp_path):
        trace = self._varied_trace(tmp_path)
        out = tmp_path / "out"
        code = run_cli(
            "run", "--trace", trace, "--out-dir", out, "--gate", "margin",
            "--tau", "0.4", "--k", "10",
        )
        assert code == 0
        (record,) = [json.loads(l) for l in (out / "records.jsonl").read_text().splitlines()]
        assert record["retrieved"] is False and record["answer"] == "plain"


class TestFailureIsolation:
    def test_partial_trace_corruption_survives(self, tmp_path):
        records = build_records()
        records[3].samples = None  # variance gate cannot score this one
        trace = make_trace(tmp_path, records)
        out = tmp_path / "out"
        code = run_cli(
            "run", "--trace", trace, "--out-dir", out, "--gate", "variance", "--tau", "0.3"
        )
        assert code == 0
        summary = json.loads((out / "summary.json").read_text())
        assert summary["summary"]["failures"] == 1
        assert summary["summary"]["n"] == 49
        assert summary["failures"][0]["query_id"] == records[3].query_id


class TestExitCodes:
    def test_unexpected_exception_is_internal_error(self, tmp_path, monkeypatch, capsys):
        import raggate.cli as cli_mod

        def boom(path):
            raise RuntimeError("wires crossed")

        monkeypatch.setattr(cli_mod, "load_traces", boom)
        assert run_cli("score", "--trace", "x", "--gate", "margin", "--out", tmp_path / "s") == 4
        assert "internal error" in capsys.readouterr().err

    def test_recheck_requires_gate_policy(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        assert (
            run_cli(
                "run", "--trace", trace, "--out-dir", tmp_path / "o", "--gate", "margin",
                "--tau", "0.5", "--policy", "always", "--recheck-stride", "4",
            )
            == 2
        )


class TestDeterministicOutputs:
    def test_rerun_overwrites_identically(self, tmp_path):
        trace = make_trace(tmp_path, build_records())
        out = tmp_path / "out"
        args = (
            "run", "--trace", trace, "--out-dir", out, "--gate", "variance", "--tau", 0.3,
            "--seed", 5,
        )
        assert run_cli(*args) == 0
        first = (out / "records.jsonl").read_bytes(), (out / "summary.json").read_bytes()
        assert run_cli(*args) == 0
        second = (out / "records.jsonl").read_bytes(), (out / "summary.json").read_bytes()
        assert first == second
