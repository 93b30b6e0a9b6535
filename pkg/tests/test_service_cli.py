import json
import threading
import urllib.request
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from hybrid_retrieval import cli, corpus, links, plotting, two_tower
from hybrid_retrieval.bench import SyntheticSpec, query_embedding_near, random_clauses, synthetic_schema
from hybrid_retrieval.server import QueryServer, QueryService, ServiceConfig

from test_two_tower import identical_pairs, oracle_model


def strip_timings(body):
    if isinstance(body, list):
        return [strip_timings(b) for b in body]
    return {k: v for k, v in body.items() if k != "timings"}


@pytest.fixture
def service(two_doc_index):
    with QueryService(two_doc_index, ServiceConfig(num_bits=64, max_batch=4, workers=2)) as s:
        yield s


def test_match_all_request(service):
    status, body = service.handle({"embedding": [1.0, 0.0], "k": 2})
    assert status == 200
    assert [r["docId"] for r in body["results"]] == ["doc1", "doc2"]
    assert body["results"][0]["score"] > body["results"][1]["score"]
    assert set(body["timings"]) == {"tbrMs", "quantMs", "ebrMs", "topkMs"}


def test_wrong_dim_names_expected(service):
    status, body = service.handle({"embedding": [1.0, 0.0, 0.0]})
    assert status == 400
    assert "dim 2" in body["error"]["message"]


def test_array_equals_single_requests(service):
    reqs = [{"clauses": {"geo": [129]}, "embedding": [0.0, 1.0]}, {"embedding": [1.0, 0.0], "k": 1}]
    status, body = service.handle(reqs)
    assert status == 200
    assert strip_timings(body) == [strip_timings(service.handle(r)[1]) for r in reqs]


@pytest.mark.parametrize(
    "payload, status, code",
    [
        ([{}] * 5, 413, "batch_too_large"),
        ([], 400, "invalid_request"),
        ("text", 400, "invalid_query"),
        ({"clauses": {"title": [1]}}, 400, "invalid_query"),
        ({"k": -1}, 400, "invalid_query"),
        ({"bogus": 1}, 400, "invalid_query"),
        ({"options": {"quantK": "x"}}, 400, "invalid_query"),
    ],
)
def test_structured_errors(service, payload, status, code):
    got, body = service.handle(payload)
    assert got == status
    assert body["error"]["code"] == code


def test_bad_item_in_batch_is_positional(service):
    status, body = service.handle([{"embedding": [1.0, 0.0]}, {"clauses": {"title": [1]}}])
    assert status == 200
    assert "results" in body[0] and "error" in body[1]


def test_responses_deterministic(service):
    req = {"embedding": [0.3, 0.7], "k": 2, "options": {"quantEnabled": True}}
    assert strip_timings(service.handle(req)[1]) == strip_timings(service.handle(req)[1])


def test_closed_service_rejects(two_doc_index):
    s = QueryService(two_doc_index, ServiceConfig(num_bits=64))
    s.close()
    assert s.handle({"embedding": [1.0, 0.0]})[0] == 503


def test_service_config_validation():
    with pytest.raises(ValueError):
        ServiceConfig(max_batch=0).validate()
    with pytest.raises(ValueError):
        ServiceConfig.from_dict({"maxBatchSize": 3})
    assert ServiceConfig().num_bits == 512 and ServiceConfig().quant_k_multiplier == 200 and ServiceConfig().granularity == 100


def post(url, payload):
    data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
    req = urllib.request.Request(url, data=data, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as err:
        return err.code, json.loads(err.read())


def test_http_concurrent_clients(small_index):
    config = ServiceConfig(num_bits=small_index.num_bits, max_batch=8, workers=3, port=0)
    server = QueryServer(QueryService(small_index, config))
    server.start()
    host, port = server.address
    url = f"http://{host}:{port}/query"
    rng = np.random.default_rng(0)
    spec = SyntheticSpec(num_docs=3000, dim=16)
    reqs = [
        {"clauses": random_clauses(small_index, rng, spec), "embedding": query_embedding_near(small_index, rng).tolist(), "k": 7}
        for _ in range(40)
    ]
    try:
        with QueryService(small_index, ServiceConfig(num_bits=small_index.num_bits, workers=1)) as local:
            expect = [strip_timings(local.handle(r)[1]) for r in reqs]
        with ThreadPoolExecutor(8) as pool:
            got = list(pool.map(lambda r: post(url, r), reqs))
        assert all(status == 200 for status, _ in got)
        assert [strip_timings(b) for _, b in got] == expect
        status, body = post(url, reqs[:3])
        assert status == 200 and strip_timings(body) == expect[:3]
        assert post(url, b"{not json")[0] == 400
        with urllib.request.urlopen(f"http://{host}:{port}/health", timeout=10) as resp:
            assert json.loads(resp.read())["numDocs"] == small_index.num_docs
    finally:
        server.shutdown()


# -- CLI ----------------------------------------------------------------------


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, [json.loads(line) for line in out.splitlines() if line.strip()], err


def write_two_doc_inputs(tmp_path):
    schema = corpus.IndexSchema(("geo", "skill"), 2, 5)
    (tmp_path / "schema.json").write_text(json.dumps(schema.to_dict()))
    corpus.write_documents(tmp_path / "docs.jsonl", [
        corpus.DocumentInput("doc1", [[934, 2934], [945, 342, 3112]], [1.0, 0.0]),
        corpus.DocumentInput("doc2", [[129], [9342, 234]], [0.6, 0.8]),
    ], schema)
    return tmp_path / "docs.jsonl", tmp_path / "schema.json"


def test_cli_build_and_query(tmp_path, capsys):
    docs, schema = write_two_doc_inputs(tmp_path)
    code, out, _ = run(capsys, "build", "--ingest", docs, "--schema", schema, "--out", tmp_path / "a.bin", "--num-bits", 64)
    assert code == 0 and out[0]["numDocs"] == 2 and out[0]["bytes"] == (tmp_path / "a.bin").stat().st_size
    idx = corpus.load(tmp_path / "a.bin")
    assert idx.attributes.tolist() == [[934, 2934, 342, 945, 3112], [129, 234, 9342, 0, 0]]
    assert idx.offsets.tolist() == [[0, 2, 5], [0, 1, 3]]
    run(capsys, "build", "--ingest", docs, "--schema", schema, "--out", tmp_path / "b.bin", "--num-bits", 64)
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()

    code, out, _ = run(capsys, "query", "--index", tmp_path / "a.bin", "--num-bits", 64,
                       "--request", json.dumps({"clauses": {"geo": [129], "skill": [234]}, "embedding": [1, 0]}))
    assert code == 0 and [r["docId"] for r in out[0]["body"]["results"]] == ["doc2"]
    code, out, _ = run(capsys, "query", "--index", tmp_path / "a.bin", "--request", '{"embedding": [1]}')
    assert code == 1 and out[0]["status"] == 400


def test_cli_build_errors(tmp_path, capsys):
    _, schema = write_two_doc_inputs(tmp_path)
    (tmp_path / "empty.jsonl").write_text("")
    code, _, err = run(capsys, "build", "--ingest", tmp_path / "empty.jsonl", "--schema", schema, "--out", tmp_path / "x.bin")
    assert code == 2 and "no documents" in err
    (tmp_path / "bad.jsonl").write_text('{"docId": "a", "clauses": {}, "embedding": [1, 0]}\n{oops\n')
    code, _, err = run(capsys, "build", "--ingest", tmp_path / "bad.jsonl", "--schema", schema, "--out", tmp_path / "x.bin")
    assert code == 2 and "line 2" in err
    (tmp_path / "dim.jsonl").write_text('{"docId": "a", "clauses": {}, "embedding": [1, 0, 0]}\n')
    code, _, err = run(capsys, "build", "--ingest", tmp_path / "dim.jsonl", "--schema", schema, "--out", tmp_path / "x.bin")
    assert code == 2 and "line 1" in err
    code, _, err = run(capsys, "query", "--index", tmp_path / "missing.bin", "--request", "{}")
    assert code == 2 and "not found" in err


def test_cli_config_file_and_flag_override(tmp_path, capsys):
    docs, schema = write_two_doc_inputs(tmp_path)
    run(capsys, "build", "--ingest", docs, "--schema", schema, "--out", tmp_path / "a.bin", "--num-bits", 64)
    (tmp_path / "cfg.json").write_text(json.dumps({"max-batch": 1, "num_bits": 64}))
    req = json.dumps([{"embedding": [1, 0]}, {"embedding": [0, 1]}])
    code, out, _ = run(capsys, "--config", tmp_path / "cfg.json", "query", "--index", tmp_path / "a.bin", "--request", req)
    assert out[0]["status"] == 413
    code, out, _ = run(capsys, "--config", tmp_path / "cfg.json", "query", "--index", tmp_path / "a.bin", "--max-batch", 2, "--request", req)
    assert out[0]["status"] == 200 and len(out[0]["body"]) == 2
    (tmp_path / "bad.json").write_text(json.dumps({"nonsense": 1}))
    with pytest.raises(SystemExit):
        cli.main(["--config", str(tmp_path / "bad.json"), "query", "--index", "x", "--request", "{}"])


def test_cli_bench_table_shape(tmp_path, capsys):
    code, out, _ = run(capsys, "bench", "--num-docs", 1500, "--dim", 16, "--batch-sizes", "1,4", "--pass-rates", "0.1,0.33",
                       "--queries", 8, "--k", 10, "--topk-n", 20000, "--topk-k", 50, "--out-dir", tmp_path)
    assert code == 0
    rows = [r for r in out if r["event"] == "bench"]
    assert {(r["passRate"], r["batchSize"]) for r in rows} == {(0.1, 1), (0.1, 4), (0.33, 1), (0.33, 4)}
    for r in rows:
        assert r["qps"] > 0 and r["p50Ms"] <= r["p95Ms"] <= r["p99Ms"]
    assert all(r["identical"] for r in out if r["event"] == "topk")
    table = plotting.read_table(tmp_path / "batch_bench.tsv")
    assert len(table) == 4 and {"passRate", "batchSize", "qps", "meanLatencyMs"} <= set(table[0])
    for name in ("latency_vs_pass_rate.png", "batch_throughput.png", "topk_bench.png"):
        assert (tmp_path / name).read_bytes()[:4] == b"\x89PNG"


def test_cli_bench_rejects_bad_rates(tmp_path, capsys):
    code, _, err = run(capsys, "bench", "--num-docs", 200, "--dim", 8, "--pass-rates", "1.5", "--out-dir", tmp_path)
    assert code == 2


def test_cli_links_on_planted_corpus(tmp_path, capsys):
    code, _, _ = run(capsys, "synth", "links", "--out-dir", tmp_path / "in")
    assert code == 0
    code, out, _ = run(capsys, "links", "--pairs", tmp_path / "in/pairs.jsonl", "--templates", tmp_path / "in/templates.json",
                       "--planted", tmp_path / "in/planted.json", "--out-dir", tmp_path / "out")
    assert code == 0
    summary = out[-1]
    assert summary["plantedRecall"] >= 0.9
    assert 0 <= summary["falsePositiveRate"] <= 1
    rows = plotting.read_table(tmp_path / "out/link_tradeoff.tsv")
    assert {"threshold", "recall", "falsePositiveRate"} <= set(rows[0])
    assert (tmp_path / "out/link_tradeoff.png").exists()
    # the export builds into an index whose term matches reproduce the seekers' reachable jobs
    schema = corpus.IndexSchema.load(tmp_path / "out/schema.json")
    index = corpus.build_from_file(tmp_path / "out/jobs.jsonl", schema, num_bits=64)
    seekers = json.loads((tmp_path / "out/seekers.json").read_text())
    assert seekers
    sid, clauses = next(iter(seekers.items()))
    from hybrid_retrieval.pipeline import execute, make_query

    assert len(execute(index, make_query(index, clauses, None, k=index.num_docs))) > 0


def test_cli_links_missing_file(tmp_path, capsys):
    code, _, err = run(capsys, "links", "--pairs", tmp_path / "nope.jsonl", "--templates", tmp_path / "t.json", "--out-dir", tmp_path)
    assert code == 2 and "not found" in err


def test_cli_train_and_eval(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--synthetic", 1500, "--m", 64, "--K", 16, "--n", 0, "--stage1-steps", 6,
                       "--stage2-steps", 4, "--eval-every", 5, "--buckets", 512, "--hidden", 8, "--out-dim", 8,
                       "--holdout", 256, "--out-dir", tmp_path)
    assert code == 0
    summary = out[-1]
    assert summary["event"] == "train" and "inBatchRecall@10" in summary["stage2"]
    for name in ("model.npz", "stage1.npz", "history.jsonl", "learning_curve.png", "train_config.json"):
        assert (tmp_path / name).exists()
    assert len((tmp_path / "history.jsonl").read_text().splitlines()) == 2
    code, out, _ = run(capsys, "eval", "--model", tmp_path / "model.npz", "--synthetic", 600, "--batch", 128, "--k", 10)
    assert code == 0 and {r["metric"] for r in out} == {"inBatchRecall@10", "knnRecall@10"}
    code, _, err = run(capsys, "train", "--synthetic", 500, "--m", 64, "--K", 64, "--out-dir", tmp_path)
    assert code == 2 and "K must" in err


def test_cli_eval_oracle_model_is_perfect(tmp_path, capsys):
    data, tokens = identical_pairs(300, 1 << 16)
    two_tower.write_pair_file(tmp_path / "pairs.jsonl", tokens, tokens, np.arange(300))
    oracle_model(two_tower.TowerConfig(buckets=1 << 16, hidden=16, out=16)).save(tmp_path / "oracle.npz")
    code, out, _ = run(capsys, "eval", "--model", tmp_path / "oracle.npz", "--pairs", tmp_path / "pairs.jsonl", "--k", 1)
    assert code == 0
    assert [r["value"] for r in out] == [1.0, 1.0]


def test_cli_synth_index_builds(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "index", "--num-docs", 50, "--dim", 8, "--out-dir", tmp_path)
    assert code == 0
    schema = corpus.IndexSchema.load(tmp_path / "schema.json")
    assert schema.clause_names == synthetic_schema(SyntheticSpec(dim=8)).clause_names
    assert corpus.build_from_file(tmp_path / "docs.jsonl", schema, num_bits=64).num_docs == 50


def test_write_table_round_trip(tmp_path):
    rows = [{"a": 1, "b": 0.5}, {"a": 2, "c": "x"}]
    plotting.write_table(tmp_path / "t.tsv", rows)
    assert plotting.read_table(tmp_path / "t.tsv") == [{"a": "1", "b": "0.5", "c": ""}, {"a": "2", "b": "", "c": "x"}]
    plotting.write_table(tmp_path / "t.csv", rows, delimiter=",")
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "a,b,c"
