import json
import math
import subprocess
import sys
import time

import httpx
import numpy as np
import pytest

from packfuse import synthetic as syn
from packfuse.baselines import TfidfIndex, build_clusters, save_clusters
from packfuse.cli import main
from packfuse.config import RunConfig, load_config
from packfuse.errors import ConfigError, DocTooShort
from packfuse.harness import (
    FusionRunner,
    read_corpus,
    run_eval,
    split_prompt,
    summarize,
    write_records,
)
from packfuse.ppl import sequence_nll
from packfuse.scorer import (
    ByteTokenizer,
    GreedyTokenizer,
    TableModel,
    Vocabulary,
    byte_vocabulary,
    load_model,
    score_sequence,
    train_ngram,
)

TOK = ByteTokenizer()


def config(names, methods, **kw):
    models = [{"name": n, "path": "unused"} for n in names]
    models += kw.pop("extra_models", [])
    return RunConfig(method=methods, models=models, **kw)


@pytest.fixture(scope="module")
def two_domains():
    corpus = syn.domain_corpus(2, seed=0, n_train=20, n_test=30)
    experts = syn.train_experts(corpus)
    return corpus, {e.name: e for e in experts}


@pytest.fixture(scope="module")
def clusters(two_domains):
    corpus, _ = two_domains
    index = TfidfIndex.fit([d for docs in corpus.train.values() for d in docs])
    return build_clusters(index, corpus.train), index


# prompt split -----------------------------------------------------------------

@pytest.mark.parametrize("length,prompt", [(200, 32), (100, 20), (160, 32), (3, 0), (10, 2), (1000, 32)])
def test_split_prompt_lengths(length, prompt):
    doc = byte_vocabulary().sequence([65] * length)
    split = split_prompt(doc)
    assert len(split.prompt) == prompt
    assert split.doc == doc
    assert len(split.eval) >= 1


def test_split_prompt_exact_fraction():
    # 0.7 * 10 is 7.000000000000001 in binary floating point
    doc = byte_vocabulary().sequence([1] * 10)
    assert len(split_prompt(doc, 0.7, None).prompt) == 7
    assert len(split_prompt(doc, 0.3, None).prompt) == 3


def test_split_prompt_too_short():
    with pytest.raises(DocTooShort):
        split_prompt(byte_vocabulary().sequence([1, 2]))


# protocol -----------------------------------------------------------------------

def test_single_model_any_method_matches_own_ppl(two_domains):
    corpus, experts = two_domains
    e0 = experts["expert0"]
    cfg = config(["expert0"], ["packllm-sim", "packllm-opt", "top1", "ensemble", "exhaustive"])
    records = run_eval(cfg, [t for _, t in corpus.test[:5]], {"expert0": e0})
    for rec, (_, text) in zip(records, corpus.test[:5]):
        doc = TOK.encode(text)
        p = rec.prompt_tokens
        own = sequence_nll(score_sequence(e0, doc)[p - 1:-1], doc.ids[p:])
        for res in rec.results.values():
            assert res["weights"] == {"expert0": 1.0}
            assert res["eval_ppl"] == pytest.approx(own.ppl, rel=1e-12)


def test_eval_ppl_matches_manual_fusion(two_domains):
    corpus, experts = two_domains
    cfg = config(list(experts), ["packllm-sim"])
    text = corpus.test[0][1]
    rec = run_eval(cfg, [text], experts)[0]
    doc = TOK.encode(text)
    p = rec.prompt_tokens
    assert p == 32 and rec.eval_tokens == len(doc) - 32
    w = rec.results["packllm-sim"]["weights"]
    rows = [score_sequence(experts[n], doc)[p - 1:-1] for n in experts]
    fused = sum(w[n] * r for n, r in zip(experts, rows))
    expected = sequence_nll(fused, doc.ids[p:]).ppl
    assert rec.results["packllm-sim"]["eval_ppl"] == pytest.approx(expected, rel=1e-9)


def test_exhaustive_matches_opt_for_two_models(two_domains):
    corpus, experts = two_domains
    cfg = config(list(experts), ["packllm-opt", "exhaustive"])
    for rec in run_eval(cfg, [t for _, t in corpus.test], experts):
        assert rec.results["packllm-opt"]["weights"] == rec.results["exhaustive"]["weights"]
        assert rec.results["packllm-opt"]["nll_evals"] == 21


def test_sim_favours_in_domain_expert(two_domains):
    corpus, experts = two_domains
    cfg = config(list(experts), ["packllm-sim"])
    records = run_eval(cfg, [t for _, t in corpus.test], experts)
    hits = sum(r.results["packllm-sim"]["weights"]["expert0"] > 0.5 for r in records)
    assert hits / len(records) >= 0.9


def test_short_prompt_falls_back_to_uniform(two_domains, caplog):
    _, experts = two_domains
    cfg = config(list(experts), ["packllm-sim", "packllm-opt"])
    with caplog.at_level("WARNING"):
        rec = run_eval(cfg, ["abcdefgh"], experts)[0]
    assert rec.error is None and rec.prompt_tokens == 1
    for res in rec.results.values():
        assert res["weights"] == {"expert0": 0.5, "expert1": 0.5}
    assert "too short" in caplog.text


def test_document_errors_are_recorded(two_domains):
    _, experts = two_domains
    cfg = config(list(experts), ["ensemble"])
    records = run_eval(cfg, ["ab", "abcdefghijklmnop"], experts)
    assert records[0].error.startswith("DocTooShort") and records[0].results == {}
    assert records[1].error is None
    assert summarize(records)[0]["failed"] == 1


def test_records_are_deterministic(two_domains, clusters, tmp_path):
    corpus, experts = two_domains
    docs = [t for _, t in corpus.test]
    methods = ["packllm-sim", "packllm-opt", "top1", "ensemble", "cbtm"]
    out = []
    for workers in (1, 1, 4):
        cfg = config(list(experts), methods, clusters="unused", workers=workers, sample=20, seed=3)
        path = tmp_path / f"run{len(out)}.ndjson"
        write_records(run_eval(cfg, docs, experts, clusters), path)
        out.append(path.read_bytes())
    assert out[0] == out[1] == out[2]
    first = json.loads(out[0].splitlines()[0])
    assert "wall_time" not in first


def test_sample_is_seeded(two_domains):
    corpus, experts = two_domains
    docs = [t for _, t in corpus.test]
    ids = lambda seed: [r.doc_id for r in run_eval(config(list(experts), ["ensemble"], sample=5, seed=seed), docs, experts)]
    assert ids(1) == ids(1)
    assert ids(1) != ids(2)


def test_dexperts_with_base_equal_anti_is_the_expert(two_domains):
    corpus, experts = two_domains
    scorers = dict(experts)
    scorers["base"] = scorers["anti"] = experts["expert1"]
    extra = [{"name": "base", "path": "u", "role": "base"}, {"name": "anti", "path": "u", "role": "anti"}]
    cfg = config(list(experts), ["dexperts", "top1"], extra_models=extra)
    for rec in run_eval(cfg, [t for _, t in corpus.test[:5]], scorers):
        d, t = rec.results["dexperts"], rec.results["top1"]
        assert d["weights"] == t["weights"]
        assert d["eval_ppl"] == pytest.approx(t["eval_ppl"], rel=1e-9)


def test_cbtm_runs_and_weights_on_simplex(two_domains, clusters):
    corpus, experts = two_domains
    cfg = config(list(experts), ["cbtm"], clusters="unused")
    for rec in run_eval(cfg, [t for _, t in corpus.test[:10]], experts, clusters):
        w = rec.results["cbtm"]["weights"]
        assert math.fsum(w.values()) == pytest.approx(1.0, abs=1e-9)
        assert math.isfinite(rec.results["cbtm"]["eval_ppl"])


def test_mixed_vocabularies_go_through_alignment():
    chars = "abcd "
    word_vocab = Vocabulary(tuple(chars) + ("ab", "cd", "abcd"), name="words")
    char_vocab = Vocabulary(tuple(chars), name="chars")
    rng = np.random.default_rng(5)
    texts = ["".join(rng.choice(list(chars), size=120)) for _ in range(8)]
    m_words = train_ngram([GreedyTokenizer(word_vocab).encode(t) for t in texts], word_vocab, name="words")
    m_chars = train_ngram([GreedyTokenizer(char_vocab).encode(t) for t in texts], char_vocab, name="chars")
    scorers = {"words": m_words, "chars": m_chars}
    cfg = config(["words", "chars"], ["packllm-sim", "packllm-opt"])
    runner = FusionRunner(cfg, scorers)
    assert not runner.shared_vocab
    records = runner.run(texts[:4])
    for rec in records:
        assert rec.error is None
        assert rec.reference in ("words", "chars")
        for res in rec.results.values():
            assert math.isfinite(res["eval_ppl"])
    pinned = config(["words", "chars"], ["ensemble"], reference="chars")
    assert all(r.reference == "chars" for r in FusionRunner(pinned, scorers).run(texts[:2]))


def test_prompt_weights(two_domains):
    corpus, experts = two_domains
    cfg = config(list(experts), ["packllm-sim", "top1"])
    out = FusionRunner(cfg, experts).prompt_weights(corpus.test[0][1][:32])
    assert out["prompt_tokens"] == 32
    assert out["weights"]["top1"]["expert0"] == 1.0


# configuration --------------------------------------------------------------------

@pytest.mark.parametrize("raw,fragment", [
    ({"method": "ensemble", "models": [{"name": "a", "path": "p"}], "bogus": 1}, "bogus"),
    ({"method": "dexperts", "models": [{"name": "a", "path": "p"}]}, "dexperts"),
    ({"method": "cbtm", "models": [{"name": "a", "path": "p"}]}, "clusters"),
    ({"method": "ensemble", "models": [{"name": "a", "path": "p"}, {"name": "a", "path": "q"}]}, "unique"),
    ({"method": "ensemble", "models": [{"name": "a", "path": "p"}], "step": 0.3}, "step"),
    ({"method": "ensemble", "models": [{"name": "a", "url": "http://x"}]}, "vocab"),
    ({"method": "ensemble", "models": [{"name": "a", "path": "p"}], "reference": "zz"}, "reference"),
    ({"method": "magic", "models": [{"name": "a", "path": "p"}]}, "method"),
])
def test_config_validation(tmp_path, raw, fragment):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ConfigError, match=fragment):
        load_config(path)


def test_config_resolves_relative_paths(tmp_path):
    path = tmp_path / "sub" / "cfg.json"
    path.parent.mkdir()
    path.write_text(json.dumps({"method": ["ensemble"], "corpus": "c.txt",
                                "models": [{"name": "a", "path": "m.json"}, {"name": "b", "path": "/abs.json"}]}))
    cfg = load_config(path)
    assert cfg.corpus == str(tmp_path / "sub" / "c.txt")
    assert cfg.models[0].path == str(tmp_path / "sub" / "m.json")
    assert cfg.models[1].path == "/abs.json"


def test_exhaustive_rejects_many_models():
    cfg = config([f"m{i}" for i in range(5)], ["exhaustive"])
    vocab = Vocabulary(("a", "b"))
    scorers = {f"m{i}": TableModel(f"m{i}", vocab, np.zeros((1, 2))) for i in range(5)}
    with pytest.raises(ConfigError):
        FusionRunner(cfg, scorers)


# command line --------------------------------------------------------------------

@pytest.fixture(scope="module")
def workspace(tmp_path_factory, two_domains, clusters):
    corpus, _ = two_domains
    root = tmp_path_factory.mktemp("ws")
    for name, docs in corpus.train.items():
        (root / f"{name}.txt").write_text("\n".join(docs) + "\n")
    (root / "test.txt").write_text("\n".join(t for _, t in corpus.test[:8]) + "\n")
    save_clusters(root / "clusters.json", *clusters)
    return root


def test_cli_train_eval_weights(workspace, capsys):
    for name in ("expert0", "expert1"):
        assert main(["train", "--corpus", str(workspace / f"{name}.txt"), "--out", str(workspace / f"{name}.ngram"),
                     "--k", "0.1"]) == 0
    model = load_model(workspace / "expert0.ngram")
    assert model.name == "expert0" and model.n == 2
    cfg = {"method": ["packllm-sim", "packllm-opt", "ensemble", "cbtm"], "corpus": "test.txt",
           "output": "out.ndjson", "clusters": "clusters.json",
           "models": [{"name": n, "path": f"{n}.ngram"} for n in ("expert0", "expert1")]}
    (workspace / "cfg.json").write_text(json.dumps(cfg))
    assert main(["eval", "--config", str(workspace / "cfg.json")]) == 0
    lines = (workspace / "out.ndjson").read_text().splitlines()
    assert len(lines) == 8
    summary = (workspace / "out.summary.csv").read_text().splitlines()
    assert summary[0].startswith("method,k,docs") and len(summary) == 5

    (workspace / "prompt.txt").write_text(read_corpus(workspace / "test.txt")[0][:32])
    capsys.readouterr()
    assert main(["weights", "--prompt", str(workspace / "prompt.txt"), "--config", str(workspace / "cfg.json"),
                 "--method", "packllm-sim,top1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out["weights"]) == {"packllm-sim", "top1"}


def test_cli_align_and_bench(tmp_path, capsys):
    Vocabulary(("get", "set"), name="r").save(tmp_path / "r.json")
    Vocabulary(("gets", "forget", "sets"), name="o").save(tmp_path / "o.json")
    assert main(["align", "--ref", str(tmp_path / "r.json"), "--other", str(tmp_path / "o.json")]) == 0
    assert json.loads(capsys.readouterr().out)["pairs"] == [[0, 0], [1, 2]]
    assert main(["bench", "--k", "2,3", "--out", str(tmp_path / "b.csv")]) == 0
    rows = (tmp_path / "b.csv").read_text().splitlines()
    assert rows[1].startswith("2,0.05,21,21,") and rows[2].startswith("3,0.05,42,42,")


def test_cli_reports_errors(tmp_path):
    (tmp_path / "cfg.json").write_text("{not json")
    assert main(["eval", "--config", str(tmp_path / "cfg.json")]) == 1


@pytest.mark.slow
def test_cli_serve_toy(tmp_path):
    vocab = Vocabulary(("a", "b", "c"), name="abc")
    TableModel("t", vocab, np.arange(9, dtype=float).reshape(3, 3)).save(tmp_path / "t.json")
    import socket
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    proc = subprocess.Popen([sys.executable, "-m", "packfuse.cli", "serve-toy", "--model", str(tmp_path / "t.json"),
                             "--port", str(port)])
    try:
        url = f"http://127.0.0.1:{port}"
        for _ in range(200):
            try:
                if httpx.get(url + "/healthz").status_code == 200:
                    break
            except httpx.TransportError:
                time.sleep(0.05)
        body = {"v": 1, "vocab_hash": vocab.hash, "tokens": [2, 0]}
        resp = httpx.post(url + "/v1/score", json=body).json()
        assert resp["logits"] == [[6.0, 7.0, 8.0], [0.0, 1.0, 2.0]]
    finally:
        proc.terminate()
        proc.wait(10)

