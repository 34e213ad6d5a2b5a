import io
import json
import re

import pytest

from mter.checkpoint import load_checkpoint
from mter.cli import run_command
from mter.corpus import write_lexicon, write_reviews
from mter.synthetic import preference_corpus

EXPLANATION = re.compile(
    r"^Recommendation: [^\n]+\nExplanation: Its \S+ is \[[^\]]+\]( \[[^\]]+\])*\."
    r"( Its \S+ is \[[^\]]+\]( \[[^\]]+\])*\.)*\n$"
)


def run(argv, env=None):
    out, err = io.StringIO(), io.StringIO()
    code = run_command([str(a) for a in argv], environ=env or {}, stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


@pytest.fixture(scope="module")
def raw(tmp_path_factory):
    d = tmp_path_factory.mktemp("raw")
    lexicon, records = preference_corpus(n_users=40, n_items=50, seed=2)
    write_lexicon(d / "l.tsv", lexicon)
    write_reviews(d / "r.jsonl", records)
    return d


@pytest.fixture(scope="module")
def trained(raw, tmp_path_factory):
    ck = tmp_path_factory.mktemp("ck") / "model"
    code, out, err = run(["train", "--reviews", raw / "r.jsonl", "--lexicon", raw / "l.tsv",
                          "--out", ck, "--seed", 7, "--t-iter", 200])
    assert code == 0, err
    return ck


class TestTrain:
    def test_identical_checkpoints(self, raw, trained, tmp_path):
        again = tmp_path / "again"
        code, _, err = run(["train", "--reviews", raw / "r.jsonl", "--lexicon", raw / "l.tsv",
                            "--out", again, "--seed", 7, "--t-iter", 200, "--threads", 1])
        assert code == 0, err
        files = sorted(p.relative_to(trained) for p in trained.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
        for f in files:
            assert (trained / f).read_bytes() == (again / f).read_bytes(), f

    def test_checkpoint_contents(self, trained):
        ck = load_checkpoint(trained)
        assert ck.config["t_iter"] == 200 and ck.config["seed"] == 7
        assert ck.model.is_nonnegative()
        assert (trained / "data" / "train.jsonl").is_file()

    def test_preprocess_then_train_matches_raw(self, raw, trained, tmp_path):
        prep = tmp_path / "prep"
        assert run(["preprocess", "--reviews", raw / "r.jsonl", "--lexicon", raw / "l.tsv",
                    "--out", prep, "--seed", 7])[0] == 0
        ck = tmp_path / "ck"
        assert run(["train", "--data", prep, "--out", ck, "--seed", 7, "--t-iter", 200])[0] == 0
        for name in ("manifest.json", "U.bin", "G1.bin"):
            assert (ck / name).read_bytes() == (trained / name).read_bytes()

    def test_env_and_config_layers(self, raw, tmp_path):
        cfg = tmp_path / "cfg"
        cfg.write_text("t_iter = 3\neta = 0.2\n")
        ck = tmp_path / "ck"
        code, _, err = run(["train", "--reviews", raw / "r.jsonl", "--lexicon", raw / "l.tsv", "--out", ck,
                            "--config", cfg, "--eta", "0.3"], env={"MTER_T_ITER": "4", "MTER_LAMBDA_F": "0.5"})
        assert code == 0, err
        conf = load_checkpoint(ck).config
        assert conf["t_iter"] == 4          # environment beats config file
        assert conf["eta"] == 0.3           # flag beats config file
        assert conf["lambda_f"] == 0.5

    def test_phi_sets_lambda(self, raw, tmp_path):
        ck = tmp_path / "ck"
        assert run(["train", "--reviews", raw / "r.jsonl", "--lexicon", raw / "l.tsv", "--out", ck,
                    "--t-iter", 2, "--phi", 0.0])[0] == 0
        assert load_checkpoint(ck).config["lambda_b"] == 0.0

    def test_invalid_input_creates_nothing(self, raw, tmp_path):
        bad = tmp_path / "bad.jsonl"
        bad.write_text('{"user": "u", "item": "i", "rating": 9, "phrases": []}\n')
        out = tmp_path / "never"
        code, _, err = run(["train", "--reviews", bad, "--lexicon", raw / "l.tsv", "--out", out])
        assert code == 1 and "rating 9" in err
        assert not out.exists()
        code, _, err = run(["train", "--reviews", raw / "r.jsonl", "--lexicon", raw / "l.tsv", "--out", out,
                            "--eta", "-1"])
        assert code == 1 and not out.exists()


class TestQueries:
    def test_recommend_ten_lines(self, trained):
        user = load_checkpoint(trained).users[0]
        code, out, err = run(["recommend", "--ckpt", trained, "--user", user, "--k", 10])
        assert code == 0, err
        lines = out.splitlines()
        assert len(lines) == 10
        assert [int(line.split("\t")[0]) for line in lines] == list(range(1, 11))
        scores = [float(line.split("\t")[2]) for line in lines]
        assert scores == sorted(scores, reverse=True)

    def test_recommend_excludes_training_items(self, trained):
        ck = load_checkpoint(trained)
        user = ck.users[1]
        train_items = {json.loads(line)["item"] for line in (trained / "data" / "train.jsonl").read_text().splitlines()
                       if json.loads(line)["user"] == user}
        _, out, _ = run(["recommend", "--ckpt", trained, "--user", user, "--k", 30])
        assert not {line.split("\t")[1] for line in out.splitlines()} & train_items

    def test_explain_grammar(self, trained):
        ck = load_checkpoint(trained)
        code, out, err = run(["explain", "--ckpt", trained, "--user", ck.users[0], "--item", ck.items[3],
                              "--features", 3, "--phrases", 3])
        assert code == 0, err
        assert EXPLANATION.match(out), out
        assert out.startswith(f"Recommendation: {ck.items[3]}\nExplanation: Its ")
        assert out.count("Its ") == 3 and out.count("[") == 9

    def test_evaluate_report(self, trained, tmp_path):
        out_file = tmp_path / "rep.json"
        code, _, err = run(["evaluate", "--ckpt", trained, "--k-list", "5,10", "--baselines", "--out", out_file])
        assert code == 0, err
        rep = json.loads(out_file.read_text())
        assert set(rep["mter"]["recommendation"]) == {"ndcg@5", "ndcg@10"}
        assert 0 <= rep["mter"]["feature_ndcg@20"] <= 1
        assert "p_value" in rep["bprmf"]["mter_vs_bprmf@5"]
        again = tmp_path / "rep2.json"
        run(["evaluate", "--ckpt", trained, "--k-list", "5,10", "--baselines", "--out", again])
        assert again.read_bytes() == out_file.read_bytes()

    def test_permtest(self, raw):
        code, out, err = run(["permtest", "--reviews", raw / "r.jsonl", "--lexicon", raw / "l.tsv",
                              "--n-perm", 7, "--scope", "item"])
        assert code == 0, err
        rep = json.loads(out)
        assert rep["n_perm"] == 7 and len(rep["permuted"]) == 7 and rep["scope"] == "item"


class TestErrors:
    @pytest.mark.parametrize("argv", [["frobnicate"], ["train", "--bogus"], [], ["evaluate", "--k-list", "a"]])
    def test_usage_errors_exit_2(self, argv):
        code, _, err = run(argv)
        assert code == 2
        assert "usage:" in err

    def test_unknown_user(self, trained):
        code, out, err = run(["recommend", "--ckpt", trained, "--user", "nobody"])
        assert code == 1 and "unknown user" in err and out == ""

    def test_missing_checkpoint(self, tmp_path):
        code, _, err = run(["recommend", "--ckpt", tmp_path / "x", "--user", "u"])
        assert code == 1 and "checkpoint" in err

    def test_missing_data_source(self, tmp_path):
        code, _, err = run(["train", "--out", tmp_path / "o"])
        assert code == 2 and "--data" in err

    def test_bad_env_value(self, trained):
        code, _, err = run(["recommend", "--ckpt", trained, "--user", "u0"], env={"MTER_K": "ten"})
        assert code == 1 and "bad value for k" in err
