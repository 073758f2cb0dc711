import numpy as np
import pytest

from kgnorm import encoder as enc
from kgnorm.cli import run


@pytest.fixture(scope="module")
def model(synthetic_files, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_model")
    f = synthetic_files
    code = run(["train", "--seed", "0", "--out-dir", str(out), "--concepts", str(f["concepts"]),
                "--relations", str(f["relations"]), "--vocab", str(f["vocab"]), "--steps", "0"])
    assert code == 0
    return out / "model.kge"


def base(f, model):
    return ["--checkpoint", str(model), "--vocab", str(f["vocab"])]


def rows(capsys):
    return [ln.split("\t") for ln in capsys.readouterr().out.splitlines()]


class TestData:
    def test_gen_synthetic(self, tmp_path, capsys):
        assert run(["gen-synthetic", "--seed", "2", "--out-dir", str(tmp_path), "--groups", "8"]) == 0
        assert dict(rows(capsys))["gold"] == str(tmp_path / "gold.tsv")
        assert len((tmp_path / "gold.tsv").read_text().splitlines()) == 40

    def test_ingest_check(self, synthetic_files, capsys):
        assert run(["ingest-check", "--concepts", str(synthetic_files["concepts"]),
                    "--relations", str(synthetic_files["relations"])]) == 0
        out = dict(rows(capsys))
        assert out["concepts"] == "100" and out["triplets"] == "400" and out["relation_labels"] == "4"

    def test_ingest_bad_file(self, tmp_path, capsys):
        (tmp_path / "c.tsv").write_text("C1\ten\n")
        assert run(["ingest-check", "--concepts", str(tmp_path / "c.tsv")]) == 1
        assert ":1:" in capsys.readouterr().err

    def test_build_vocab(self, synthetic_files, tmp_path, capsys):
        assert run(["build-vocab", "--concepts", str(synthetic_files["concepts"]),
                    "--vocab-out", str(tmp_path / "v.txt")]) == 0
        assert (tmp_path / "v.txt").read_text() == synthetic_files["vocab"].read_text()


class TestUsage:
    def test_unknown_command(self, capsys):
        assert run(["frobnicate"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_flag(self, capsys):
        assert run(["gradcheck", "--bogus"]) == 1

    def test_missing_seed(self, tmp_path):
        assert run(["train", "--out-dir", str(tmp_path)]) == 1

    def test_missing_file(self, tmp_path, capsys):
        assert run(["ingest-check", "--concepts", str(tmp_path / "none.tsv")]) == 1


class TestModelCommands:
    def test_train_zero_steps_is_init(self, model, synthetic_files):
        from kgnorm.kg_store import load_concepts, load_relations
        from kgnorm.tokenizer import load_vocab
        from kgnorm.trainer import TrainConfig, initial_params
        d = load_concepts(synthetic_files["concepts"])
        labels = load_relations(synthetic_files["relations"], d).labels
        init = initial_params(TrainConfig(seed=0), len(load_vocab(synthetic_files["vocab"])), labels)
        assert enc.load_checkpoint(model).equals(init)

    def test_normalize_top3(self, model, synthetic_files, capsys):
        f = synthetic_files
        assert run(["normalize", *base(f, model), "--concepts", str(f["concepts"]),
                    "--query", "backache", "--top", "3"]) == 0
        out = rows(capsys)
        assert len(out) == 3 and all(len(r) == 3 for r in out)
        scores = [float(r[2]) for r in out]
        assert scores == sorted(scores, reverse=True)

    def test_embed_then_normalize(self, model, synthetic_files, tmp_path, capsys):
        f = synthetic_files
        assert run(["embed", *base(f, model), "--concepts", str(f["concepts"]),
                    "--index-out", str(tmp_path / "i.npz")]) == 0
        capsys.readouterr()
        q = ["--query", "pain", "--query", "lesion nos"]
        assert run(["normalize", *base(f, model), "--index", str(tmp_path / "i.npz"), *q]) == 0
        via_index = capsys.readouterr().out
        assert run(["normalize", *base(f, model), "--concepts", str(f["concepts"]), *q]) == 0
        assert capsys.readouterr().out == via_index

    def test_eval_acc(self, model, synthetic_files, tmp_path, capsys):
        f = synthetic_files
        assert run(["eval-acc", *base(f, model), "--concepts", str(f["concepts"]), "--gold", str(f["gold"]),
                    "--figures", str(tmp_path), "--out", str(tmp_path / "acc.tsv")]) == 0
        out = dict(rows(capsys))
        assert 0 <= float(out["acc@1"]) <= float(out["acc@3"]) <= 1
        assert (tmp_path / "accuracy.png").stat().st_size > 0
        assert (tmp_path / "acc.tsv").exists()

    def test_eval_acc_missing_cui(self, model, synthetic_files, tmp_path, capsys):
        f = synthetic_files
        (tmp_path / "g.tsv").write_text("some query\tC999\n")
        assert run(["eval-acc", *base(f, model), "--concepts", str(f["concepts"]),
                    "--gold", str(tmp_path / "g.tsv")]) == 1
        assert "C999" in capsys.readouterr().err

    def test_eval_f1(self, model, synthetic_files, capsys):
        f = synthetic_files
        assert run(["eval-f1", *base(f, model), "--concepts", str(f["concepts"]), "--gold", str(f["gold"])]) == 0
        out = dict(rows(capsys))
        assert out["precision"] == out["recall"] == out["f1"]

    def test_eval_mcsm(self, model, synthetic_files, tmp_path, capsys):
        f = synthetic_files
        assert run(["eval-mcsm", *base(f, model), "--concepts", str(f["concepts"]), "--k", "4",
                    "--random-draws", "2", "--figures", str(tmp_path)]) == 0
        out = rows(capsys)
        assert out[0] == ["type", "mcsm", "random", "bound"] and len(out) == 21
        assert all(float(r[1]) <= float(r[3]) for r in out[1:])
        assert (tmp_path / "mcsm.png").exists()

    def test_eval_relcls(self, model, synthetic_files, capsys):
        f = synthetic_files
        assert run(["eval-relcls", *base(f, model), "--concepts", str(f["concepts"]),
                    "--pairs", str(f["probe"]), "--epochs", "2"]) == 0
        out = dict(rows(capsys))
        assert out["n_train"] == "320" and out["n_test"] == "80"

    def test_export(self, model, synthetic_files, capsys):
        f = synthetic_files
        assert run(["export-embeddings", *base(f, model), "--concepts", str(f["concepts"])]) == 0
        out = rows(capsys)
        assert len(out) == 300 and len(out[0][2].split(",")) == 64

    def test_vocab_mismatch(self, model, toy_vocab, synthetic_files, tmp_path):
        toy_vocab.save(tmp_path / "v.txt")
        assert run(["embed", "--checkpoint", str(model), "--vocab", str(tmp_path / "v.txt"),
                    "--concepts", str(synthetic_files["concepts"]), "--index-out", str(tmp_path / "i.npz")]) == 1


class TestGradcheck:
    def test_passes(self, capsys):
        assert run(["gradcheck", "--mode", "transe", "--coords", "60"]) == 0
        assert rows(capsys)[-1][0] == "max_rel_error"

    def test_runtime_failure_exit_2(self, capsys):
        # a step this large makes finite differences far from the analytic gradient
        assert run(["gradcheck", "--step", "0.5", "--coords", "60"]) == 2


def test_train_with_config_and_figures(synthetic_files, tmp_path, capsys):
    f = synthetic_files
    (tmp_path / "run.cfg").write_text(f"concepts = {f['concepts']}\nrelations = {f['relations']}\n"
                                      f"vocab = {f['vocab']}\nsteps = 3\ngrad_accum = 1\n")
    assert run(["train", "--config", str(tmp_path / "run.cfg"), "--seed", "1", "--out-dir", str(tmp_path / "o"),
                "--log-every", "1", "--figures", str(tmp_path / "fig")]) == 0
    out = dict(rows(capsys))
    assert np.isfinite(float(out["final_loss"]))
    assert (tmp_path / "fig" / "training_curve.png").exists()
    assert "grad_accum = 1" in (tmp_path / "o" / "config.txt").read_text()
