import subprocess
import sys

import pytest

from selattn.checkpoint import load_model, save_model
from selattn.cli import main
from selattn.corpus import EMPTY_SENTENCE, EOS, read_documents

CONFIG = """\
# tiny model for command-line tests
model_dim=8
ff_dim=16
layers=1
heads=1
attention={attention}
integration={integration}
setting=online
lr=0.003
batch_docs=8
max_epochs=1
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generate data and train a sentence model plus two context models once."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "1", "--docs", "24", "--doc-len", "4", "--sent-len", "5",
                 "--classes", "2", "--vocab-size", "8", "--out", str(root / "train")]) == 0
    assert main(["gen-data", "--seed", "2", "--docs", "6", "--doc-len", "4", "--sent-len", "5",
                 "--classes", "2", "--vocab-size", "8", "--out", str(root / "dev")]) == 0
    for integration in ("encoder", "decoder"):
        (root / f"{integration}.cfg").write_text(
            CONFIG.format(attention="hier-sparse-soft", integration=integration))
    assert main(["train", "--stage", "sentence", "--config", str(root / "encoder.cfg"),
                 "--train", str(root / "train"), "--dev", str(root / "dev"),
                 "--out", str(root / "s1.ckpt")]) == 0
    for integration in ("encoder", "decoder"):
        assert main(["train", "--stage", "context", "--config", str(root / f"{integration}.cfg"),
                     "--train", str(root / "train"), "--dev", str(root / "dev"),
                     "--init", str(root / "s1.ckpt"), "--out", str(root / f"{integration}.ckpt")]) == 0
    doc = read_documents(root / "dev" / "src.txt")[0]
    (root / "one.txt").write_text("".join(" ".join(s) + "\n" for s in doc))
    return root


def test_gen_data_outputs_and_determinism(tmp_path, capsys):
    args = ["gen-data", "--seed", "5", "--docs", "10", "--doc-len", "3", "--sent-len", "4",
            "--classes", "3"]
    code, out, _ = run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0 and "documents=10" in out
    run(capsys, *args, "--out", tmp_path / "b")
    names = ["src.txt", "tgt.txt", "vocab.src", "vocab.tgt", "info.txt",
             "contrastive/src.txt", "contrastive/tgt.txt", "contrastive/items.txt"]
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert len(read_documents(tmp_path / "a" / "src.txt")) == 10


def test_gen_data_distances_flag(tmp_path, capsys):
    run(capsys, "gen-data", "--seed", "0", "--docs", "30", "--doc-len", "4", "--sent-len", "3",
        "--classes", "2", "--distances", "2", "--out", tmp_path)
    info = (tmp_path / "info.txt").read_text().splitlines()
    assert all(line.endswith("distance=2") for line in info)


def test_training_is_deterministic(workspace, tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--stage", "sentence", "--config",
                       workspace / "encoder.cfg", "--train", workspace / "train", "--dev",
                       workspace / "dev", "--out", tmp_path / "again.ckpt")
    assert code == 0
    assert (tmp_path / "again.ckpt").read_bytes() == (workspace / "s1.ckpt").read_bytes()
    assert (tmp_path / "again.ckpt.report").read_bytes() == \
        (workspace / "s1.ckpt.report").read_bytes()
    assert "stage=sentence" in out


def test_reported_parameter_count_matches_hand_count(workspace, tmp_path, capsys):
    _, out, _ = run(capsys, "train", "--stage", "context", "--config", workspace / "encoder.cfg",
                    "--train", workspace / "train", "--dev", workspace / "dev", "--init",
                    workspace / "s1.ckpt", "--out", tmp_path / "c.ckpt")
    kv = dict(line.split("=", 1) for line in out.splitlines() if "=" in line)
    model, sv, tv = load_model(tmp_path / "c.ckpt")
    d, ff, vs, vt = 8, 16, len(sv), len(tv)
    mha, ln, ffn = 4 * (d * d + d), 2 * d, d * ff + ff + ff * d + d
    sentence = vs * d + vt * d + (mha + 2 * ln + ffn) + (2 * mha + 3 * ln + ffn) + d * vt + vt
    context = 6 * d * d + 2 * ln + ffn + 2 * d * d
    assert int(kv["parameters"]) == sentence + context
    assert int(kv["context_parameters"]) == context


def test_context_stage_requires_init(workspace, tmp_path, capsys):
    code, _, err = run(capsys, "train", "--stage", "context", "--config",
                       workspace / "encoder.cfg", "--train", workspace / "train", "--dev",
                       workspace / "dev", "--out", tmp_path / "x.ckpt")
    assert code == 2 and "--init" in err
    code, _, err = run(capsys, "train", "--stage", "context", "--config",
                       workspace / "encoder.cfg", "--train", workspace / "train", "--dev",
                       workspace / "dev", "--init", workspace / "encoder.ckpt",
                       "--out", tmp_path / "x.ckpt")
    assert code == 2 and "sentence-stage" in err


@pytest.mark.parametrize("ckpt,iterative", [("s1.ckpt", False), ("encoder.ckpt", False),
                                            ("encoder.ckpt", True), ("decoder.ckpt", True)])
def test_translate_is_deterministic(workspace, tmp_path, capsys, ckpt, iterative):
    extra = ["--iterative"] if iterative else []
    for name in ("a", "b"):
        code, _, _ = run(capsys, "translate", "--ckpt", workspace / ckpt, "--src",
                         workspace / "dev" / "src.txt", "--out", tmp_path / name, *extra)
        assert code == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    hyp = read_documents(tmp_path / "a")
    ref = read_documents(workspace / "dev" / "src.txt")
    assert [len(d) for d in hyp] == [len(d) for d in ref]


def test_encoder_iterative_equals_single_pass_via_cli(workspace, tmp_path, capsys):
    for name, extra in (("single", []), ("iter", ["--iterative"])):
        run(capsys, "translate", "--ckpt", workspace / "encoder.ckpt", "--src",
            workspace / "dev" / "src.txt", "--out", tmp_path / name, *extra)
    assert (tmp_path / "single").read_bytes() == (tmp_path / "iter").read_bytes()


def test_eval_bleu(workspace, capsys):
    ref = workspace / "dev" / "tgt.txt"
    code, out, _ = run(capsys, "eval-bleu", "--hyp", ref, "--ref", ref)
    assert code == 0 and float(out.strip().split("=")[1]) == pytest.approx(100.0)
    _, out2, _ = run(capsys, "eval-bleu", "--hyp", ref, "--ref", ref, "--smooth")
    assert out2 == out


def test_eval_contrastive_writes_report(workspace, tmp_path, capsys):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "eval-contrastive", "--ckpt", workspace / "encoder.ckpt",
                           "--items", workspace / "dev" / "contrastive", "--report",
                           tmp_path / name)
        assert code == 0
    text = (tmp_path / "a").read_text()
    assert text == (tmp_path / "b").read_text() == out
    kv = dict(line.split("=", 1) for line in text.splitlines())
    assert int(kv["items"]) == 6 and 0.0 <= float(kv["overall"]) <= 1.0


@pytest.mark.parametrize("ckpt", ["encoder.ckpt", "decoder.ckpt"])
def test_inspect_attn(workspace, capsys, ckpt):
    code, out, _ = run(capsys, "inspect-attn", "--ckpt", workspace / ckpt, "--doc",
                       workspace / "one.txt", "--sentence", "2", "--token", "1")
    assert code == 0
    kv = dict(line.split("=", 1) for line in out.splitlines())
    assert kv["sentence"] == "2" and kv["visible"] == "0 1"
    _, again, _ = run(capsys, "inspect-attn", "--ckpt", workspace / ckpt, "--doc",
                      workspace / "one.txt", "--sentence", "2", "--token", "1")
    assert again == out


def test_inspect_attn_rejects_multi_document_file(workspace, capsys):
    code, _, err = run(capsys, "inspect-attn", "--ckpt", workspace / "encoder.ckpt", "--doc",
                       workspace / "dev" / "src.txt", "--sentence", "0", "--token", "0")
    assert code == 2 and "expected 1" in err


def test_errors_become_exit_code_one(workspace, tmp_path, capsys):
    (tmp_path / "junk").write_bytes(b"nope")
    code, _, err = run(capsys, "translate", "--ckpt", tmp_path / "junk", "--src",
                       workspace / "one.txt", "--out", tmp_path / "o")
    assert code == 1 and err.startswith("error:")
    code, _, err = run(capsys, "eval-bleu", "--hyp", tmp_path / "missing", "--ref",
                       workspace / "one.txt")
    assert code == 1


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "selattn", "--help"], capture_output=True,
                         text=True, check=True)
    for cmd in ("gen-data", "train", "translate", "eval-bleu", "eval-contrastive",
                "inspect-attn"):
        assert cmd in res.stdout


def test_empty_translations_keep_document_structure(workspace, tmp_path, capsys):
    model, sv, tv = load_model(workspace / "s1.ckpt")
    model.params["out.b"].data[EOS] = 1e3
    save_model(model, tmp_path / "eos.ckpt", sv, tv)
    code, _, _ = run(capsys, "translate", "--ckpt", tmp_path / "eos.ckpt", "--src",
                     workspace / "dev" / "src.txt", "--out", tmp_path / "hyp")
    assert code == 0
    hyp = read_documents(tmp_path / "hyp")
    assert [len(d) for d in hyp] == [4] * 6
    assert all(s == [EMPTY_SENTENCE] for d in hyp for s in d)
    # the placeholder is dropped before scoring: empty hypotheses score zero
    _, out, _ = run(capsys, "eval-bleu", "--hyp", tmp_path / "hyp", "--ref",
                    workspace / "dev" / "tgt.txt")
    assert out.strip() == "bleu=0.0"
