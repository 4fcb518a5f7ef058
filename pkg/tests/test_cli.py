import configparser
import json
import xml.etree.ElementTree as ET

import pytest

from maskdiff.cli import main
from maskdiff.reporting import parse_csv

INI = """\
[run]
seed = 3

[process]
kind = expansion
codebook = 0 1; 2 3; 1 1; 3 0
n_text = 2
V = 4
jitter = 0

[model]
d_model = 8
n_layers = 1
n_heads = 2
d_ff = 16

[train]
steps = 4
batch_size = 4
eval_every = 2
eval_size = 8

[decode]
steps = 2
"""

CHAIN_INI = """\
[run]
seed = 1

[process]
kind = noisy
n = 4
V = 2
stay = 0.8
eta = 0.1
"""


@pytest.fixture
def ini(tmp_path):
    p = tmp_path / "run.ini"
    p.write_text(INI)
    return str(p)


@pytest.fixture
def trained(tmp_path, ini):
    out = tmp_path / "train"
    assert main(["train", "--config", ini, "--arm", "ar_init_shift", "--out", str(out)]) == 0
    return out / "ar_init_shift.mdtc"


def resolved(path):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read(path)
    return cp


def test_gen_data_and_resolved_sidecar(tmp_path, ini, capsys):
    out = tmp_path / "gd"
    assert main(["gen-data", "--config", ini, "--count", "5", "--seed", "9", "--out", str(out)]) == 0
    assert (out / "dataset.mdtc").is_file()
    cp = resolved(out / "gen-data.resolved.ini")
    assert cp["run"]["seed"] == "9" and cp["data"]["count"] == "5" and cp["process"]["kind"] == "expansion"
    assert "wrote 5 sequences" in capsys.readouterr().out


def test_output_directory_precedence(tmp_path, ini, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setenv("MDTC_OUT", str(tmp_path / "env"))
    assert main(["gen-data", "--config", ini, "--count", "2"]) == 0
    assert (tmp_path / "env" / "dataset.mdtc").is_file()
    assert main(["gen-data", "--config", ini, "--count", "2", "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "dataset.mdtc").is_file()
    monkeypatch.delenv("MDTC_OUT")
    assert main(["gen-data", "--config", ini, "--count", "2"]) == 0
    assert (tmp_path / "runs" / "dataset.mdtc").is_file()


def test_train_writes_checkpoint_and_curve(tmp_path, trained):
    rows, info = parse_csv(trained.parent / "ar_init_shift_curve.csv")
    assert info["kind"] == "training_curve" and rows[-1]["step"] == 4
    cp = resolved(trained.parent / "train.resolved.ini")
    assert cp["model"]["d_model"] == "8" and cp["train"]["steps"] == "4"


def test_resume_continues_step_count(tmp_path, ini, trained, capsys):
    out = tmp_path / "resumed"
    code = main(["train", "--config", ini, "--arm", "ar_init_shift", "--resume", str(trained),
                 "--steps", "2", "--out", str(out)])
    assert code == 0 and "step 6" in capsys.readouterr().out
    assert main(["train", "--config", ini, "--arm", "from_scratch", "--resume", str(trained),
                 "--out", str(out)]) == 2


def test_decode_edit_and_bench(tmp_path, ini, trained):
    dec = tmp_path / "dec"
    assert main(["decode", "--config", ini, "--checkpoint", str(trained), "--text", "0,3",
                 "--count", "3", "--out", str(dec)]) == 0
    docs = json.loads((dec / "decode.json").read_text())
    assert len(docs) == 3 and all(len(d["target"]) == 4 for d in docs)
    assert all(d["trace"]["forward_pass_count"] == 2 for d in docs)
    rows, _ = parse_csv(dec / "decode_trace.csv")
    assert len(rows) == 12

    ed = tmp_path / "ed"
    req = json.dumps({"op": "substitute", "start": 1, "stop": 2, "replacement": [2], "margin": 0})
    assert main(["edit", "--config", ini, "--checkpoint", str(trained), "--tokens", str(dec / "decode.json"),
                 "--request", req, "--head", "0,1", "--out", str(ed)]) == 0
    doc = json.loads((ed / "edit.json").read_text())
    assert doc["after"]["text"] == [0, 2]
    keep = [j for j in range(4) if j not in doc["plan"]["mask_set"]]
    assert [doc["after"]["target"][j] for j in keep] == [docs[0]["target"][j] for j in keep]

    be = tmp_path / "be"
    assert main(["bench", "--config", ini, "--checkpoint", str(trained), "--ar-checkpoint", str(trained),
                 "--sweep", "1,2", "--n-eval", "2", "--lengths", "4", "--traces", str(dec / "decode_trace.csv"),
                 "--out", str(be)]) == 0
    rows, info = parse_csv(be / "sweep.csv")
    assert info["kind"] == "speed_quality"
    assert [r["decoder"] for r in rows] == ["diffusion", "diffusion", "ar_cached", "ar_uncached",
                                           "diffusion", "ar_cached", "ar_uncached"]
    assert ET.parse(be / "sweep.svg").getroot().tag.endswith("svg")
    assert (be / "wavefront.csv").is_file()


def test_verify_theory_passes_and_writes_csv(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text(CHAIN_INI)
    assert main(["verify-theory", "--config", str(ini), "--tau", "0.5", "--out", str(tmp_path)]) == 0
    rows, info = parse_csv(tmp_path / "theory.csv")
    assert info["kind"] == "theorem_check" and rows


@pytest.mark.parametrize("argv_tail, code", [
    (["gen-data"], 2),  # no [process] section
    (["gen-data", "--config", "/nonexistent.ini"], 2),
    (["decode", "--checkpoint", "/nonexistent.mdtc"], 2),
])
def test_usage_errors(tmp_path, argv_tail, code):
    assert main(argv_tail + ["--seed", "1", "--out", str(tmp_path)]) == code


def test_missing_seed_is_usage_error(tmp_path):
    ini = tmp_path / "s.ini"
    ini.write_text(CHAIN_INI.replace("seed = 1", ""))
    assert main(["gen-data", "--config", str(ini), "--out", str(tmp_path)]) == 2


def test_resource_limit_exit_code(tmp_path):
    ini = tmp_path / "big.ini"
    ini.write_text(CHAIN_INI.replace("n = 4", "n = 11").replace("V = 2", "V = 4"))
    assert main(["verify-theory", "--config", str(ini), "--out", str(tmp_path)]) == 3


def test_numeric_error_exit_code(tmp_path, monkeypatch):
    from maskdiff import infomath

    real = infomath.verify_theorem

    def broken(spec, taus, **kw):
        rep = real(spec, taus, **kw)
        monkeypatch.setattr(type(rep), "passed", property(lambda self: False))
        return rep

    monkeypatch.setattr(infomath, "verify_theorem", broken)
    ini = tmp_path / "c.ini"
    ini.write_text(CHAIN_INI)
    assert main(["verify-theory", "--config", str(ini), "--tau", "0.5", "--out", str(tmp_path)]) == 4


def test_argparse_rejects_unknown_arm():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--arm", "bogus"])
    assert exc.value.code == 2
