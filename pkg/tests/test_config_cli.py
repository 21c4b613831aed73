"""Config schema validation and the command-line workflow."""

import csv
import io
import json

import pytest

import mosld
from mosld import ConfigError
from mosld.checkpoint import load_tensors
from mosld.cli import main, meta_tensors, split_meta
from mosld.config import config_hash, load_config, validate_document

TINY_TOML = """
[run]
seed = 3
out_dir = "{out}"

[backbone]
d_model = 64

[train]
epochs = 1

[data]
n_train = 48
n_test = 16
pretrain_slice = 16
"""


def write_config(tmp_path, body=None):
    out = tmp_path / "runs"
    text = (body or TINY_TOML).format(out=out)
    path = tmp_path / "exp.toml"
    path.write_text(text, encoding="utf-8")
    return path, out


@pytest.fixture(autouse=True)
def no_out_dir_env(monkeypatch):
    monkeypatch.delenv("MOSLD_OUT_DIR", raising=False)


# ------------------------------------------------------------ config file

def test_load_config_fills_defaults(tmp_path):
    path, out = write_config(tmp_path)
    spec = load_config(path)
    assert spec.seed == 3
    assert spec.out_dir == str(out)
    assert spec.train.lr == 3e-4
    assert spec.train.epochs == 1
    assert spec.train.backbone.d_model == 64
    assert spec.train.backbone.n_layers == 4
    assert spec.train.n_train == 48


def test_missing_required_field_names_it(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[run]\nseed = 1\n[backbone]\nn_layers = 2\n")
    with pytest.raises(ConfigError, match=r"backbone\.d_model"):
        load_config(path)


def test_unknown_fields_rejected():
    with pytest.raises(ConfigError, match=r"backbone\.dmodel"):
        validate_document({"run": {"seed": 1},
                           "backbone": {"dmodel": 64}})
    with pytest.raises(ConfigError, match="unknown section"):
        validate_document({"run": {"seed": 1}, "model": {}})


def test_field_type_errors_are_dotted():
    doc = {"run": {"seed": 1}, "backbone": {"d_model": 64},
           "train": {"lr": "fast"}}
    with pytest.raises(ConfigError, match=r"train\.lr.*float"):
        validate_document(doc)
    doc = {"run": {"seed": 1}, "backbone": {"d_model": 64},
           "train": {"epochs": True}}
    with pytest.raises(ConfigError, match=r"train\.epochs"):
        validate_document(doc)


def test_int_promotes_to_float():
    doc = {"run": {"seed": 1}, "backbone": {"d_model": 64},
           "train": {"lr": 1}}
    values = validate_document(doc)
    assert values["train"]["lr"] == 1.0
    assert isinstance(values["train"]["lr"], float)


def test_invalid_toml_is_config_error(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[run\nseed = ")
    with pytest.raises(ConfigError, match="TOML"):
        load_config(path)


def test_missing_config_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.toml")


def test_config_hash_tracks_content():
    assert config_hash("a = 1") == config_hash("a = 1")
    assert config_hash("a = 1") != config_hash("a = 2")


# ------------------------------------------------------- checkpoint meta

def test_meta_tensors_round_trip():
    meta = meta_tensors("abc123")
    payload, strings = split_meta({**meta, "w": list(range(3))})
    assert set(payload) == {"w"}
    assert strings == {"manifest": "abc123", "version": mosld.__version__}


# ---------------------------------------------------------------- workflow

def test_pretrain_writes_stable_checkpoint(tmp_path, capsys):
    path, out = write_config(tmp_path)
    assert main(["pretrain", str(path)]) == 0
    ckpt = out / "base.ckpt"
    assert ckpt.is_file()
    first = ckpt.read_bytes()
    tensors, meta = split_meta(load_tensors(ckpt))
    assert "tok_emb" in tensors
    assert meta["version"] == mosld.__version__
    manifest = json.loads((out / "pretrain_manifest.json").read_text())
    assert manifest["manifest_hash"] == meta["manifest"]
    assert main(["pretrain", str(path)]) == 0
    assert ckpt.read_bytes() == first  # same config + seed, same bytes
    log = (out / "pretrain_log.csv").read_text()
    assert log.startswith("manifest_hash,version,step,loss\n")
    assert meta["manifest"] in log


def test_finetune_without_base_exits_3(tmp_path, capsys):
    path, _ = write_config(tmp_path)
    code = main(["finetune", str(path), "--arm", "lora",
                 "--setting", "single:copy"])
    assert code == 3
    assert "pretrain" in capsys.readouterr().err


def test_finetune_rejects_unknown_arm_and_setting(tmp_path, capsys):
    path, _ = write_config(tmp_path)
    main(["pretrain", str(path)])
    assert main(["finetune", str(path), "--arm", "qlora",
                 "--setting", "single:copy"]) == 2
    assert "lora" in capsys.readouterr().err  # lists valid arms
    assert main(["finetune", str(path), "--arm", "lora",
                 "--setting", "copy"]) == 2
    assert main(["finetune", str(path), "--arm", "lora",
                 "--setting", "single:chess"]) == 2


def test_finetune_writes_metrics_and_adapter(tmp_path, capsys):
    path, out = write_config(tmp_path)
    main(["pretrain", str(path)])
    assert main(["finetune", str(path), "--arm", "mosld",
                 "--setting", "single:copy"]) == 0
    csv_path = out / "finetune_mosld_copy_s3.csv"
    rows = list(csv.reader(io.StringIO(csv_path.read_text())))
    assert rows[0][:5] == ["manifest_hash", "version", "arm", "setting",
                           "seed"]
    assert rows[1][2] == "mosld" and rows[1][3] == "copy"
    assert rows[1][4] == "3"
    first = csv_path.read_bytes()
    tensors, meta = split_meta(
        load_tensors(out / "finetune_mosld_copy_s3.ckpt"))
    assert rows[1][0] == meta["manifest"]
    assert any(name.startswith("site.l0.") for name in tensors)
    assert main(["finetune", str(path), "--arm", "mosld",
                 "--setting", "single:copy"]) == 0
    assert csv_path.read_bytes() == first


def test_finetune_seed_flag_overrides_config(tmp_path, capsys):
    path, out = write_config(tmp_path)
    main(["pretrain", str(path)])
    assert main(["finetune", str(path), "--arm", "lora",
                 "--setting", "mixture", "--seed", "9"]) == 0
    assert (out / "finetune_lora_mixture_s9.csv").is_file()


def test_out_dir_env_override(tmp_path, monkeypatch, capsys):
    path, out = write_config(tmp_path)
    elsewhere = tmp_path / "elsewhere"
    monkeypatch.setenv("MOSLD_OUT_DIR", str(elsewhere))
    assert main(["pretrain", str(path)]) == 0
    assert (elsewhere / "base.ckpt").is_file()
    assert not out.exists()


def test_divergence_maps_to_exit_4(tmp_path, capsys):
    body = TINY_TOML + "\n[adapter]\nrank = 2\n"
    body = body.replace("epochs = 1", "epochs = 2")
    body += "\n"
    path, out = write_config(tmp_path, body)
    main(["pretrain", str(path)])
    diverging = body.replace("[train]\nepochs = 2",
                             '[train]\nepochs = 2\nlr = 1e300\n'
                             'optimizer = "sgd"')
    path2 = tmp_path / "diverge.toml"
    path2.write_text(diverging.format(out=out), encoding="utf-8")
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        code = main(["finetune", str(path2), "--arm", "fp",
                     "--setting", "single:copy"])
    assert code == 4
    assert "non-finite" in capsys.readouterr().err


def test_compare_grid_outputs(tmp_path, capsys):
    path, out = write_config(tmp_path)
    main(["pretrain", str(path)])
    args = ["compare", str(path), "--arms", "lora,mosld",
            "--seeds", "0,1",
            "--settings", "single:copy,single:sort,mixture"]
    assert main(args) == 0
    printed = capsys.readouterr().out
    assert "delta mean" in printed and "signs per seed" in printed
    rows = list(csv.reader(io.StringIO((out / "compare.csv").read_text())))
    assert len(rows) == 1 + 2 * 3 * 2
    header = rows[0]
    d = header.index("delta")
    mixture_rows = [r for r in rows[1:] if r[3] == "mixture"]
    single_rows = [r for r in rows[1:] if r[3] != "mixture"]
    assert len(mixture_rows) == 4
    assert all(r[d] != "" for r in mixture_rows)
    assert all(r[d] == "" for r in single_rows)
    md = (out / "compare.md").read_text()
    assert "| arm | seed |" in md
    first_csv = (out / "compare.csv").read_bytes()
    first_md = (out / "compare.md").read_bytes()
    assert main(args) == 0
    assert (out / "compare.csv").read_bytes() == first_csv
    assert (out / "compare.md").read_bytes() == first_md


def test_count_params_prints_ratios(capsys):
    assert main(["count-params"]) == 0
    printed = capsys.readouterr().out
    assert "mola/lora=5.3125" in printed
    assert "mosld/lora=3.3125" in printed
    assert "(1A+5B)*32" in printed


def test_count_params_forward_and_csv(capsys):
    assert main(["count-params", "--experts", "1", "--top-k", "1",
                 "--base-params", "1000000000", "--format", "csv"]) == 0
    printed = capsys.readouterr().out
    rows = list(csv.reader(io.StringIO(
        printed.split("trainable ratios")[0])))
    by_method = {r[1]: r for r in rows[1:]}
    lora_fwd = int(by_method["LoRA"][3])
    mosld_fwd = int(by_method["MoSLD"][3])
    assert mosld_fwd == lora_fwd + 32 * 2 * 4096  # router is the only gap


def test_malformed_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc_info:
        main(["count-params", "--experts", "banana"])
    assert exc_info.value.code == 2


def test_config_errors_exit_2(tmp_path, capsys):
    missing = tmp_path / "absent.toml"
    assert main(["pretrain", str(missing)]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("[run]\nseed = 1\n")
    assert main(["pretrain", str(bad)]) == 2
    assert "backbone.d_model" in capsys.readouterr().err
