"""CLI surface: exit codes, config precedence, manifests, artifacts."""

import numpy as np
import pytest

from cfnet.cli import run
from cfnet.config import DEFAULTS, parse_config_file, resolve_config
from cfnet.data import load_dataset, make_synthetic
from cfnet.transfer import FeatureMatrix, save_features

TOY_CONFIG = """\
model = generic
widths = 4,4
pools = 2
branch_points = pool1
fusion = lc
K = 5
C = 3
data = synth:3,120,8,1
iters = 6
batch = 40
eval_every = 3
seed = 3
"""


@pytest.fixture
def toy_config(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TOY_CONFIG)
    return str(path)


def _train(tmp_path, toy_config, name="run1", extra=()):
    out = tmp_path / name
    code = run(["train", "--config", toy_config, "--out", str(out), *extra])
    assert code == 0
    return out


class TestParsingAndExitCodes:
    def test_unknown_flag_exits_one(self, capsys):
        assert run(["params", "--bogus"]) == 1
        assert "usage" in capsys.readouterr().err

    def test_missing_subcommand_exits_one(self, capsys):
        assert run([]) == 1

    def test_unknown_config_key(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("mystery = 1\n")
        assert run(["params", "--config", str(path),
                    "--out", str(tmp_path / "o")]) == 1
        assert "unknown key" in capsys.readouterr().err

    def test_duplicate_key_names_both_lines(self, tmp_path, capsys):
        path = tmp_path / "dup.cfg"
        path.write_text("seed = 1\nseed = 2\n")
        assert run(["params", "--config", str(path),
                    "--out", str(tmp_path / "o")]) == 1
        err = capsys.readouterr().err
        assert "duplicate key" in err and "line 1" in err

    def test_syntax_error_names_line(self, tmp_path, capsys):
        path = tmp_path / "syntax.cfg"
        path.write_text("seed = 1\nnot a key value pair\n")
        assert run(["params", "--config", str(path),
                    "--out", str(tmp_path / "o")]) == 1
        assert ":2:" in capsys.readouterr().err

    def test_divergence_exits_two(self, tmp_path, toy_config, capsys):
        out = tmp_path / "diverge"
        with np.errstate(all="ignore"):
            code = run(["train", "--config", toy_config, "--out", str(out),
                        "--set", "lr=1e25", "--set", "momentum=0.9"])
        assert code == 2
        assert (out / "last_good.ckpt").exists()


class TestConfigResolution:
    def test_empty_file_gives_defaults(self, tmp_path):
        path = tmp_path / "empty.cfg"
        path.write_text("")
        resolved = resolve_config(parse_config_file(path), {})
        for key, value in DEFAULTS.items():
            if key != "drops":
                assert resolved[key] == value

    def test_flag_beats_file(self, tmp_path):
        path = tmp_path / "lr.cfg"
        path.write_text("lr = 0.1\n")
        resolved = resolve_config(parse_config_file(path), {"lr": "0.05"})
        assert resolved["lr"] == "0.05"

    def test_full_schedule_overlay_is_idempotent(self):
        first = resolve_config({}, {"full_schedule": "1"})
        again = resolve_config(first, {})
        assert first == again
        assert first["lr"] == "0.1" and first["iters"] == "120000"

    def test_explicit_value_beats_schedule_overlay(self):
        resolved = resolve_config({"full_schedule": "1", "lr": "0.2"}, {})
        assert resolved["lr"] == "0.2"


class TestParams:
    def test_table_contains_reconciled_counts(self, tmp_path, capsys):
        assert run(["params", "--model", "cifar-cfn", "--fusion", "lc",
                    "--out", str(tmp_path / "p")]) == 0
        out = capsys.readouterr().out
        assert "1,286,698" in out
        assert "74,112" in out
        assert "768" in out
        assert "2698" in out and "6558" in out

    def test_csv_export(self, tmp_path, capsys):
        assert run(["params", "--csv", "--out", str(tmp_path / "p")]) == 0
        content = (tmp_path / "p" / "params.csv").read_text()
        assert "basic,1286698" in content
        assert "fusion_conv,4" in content


class TestGradCheckCommand:
    def test_single_op(self, tmp_path, capsys):
        assert run(["grad-check", "--op", "fc", "--seeds", "2",
                    "--out", str(tmp_path / "g")]) == 0
        assert "PASS" in capsys.readouterr().out
        assert (tmp_path / "g" / "grad_check.txt").exists()


class TestMakeSynth:
    def test_writes_loadable_container(self, tmp_path):
        out = tmp_path / "synth"
        assert run(["make-synth", "--classes", "3", "--count", "30",
                    "--size", "8", "--gen-seed", "1", "--out", str(out)]) == 0
        ds = load_dataset(out / "synth.ds")
        ref = make_synthetic(3, 30, 8, 1)
        assert ds.images.tobytes() == ref.images.tobytes()

    def test_manifest_records_spec(self, tmp_path):
        out = tmp_path / "synth"
        run(["make-synth", "--count", "12", "--size", "8", "--out", str(out)])
        manifest = parse_config_file(out / "manifest.cfg")
        assert manifest["data"] == "synth:3,12,8,1"


class TestTrainCommand:
    def test_artifacts(self, tmp_path, toy_config):
        out = _train(tmp_path, toy_config)
        for name in ("manifest.cfg", "log.csv", "model.ckpt", "loss_curve.png"):
            assert (out / name).exists(), name
        lines = (out / "log.csv").read_text().splitlines()
        assert lines[0] == "iter,lr,loss,top1,top5"
        assert len(lines) == 3  # 6 iters, eval every 3

    def test_manifest_replay_reproduces_log_bitwise(self, tmp_path, toy_config):
        first = _train(tmp_path, toy_config, "first")
        second = tmp_path / "second"
        assert run(["train", "--config", str(first / "manifest.cfg"),
                    "--out", str(second)]) == 0
        assert ((first / "log.csv").read_bytes()
                == (second / "log.csv").read_bytes())
        assert ((first / "model.ckpt").read_bytes()
                == (second / "model.ckpt").read_bytes())

    def test_writes_stay_inside_out_dir(self, tmp_path, toy_config, monkeypatch):
        workdir = tmp_path / "work"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        _train(tmp_path, toy_config, "outside")
        assert list(workdir.iterdir()) == []


class TestModelCommands:
    @pytest.fixture
    def trained(self, tmp_path, toy_config):
        return _train(tmp_path, toy_config), toy_config

    def test_eval(self, tmp_path, trained, capsys):
        out, cfg = trained
        code = run(["eval", "--config", cfg, "--ckpt", str(out / "model.ckpt"),
                    "--split", "train", "--out", str(tmp_path / "e")])
        assert code == 0
        assert "top1" in capsys.readouterr().out
        assert (tmp_path / "e" / "eval.csv").exists()

    def test_extract_probe_retrieve(self, tmp_path, trained, capsys):
        out, cfg = trained
        ex = tmp_path / "ex"
        assert run(["extract", "--config", cfg, "--ckpt",
                    str(out / "model.ckpt"), "--out", str(ex)]) == 0
        header = (ex / "features.csv").read_text().splitlines()[0]
        assert header.startswith("label,f0,") and header.endswith("f4")

        assert run(["probe", "--train-features", str(ex / "features.csv"),
                    "--test-features", str(ex / "features.csv"),
                    "--epochs", "3", "--out", str(tmp_path / "pr")]) == 0
        assert (tmp_path / "pr" / "probe.csv").exists()

        assert run(["retrieve", "--db-features", str(ex / "features.fm"),
                    "--query-features", str(ex / "features.fm"),
                    "--metric", "map", "--self-singleton",
                    "--out", str(tmp_path / "rv")]) == 0
        assert "mAP 1.0000" in capsys.readouterr().out

    def test_retrieve_ns_on_grouped_db(self, tmp_path, capsys):
        base = np.eye(3, 5, dtype=np.float32)
        rows = np.repeat(base, 4, axis=0)
        groups = np.repeat(np.arange(3), 4).astype(np.int64)
        db = tmp_path / "db.fm"
        save_features(db, FeatureMatrix(rows, groups))
        assert run(["retrieve", "--db-features", str(db),
                    "--query-features", str(db), "--metric", "ns",
                    "--distance", "euclidean",
                    "--out", str(tmp_path / "ns")]) == 0
        assert "ns_score 4.0000" in capsys.readouterr().out

    def test_rank_maps(self, tmp_path, trained):
        out, cfg = trained
        rm = tmp_path / "rm"
        assert run(["rank-maps", "--config", cfg,
                    "--ckpt", str(out / "model.ckpt"), "--split", "train",
                    "--index", "0", "--top-m", "3", "--out", str(rm)]) == 0
        pgms = sorted(p.name for p in rm.glob("map_*.pgm"))
        assert len(pgms) == 3
        assert pgms[0].startswith("map_0_")
        assert (rm / "ranking.csv").exists()
        assert (rm / "feature_maps.png").exists()

    def test_lc_weights(self, tmp_path, trained, capsys):
        out, cfg = trained
        lw = tmp_path / "lw"
        assert run(["lc-weights", "--config", cfg,
                    "--ckpt", str(out / "model.ckpt"),
                    "--out", str(lw)]) == 0
        assert "branch1=" in capsys.readouterr().out
        content = (lw / "lc_weights.csv").read_text().splitlines()
        assert content[0] == "branch,mean_weight"
        assert len(content) == 3  # S=2 branches
        assert (lw / "lc_weights_matrix.csv").exists()
        assert (lw / "lc_weights.png").exists()
