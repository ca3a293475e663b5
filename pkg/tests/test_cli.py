import json

import numpy as np
import pytest

from protoseg import cli
from protoseg.trainer import TrainConfig, format_config


def tiny_cfg(**kw):
    base = dict(
        d=6, pretrain_iters=3, selftrain_iters=2, ramp_len=4, eval_interval=2,
        dims=(10, 10, 8), noise_std=0.2, batch_size=1, seed=5,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config + dataset + pretrain + train outputs shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "train.cfg"
    cfg_path.write_text(format_config(tiny_cfg()))
    data = root / "data"
    assert cli.main(["gen-data", "--config", str(cfg_path), "--out-dir", str(data),
                     "--count", "20"]) == 0
    pre = root / "pre"
    assert cli.main(["pretrain", "--config", str(cfg_path), "--data", str(data),
                     "--out", str(pre)]) == 0
    run = root / "run"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data),
                     "--out", str(run), "--pretrained",
                     str(pre / "pretrained.mpwt")]) == 0
    return {"root": root, "cfg": cfg_path, "data": data, "pre": pre, "run": run}


class TestGenData:
    def test_split_sizes_40_cases(self, tmp_path):
        cfg_path = tmp_path / "c.cfg"
        cfg_path.write_text(format_config(tiny_cfg()))
        out = tmp_path / "d40"
        code = cli.main(["gen-data", "--config", str(cfg_path), "--out-dir",
                         str(out), "--count", "40", "--labeled-fraction", "0.1"])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert (len(manifest["labeled"]), len(manifest["unlabeled"]),
                len(manifest["eval"])) == (4, 32, 4)

    def test_rerun_byte_identical(self, workspace, tmp_path):
        out = tmp_path / "again"
        assert cli.main(["gen-data", "--config", str(workspace["cfg"]),
                         "--out-dir", str(out), "--count", "20"]) == 0
        for p in sorted(workspace["data"].iterdir()):
            assert p.read_bytes() == (out / p.name).read_bytes()

    def test_missing_config_key_exit_1(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        text = format_config(tiny_cfg())
        bad.write_text("\n".join(l for l in text.splitlines()
                                 if not l.startswith("tau1")))
        code = cli.main(["gen-data", "--config", str(bad), "--out-dir",
                         str(tmp_path / "x"), "--count", "20"])
        assert code == 1

    def test_unreadable_config_exit_1(self, tmp_path):
        code = cli.main(["gen-data", "--config", str(tmp_path / "nope.cfg"),
                         "--out-dir", str(tmp_path / "x"), "--count", "20"])
        assert code == 1


class TestTrainStages:
    def test_dry_run_writes_nothing(self, workspace, tmp_path):
        out = tmp_path / "dry"
        code = cli.main(["pretrain", "--config", str(workspace["cfg"]), "--data",
                         str(workspace["data"]), "--out", str(out), "--dry-run"])
        assert code == 0
        assert not out.exists()

    def test_pretrain_outputs(self, workspace):
        pre = workspace["pre"]
        assert (pre / "pretrained.mpwt").exists()
        lines = (pre / "metrics.csv").read_text().splitlines()
        assert lines[0] == "# seed=5"
        assert lines[1] == "iter,split,dice,jaccard,hd95,asd"
        assert len(lines) > 2  # at least one eval row

    def test_train_outputs(self, workspace):
        run = workspace["run"]
        assert (run / "checkpoint.mpwt").exists()
        assert (run / "teacher.mpwt").exists()
        lines = (run / "losses.csv").read_text().splitlines()
        assert lines[0] == "# seed=5"
        assert lines[1] == "iter,lambda,l_lin,l_proto,l_cont,total"
        assert len(lines) == 2 + 2  # one row per self-train iteration

    def test_checkpoint_contains_prototypes(self, workspace):
        from protoseg import ops

        tensors = ops.load_weights(workspace["run"] / "checkpoint.mpwt")
        assert "prototypes" in tensors
        assert tensors["prototypes"].shape == (2, 3, 6)

    def test_missing_dataset_exit_2(self, workspace, tmp_path):
        code = cli.main(["pretrain", "--config", str(workspace["cfg"]), "--data",
                         str(tmp_path / "empty"), "--out", str(tmp_path / "o")])
        assert code == 2


class TestEval:
    def test_csv_shape_and_macro_row(self, workspace, tmp_path):
        out = tmp_path / "eval.csv"
        code = cli.main(["eval", "--checkpoint",
                         str(workspace["run"] / "checkpoint.mpwt"), "--data",
                         str(workspace["data"]), "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "# seed=5"
        assert lines[1] == "case,class,dice,jaccard,hd95,asd"
        # 2 eval cases x 1 foreground class + 1 macro row
        assert len(lines) == 2 + 2 + 1
        assert lines[-1].startswith("macro,all,")
        dice = float(lines[-1].split(",")[2])
        assert 0.0 <= dice <= 1.0

    def test_bad_checkpoint_exit_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.mpwt"
        bad.write_bytes(b"not a checkpoint")
        code = cli.main(["eval", "--checkpoint", str(bad), "--data",
                         str(workspace["data"]), "--out", str(tmp_path / "e.csv")])
        assert code == 2


class TestExports:
    def test_embeddings_full_row_count(self, workspace, tmp_path):
        out = tmp_path / "emb.csv"
        vol = workspace["data"] / "vol_000.mpv"
        code = cli.main(["export-embeddings", "--checkpoint",
                         str(workspace["run"] / "checkpoint.mpwt"),
                         "--volume", str(vol), "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 2 + 10 * 10 * 8
        assert lines[1].startswith("x,y,z,label,dim0")

    def test_embeddings_sampled_row_count(self, workspace, tmp_path):
        out = tmp_path / "emb_s.csv"
        vol = workspace["data"] / "vol_000.mpv"
        code = cli.main(["export-embeddings", "--checkpoint",
                         str(workspace["run"] / "checkpoint.mpwt"),
                         "--volume", str(vol), "--out", str(out),
                         "--sample", "17", "--seed", "2"])
        assert code == 0
        assert len(out.read_text().splitlines()) == 2 + 17

    def test_label_volume_rejected(self, workspace, tmp_path):
        lab = workspace["data"] / "lab_000.mpv"
        code = cli.main(["export-embeddings", "--checkpoint",
                         str(workspace["run"] / "checkpoint.mpwt"),
                         "--volume", str(lab), "--out", str(tmp_path / "x.csv")])
        assert code == 2

    def test_prototypes_row_count(self, workspace, tmp_path):
        out = tmp_path / "protos.csv"
        code = cli.main(["export-prototypes", "--checkpoint",
                         str(workspace["run"] / "checkpoint.mpwt"),
                         "--out", str(out)])
        assert code == 0
        lines = out.read_text().splitlines()
        assert len(lines) == 2 + 2 * 3  # C * K rows
        assert lines[1].startswith("class,proto,dim0")

    def test_prototypes_missing_bank_exit_2(self, workspace, tmp_path):
        code = cli.main(["export-prototypes", "--checkpoint",
                         str(workspace["pre"] / "pretrained.mpwt"),
                         "--out", str(tmp_path / "p.csv")])
        assert code == 2


class TestSelftest:
    def test_passes_clean(self, capsys):
        assert cli.main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert "checks passed" in out

    def test_injected_fault_detected(self, capsys):
        assert cli.main(["selftest", "--inject-fault"]) == 2
        assert "FAIL" in capsys.readouterr().out


class TestUsage:
    def test_no_command_exit_1(self):
        assert cli.main([]) == 1

    def test_unknown_command_exit_1(self):
        assert cli.main(["frobnicate"]) == 1
