import hashlib
import os

import numpy as np
import pytest

from chardistill.cli import (CONFIG_DEFAULTS, ConfigError, RunConfig, dump_config,
                             parse_config_file, run)


def tree_digest(root: str) -> str:
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in sorted(os.walk(root)):
        dirnames.sort()
        for name in sorted(filenames):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            h.update(open(path, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data"))
    assert run(["gen", "--out", out, "--count", "40", "--seed", "3"]) == 0
    return out


@pytest.fixture(scope="module")
def micro_ckpt(tmp_path_factory, data_dir):
    # tiny run: full preset encoder but only a couple of steps
    root = tmp_path_factory.mktemp("run")
    cfg_path = str(root / "run.cfg")
    with open(cfg_path, "w") as fh:
        fh.write("steps=2\nbatch=2\nn=64\nlog_every=1\n")
    ckpt = str(root / "model.ckpt")
    assert run(["pretrain", "--data", data_dir, "--config", cfg_path,
                "--out", ckpt, "--seed", "5"]) == 0
    return ckpt


class TestConfigFile:
    def test_defaults_cover_every_key(self):
        values = parse_config_file(None)
        assert values == CONFIG_DEFAULTS

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate=0.1\n")
        with pytest.raises(ConfigError, match="unknown key"):
            parse_config_file(str(path))

    def test_round_trip(self, tmp_path):
        path = str(tmp_path / "all.cfg")
        values = dict(CONFIG_DEFAULTS, steps="7", tau_s="0.2")
        dump_config(values, path)
        assert parse_config_file(path) == values

    def test_typed_accessors(self):
        cfg = RunConfig(dict(CONFIG_DEFAULTS))
        assert cfg.encoder_cfg().embed_dim == 192
        assert cfg.distill_cfg().tau_t == 0.04
        assert cfg.cluster_cfg().eps == 1.5
        assert cfg.train_cfg().steps == 2000

    def test_center_momentum_off(self):
        cfg = RunConfig(dict(CONFIG_DEFAULTS, center_momentum="off"))
        assert cfg.distill_cfg().center_momentum is None


class TestExitCodes:
    def test_unknown_subcommand(self, capsys):
        assert run(["frobnicate"]) == 1

    def test_unknown_flag(self):
        assert run(["gen", "--out", "/tmp/x", "--count", "1", "--bogus"]) == 1

    def test_missing_data_dir(self, tmp_path):
        assert run(["pseudolabel", "--data", str(tmp_path / "nope"),
                    "--out", str(tmp_path / "out")]) == 1

    def test_bad_config_key_exits_one(self, tmp_path, data_dir):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("nope=1\n")
        assert run(["pretrain", "--data", data_dir, "--config", str(cfg),
                    "--out", str(tmp_path / "m.ckpt")]) == 1


class TestGen:
    def test_same_seed_byte_identical(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert run(["gen", "--out", a, "--count", "10", "--seed", "7"]) == 0
        assert run(["gen", "--out", b, "--count", "10", "--seed", "7"]) == 0
        assert tree_digest(a) == tree_digest(b)

    def test_flags_change_output(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        assert run(["gen", "--out", a, "--count", "5", "--seed", "1"]) == 0
        assert run(["gen", "--out", b, "--count", "5", "--seed", "1",
                    "--noise", "0.0"]) == 0
        assert tree_digest(a) != tree_digest(b)


class TestPseudolabelCommand:
    def test_writes_masks_and_report(self, tmp_path, data_dir):
        out = str(tmp_path / "pl")
        report = str(tmp_path / "pl.csv")
        assert run(["pseudolabel", "--data", data_dir, "--out", out,
                    "--report", report]) == 0
        assert len([f for f in os.listdir(out) if f.endswith("_mpl.pgm")]) == 40
        lines = open(report).read().splitlines()
        assert lines[0] == "id,iou_vs_gt,gamma,inverted"
        assert len(lines) == 41


class TestClusterSearchCommand:
    def test_report_written(self, tmp_path, data_dir):
        report = str(tmp_path / "grid.csv")
        assert run(["cluster-search", "--data", data_dir, "--eps", "1.5,6.0",
                    "--min-samples", "2,4", "--report", report]) == 0
        lines = open(report).read().splitlines()
        assert lines[0] == "eps,min_samples,mean_iou"
        assert len(lines) == 5


class TestPretrainCommand:
    def test_outputs_exist(self, micro_ckpt):
        assert os.path.exists(micro_ckpt)
        assert os.path.exists(micro_ckpt + ".cfg")
        assert os.path.exists(micro_ckpt + ".log.csv")
        log = open(micro_ckpt + ".log.csv").read().splitlines()
        assert log[0] == "step,lr,wd,lambda,l_dis,l_seg,teacher_std,chars_per_batch"
        assert len(log) >= 3

    def test_effective_config_reproduces_run(self, tmp_path, data_dir, micro_ckpt):
        ckpt2 = str(tmp_path / "again.ckpt")
        assert run(["pretrain", "--data", data_dir, "--config", micro_ckpt + ".cfg",
                    "--out", ckpt2]) == 0
        assert open(micro_ckpt + ".log.csv").read() == open(ckpt2 + ".log.csv").read()
        assert open(micro_ckpt, "rb").read() == open(ckpt2, "rb").read()


class TestProbeCommand:
    def test_two_modes_two_rows_idempotent(self, tmp_path, data_dir, micro_ckpt):
        report = str(tmp_path / "probe.csv")
        base = ["probe", "--ckpt", micro_ckpt, "--data", data_dir,
                "--report", report, "--holdout", "10", "--seed", "2"]
        assert run(base) == 0
        assert run(base + ["--random-init"]) == 0
        lines = open(report).read().splitlines()
        assert lines[0] == "mode,accuracy,train_samples,test_samples,seed"
        assert len(lines) == 3
        modes = {ln.split(",")[0] for ln in lines[1:]}
        assert modes == {"pretrained-student", "random-init"}
        before = open(report).read()
        assert run(base) == 0  # rerun overwrites its own row only
        assert open(report).read() == before


class TestEvalSegCommand:
    def test_report_has_mean_row(self, tmp_path, data_dir, micro_ckpt):
        report = str(tmp_path / "seg.csv")
        assert run(["eval-seg", "--ckpt", micro_ckpt, "--data", data_dir,
                    "--report", report]) == 0
        lines = open(report).read().splitlines()
        assert lines[0] == "id,seg_iou_vs_pseudo,seg_iou_vs_gt,pseudo_iou_vs_gt"
        assert lines[-1].startswith("MEAN,")
        assert len(lines) == 42


class TestOverlayCommand:
    def test_writes_overlays(self, tmp_path, data_dir, micro_ckpt):
        out = str(tmp_path / "ov")
        assert run(["overlay", "--ckpt", micro_ckpt, "--data", data_dir,
                    "--out", out, "--count", "3"]) == 0
        files = sorted(os.listdir(out))
        assert files == ["000000_clusters.pgm", "000000_seg.pgm",
                         "000001_clusters.pgm", "000001_seg.pgm",
                         "000002_clusters.pgm", "000002_seg.pgm"]


class TestGradcheckCommand:
    def test_passes_under_tolerance(self):
        assert run(["gradcheck", "--tol", "1e-4"]) == 0
