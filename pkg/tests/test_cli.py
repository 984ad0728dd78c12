import json
import os

import numpy as np
import pytest

from mambasynth.cli import main
from mambasynth.data import read_raw_tensor
from mambasynth.metrics import ImageMetrics, build_report
from mambasynth.report import format_metric_table


@pytest.fixture()
def phantom_root(tmp_path):
    root = tmp_path / "data"
    assert main(["make-phantoms", "--out", str(root), "--size", "32",
                 "--train", "6", "--val", "2", "--test", "2", "--seed", "5"]) == 0
    return root


TRAIN_FLAGS = ["--epochs", "2", "--channels", "8", "--stages", "2",
               "--mixer-stages", "1", "--state-dim", "2", "--disc-width", "4",
               "--batch-size", "2", "--checkpoint-every", "1", "--seed", "3"]


def run_train(root, out, extra=()):
    return main(["train", "--data", str(root), "--task", "A->B",
                 "--out", str(out), *TRAIN_FLAGS, *extra])


class TestMakePhantoms:
    def test_writes_manifest_and_tree(self, phantom_root):
        assert (phantom_root / "manifest.txt").is_file()
        assert (phantom_root / "run_manifest.json").is_file()
        assert len(list((phantom_root / "train").rglob("*.raw"))) == 12  # 6 samples x 2 modalities

    def test_deterministic(self, tmp_path):
        for d in ("a", "b"):
            assert main(["make-phantoms", "--out", str(tmp_path / d), "--size", "16",
                         "--train", "1", "--val", "0", "--test", "0", "--seed", "9"]) == 0
        a = (tmp_path / "a" / "train" / "phantom000" / "A_0000.raw").read_bytes()
        b = (tmp_path / "b" / "train" / "phantom000" / "A_0000.raw").read_bytes()
        assert a == b


class TestTrain:
    def test_run_and_artifacts(self, phantom_root, tmp_path):
        out = tmp_path / "run"
        assert run_train(phantom_root, out) == 0
        assert (out / "metrics.jsonl").is_file()
        assert (out / "checkpoints" / "final.ckpt").is_file()
        assert (out / "training_curves.png").is_file()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["command"] == "train"
        assert manifest["resolved"]["generator"]["channels"] == 8
        assert manifest["resolved"]["dataset_hash"]

    def test_missing_dataset_exits_2_without_side_effects(self, tmp_path):
        out = tmp_path / "nope_out"
        rc = main(["train", "--data", str(tmp_path / "missing"), "--task", "A->B",
                   "--out", str(out)])
        assert rc == 2
        assert not out.exists()

    def test_lambda_adv_zero_pure_l1(self, phantom_root, tmp_path):
        out = tmp_path / "l1run"
        assert run_train(phantom_root, out, ["--lambda-adv", "0"]) == 0
        records = [json.loads(l) for l in (out / "metrics.jsonl").read_text().splitlines()]
        iters = [r for r in records if r["kind"] == "iter"]
        assert all(r["loss_d"] == 0.0 and r["adv_g"] == 0.0 for r in iters)

    def test_config_file_with_flag_override(self, phantom_root, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({
            "generator": {"channels": 4, "stages": 2, "mixer_stages": [1], "state_dim": 2},
            "train": {"epochs": 1, "disc_base_width": 4, "batch_size": 2, "seed": 1},
        }))
        out = tmp_path / "cfgrun"
        assert main(["train", "--data", str(phantom_root), "--task", "A->B",
                     "--out", str(out), "--config", str(cfg), "--epochs", "2"]) == 0
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["resolved"]["generator"]["channels"] == 4
        assert manifest["resolved"]["train"]["epochs"] == 2  # flag wins


class TestSynthEval:
    @pytest.fixture()
    def trained(self, phantom_root, tmp_path):
        out = tmp_path / "run"
        assert run_train(phantom_root, out) == 0
        return out / "checkpoints" / "final.ckpt"

    def test_synth_outputs_and_determinism(self, phantom_root, trained, tmp_path):
        for d in ("s1", "s2"):
            assert main(["synth", "--checkpoint", str(trained), "--data", str(phantom_root),
                         "--split", "test", "--out", str(tmp_path / d)]) == 0
        files = sorted(p.name for p in (tmp_path / "s1").glob("*.raw"))
        assert len(files) == 2  # output count == input count
        assert (tmp_path / "s1" / "preview.png").is_file()
        for name in files:
            assert (tmp_path / "s1" / name).read_bytes() == (tmp_path / "s2" / name).read_bytes()

    def test_synth_task_mismatch_rejected(self, phantom_root, trained, tmp_path):
        rc = main(["synth", "--checkpoint", str(trained), "--data", str(phantom_root),
                   "--task", "B->A", "--out", str(tmp_path / "bad")])
        assert rc == 2

    def test_eval_directory_vs_itself(self, phantom_root, trained, tmp_path):
        sdir = tmp_path / "s"
        assert main(["synth", "--checkpoint", str(trained), "--data", str(phantom_root),
                     "--split", "test", "--out", str(sdir)]) == 0
        out = tmp_path / "eval_self"
        assert main(["eval", "--synth", str(sdir), "--reference", str(sdir),
                     "--out", str(out)]) == 0
        table = (out / "metrics.txt").read_text()
        assert "PSNR = inf" in table
        csv = (out / "metrics.csv").read_text().splitlines()
        assert csv[0] == "ident,psnr_db,ssim"
        assert all(",inf," in line for line in csv[1:-2])
        assert (out / "metrics_summary.png").is_file()

    def test_eval_against_dataset_and_compare(self, phantom_root, trained, tmp_path):
        s1 = tmp_path / "m1"
        assert main(["synth", "--checkpoint", str(trained), "--data", str(phantom_root),
                     "--split", "train", "--out", str(s1)]) == 0
        # fabricate a second method: add noise to the first one's outputs
        s2 = tmp_path / "m2"
        s2.mkdir()
        rng = np.random.default_rng(0)
        from mambasynth.data import write_raw_tensor

        for p in s1.glob("*.raw"):
            arr = read_raw_tensor(p)
            write_raw_tensor(s2 / p.name, (arr + rng.normal(0, 0.05, arr.shape)).astype(np.float32))
        out = tmp_path / "cmp"
        assert main(["eval", "--synth", str(s1), "--data", str(phantom_root),
                     "--task", "A->B", "--split", "train",
                     "--compare-to", str(s2), "--out", str(out)]) == 0
        table = (out / "metrics.txt").read_text()
        assert "wilcoxon[psnr_vs_compare]: p =" in table

    def test_eval_unpaired_files_itemized(self, phantom_root, trained, tmp_path):
        sdir = tmp_path / "s"
        assert main(["synth", "--checkpoint", str(trained), "--data", str(phantom_root),
                     "--split", "test", "--out", str(sdir)]) == 0
        removed = next(iter(sdir.glob("*.raw")))
        removed.unlink()
        rc = main(["eval", "--synth", str(sdir), "--data", str(phantom_root),
                   "--task", "A->B", "--split", "test", "--out", str(tmp_path / "e")])
        assert rc == 2


class TestGoldenTable:
    def test_layout_frozen(self):
        report = build_report("A->B", [
            ImageMetrics("x", 33.0, 0.97),
            ImageMetrics("y", 33.72, 0.963),
        ])
        expected = (
            "task                   PSNR (dB)        SSIM\n"
            "A->B                       33.36       0.966\n"
            "                           ±0.51      ±0.005\n"
        )
        assert format_metric_table(report) == expected


class TestSelftestCommand:
    def test_all_suites_pass(self):
        assert main(["selftest"]) == 0

    def test_suite_filter(self, capsys):
        assert main(["selftest", "--suite", "scan"]) == 0
        out = capsys.readouterr().out
        assert "scan." in out and "grad." not in out

    def test_fault_injection_fails_named_property(self, capsys):
        assert main(["selftest", "--suite", "scan", "--inject-fault", "scan"]) == 1
        out = capsys.readouterr().out
        assert "FAIL  scan.layer_backend_equivalence" in out
