"""CLI command surfaces, run directories, exit codes."""

import numpy as np
import pytest

from pmkd.checkpoint import read_checkpoint_items
from pmkd.cli import main
from pmkd.data import DatasetContainer
from pmkd.models import ArchSpec, build, init_weights

import synthdata


@pytest.fixture(scope="module")
def datasets(tmp_path_factory):
    """Small synthetic train/test containers plus a config file."""
    root = tmp_path_factory.mktemp("cli-data")
    train_p, test_p = synthdata.write_cifar10_files(root / "raw", 96, 48, seed=0)
    rc = main(["import-dataset", "--variant", "cifar10",
               "--train-file", str(train_p), "--test-file", str(test_p),
               "--out-train", str(root / "train.otfd"),
               "--out-test", str(root / "test.otfd")])
    assert rc == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        f"arch=tiny4\nnum_classes=10\ndataset_kind=custom\n"
        f"train_data={root / 'train.otfd'}\ntest_data={root / 'test.otfd'}\n"
        f"epochs=1\nbatch_size=32\nbase_lr=0.05\nmilestones=\naugment=off\n")
    return root, cfg


def train_teacher(datasets, tmp_path, extra=()):
    root, cfg = datasets
    out = tmp_path / "teacher-run"
    rc = main(["train-teacher", "--config", str(cfg), "--seed", "3",
               "--out", str(out), *extra])
    assert rc == 0
    return out / "teacher.pmkd"


class TestImportAndEval:
    def test_imported_containers_load(self, datasets):
        root, _ = datasets
        train = DatasetContainer.load(root / "train.otfd")
        assert train.count == 96
        assert train.num_classes == 10

    def test_eval_prints_accuracy(self, datasets, tmp_path, capsys):
        root, cfg = datasets
        teacher = train_teacher(datasets, tmp_path)
        capsys.readouterr()
        rc = main(["eval", "--config", str(cfg), "--checkpoint", str(teacher),
                   "--data", str(root / "test.otfd")])
        assert rc == 0
        acc = float(capsys.readouterr().out.strip())
        assert 0.0 <= acc <= 1.0


class TestTrainTeacher:
    def test_run_dir_contents(self, datasets, tmp_path):
        root, cfg = datasets
        out = tmp_path / "run"
        rc = main(["train-teacher", "--config", str(cfg), "--seed", "1",
                   "--out", str(out)])
        assert rc == 0
        assert (out / "config.resolved").exists()
        assert (out / "teacher.pmkd").exists()
        lines = (out / "metrics.csv").read_text().strip().splitlines()
        assert lines[0].startswith("phase,epoch,lr")
        assert len(lines) == 2  # header + one epoch

    def test_existing_run_dir_refused(self, datasets, tmp_path):
        root, cfg = datasets
        out = tmp_path / "dup"
        out.mkdir()
        rc = main(["train-teacher", "--config", str(cfg), "--seed", "1",
                   "--out", str(out)])
        assert rc == 1

    def test_deterministic_checkpoints(self, datasets, tmp_path):
        a = train_teacher(datasets, tmp_path / "a")
        b = train_teacher(datasets, tmp_path / "b")
        assert a.read_bytes() == b.read_bytes()

    def test_repeat_writes_summary(self, datasets, tmp_path):
        root, cfg = datasets
        out = tmp_path / "rep"
        rc = main(["train-teacher", "--config", str(cfg), "--seed", "5",
                   "--out", str(out), "--repeat", "2"])
        assert rc == 0
        text = (out / "seeds_summary.txt").read_text()
        assert "mean" in text
        devs = [float(l.split("deviation")[1]) for l in text.splitlines()
                if "deviation" in l]
        assert abs(sum(devs)) < 1e-9

    def test_repeat_same_seed_zero_spread(self, datasets, tmp_path):
        root, cfg = datasets
        out = tmp_path / "same"
        rc = main(["train-teacher", "--config", str(cfg), "--seed", "5",
                   "--out", str(out), "--repeat", "2", "--repeat-same-seed"])
        assert rc == 0
        devs = [float(l.split("deviation")[1])
                for l in (out / "seeds_summary.txt").read_text().splitlines()
                if "deviation" in l]
        assert devs == [0.0, 0.0]


class TestPipelineCli:
    def test_zero_epoch_pipeline_trace(self, datasets, tmp_path):
        root, cfg = datasets
        teacher = train_teacher(datasets, tmp_path)
        out = tmp_path / "pipe"
        rc = main(["run-pipeline", "--config", str(cfg), "--seed", "7",
                   "--out", str(out), "--teacher", str(teacher),
                   "--epochs", "0"])
        assert rc == 0
        for name in ("phase1_pacemaker.pmkd", "phase2_student.pmkd",
                     "phase3_student.pmkd"):
            assert (out / name).exists()
        # untrained pipeline: phase-3 student == row member's fresh init
        spec = ArchSpec.parse("tiny4")
        row_init = init_weights(build(spec, "row_student"), 7 + 1)
        got = dict(read_checkpoint_items(out / "phase3_student.pmkd"))
        for n, a in row_init.state_items():
            np.testing.assert_array_equal(got[n], a, err_msg=n)

    def test_run_phase_commands_chain(self, datasets, tmp_path):
        root, cfg = datasets
        teacher = train_teacher(datasets, tmp_path)
        p1 = tmp_path / "p1"
        rc = main(["run-phase", "1", "--config", str(cfg), "--seed", "9",
                   "--out", str(p1), "--teacher", str(teacher)])
        assert rc == 0
        pm = p1 / "phase1_pacemaker.pmkd"
        p2 = tmp_path / "p2"
        rc = main(["run-phase", "2", "--config", str(cfg), "--seed", "9",
                   "--out", str(p2), "--pacemaker", str(pm)])
        assert rc == 0
        p3 = tmp_path / "p3"
        rc = main(["run-phase", "3", "--config", str(cfg), "--seed", "9",
                   "--out", str(p3), "--teacher", str(teacher),
                   "--pacemaker", str(pm)])
        assert rc == 0
        assert (p3 / "phase3_student.pmkd").exists()

    def test_sweep_rho(self, datasets, tmp_path):
        root, cfg = datasets
        teacher = train_teacher(datasets, tmp_path)
        out = tmp_path / "sweep"
        rc = main(["sweep-rho", "--config", str(cfg), "--seed", "4",
                   "--out", str(out), "--teacher", str(teacher),
                   "--rhos", "0.1,1", "--epochs", "0"])
        assert rc == 0
        summary = (out / "sweep_summary.txt").read_text()
        assert "rho 0.1" in summary and "rho 1" in summary


class TestStreamCli:
    def test_param_report(self, capsys):
        rc = main(["param-report", "--arch", "tiny4"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "0.3333333333" in out

    def test_equiv_check_passes(self, datasets, tmp_path, capsys):
        root, cfg = datasets
        # a student checkpoint: any row_student weights
        student = init_weights(build(ArchSpec.parse("tiny4"), "row_student"), 2)
        from pmkd.checkpoint import save_checkpoint

        sp = tmp_path / "student.pmkd"
        save_checkpoint(student, sp)
        rc = main(["equiv-check", "--config", str(cfg), "--arch", "tiny4",
                   "--checkpoint", str(sp), "--trials", "3",
                   "--height", "16", "--width", "16"])
        assert rc == 0
        assert "PASS" in capsys.readouterr().out

    def test_stream_infer_matches_eval_forward(self, datasets, tmp_path,
                                               capsys):
        root, cfg = datasets
        student = init_weights(build(ArchSpec.parse("tiny4"), "row_student"), 6)
        from pmkd.checkpoint import save_checkpoint
        from pmkd.data import normalize_images
        from pmkd.distill import forward_with_taps
        from pmkd.tensor import Tensor

        sp = tmp_path / "student.pmkd"
        save_checkpoint(student, sp)
        test = DatasetContainer.load(root / "test.otfd")
        img = test.images[0]
        rows = tmp_path / "rows.bin"
        rows.write_bytes(img.transpose(1, 0, 2).tobytes())  # row-major: C*W per row
        capsys.readouterr()
        rc = main(["stream-infer", "--config", str(cfg), "--arch", "tiny4",
                   "--checkpoint", str(sp), "--stats", str(root / "test.otfd"),
                   "--input", str(rows)])
        assert rc == 0
        got = np.array([float(v) for v in
                        capsys.readouterr().out.strip().splitlines()])
        x = normalize_images(img[None], test.mean, test.std)
        ref = forward_with_taps(student, Tensor(x), training=False).logits
        np.testing.assert_allclose(got, ref.data[0], atol=1e-4)


class TestErrors:
    def test_invalid_config_exit_2(self, datasets, tmp_path):
        root, cfg = datasets
        rc = main(["train-teacher", "--config", str(cfg), "--seed", "1",
                   "--out", str(tmp_path / "x"), "--set", "rho=99"])
        assert rc == 2

    def test_unknown_key_exit_2(self, datasets, tmp_path):
        root, cfg = datasets
        rc = main(["train-teacher", "--config", str(cfg), "--seed", "1",
                   "--out", str(tmp_path / "y"), "--set", "warmup=5"])
        assert rc == 2

    def test_missing_teacher_checkpoint_exit_1(self, datasets, tmp_path):
        root, cfg = datasets
        rc = main(["run-pipeline", "--config", str(cfg), "--seed", "1",
                   "--out", str(tmp_path / "z"),
                   "--teacher", str(tmp_path / "nope.pmkd")])
        assert rc == 1

    def test_usage_error_exit_2(self):
        assert main(["run-pipeline"]) == 2
