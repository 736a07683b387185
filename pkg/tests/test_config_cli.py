import json

import numpy as np
import pytest

from dmeta import cli, model
from dmeta import config as C
from dmeta import evaluation
from dmeta import rng as rngs
from dmeta.errors import InvalidArgumentError, NumericError

SMALL = [
    "dataset.synthetic_pretraining_classes = 12",
    "dataset.synthetic_evaluation_classes = 8",
    "dataset.synthetic_per_class = 6",
    "network.channels = 4",
    "meta.meta_iterations = 2",
    "meta.tasks_per_meta_step = 2",
    "meta.ambiguous_batch_size = 10",
    "meta.shots = 1",
    "inner.joint_steps = 2",
    "inner.learner_steps = 2",
    "eval.shot = 1",
    "eval.num_tasks = 3",
    "eval.steps = 2",
]


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# small run\n" + "\n".join(SMALL) + f"\noutput_dir = {tmp_path / 'run'}\nseed = 4\n")
    return path


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# -- config ------------------------------------------------------------------------------


def test_defaults_and_typed_parsing():
    cfg = C.load(overrides=["seed = 7", "meta.mode = supervised", "eval.transductive = no", "eval.lr = 0.01"])
    assert cfg.seed == 7 and cfg.meta.mode == "supervised"
    assert cfg.eval.transductive is False and cfg.eval.lr == 0.01
    assert cfg.resolved_meta().seed == 7


def test_dump_round_trips(cfg_file):
    cfg = C.load(cfg_file, ["meta.mode = divergent-only", "eval.transductive = false"])
    again = C.load(overrides=C.dump(cfg).splitlines())
    assert again == cfg


def test_later_assignment_wins(cfg_file):
    assert C.load(cfg_file, ["seed = 9"]).seed == 9


@pytest.mark.parametrize("line", ["bogus = 1", "meta.nope = 2", "zzz.x = 1", "meta.seed = 3", "no equals sign",
                                  "seed = many", "eval.transductive = maybe"])
def test_bad_config_lines(line):
    with pytest.raises(InvalidArgumentError):
        C.load(overrides=[line])


def test_network_spec_follows_dataset():
    assert C.load(overrides=["dataset.name = mini-imagenet"]).network_spec().channels == 32
    assert C.load(overrides=["network.channels = 6"]).network_spec().channels == 6
    assert C.load().network_spec().feature_dim() == 256


def test_data_root_from_environment(monkeypatch):
    monkeypatch.setenv(C.DATA_ROOT_ENV, "/somewhere")
    assert C.load(overrides=["dataset.name = omniglot"]).data_root() == "/somewhere"


# -- subcommands --------------------------------------------------------------------------


@pytest.mark.parametrize("args,want", [((1200, 20, 5), "0.992"), ((64, 600, 5), "0.852"), ((5, 1, 1), "1.000000")])
def test_probability_command(capsys, args, want):
    code, out, _ = run(capsys, "probability", *args)
    assert code == 0 and out.startswith(want)


def test_probability_invalid(capsys):
    code, _, err = run(capsys, "probability", 2, 2, 5)
    assert code == cli.EXIT_CONFIG and "error" in err


def test_pretrain_mode_none_writes_seeded_init(capsys, cfg_file, tmp_path):
    code, _, _ = run(capsys, "pretrain", "--config", cfg_file, "--set", "meta.mode=none")
    assert code == 0
    out = tmp_path / "run"
    cfg = C.load(cfg_file)
    init = model.init_params(cfg.network_spec(), rngs.stream(4, "init"))
    assert model.load_checkpoint(out / "checkpoint_final.dmeta").equals(init)
    assert (out / "config.txt").exists()


def test_pretrain_outputs_and_rerun_is_bit_identical(capsys, cfg_file, tmp_path):
    args = ("pretrain", "--config", cfg_file, "--set", "meta.mode=divergent-qd", "--set", "checkpoint_every=1")
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "checkpoint_final.dmeta").read_bytes() == (b / "checkpoint_final.dmeta").read_bytes()
    rows = [json.loads(l) for l in (a / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 2
    assert len((a / "inner.jsonl").read_text().splitlines()) == 4
    assert {"checkpoint_000001.dmeta", "checkpoint_000002.dmeta"} <= {p.name for p in a.iterdir()}
    # the saved config alone reproduces the run
    assert run(capsys, "pretrain", "--config", a / "config.txt", "--out", tmp_path / "c")[0] == 0
    assert (tmp_path / "c" / "checkpoint_final.dmeta").read_bytes() == (a / "checkpoint_final.dmeta").read_bytes()


@pytest.fixture
def checkpoint(capsys, cfg_file, tmp_path):
    assert run(capsys, "pretrain", "--config", cfg_file, "--set", "meta.mode=none")[0] == 0
    return tmp_path / "run" / "checkpoint_final.dmeta"


def test_evaluate_command(capsys, cfg_file, checkpoint, tmp_path):
    report, tasks = tmp_path / "r.json", tmp_path / "t.csv"
    code, out, _ = run(capsys, "evaluate", "--config", cfg_file, checkpoint, "--report", report,
                       "--tasks-csv", tasks, "--mode-label", "none")
    assert code == 0 and "over 3 tasks" in out
    data = json.loads(report.read_text())
    assert data["num_tasks"] == 3 and data["mode"] == "none"
    accs = [float(l.split(",")[1]) for l in tasks.read_text().splitlines()[1:]]
    assert len(accs) == 3 and np.mean(accs) == pytest.approx(data["mean_accuracy"])
    run(capsys, "evaluate", "--config", cfg_file, checkpoint, "--report", tmp_path / "r2.json", "--mode-label", "none")
    assert (tmp_path / "r2.json").read_text() == report.read_text()


def test_evaluate_head_mismatch(capsys, cfg_file, checkpoint):
    code, _, err = run(capsys, "evaluate", "--config", cfg_file, checkpoint, "--set", "eval.way=4")
    assert code == cli.EXIT_CONFIG and "logits" in err


def test_evaluate_malformed_checkpoint(capsys, cfg_file, tmp_path):
    bad = tmp_path / "bad.dmeta"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "evaluate", "--config", cfg_file, bad)
    assert code == cli.EXIT_CONFIG and err


def test_missing_files_are_io_errors(capsys, cfg_file, tmp_path):
    assert run(capsys, "evaluate", "--config", cfg_file, tmp_path / "absent.dmeta")[0] == cli.EXIT_IO
    assert run(capsys, "pretrain", "--config", tmp_path / "absent.cfg")[0] == cli.EXIT_IO


def test_numeric_failure_exit_code(capsys, cfg_file, checkpoint, monkeypatch):
    def boom(*a, **k):
        raise NumericError("loss is nan")

    monkeypatch.setattr(evaluation, "evaluate", boom)
    code, _, err = run(capsys, "evaluate", "--config", cfg_file, checkpoint)
    assert code == cli.EXIT_NUMERIC and "nan" in err


def test_dataset_without_root(capsys, monkeypatch, tmp_path):
    monkeypatch.delenv(C.DATA_ROOT_ENV, raising=False)
    out = tmp_path / "never"
    code, _, err = run(capsys, "pretrain", "--set", "dataset.name=omniglot", "--set", "meta.mode=none", "--out", out)
    assert code == cli.EXIT_CONFIG and C.DATA_ROOT_ENV in err
    assert not out.exists()


def test_export_logits_command(capsys, cfg_file, checkpoint, tmp_path):
    out = tmp_path / "logits.csv"
    code, _, _ = run(capsys, "export-logits", "--config", cfg_file, checkpoint, "--task-seed", 5, "--out", out)
    assert code == 0
    true, pred, logits = evaluation.read_logits(out)
    assert len(true) == 5 and logits.shape == (5, 5)
    np.testing.assert_array_equal(pred, logits.argmax(axis=1))
    first = out.read_bytes()
    run(capsys, "export-logits", "--config", cfg_file, checkpoint, "--task-seed", 5, "--out", out)
    assert out.read_bytes() == first
