import sys
from pathlib import Path

import pytest
from dotenv import dotenv_values

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from dynamic_flow.cli import EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from dynamic_flow.config import load_run_config, settings
from dynamic_flow.reports import LOG_COLUMNS, read_csv
from dynamic_flow.workflows.ablation import TABLE_COLUMNS

SMALL = ["--height", "16", "--width", "16", "--hard-fraction", "0"]
FAST_TRAIN = ["--t-train", "3", "--batch-size", "2"]


@pytest.fixture(autouse=True)
def no_output_override(monkeypatch):
    monkeypatch.setattr(settings, "output_dir", None)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("cli")
    with pytest.MonkeyPatch.context() as patch:
        patch.setattr(settings, "output_dir", None)
        build_workspace(root)
    return root


def build_workspace(root: Path) -> None:
    assert main(["gen", "--n", "4", "--seed", "7", "--out", str(root / "data" / "train.bin"), *SMALL]) == EXIT_OK
    assert (
        main(
            [
                "train",
                "--dataset",
                str(root / "data" / "train.bin"),
                "--out-dir",
                str(root / "run"),
                "--steps",
                "2",
                "--backbone-steps",
                "1",
                *FAST_TRAIN,
            ]
        )
        == EXIT_OK
    )


def eval_args(workspace: Path, command: str, out: str, *extra: str):
    return [
        command,
        "--dataset",
        str(workspace / "data" / "train.bin"),
        "--checkpoint",
        str(workspace / "run" / "checkpoint.bin"),
        "--out-dir",
        str(workspace / out),
        "--t-test",
        "4",
        *extra,
    ]


def test_gen_refuses_empty_dataset(tmp_path: Path):
    assert main(["gen", "--n", "0", "--out", str(tmp_path / "empty.bin")]) == EXIT_USAGE
    assert not (tmp_path / "empty.bin").exists()


def test_gen_is_byte_identical_and_records_its_config(tmp_path: Path, capsys):
    for name in ("a", "b"):
        assert main(["gen", "--n", "3", "--seed", "11", "--out", str(tmp_path / name / "data.bin"), *SMALL]) == EXIT_OK

    assert (tmp_path / "a" / "data.bin").read_bytes() == (tmp_path / "b" / "data.bin").read_bytes()
    assert "sha256=" in capsys.readouterr().out
    recorded = dotenv_values(tmp_path / "a" / "run_config.env")
    assert recorded["N"] == "3" and recorded["SEED"] == "11"


def test_output_dir_environment_override(tmp_path: Path, monkeypatch):
    monkeypatch.setattr(settings, "output_dir", str(tmp_path / "override"))
    assert main(["gen", "--n", "1", "--out", str(tmp_path / "ignored" / "data.bin"), *SMALL]) == EXIT_OK
    assert (tmp_path / "override" / "data.bin").exists()
    assert not (tmp_path / "ignored").exists()


def test_train_writes_checkpoint_and_log(workspace: Path):
    log = read_csv(workspace / "run" / "train_log.csv")

    assert (workspace / "run" / "checkpoint.bin").exists()
    assert list(log.columns) == LOG_COLUMNS
    assert log["phase"].tolist() == ["backbone", "policy", "policy"]
    assert (workspace / "run" / "train_log.csv").read_text().startswith("# schema-version: 1\n")


def test_train_records_the_variant(workspace: Path, tmp_path: Path):
    args = [
        "train",
        "--dataset",
        str(workspace / "data" / "train.bin"),
        "--out-dir",
        str(tmp_path),
        "--variant",
        "B",
        "--freeze-backbone",
        "--init",
        str(workspace / "run" / "checkpoint.bin"),
        "--steps",
        "1",
        *FAST_TRAIN,
    ]
    assert main(args) == EXIT_OK
    recorded = dotenv_values(tmp_path / "run_config.env")
    assert recorded["VARIANT"] == "B"
    assert recorded["PHASE"] == "policy"
    assert len(read_csv(tmp_path / "train_log.csv")) == 1


def test_train_without_dataset_is_a_usage_error(tmp_path: Path):
    assert main(["train", "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_eval_with_missing_checkpoint_is_a_usage_error(workspace: Path, tmp_path: Path):
    args = ["eval", "--dataset", str(workspace / "data" / "train.bin"), "--checkpoint", str(tmp_path / "nope.bin"), "--out-dir", str(tmp_path)]
    assert main(args) == EXIT_USAGE


def test_eval_fixed_enters_every_update(workspace: Path):
    assert main(eval_args(workspace, "eval", "fixed", "--mode", "fixed", "--T", "3")) == EXIT_OK

    trace = read_csv(workspace / "fixed" / "trace.csv")
    totals = trace[trace["t"].astype(str) == "total"]
    assert len(totals) == 4
    assert (totals["entered"] == 3).all()

    report = read_csv(workspace / "fixed" / "report.csv")
    assert report["group"].tolist() == ["all", "easy"]


def test_eval_exit_mode_traces_are_prefixes(workspace: Path):
    assert main(eval_args(workspace, "eval", "exit", "--mode", "exit", "--r", "0.5")) == EXIT_OK

    trace = read_csv(workspace / "exit" / "trace.csv")
    steps = trace[trace["t"].astype(str) != "total"]
    for _, rows in steps.groupby("sample_id"):
        flags = rows["entered"].tolist()
        assert flags[0] == 1
        first_skip = flags.index(0) if 0 in flags else len(flags)
        assert not any(flags[first_skip:])


def test_sweep_rows_follow_ascending_r(workspace: Path):
    assert main(eval_args(workspace, "sweep", "sweep", "--r", "1.0,0.2,0.6,0.4,0.8")) == EXIT_OK

    table = read_csv(workspace / "sweep" / "sweep.csv")
    assert table["r"].tolist() == [0.2, 0.4, 0.6, 0.8, 1.0]
    assert set(table["group"]) == {"all"}


def test_sweep_with_empty_r_list_is_a_usage_error(workspace: Path):
    assert main(eval_args(workspace, "sweep", "sweep_empty", "--r", "")) == EXIT_USAGE


def test_analyze_histogram_sums_to_one_hundred(workspace: Path):
    assert main(eval_args(workspace, "analyze", "analyze", "--tol", "0.01")) == EXIT_OK

    histogram = read_csv(workspace / "analyze" / "bottleneck.csv")
    assert histogram["t"].tolist() == [1, 2, 3, 4]
    assert histogram["percent"].sum() == pytest.approx(100.0)

    allocation = read_csv(workspace / "analyze" / "allocation.csv")
    assert set(allocation["grouping"]) == {"generator", "ranked"}


def test_ablate_emits_one_row_per_variant_plus_baseline(workspace: Path):
    args = [
        "ablate",
        "--dataset",
        str(workspace / "data" / "train.bin"),
        "--out-dir",
        str(workspace / "ablate"),
        "--steps",
        "1",
        "--backbone-steps",
        "1",
        "--t-test",
        "3",
        *FAST_TRAIN,
    ]
    assert main(args) == EXIT_OK

    table = read_csv(workspace / "ablate" / "ablation.csv")
    assert list(table.columns) == TABLE_COLUMNS
    assert table["variant"].tolist() == ["fixed", "full", "l1", "B", "P", "exit"]
    assert table.set_index("variant").loc["exit", "mode"] == "exit"


def test_diverging_training_exits_with_numeric_code(workspace: Path, tmp_path: Path):
    args = [
        "train",
        "--dataset",
        str(workspace / "data" / "train.bin"),
        "--out-dir",
        str(tmp_path),
        "--phase",
        "joint",
        "--lr",
        "1e300",
        "--steps",
        "3",
        *FAST_TRAIN,
    ]
    assert main(args) == EXIT_NUMERIC
    assert (tmp_path / "checkpoint.bin").exists()


def run_every_command(workspace: Path, root: Path) -> None:
    dataset = str(workspace / "data" / "train.bin")
    checkpoint = str(root / "train" / "checkpoint.bin")
    short = ["--t-test", "3"]
    commands = [
        ["train", "--dataset", dataset, "--out-dir", str(root / "train"), "--steps", "2", "--backbone-steps", "1", *FAST_TRAIN],
        ["eval", "--dataset", dataset, "--checkpoint", checkpoint, "--out-dir", str(root / "eval"), "--r", "0.5", *short],
        ["sweep", "--dataset", dataset, "--checkpoint", checkpoint, "--out-dir", str(root / "sweep"), "--r", "0.3,0.9", *short],
        ["analyze", "--dataset", dataset, "--checkpoint", checkpoint, "--out-dir", str(root / "analyze"), *short],
        ["ablate", "--dataset", dataset, "--out-dir", str(root / "ablate"), "--steps", "1", "--backbone-steps", "1", *short, *FAST_TRAIN],
    ]
    for args in commands:
        assert main(args) == EXIT_OK, args[0]


def output_bytes(root: Path):
    outputs = {}
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        content = path.read_bytes()
        if path.name == "run_config.env":
            content = b"\n".join(line for line in content.splitlines() if not line.startswith((b"OUT_DIR=", b"CHECKPOINT=")))
        outputs[path.relative_to(root).as_posix()] = content
    return outputs


def test_every_command_is_byte_reproducible(workspace: Path, tmp_path: Path):
    run_every_command(workspace, tmp_path / "first")
    run_every_command(workspace, tmp_path / "second")

    first, second = output_bytes(tmp_path / "first"), output_bytes(tmp_path / "second")
    assert set(first) == set(second)
    assert {"train/checkpoint.bin", "eval/trace.csv", "sweep/sweep.csv", "analyze/bottleneck.csv", "ablate/ablation.csv"} <= set(first)
    for name, content in first.items():
        assert content == second[name], name


def test_run_config_reaches_the_model(workspace: Path, tmp_path: Path):
    config = tmp_path / "run.env"
    config.write_text("EMBEDDING=literal\nDETACH_POLICY_INPUT=false\nOPTIMIZER=momentum\n", encoding="utf-8")
    args = [
        "train",
        "--config",
        str(config),
        "--dataset",
        str(workspace / "data" / "train.bin"),
        "--out-dir",
        str(tmp_path / "run"),
        "--phase",
        "joint",
        "--steps",
        "1",
        *FAST_TRAIN,
    ]
    assert main(args) == EXIT_OK

    recorded = dotenv_values(tmp_path / "run" / "run_config.env")
    assert recorded["EMBEDDING"] == "literal"
    assert recorded["DETACH_POLICY_INPUT"] == "False"
    assert recorded["OPTIMIZER"] == "momentum"
    model_config = load_run_config(tmp_path / "run" / "run_config.env", {}).build_model_config(1)
    assert model_config.embedding == "literal" and model_config.detach_policy_input is False
