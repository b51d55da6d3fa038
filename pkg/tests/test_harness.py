import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incsim import experiment
from incsim.cli import EXIT_ABORT, EXIT_CONFIG, EXIT_IO, EXIT_OK, main
from incsim.config import ConfigError, ExperimentConfig, build_config, load_config, parse_override
from incsim.datasets import make_session_plan, write_idx
from incsim.network import load_checkpoint
from incsim.report import CSV_COLUMNS, CsvRow, format_csv, read_csv, render_svg, write_csv
from incsim.strategies import NormalStrategy, TrainingAborted


def synthetic_idx(directory, classes=4, per_class=30, test_per_class=10, side=16, seed=0):
    """Bright-square-per-class images written as gzipped IDX files."""
    gen = np.random.default_rng(seed)

    def images(count):
        labels = np.repeat(np.arange(classes), count)
        out = gen.integers(0, 60, size=(len(labels), side, side))
        for i, c in enumerate(labels):
            r, q = divmod(int(c), 2)
            out[i, r * 8:r * 8 + 6, q * 8:q * 8 + 6] += 180
        return out.astype(np.uint8), labels.astype(np.uint8)

    paths = {}
    for split, count in (("train", per_class), ("test", test_per_class)):
        x, y = images(count)
        paths[f"{split}_images"] = str(directory / f"{split}-images.gz")
        paths[f"{split}_labels"] = str(directory / f"{split}-labels.gz")
        write_idx(paths[f"{split}_images"], x)
        write_idx(paths[f"{split}_labels"], y)
    return paths


@pytest.fixture
def tiny_config(tmp_path):
    paths = synthetic_idx(tmp_path)
    values = dict(paths, epochs=2, batch_size=16, patience=2, vae_epochs=2, output_dir=str(tmp_path / "runs"))
    return build_config(values).validate()


def write_toml(path, text):
    path.write_text(text)
    return str(path)


# -- config ----------------------------------------------------------------------------


def test_defaults_validate_without_files():
    ExperimentConfig().validate(check_files=False)


@pytest.mark.parametrize("key,value", [
    ("loss", "hinge"), ("strategies", ["normal", "replay"]), ("epochs", 0), ("batch_size", 1),
    ("learning_rate", 1.5), ("angular_alpha", 95.0), ("seeds", [-1]), ("validation_fraction", 1.0),
    ("pairing", "random"), ("ideal_base", 0.0), ("center_lr", 0.0),
])
def test_out_of_range_values_are_rejected(key, value):
    with pytest.raises(ConfigError, match=key.split("_")[0]):
        build_config({key: value}).validate(check_files=False)


def test_missing_files_are_reported():
    with pytest.raises(ConfigError, match="train_images: file not found"):
        ExperimentConfig().validate()


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        build_config({"epoch": 3})


def test_toml_preset_and_relative_paths(tmp_path):
    path = write_toml(tmp_path / "run.toml", 'preset = "desk"\ntrain_images = "data/x.gz"\nepochs = 7\nseeds = 3\n')
    config = load_config(path)
    assert config.epochs == 7  # file wins over the preset
    assert config.max_sessions == 3 and config.train_cap_per_class == 300
    assert config.train_images == str(tmp_path / "data" / "x.gz")
    assert config.seeds == [3]


def test_overrides_win_over_file(tmp_path):
    path = write_toml(tmp_path / "run.toml", "epochs = 7\n")
    assert load_config(path, overrides={"epochs": 2}).epochs == 2


def test_toml_tables_rejected(tmp_path):
    with pytest.raises(ConfigError, match="tables"):
        load_config(write_toml(tmp_path / "run.toml", "[train]\nepochs = 2\n"))


@pytest.mark.parametrize("text,expected", [
    ("epochs=3", {"epochs": 3}), ("loss = triplet", {"loss": "triplet"}),
    ('output_dir="/tmp/x"', {"output_dir": "/tmp/x"}), ("seeds=[0, 1]", {"seeds": [0, 1]}),
    ("learning_rate=5e-4", {"learning_rate": 5e-4}), ("svg=false", {"svg": False}),
])
def test_parse_override(text, expected):
    assert parse_override(text) == expected


def test_integer_promoted_for_float_fields():
    config = build_config({"contrastive_margin": 2})
    assert isinstance(config.contrastive_margin, float)


def test_desk_config_in_repo_is_loadable():
    here = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
    config = load_config(os.path.join(here, "configs", "mnist_desk.toml"))
    assert config.max_sessions == 3
    config.validate(check_files=False)


# -- CLI exit codes ----------------------------------------------------------------------


def test_cli_bad_config_exits_1(tmp_path, capsys):
    path = write_toml(tmp_path / "bad.toml", 'loss = "hinge"\n')
    assert main(["plan", "-c", path]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_cli_missing_data_exits_1(tmp_path):
    path = write_toml(tmp_path / "run.toml", 'train_images = "nope.gz"\n')
    assert main(["plan", "-c", path]) == EXIT_CONFIG


def test_cli_unreadable_config_exits_3(tmp_path):
    assert main(["plan", "-c", str(tmp_path / "missing.toml")]) == EXIT_IO


def test_cli_corrupt_idx_exits_3(tmp_path, tiny_config, capsys):
    with open(tiny_config.train_images, "wb") as fh:
        fh.write(b"\x00\x00\x08\x03garbage")
    args = ["plan"] + [f"--set={k}={json.dumps(getattr(tiny_config, k))}"
                       for k in ("train_images", "train_labels", "test_images", "test_labels")]
    experiment._RAW_CACHE.clear()
    assert main(args) == EXIT_IO
    assert "I/O error" in capsys.readouterr().err


def test_cli_plan_prints_schedule(tiny_config, capsys):
    args = ["plan"] + [f"--set={k}={json.dumps(getattr(tiny_config, k))}"
                       for k in ("train_images", "train_labels", "test_images", "test_labels")]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out
    assert "base classes:" in out and "session 2: class" in out


def test_cli_aborted_training_exits_2(tiny_config, monkeypatch):
    def boom(self, *args, **kwargs):
        raise TrainingAborted("loss became non-finite")

    monkeypatch.setattr(NormalStrategy, "session", boom)
    args = ["incremental", "--strategy", "normal"] + [
        f"--set={k}={json.dumps(getattr(tiny_config, k))}"
        for k in ("train_images", "train_labels", "test_images", "test_labels", "output_dir",
                  "epochs", "batch_size")]
    assert main(args) == EXIT_ABORT
    run = os.path.join(experiment.run_directory(tiny_config, 0), "normal")
    assert os.path.isfile(os.path.join(run, experiment.FAILURE_MARKER))
    assert len(read_csv(os.path.join(run, "sessions.csv"))) == 1  # base row survives


# -- session plan ------------------------------------------------------------------------


@pytest.mark.parametrize("classes,sessions", [(10, 5), (26, 13), (4, 2), (7, 4)])
def test_plan_sizes(classes, sessions):
    plan = make_session_plan(classes, seed=1)
    assert len(plan.incremental_order) == sessions
    assert plan.all_classes == list(range(classes))


def test_pairing_only_uses_seen_classes():
    plan = make_session_plan(10, seed=3)
    for mode in ("rotate", "fixed"):
        for t, _ in enumerate(plan.incremental_order, start=1):
            seen = plan.base_classes + plan.incremental_order[:t - 1]
            assert experiment.paired_class(plan, t, mode, seed=3) in seen


# -- CSV / SVG -----------------------------------------------------------------------------


floats = st.floats(min_value=0.0, max_value=1.0, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(floats, floats, floats), min_size=0, max_size=6))
def test_csv_round_trip_is_exact(tmp_path_factory, values):
    rows = [CsvRow("ewc", "triplet", "mnist", 2, i, 5 + i, *v) for i, v in enumerate(values)]
    path = str(tmp_path_factory.mktemp("csv") / "r.csv")
    write_csv(path, rows)
    assert read_csv(path) == rows


def test_empty_schedule_gives_header_only_csv(tiny_config):
    config = build_config({**tiny_config.as_dict(), "max_sessions": 0})
    run = experiment.run_experiment(config, "normal", 0)
    with open(os.path.join(run.directory, "sessions.csv")) as fh:
        assert fh.read() == ",".join(CSV_COLUMNS) + "\n"


def test_svg_has_one_polyline_per_strategy():
    rows = [CsvRow(s, "center", "mnist", seed, t, 5 + t, 0.5, 0.5, 0.5)
            for s in ("normal", "icarl", "vae") for seed in (0, 1) for t in range(3)]
    svg = render_svg(rows)
    assert svg.count("<polyline") == 3
    for s in ("normal", "icarl", "vae"):
        assert f'data-strategy="{s}"' in svg


def test_csv_unwritable_path_reports_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="cannot write"):
        write_csv(str(blocker / "sub" / "r.csv"), [])


def test_csv_bad_header_rejected(tmp_path):
    path = tmp_path / "r.csv"
    path.write_text("a,b\n")
    with pytest.raises(ValueError, match="unexpected header"):
        read_csv(str(path))


# -- end to end -----------------------------------------------------------------------------


def test_tiny_run_is_deterministic_and_complete(tiny_config, tmp_path):
    first = experiment.run_all(tiny_config)
    assert {a.strategy for a in first} == {"normal", "ewc", "ebll", "icarl", "vae"}
    sessions = len(experiment.prepare_data(tiny_config, 0).plan.incremental_order)
    for a in first:
        assert len(a.rows) == sessions + 1
        assert a.omega is not None
        assert len(a.checkpoints) == sessions + 1
        summary = json.load(open(os.path.join(a.directory, "summary.json")))
        assert summary["failed"] is None
    # every alpha in the CSV is re-derivable from the stored checkpoints
    data = experiment.prepare_data(tiny_config, 0)
    for a in first:
        for row, path in zip(a.rows, a.checkpoints):
            seen = data.plan.base_classes + data.plan.incremental_order[:row.session]
            new = data.plan.incremental_order[row.session - 1] if row.session else None
            again = experiment.evaluate_session(load_checkpoint(path), data, seen, new)
            assert again == (row.alpha_base, row.alpha_new, row.alpha_all)
    results = os.path.join(tiny_config.output_dir, "mnist", "contrastive")
    assert os.path.isfile(os.path.join(results, "base_map.svg"))
    text = open(os.path.join(results, "results.csv")).read()

    again = build_config({**tiny_config.as_dict(), "output_dir": str(tmp_path / "again")})
    experiment.run_all(again)
    assert open(os.path.join(again.output_dir, "mnist", "contrastive", "results.csv")).read() == text
