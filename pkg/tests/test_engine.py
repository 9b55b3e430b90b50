import json

import numpy as np
import pytest

from edgeclad.data import synth_task_stream
from edgeclad.engine import (
    ConfigError,
    ExperimentConfig,
    OptimizerConfig,
    StrategyConfig,
    desk_config,
    evaluate_all,
    make_detector,
    make_memory,
    run_experiment,
    store_task,
    train_on_task,
)
from edgeclad.replay import PQParams

SMALL_BACKBONE = {
    "input_shape": [3, 32, 32],
    "stages": [
        {"out_channels": 8, "convs": [[3, 2]]},
        {"out_channels": 12, "convs": [[3, 2]]},
        {"out_channels": 16, "convs": [[3, 2]]},
    ],
    "tap_indices": [2, 3],
    "split_index": 1,
}


def small_config(kind, seed=0, capacity=6, epochs=2, **kw):
    return ExperimentConfig(
        strategy=StrategyConfig(
            kind=kind,
            memory_capacity=capacity,
            epochs_per_task=epochs,
            batch_size=4,
            pq_params=PQParams(m=4, b=3) if kind == "FPQReplay" else None,
            optimizer=OptimizerConfig(lr=0.1),
        ),
        backbone=SMALL_BACKBONE,
        data={"kind": "synthetic", "num_tasks": 3, "image_size": 32},
        seed=seed,
        **kw,
    )


@pytest.fixture(scope="module")
def stream():
    return synth_task_stream(0, 3, 32, n_train=8, n_test_normal=3, n_test_anomalous=3)


def test_ft_equals_replay_on_first_task(stream):
    ft = run_experiment(small_config("FT"), stream[:1])
    rp = run_experiment(small_config("Replay"), stream[:1])
    for m in ft.matrices:
        np.testing.assert_array_equal(ft.matrices[m].values, rp.matrices[m].values)


def test_first_row_identical_across_strategies(stream):
    ft = run_experiment(small_config("FT"), stream)
    rp = run_experiment(small_config("Replay"), stream)
    assert ft.matrices["pixel_f1"].values[0, 0] == rp.matrices["pixel_f1"].values[0, 0]


def test_zero_capacity_replay_equals_ft(stream):
    ft = run_experiment(small_config("FT"), stream)
    rp = run_experiment(small_config("Replay", capacity=0), stream)
    assert ft.metrics_csv() == rp.metrics_csv()


def test_single_task_jt_ft_replay_identical(stream):
    results = [run_experiment(small_config(k), stream[:1]) for k in ("JT", "FT", "Replay")]
    finals = [{m: r.final(m) for m in r.matrices} for r in results]
    assert finals[0] == finals[1] == finals[2]


def test_feature_replay_matches_replay_first_memory_step(stream):
    """Both feed the same replayed samples, once as images and once as split features."""
    losses = {}
    for kind in ("Replay", "FeatureReplay"):
        cfg = small_config(kind)
        model, memory = make_detector(cfg), make_memory(cfg)
        model._initialize()
        train_on_task(model, stream[0], memory)
        store_task(model, memory, stream[0])
        steps = len(model.loss_history_)
        train_on_task(model, stream[1], memory)
        losses[kind] = model.loss_history_[: steps + 1]
    assert losses["Replay"][:-1] == losses["FeatureReplay"][:-1]
    assert losses["Replay"][-1] == pytest.approx(losses["FeatureReplay"][-1], abs=1e-6, rel=1e-5)


def test_jt_fills_last_row_only(stream):
    r = run_experiment(small_config("JT"), stream)
    m = r.matrices["pixel_f1"]
    assert m.defined() == 3
    assert np.isfinite(m.row(2)).all()
    assert r.forgetting() is None


def test_ten_task_matrix_structure():
    tasks = synth_task_stream(1, 10, 32, n_train=2, n_test_normal=1, n_test_anomalous=1)
    r = run_experiment(small_config("FT", epochs=0), tasks)
    assert all(m.defined() == 55 for m in r.matrices.values())
    assert len(r.metrics_csv().splitlines()) == 1 + 6 * 55


def test_frozen_weights_unchanged_over_run(stream):
    for kind in ("Replay", "FQReplay", "FPQReplay"):
        cfg = small_config(kind)
        model, memory = make_detector(cfg), make_memory(cfg)
        model._initialize()
        before = model.frozen_checksum()
        for task in stream:
            train_on_task(model, task, memory)
            store_task(model, memory, task)
        assert model.frozen_checksum() == before


def test_stfpm_frozen_teacher_unchanged(stream):
    cfg = small_config("Replay", variant="stfpm")
    model, memory = make_detector(cfg), make_memory(cfg)
    model._initialize()
    before = model.frozen_checksum()
    for task in stream[:2]:
        train_on_task(model, task, memory)
        store_task(model, memory, task)
    assert model.frozen_checksum() == before


def test_evaluate_twice_identical(stream):
    cfg = small_config("FT")
    model = make_detector(cfg)
    model._initialize()
    train_on_task(model, stream[0], None)
    assert evaluate_all(model, stream[:2]) == evaluate_all(model, stream[:2])
    assert all(len(v) == 2 for v in evaluate_all(model, stream[:2]).values())


def test_student_equal_teacher_gives_chance_auroc(stream):
    cfg = small_config("FT", epochs=0)
    model = make_detector(cfg)
    model.student_seed = cfg.seed
    model._initialize()
    assert np.all(model.anomaly_maps(stream[0].test_images) == 0)
    row = evaluate_all(model, stream[:1])
    assert row["pixel_roc_auc"] == [0.5]
    assert row["image_roc_auc"] == [0.5]


def test_all_strategies_run_and_report_footprint(stream):
    sizes = {}
    for kind in ("FT", "Replay", "FeatureReplay", "FQReplay", "FPQReplay"):
        r = run_experiment(small_config(kind), stream)
        sizes[kind] = r.footprint.total_bytes
        assert r.measured_footprint.total_bytes == r.footprint.total_bytes
        assert len(r.wall_clock) == 3
        json.dumps(r.to_dict())
    assert sizes["FT"] == 0
    assert sizes["Replay"] == 6 * 3 * 32 * 32
    assert sizes["FeatureReplay"] == 6 * 4 * 8 * 16 * 16
    assert sizes["FQReplay"] == 6 * (8 * 16 * 16 + 8)
    assert sizes["FPQReplay"] == 6 * 16 * 16 * 4 + 3 * 4 * 8 * 2 * 4


def test_run_is_deterministic(stream):
    a = run_experiment(small_config("FQReplay"), stream)
    b = run_experiment(small_config("FQReplay"), stream)
    assert a.metrics_csv() == b.metrics_csv()


def test_synthetic_data_from_config():
    cfg = small_config("FT", epochs=0)
    cfg.data = {"kind": "synthetic", "num_tasks": 2, "image_size": 32}
    r = run_experiment(cfg)
    assert r.task_names == ["texture_00", "texture_01"]


# --------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize(
    "mutate",
    [
        lambda c: setattr(c.strategy, "kind", "EWC"),
        lambda c: setattr(c, "variant", "resnet"),
        lambda c: (setattr(c.strategy, "kind", "FQReplay"), setattr(c, "variant", "stfpm")),
        lambda c: setattr(c.strategy, "pq_params", PQParams()),
        lambda c: (setattr(c.strategy, "kind", "FPQReplay"), setattr(c.strategy, "pq_params", PQParams(m=3))),
        lambda c: setattr(c.strategy, "kind", "FPQReplay"),
        lambda c: setattr(c.strategy, "batch_size", 0),
        lambda c: setattr(c.strategy.optimizer, "method", "adam"),
        lambda c: setattr(c, "combine", "max"),
        lambda c: setattr(c, "data", {"kind": "imagenet"}),
    ],
)
def test_invalid_configs(mutate):
    cfg = small_config("Replay")
    cfg.validate()
    mutate(cfg)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_config_json_roundtrip():
    cfg = small_config("FPQReplay")
    text = json.dumps(cfg.to_dict())
    back = ExperimentConfig.from_json(text)
    assert back.to_dict() == cfg.to_dict()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**cfg.to_dict(), "learning_rate": 1})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


def test_desk_config():
    cfg = desk_config("FPQReplay", seed=2)
    cfg.validate()
    assert cfg.strategy.pq_params == PQParams(6, 7)
    assert cfg.backbone_spec().split_shape == (24, 32, 32)
    assert cfg.strategy.optimizer.lr == 0.4
    assert desk_config("Replay").strategy.pq_params is None


def test_missing_mvtec_root_is_dataset_error(tmp_path):
    from edgeclad.data import DatasetError

    cfg = small_config("FT")
    cfg.data = {"kind": "mvtec", "root": str(tmp_path / "none"), "categories": ["bottle"], "image_size": 32}
    with pytest.raises(DatasetError):
        run_experiment(cfg)


def test_mvtec_fixture_run():
    from pathlib import Path

    cfg = small_config("Replay", epochs=1)
    root = Path(__file__).parent / "fixtures" / "mvtec_mini"
    cfg.data = {"kind": "mvtec", "root": str(root), "categories": ["bottle", "cable"], "image_size": 32}
    r = run_experiment(cfg)
    assert r.task_names == ["bottle", "cable"]
    assert r.matrices["pixel_f1"].defined() == 3

