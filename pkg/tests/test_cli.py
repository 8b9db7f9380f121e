import csv
import json
import shutil

import pytest

from attnagree.cli import (
    ConfigError,
    PrerequisiteError,
    RunPaths,
    config_hash_of,
    default_config,
    env_overrides,
    main,
    reference_ranking,
    resolve_config,
    run_step,
)
from attnagree.data import FEATURE_NAMES, load_manifest

TINY_RUN_CONFIG = {
    "seed": 0,
    "gen": {"n_train": 12, "n_validation": 12, "n_test": 8,
            "n_pretrain_extra": 2,
            "vol_h": 24, "vol_w": 24, "vol_t": 12,
            "band_offset": 1, "band_width": 3,
            "band_half_h": 3, "band_half_t": 2,
            "bbox_half_h": 4, "bbox_half_w": 4, "bbox_half_t": 2},
    "model": {"input_h": 8, "input_w": 8, "input_t": 8, "patch": 4,
              "embed_dim": 16, "n_heads": 2, "mlp_hidden": 24, "n_blocks": 1,
              "head_hidden": 8},
    "train": {"epochs": 2, "batch_size": 4, "lr": 3e-3},
    "pretrain_epochs": 1,
    "tta": {"q": 3, "k": 1},
    # thresholds sized to this run's band geometry so scores spread over 1/2/3
    "sim": {"hi": 0.35, "lo": 0.28, "rater": "sim"},
}


@pytest.fixture(scope="module")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN_CONFIG))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory, tiny_config_path):
    """A completed `all` pipeline; tests must not mutate it in place."""
    run_dir = tmp_path_factory.mktemp("run") / "tiny"
    cfg = resolve_config(config_path=tiny_config_path, environ={},
                         run_dir=str(run_dir))
    run_step("all", cfg)
    return cfg, run_dir


def tiny_cfg(run_dir, config_path, **flags):
    return resolve_config(config_path=config_path, environ={},
                          run_dir=str(run_dir), **flags)


# ---- configuration resolution ----

def test_defaults_resolve():
    cfg = resolve_config(environ={})
    assert cfg.seed == 0
    assert cfg.tta_q == 32
    assert cfg.model.n_patches == 32
    assert cfg.model.fusion_len == 52
    assert len(cfg.config_hash) == 64


def test_file_overrides_defaults(tiny_config_path):
    cfg = resolve_config(config_path=tiny_config_path, environ={})
    assert cfg.gen.n_train == 12
    assert cfg.model.embed_dim == 16
    assert cfg.train.epochs == 2
    assert cfg.sim_hi == 0.35


def test_env_overrides_file(tiny_config_path):
    env = {"ATTNAGREE_SEED": "7", "ATTNAGREE_TTA__Q": "5",
           "ATTNAGREE_TRAIN__EPOCHS": "9"}
    cfg = resolve_config(config_path=tiny_config_path, environ=env)
    assert cfg.seed == 7
    assert cfg.tta_q == 5
    assert cfg.train.epochs == 9


def test_flags_override_env(tiny_config_path, tmp_path):
    env = {"ATTNAGREE_SEED": "7", "ATTNAGREE_RUN_DIR": "/nowhere"}
    cfg = resolve_config(config_path=tiny_config_path, environ=env,
                         run_dir=str(tmp_path), seed=3)
    assert cfg.seed == 3
    assert cfg.run_dir == tmp_path


def test_env_parsing_shapes():
    tree = env_overrides({"ATTNAGREE_SEED": "4",
                          "ATTNAGREE_RUN_DIR": "relative/dir",
                          "ATTNAGREE_SIM__HI": "0.4",
                          "OTHER_VAR": "ignored"})
    assert tree == {"seed": 4, "run_dir": "relative/dir",
                    "sim": {"hi": 0.4}}


def test_master_seed_drives_training_seed(tiny_config_path):
    cfg = resolve_config(config_path=tiny_config_path, environ={}, seed=11)
    assert cfg.train.seed == 11


def test_unknown_config_key_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"seeed": 3}))
    with pytest.raises(ConfigError, match="seeed"):
        resolve_config(config_path=path, environ={})
    path.write_text(json.dumps({"gen": {"n_cases": 5}}))
    with pytest.raises(ConfigError, match="gen.n_cases"):
        resolve_config(config_path=path, environ={})


def test_invalid_section_values_rejected(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"model": {"input_h": 9, "patch": 4}}))
    with pytest.raises(ConfigError, match="model"):
        resolve_config(config_path=path, environ={})
    path.write_text(json.dumps({"tta": {"q": 0}}))
    with pytest.raises(ConfigError, match="tta"):
        resolve_config(config_path=path, environ={})


def test_config_not_json(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ConfigError, match="JSON"):
        resolve_config(config_path=path, environ={})


# ---- config hash ----

def test_hash_ignores_deployment_keys():
    base = default_config()
    moved = default_config()
    moved["run_dir"] = "/somewhere/else"
    moved["data_dir"] = "/other/data"
    moved["port"] = 9999
    moved["ui_dir"] = "/some/bundle"
    assert config_hash_of(base) == config_hash_of(moved)


def test_ui_dir_flag_and_validation(tmp_path):
    cfg = resolve_config(environ={}, run_dir=str(tmp_path),
                         ui_dir="frontend/dist")
    assert str(cfg.ui_dir) == "frontend/dist"
    assert resolve_config(environ={}, run_dir=str(tmp_path)).ui_dir is None
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"ui_dir": 5}))
    with pytest.raises(ConfigError):
        resolve_config(config_path=bad, environ={}, run_dir=str(tmp_path))


def test_hash_tracks_semantic_changes():
    base = default_config()
    changed = default_config()
    changed["seed"] = 1
    assert config_hash_of(base) != config_hash_of(changed)
    changed = default_config()
    changed["train"]["lr"] = 1e-3
    assert config_hash_of(base) != config_hash_of(changed)


# ---- steps and artifacts ----

def test_all_produces_complete_run(tiny_run):
    cfg, run_dir = tiny_run
    paths = RunPaths(cfg)
    for path in (paths.config, paths.manifest, paths.pretrain_metrics,
                 paths.pretrained_checkpoint, paths.train_metrics,
                 paths.checkpoint, paths.train_summary, paths.results,
                 paths.maps, paths.ranking, paths.scores,
                 paths.estimator("uninformed"), paths.estimator("informed"),
                 paths.report_dir / "report.json",
                 paths.report_dir / "cumulative_uninformed.csv",
                 paths.report_dir / "stratified_auc.svg"):
        assert path.exists(), path
    report = json.loads((paths.report_dir / "report.json").read_text())
    assert report["config_hash"] == cfg.config_hash
    assert report["split_metrics"]["test"]["n_cases"] == 8
    overlays = list(paths.overlays.glob("*.png"))
    # 20 scored cases x 8 axial slices
    assert len(overlays) == 160


def test_every_artifact_embeds_hash(tiny_run):
    cfg, run_dir = tiny_run
    paths = RunPaths(cfg)
    manifest = load_manifest(paths.manifest)
    assert manifest["config_hash"] == cfg.config_hash
    for csv_path in (paths.pretrain_metrics, paths.train_metrics,
                     paths.results):
        first = csv_path.read_text().splitlines()[0]
        assert first == f"# config_hash={cfg.config_hash}"
    for json_path in (paths.maps, paths.estimator("uninformed"),
                      paths.train_summary):
        assert json.loads(json_path.read_text())["config_hash"] \
            == cfg.config_hash


def test_prerequisite_errors_name_the_missing_step(tmp_path,
                                                   tiny_config_path):
    cfg = tiny_cfg(tmp_path / "fresh", tiny_config_path)
    with pytest.raises(PrerequisiteError, match="gen-data"):
        run_step("pretrain", cfg)
    run_step("gen-data", cfg)
    with pytest.raises(PrerequisiteError, match="pretrain"):
        run_step("train", cfg)
    with pytest.raises(PrerequisiteError, match="train"):
        run_step("infer", cfg)
    with pytest.raises(PrerequisiteError, match="explain"):
        run_step("score-sim", cfg)
    with pytest.raises(PrerequisiteError, match="infer"):
        run_step("fit-estimators", cfg)


def test_hash_mismatch_refused(tiny_run, tiny_config_path):
    cfg, run_dir = tiny_run
    with pytest.raises(ConfigError, match="hash"):
        run_step("infer", tiny_cfg(run_dir, tiny_config_path, seed=99))


def test_artifact_hash_checked_not_just_config_file(tiny_run,
                                                    tiny_config_path,
                                                    tmp_path):
    cfg, run_dir = tiny_run
    clone = tmp_path / "clone"
    shutil.copytree(run_dir, clone)
    # a run dir whose config.json was regenerated but whose results.csv
    # came from another configuration must be refused
    (clone / "config.json").unlink()
    other = tiny_cfg(clone, tiny_config_path, seed=99)
    with pytest.raises(ConfigError, match="results.csv"):
        run_step("fit-estimators", other)


def test_infer_is_deterministic(tiny_run, tiny_config_path, tmp_path):
    cfg, run_dir = tiny_run
    clone = tmp_path / "clone"
    shutil.copytree(run_dir, clone)
    cfg2 = tiny_cfg(clone, tiny_config_path)
    before = (clone / "results.csv").read_bytes()
    run_step("infer", cfg2)
    assert (clone / "results.csv").read_bytes() == before


def test_evaluate_rerun_is_byte_identical(tiny_run, tiny_config_path,
                                          tmp_path):
    cfg, run_dir = tiny_run
    clone = tmp_path / "clone"
    shutil.copytree(run_dir, clone)
    cfg2 = tiny_cfg(clone, tiny_config_path)
    report_files = sorted((clone / "report").iterdir())
    before = {p.name: p.read_bytes() for p in report_files}
    run_step("evaluate", cfg2)
    for p in sorted((clone / "report").iterdir()):
        assert p.read_bytes() == before[p.name]


def test_fit_estimators_requires_full_validation_scores(tiny_run,
                                                        tiny_config_path,
                                                        tmp_path):
    cfg, run_dir = tiny_run
    clone = tmp_path / "clone"
    shutil.copytree(run_dir, clone)
    scores = clone / "scores.csv"
    rows = list(csv.reader(scores.open()))
    header, body = rows[0], rows[1:]
    with scores.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(body[:-15])   # drop most of the scores
    cfg2 = tiny_cfg(clone, tiny_config_path)
    with pytest.raises(PrerequisiteError, match="case_"):
        run_step("fit-estimators", cfg2)


def test_scores_file_round_trips_through_ingest(tiny_run):
    import warnings

    from attnagree.agreement import ingest_scores, load_ranking
    from attnagree.cli import _load_maps_checked

    cfg, run_dir = tiny_run
    paths = RunPaths(cfg)
    maps_by_case = _load_maps_checked(cfg, paths, "test")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        records, full = ingest_scores(paths.scores, maps_by_case,
                                      load_ranking(paths.ranking))
    assert full
    assert len(records) == 20


def test_reference_ranking_orders_by_effect_size(tiny_run):
    cfg, run_dir = tiny_run
    manifest = load_manifest(RunPaths(cfg).manifest)
    ranking = reference_ranking(manifest)
    assert sorted(ranking) == sorted(FEATURE_NAMES)
    effects = manifest["effect_sizes"]
    values = [effects[name] for name in ranking]
    assert values == sorted(values, reverse=True)
    assert ranking[0] == "node_right_len_max"


# ---- exit codes ----

def test_main_exit_codes(tmp_path, tiny_config_path, capsys):
    assert main(["gen-data", "--config", str(tiny_config_path),
                 "--run-dir", str(tmp_path / "r")]) == 0

    assert main(["train", "--config", str(tiny_config_path),
                 "--run-dir", str(tmp_path / "r")]) == 3
    assert "pretrain" in capsys.readouterr().err

    bad = tmp_path / "bad.json"
    bad.write_text("{broken")
    assert main(["gen-data", "--config", str(bad),
                 "--run-dir", str(tmp_path / "r2")]) == 2
    assert "config error" in capsys.readouterr().err


def test_main_rejects_unknown_step(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
