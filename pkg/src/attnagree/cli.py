"""Pipeline orchestration over a single run directory.

Step graph: gen-data -> pretrain -> train -> infer -> explain ->
(score-sim | serve) -> fit-estimators -> evaluate; `all` chains the batch
steps using the simulated evaluator. Each step writes its artifacts under
the run directory and embeds the resolved config hash; steps refuse to mix
artifacts produced under different configurations.

Config precedence: built-in defaults < --config file < ATTNAGREE_* env vars
< command-line flags. Nested env overrides use double underscores
(ATTNAGREE_TRAIN__EPOCHS=3). Exit codes: 0 ok, 2 config error, 3 missing
prerequisite.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agreement import (
    FEATURE_NAMES,
    ingest_scores,
    load_ranking,
    save_ranking,
    simulate_image_score,
    write_scores_csv,
)
from .data import (
    GenConfig,
    case_band_mask,
    case_volume,
    cases_for_split,
    crop_at,
    encode_features,
    generate_dataset,
    load_manifest,
    normalize_volume,
    numeric_feature_stats,
    pretrain_cases,
    resample_volume,
)
from .evaluation import build_report, write_report
from .inference import infer_splits, read_results_csv, write_results_csv
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .relevance import (
    explain,
    maps_from_json_dict,
    maps_to_json_dict,
    save_overlays,
    upsample_heatmap,
)
from .training import TrainCase, TrainConfig, pretrain, train, write_metrics_csv
from .uncertainty import (
    MetaFeatures,
    fit_both,
    model_from_json_dict,
    model_to_json_dict,
    uncertainty_score,
)

STEPS = ("gen-data", "pretrain", "train", "infer", "explain", "score-sim",
         "serve", "fit-estimators", "evaluate", "all")
ALL_SEQUENCE = ("gen-data", "pretrain", "train", "infer", "explain",
                "score-sim", "fit-estimators", "evaluate")

ESTIMATOR_KINDS = ("uninformed", "informed")
SIM_TIMESTAMP = "1970-01-01T00:00:00Z"

# run_dir/data_dir/port/ui_dir are deployment details: two runs of the same
# experiment in different directories must hash identically
_UNHASHED_KEYS = ("run_dir", "data_dir", "port", "ui_dir")

ENV_PREFIX = "ATTNAGREE_"


class ConfigError(Exception):
    """Invalid or inconsistent configuration; CLI exit code 2."""


class PrerequisiteError(Exception):
    """A required artifact of an earlier step is missing; exit code 3."""


# ---- configuration ----

def _gen_to_dict(cfg: GenConfig) -> dict:
    out = {}
    for field in dataclasses.fields(cfg):
        value = getattr(cfg, field.name)
        out[field.name] = list(value) if isinstance(value, tuple) else value
    return out


def default_config() -> dict:
    return {
        "seed": 0,
        "run_dir": "run",
        "data_dir": "data",
        "port": 8765,
        "ui_dir": None,
        "target_spacing": [0.72, 0.72, 3.0],
        "pretrain_epochs": 4,
        "overlay_opacity": 0.5,
        "tta": {"q": 32, "k": 3},
        "sim": {"hi": 0.5, "lo": 0.2, "rater": "sim"},
        "gen": _gen_to_dict(GenConfig()),
        "model": ModelConfig().to_json_dict(),
        "train": TrainConfig().to_json_dict(),
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be "
                                  f"an object")
            out[key] = _merge(base[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def env_overrides(environ) -> dict:
    """ATTNAGREE_TTA__Q=4 -> {"tta": {"q": 4}}; values parse as JSON when
    possible, else stay strings (paths)."""
    tree: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = name[len(ENV_PREFIX):].lower().split("__")
        raw = environ[name]
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value
    return tree


def config_hash_of(resolved: dict) -> str:
    payload = {k: v for k, v in resolved.items() if k not in _UNHASHED_KEYS}
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    resolved: dict
    config_hash: str
    seed: int
    run_dir: Path
    data_dir: Path
    port: int
    ui_dir: Path | None
    target_spacing: tuple
    pretrain_epochs: int
    overlay_opacity: float
    tta_q: int
    tta_k: int
    sim_hi: float
    sim_lo: float
    rater: str
    gen: GenConfig
    model: ModelConfig
    train: TrainConfig


def _build_section(ctor, raw: dict, section: str):
    try:
        cfg = ctor(raw)
        cfg.validate()
        return cfg
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def _gen_from_dict(raw: dict) -> GenConfig:
    kwargs = dict(raw)
    if "spacing" in kwargs:
        kwargs["spacing"] = tuple(kwargs["spacing"])
    return GenConfig(**kwargs)


def resolve_config(config_path=None, environ=None, run_dir=None,
                   seed=None, port=None, ui_dir=None) -> RunConfig:
    resolved = default_config()
    if config_path is not None:
        try:
            with open(config_path) as fh:
                file_cfg = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: "
                              f"{exc}")
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        resolved = _merge(resolved, file_cfg)
    resolved = _merge(resolved, env_overrides(environ or os.environ))
    flags = {k: v for k, v in
             (("run_dir", run_dir), ("seed", seed), ("port", port),
              ("ui_dir", ui_dir))
             if v is not None}
    resolved = _merge(resolved, flags)

    if not isinstance(resolved["seed"], int) or resolved["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, "
                          f"got {resolved['seed']!r}")
    # the master seed drives every phase; per-phase rng streams are
    # domain-separated downstream
    resolved["train"]["seed"] = resolved["seed"]

    if not isinstance(resolved["port"], int) or not 0 <= resolved["port"] <= 65535:
        raise ConfigError(f"port must lie in [0, 65535], "
                          f"got {resolved['port']!r}")
    if resolved["ui_dir"] is not None and (
            not isinstance(resolved["ui_dir"], str) or not resolved["ui_dir"]):
        raise ConfigError(f"ui_dir must be a directory path or null, "
                          f"got {resolved['ui_dir']!r}")
    tta = resolved["tta"]
    if tta["q"] < 1 or tta["k"] < 0:
        raise ConfigError(f"tta needs q >= 1 and k >= 0, got {tta}")
    sim = resolved["sim"]
    if not 0.0 <= sim["lo"] < sim["hi"]:
        raise ConfigError(f"sim thresholds need 0 <= lo < hi, got {sim}")
    if not 0.0 <= resolved["overlay_opacity"] <= 1.0:
        raise ConfigError("overlay_opacity must lie in [0, 1]")
    if resolved["pretrain_epochs"] < 1:
        raise ConfigError("pretrain_epochs must be >= 1")

    gen = _build_section(_gen_from_dict, resolved["gen"], "gen")
    model = _build_section(ModelConfig.from_json_dict, resolved["model"],
                           "model")
    train_cfg = _build_section(TrainConfig.from_json_dict, resolved["train"],
                               "train")
    run_root = Path(resolved["run_dir"])
    data_dir = Path(resolved["data_dir"])
    if not data_dir.is_absolute():
        data_dir = run_root / data_dir
    return RunConfig(
        resolved=resolved, config_hash=config_hash_of(resolved),
        seed=resolved["seed"], run_dir=run_root, data_dir=data_dir,
        port=resolved["port"],
        ui_dir=Path(resolved["ui_dir"]) if resolved["ui_dir"] else None,
        target_spacing=tuple(resolved["target_spacing"]),
        pretrain_epochs=resolved["pretrain_epochs"],
        overlay_opacity=resolved["overlay_opacity"],
        tta_q=tta["q"], tta_k=tta["k"], sim_hi=sim["hi"], sim_lo=sim["lo"],
        rater=sim["rater"], gen=gen, model=model, train=train_cfg)


class RunPaths:
    def __init__(self, cfg: RunConfig):
        self.root = cfg.run_dir
        self.data = cfg.data_dir
        self.config = self.root / "config.json"
        self.manifest = self.data / "manifest.json"
        self.pretrain_metrics = self.root / "pretrain_metrics.csv"
        self.pretrained_checkpoint = self.root / "checkpoint_pretrained.mmtc"
        self.train_metrics = self.root / "train_metrics.csv"
        self.checkpoint = self.root / "checkpoint.mmtc"
        self.train_summary = self.root / "train_summary.json"
        self.results = self.root / "results.csv"
        self.explain_dir = self.root / "explain"
        self.maps = self.explain_dir / "maps.json"
        self.overlays = self.explain_dir / "overlays"
        self.ranking = self.root / "ranking.json"
        self.scores = self.root / "scores.csv"
        self.estimators_dir = self.root / "estimators"
        self.report_dir = self.root / "report"

    def estimator(self, kind: str) -> Path:
        return self.estimators_dir / f"{kind}.json"


def ensure_run_dir(cfg: RunConfig, paths: RunPaths) -> None:
    paths.root.mkdir(parents=True, exist_ok=True)
    if paths.config.exists():
        with open(paths.config) as fh:
            stored = json.load(fh)
        if stored.get("config_hash") != cfg.config_hash:
            raise ConfigError(
                f"run dir {paths.root} holds config hash "
                f"{stored.get('config_hash')}, current config hashes to "
                f"{cfg.config_hash}")
        return
    # deployment keys (run_dir, data_dir, port, ui_dir) stay out so two runs
    # of the same experiment compare byte-identical
    payload = {k: v for k, v in cfg.resolved.items()
               if k not in _UNHASHED_KEYS}
    with open(paths.config, "w") as fh:
        json.dump({"config_hash": cfg.config_hash, "config": payload},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require(path: Path, step: str, producer: str) -> None:
    if not path.exists():
        raise PrerequisiteError(f"step {step!r} requires {path} "
                                f"(run {producer!r} first)")


def _check_artifact_hash(found: str, path, cfg: RunConfig) -> None:
    if found != cfg.config_hash:
        raise ConfigError(f"{path} was produced under config hash {found!r}, "
                          f"current config hashes to {cfg.config_hash!r}")


def _csv_hash_comment(path) -> str:
    with open(path) as fh:
        first = fh.readline().strip()
    if first.startswith("# config_hash="):
        return first[len("# config_hash="):]
    return ""


# ---- case preparation ----

def _prepared_volume(cfg: RunConfig, data_dir, record: dict):
    vol = case_volume(data_dir, record)
    return resample_volume(normalize_volume(vol), cfg.target_spacing)


def _load_cases(cfg: RunConfig, paths: RunPaths, manifest: dict,
                splits) -> dict:
    stats = numeric_feature_stats(cases_for_split(manifest, "train"))
    out = {}
    for split in splits:
        bucket = []
        for record in cases_for_split(manifest, split):
            vol = _prepared_volume(cfg, paths.data, record)
            features = encode_features(record["features"], stats)
            bucket.append(TrainCase(record["case_id"], vol, features,
                                    record["label"]))
        out[split] = bucket
    return out


def _load_manifest_checked(cfg: RunConfig, paths: RunPaths, step: str) -> dict:
    _require(paths.manifest, step, "gen-data")
    manifest = load_manifest(paths.manifest)
    _check_artifact_hash(manifest.get("config_hash", ""), paths.manifest, cfg)
    return manifest


# ---- steps ----

def step_gen_data(cfg: RunConfig, paths: RunPaths) -> None:
    generate_dataset(cfg.gen, cfg.seed, paths.data,
                     config_hash=cfg.config_hash)


def step_pretrain(cfg: RunConfig, paths: RunPaths) -> None:
    manifest = _load_manifest_checked(cfg, paths, "pretrain")
    volumes = [_prepared_volume(cfg, paths.data, record)
               for record in pretrain_cases(manifest)]
    model = Model(cfg.model, seed=cfg.seed)
    pretrain_cfg = dataclasses.replace(cfg.train, epochs=cfg.pretrain_epochs)
    rows = pretrain(model, volumes, pretrain_cfg)
    write_metrics_csv(rows, paths.pretrain_metrics,
                      config_hash=cfg.config_hash)
    save_checkpoint(model, paths.pretrained_checkpoint,
                    extra={"config_hash": cfg.config_hash,
                           "phase": "image-pretrain"})


def step_train(cfg: RunConfig, paths: RunPaths) -> None:
    manifest = _load_manifest_checked(cfg, paths, "train")
    _require(paths.pretrained_checkpoint, "train", "pretrain")
    model, extra = load_checkpoint(paths.pretrained_checkpoint)
    _check_artifact_hash(extra.get("config_hash", ""),
                         paths.pretrained_checkpoint, cfg)
    splits = _load_cases(cfg, paths, manifest, ("train", "validation"))
    summary, rows = train(model, splits["train"], splits["validation"],
                          cfg.train)
    write_metrics_csv(rows, paths.train_metrics, config_hash=cfg.config_hash)
    save_checkpoint(model, paths.checkpoint,
                    extra={"config_hash": cfg.config_hash, "phase": "fused",
                           **summary})
    with open(paths.train_summary, "w") as fh:
        json.dump({"config_hash": cfg.config_hash, **summary}, fh,
                  indent=2, sort_keys=True)
        fh.write("\n")


def _load_model_checked(cfg: RunConfig, paths: RunPaths, step: str) -> Model:
    _require(paths.checkpoint, step, "train")
    model, extra = load_checkpoint(paths.checkpoint)
    _check_artifact_hash(extra.get("config_hash", ""),
                         paths.checkpoint, cfg)
    return model


def step_infer(cfg: RunConfig, paths: RunPaths) -> None:
    manifest = _load_manifest_checked(cfg, paths, "infer")
    model = _load_model_checked(cfg, paths, "infer")
    splits = _load_cases(cfg, paths, manifest, ("validation", "test"))
    results = infer_splits(model, splits, cfg.tta_q, cfg.tta_k, cfg.seed)
    write_results_csv(results, paths.results, config_hash=cfg.config_hash)


def step_explain(cfg: RunConfig, paths: RunPaths) -> None:
    manifest = _load_manifest_checked(cfg, paths, "explain")
    model = _load_model_checked(cfg, paths, "explain")
    splits = _load_cases(cfg, paths, manifest, ("validation", "test"))
    paths.overlays.mkdir(parents=True, exist_ok=True)
    crop_hwt = (cfg.model.input_h, cfg.model.input_w, cfg.model.input_t)
    maps_json = {}
    for split in ("validation", "test"):
        for case in splits[split]:
            maps = explain(model, case, target=1)
            maps_json[case.case_id] = maps_to_json_dict(maps)
            crop = crop_at(case.volume.voxels, case.volume.bbox_center(),
                           crop_hwt)
            heat = upsample_heatmap(maps.patch_relevance, cfg.model)
            save_overlays(case.case_id, crop, heat, paths.overlays,
                          cfg.overlay_opacity)
    with open(paths.maps, "w") as fh:
        json.dump({"config_hash": cfg.config_hash, "maps": maps_json},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_maps_checked(cfg: RunConfig, paths: RunPaths, step: str) -> dict:
    _require(paths.maps, step, "explain")
    with open(paths.maps) as fh:
        stored = json.load(fh)
    _check_artifact_hash(stored.get("config_hash", ""), paths.maps, cfg)
    return {cid: maps_from_json_dict(raw)
            for cid, raw in stored["maps"].items()}


def reference_ranking(manifest: dict) -> list:
    """The simulated consensus: features ordered by the generator's true
    effect sizes, descending; ties fall back to schema order."""
    effects = manifest["effect_sizes"]
    index = {name: i for i, name in enumerate(FEATURE_NAMES)}
    return sorted(effects, key=lambda name: (-effects[name], index[name]))


def step_score_sim(cfg: RunConfig, paths: RunPaths) -> None:
    manifest = _load_manifest_checked(cfg, paths, "score-sim")
    maps_by_case = _load_maps_checked(cfg, paths, "score-sim")
    save_ranking(reference_ranking(manifest), paths.ranking)
    crop_hwt = (cfg.model.input_h, cfg.model.input_w, cfg.model.input_t)
    rows = []
    for split in ("validation", "test"):
        for record in cases_for_split(manifest, split):
            vol = _prepared_volume(cfg, paths.data, record)
            band = case_band_mask(manifest, vol)
            band_crop = crop_at(band.astype(np.float64), vol.bbox_center(),
                                crop_hwt) >= 0.5
            score = simulate_image_score(maps_by_case[record["case_id"]],
                                         band_crop, cfg.model,
                                         hi=cfg.sim_hi, lo=cfg.sim_lo)
            rows.append((record["case_id"], score, cfg.rater, SIM_TIMESTAMP))
    write_scores_csv(rows, paths.scores)


def _load_agreements(cfg: RunConfig, paths: RunPaths, step: str,
                     results) -> dict:
    _require(paths.scores, step, "score-sim")
    _require(paths.ranking, step, "score-sim")
    maps_by_case = _load_maps_checked(cfg, paths, step)
    ranking = load_ranking(paths.ranking)
    records, _full = ingest_scores(paths.scores, maps_by_case, ranking,
                                   known_case_ids=[r.case_id for r in results])
    return records


def _meta_row(result, record) -> MetaFeatures:
    return MetaFeatures(sigma_prob=result.variance,
                        alpha_image=record.alpha_image,
                        alpha_table=record.alpha_table,
                        correctness=result.correctness)


def step_fit_estimators(cfg: RunConfig, paths: RunPaths) -> None:
    _require(paths.results, "fit-estimators", "infer")
    _check_artifact_hash(_csv_hash_comment(paths.results), paths.results, cfg)
    results = read_results_csv(paths.results)
    records = _load_agreements(cfg, paths, "fit-estimators", results)
    val_results = [r for r in results if r.split == "validation"]
    missing = [r.case_id for r in val_results if r.case_id not in records]
    if missing:
        raise PrerequisiteError(f"validation cases without scores: {missing} "
                                f"(run 'score-sim' or close a scoring "
                                f"session first)")
    rows = [_meta_row(r, records[r.case_id]) for r in val_results]
    models = fit_both(rows)
    paths.estimators_dir.mkdir(parents=True, exist_ok=True)
    for kind in ESTIMATOR_KINDS:
        with open(paths.estimator(kind), "w") as fh:
            json.dump({"config_hash": cfg.config_hash,
                       "model": model_to_json_dict(models[kind])},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")


def step_evaluate(cfg: RunConfig, paths: RunPaths) -> None:
    _require(paths.results, "evaluate", "infer")
    _check_artifact_hash(_csv_hash_comment(paths.results), paths.results, cfg)
    results = read_results_csv(paths.results)
    records = _load_agreements(cfg, paths, "evaluate", results)
    estimators = {}
    for kind in ESTIMATOR_KINDS:
        _require(paths.estimator(kind), "evaluate", "fit-estimators")
        with open(paths.estimator(kind)) as fh:
            stored = json.load(fh)
        _check_artifact_hash(stored.get("config_hash", ""),
                             paths.estimator(kind), cfg)
        estimators[kind] = model_from_json_dict(stored["model"])

    test_results = [r for r in results if r.split == "test"]
    missing = [r.case_id for r in test_results if r.case_id not in records]
    if missing:
        raise PrerequisiteError(f"test cases without scores: {missing}")
    results_by_split = {
        "validation": [r for r in results if r.split == "validation"],
        "test": test_results,
    }
    uncertainty_by_kind = {
        kind: {r.case_id: uncertainty_score(model,
                                            _meta_row(r, records[r.case_id]))
               for r in test_results}
        for kind, model in estimators.items()
    }
    seeds = {"master": cfg.seed, "data": cfg.seed, "train": cfg.train.seed,
             "tta": cfg.seed}
    report = build_report(results_by_split, records, uncertainty_by_kind,
                          cfg.config_hash, seeds)
    paths.report_dir.mkdir(parents=True, exist_ok=True)
    write_report(report, paths.report_dir)


def step_serve(cfg: RunConfig, paths: RunPaths) -> None:
    from . import service

    manifest = _load_manifest_checked(cfg, paths, "serve")
    maps_by_case = _load_maps_checked(cfg, paths, "serve")
    case_ids = [record["case_id"] for split in ("validation", "test")
                for record in cases_for_split(manifest, split)]
    ranking = (load_ranking(paths.ranking) if paths.ranking.exists()
               else list(FEATURE_NAMES))
    static_dir = cfg.ui_dir
    if static_dir is not None and not (static_dir / "index.html").is_file():
        raise ConfigError(f"ui_dir {static_dir} has no index.html "
                          f"(build the scoring UI first)")
    server = service.make_server(
        maps_by_case=maps_by_case, case_ids=case_ids, ranking=ranking,
        overlays_dir=paths.overlays, scores_path=paths.scores,
        ranking_path=paths.ranking, seed=cfg.seed, port=cfg.port,
        static_dir=static_dir)
    host, port = server.server_address[:2]
    ui_note = " + UI bundle" if static_dir is not None else ""
    print(f"scoring service on http://{host}:{port}/ "
          f"({len(case_ids)} cases queued{ui_note})", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pending = server.session.pending_count()
        if pending:
            print(f"interrupted with {pending} unflushed scores; "
                  f"POST /api/session/close persists them", file=sys.stderr)
    finally:
        server.server_close()


_STEP_FUNCS = {
    "gen-data": step_gen_data,
    "pretrain": step_pretrain,
    "train": step_train,
    "infer": step_infer,
    "explain": step_explain,
    "score-sim": step_score_sim,
    "serve": step_serve,
    "fit-estimators": step_fit_estimators,
    "evaluate": step_evaluate,
}


def run_step(step: str, cfg: RunConfig) -> None:
    if step not in STEPS:
        raise ConfigError(f"unknown step {step!r}")
    paths = RunPaths(cfg)
    ensure_run_dir(cfg, paths)
    sequence = ALL_SEQUENCE if step == "all" else (step,)
    for name in sequence:
        _STEP_FUNCS[name](cfg, paths)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="attnagree",
        description="volume+tabular pipeline: data generation through "
                    "uncertainty evaluation")
    parser.add_argument("step", choices=STEPS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--run-dir", help="run directory (artifact root)")
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--port", type=int, help="scoring service port")
    parser.add_argument("--ui", dest="ui_dir",
                        help="built scoring-UI bundle to serve at / "
                             "(serve step only)")
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(config_path=args.config, run_dir=args.run_dir,
                             seed=args.seed, port=args.port,
                             ui_dir=args.ui_dir)
        run_step(args.step, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except PrerequisiteError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
