"""Acceptance gates, one test per shipped guarantee.

Tolerances here are promises rather than measurements: value fixtures at
1e-12, gradients at 1e-4 against h=1e-5 central differences, statistics
against references computed with independent tools. The pipeline fixtures
drive the real CLI end to end, so this file doubles as the final smoke
test of the command surface.
"""

import hashlib
import json
import math
import time
from itertools import permutations

import numpy as np
import pytest

import attnagree.autodiff as ad
from attnagree.cli import RunPaths, _load_cases, resolve_config, run_step
from attnagree.data import Volume, load_manifest
from attnagree.inference import InferenceResult, tta_predict
from attnagree.model import Model, ModelConfig, load_checkpoint
from attnagree.relevance import explain, propagate_stack
from attnagree.stats import paired_one_sided_t, pearson, roc_auc, spearman
from attnagree.training import (
    TrainCase,
    TrainConfig,
    bce_loss,
    combined_loss,
    cosine_loss,
    triplet_loss,
)
from attnagree.uncertainty import fit_logistic

from _oracles import FD_REL_TOL, FD_STEP, assert_grads_close, finite_diff


# ---- pipeline fixtures ----

# Labels carried by the image alone: two patch-scale node blobs, no benign
# texture, no distractors, tabular effects zeroed. The classifier then has
# to read the volume, which gives patch masking a concrete target. Trained
# without augmentations at a learning rate that converges in 25 epochs.
IMAGE_DRIVEN_CONFIG = {
    "seed": 0,
    "gen": {
        "n_train": 160, "n_validation": 20, "n_test": 80,
        "node_amp_lo": 9.0, "node_amp_hi": 13.0,
        "node_blobs_lo": 2, "node_blobs_hi": 2,
        "benign_rate": 0.0, "distractor_rate": 0.0,
        "tabular_effect_scale": 0.0,
    },
    "train": {"epochs": 25, "lr": 3e-3, "augmentations": []},
}


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    """A completed `all` pipeline on the default config, master seed 0."""
    run_dir = tmp_path_factory.mktemp("desk") / "run"
    cfg = resolve_config(environ={}, run_dir=str(run_dir))
    run_step("all", cfg)
    return run_dir


@pytest.fixture(scope="module")
def image_run(tmp_path_factory):
    """Image-driven pipeline through the explain step; returns (dir, seconds)."""
    run_dir = tmp_path_factory.mktemp("imgdrv") / "run"
    cfg_path = tmp_path_factory.mktemp("imgcfg") / "image_driven.json"
    cfg_path.write_text(json.dumps(IMAGE_DRIVEN_CONFIG))
    cfg = resolve_config(config_path=cfg_path, environ={}, run_dir=str(run_dir))
    start = time.perf_counter()
    for step in ("gen-data", "pretrain", "train", "explain"):
        run_step(step, cfg)
    return run_dir, cfg_path, time.perf_counter() - start


def _open_run(run_dir, config_path=None, splits=("validation", "test")):
    cfg = resolve_config(config_path=config_path, environ={},
                         run_dir=str(run_dir))
    paths = RunPaths(cfg)
    manifest = load_manifest(paths.manifest)
    return cfg, paths, _load_cases(cfg, paths, manifest, splits)


# ---- gradients ----

def _weighted(t, w):
    return ad.reduce_sum(ad.mul(t, ad.tensor(w)))


def _op_catalog(seed):
    """15 builds covering all 23 differentiable ops; fresh data per seed."""
    rng = np.random.default_rng(seed)
    a34 = rng.normal(size=(3, 4))
    b34 = rng.normal(size=(3, 4))
    b4 = rng.normal(size=(4,))
    # denominators and kink inputs kept away from the trouble spots so
    # central differences stay valid
    den = rng.normal(size=(3, 4)) + np.sign(rng.normal(size=(3, 4))) * 2.0
    off = rng.normal(size=(4, 5))
    off += np.sign(off) * 0.05
    m1 = rng.normal(size=(3, 5))
    m2 = rng.normal(size=(5, 4))
    ln_x = rng.normal(size=(4, 8))
    ln_g = rng.normal(size=(8,))
    ln_b = rng.normal(size=(8,))
    a66 = rng.normal(size=(6, 6))
    a45 = rng.normal(size=(4, 5))
    w34 = rng.normal(size=(3, 4))
    w44 = rng.normal(size=(4, 4))
    w45 = rng.normal(size=(4, 5))
    w48 = rng.normal(size=(4, 8))
    w66 = rng.normal(size=(6, 6))
    w20 = rng.normal(size=(20,))
    w5 = rng.normal(size=(5,))

    def dropout_build(ts, _s=seed):
        # reseeding per call keeps the mask constant under finite differences
        drop = np.random.default_rng(_s + 4000)
        return _weighted(ad.dropout(ts[0], 0.4, drop, training=True), w66)

    return [
        ("add", lambda ts: _weighted(ad.add(ts[0], ts[1]), w34), [a34, b4]),
        ("sub/neg/mul",
         lambda ts: _weighted(ad.mul(ad.sub(ts[0], ts[1]), ad.neg(ts[1])), w34),
         [a34, b34]),
        ("div", lambda ts: _weighted(ad.div(ts[0], ts[1]), w34), [a34, den]),
        ("smul/sadd",
         lambda ts: _weighted(ad.sadd(ad.smul(ts[0], 1.7), -0.4), w34), [a34]),
        ("matmul", lambda ts: _weighted(ad.matmul(ts[0], ts[1]), w34), [m1, m2]),
        ("transpose/reshape",
         lambda ts: _weighted(ad.reshape(ad.transpose(ts[0], (1, 0)), (20,)), w20),
         [a45]),
        ("concat/narrow",
         lambda ts: _weighted(ad.narrow(ad.concat([ts[0], ts[1]], axis=0), 0, 1, 5), w44),
         [a34, b34]),
        ("gather_rows/element",
         lambda ts: ad.add(ad.element(ts[0], (1, 2)),
                           _weighted(ad.gather_rows(ts[0], [2, 0, 1]), w34)),
         [a34]),
        ("relu", lambda ts: _weighted(ad.relu(ts[0]), w45), [off]),
        ("gelu", lambda ts: _weighted(ad.gelu(ts[0]), w45), [a45]),
        ("softmax", lambda ts: _weighted(ad.softmax(ts[0]), w34), [b34]),
        ("layer_norm",
         lambda ts: _weighted(ad.layer_norm(ts[0], ts[1], ts[2]), w48),
         [ln_x, ln_g, ln_b]),
        ("dropout", dropout_build, [a66]),
        ("reduce_sum/reduce_mean",
         lambda ts: ad.add(_weighted(ts[0], w45), ad.smul(ad.reduce_mean(ts[0]), 3.0)),
         [a45]),
        ("reduce_var/sqrt/log",
         lambda ts: _weighted(
             ad.log(ad.sadd(ad.sqrt(ad.reduce_var(ts[0], axis=0)), 0.5)), w5),
         [a45]),
    ]


def _check_build(name, build, arrays):
    tensors = [ad.tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = build(tensors)
    tape.backward(out)
    analytic = [t.grad for t in tensors]
    assert all(g is not None for g in analytic), f"{name}: missing gradient"

    def f():
        for t, a in zip(tensors, arrays):
            t.data = a
        return build(tensors).item()

    assert_grads_close(analytic, finite_diff(f, arrays))


def _check_model_trial(trial):
    """Spot-checks the full desk-scale model gradient at sampled coordinates."""
    rng = np.random.default_rng(1000 + trial)
    cfg = ModelConfig()
    model = Model(cfg, seed=trial)
    crop = rng.normal(size=(cfg.input_t, cfg.input_h, cfg.input_w))
    feats = [float(rng.normal()) if kind == "numeric" else int(rng.integers(card))
             for kind, card in cfg.feature_spec]

    def logit():
        return float(model.forward(crop, feats).logits.data[0, 1])

    with ad.Tape() as tape:
        out = ad.element(model.forward(crop, feats).logits, (0, 1))
    tape.backward(out)

    names = list(model.params)
    for _ in range(8):
        # skip coordinates whose gradient sits at the finite-difference
        # noise floor; h=1e-5 cannot resolve them
        for _attempt in range(1000):
            tensor = model.params[names[int(rng.integers(len(names)))]]
            if tensor.grad is None:
                continue
            idx = int(rng.integers(tensor.data.size))
            analytic = float(tensor.grad.ravel()[idx])
            if abs(analytic) >= 1e-5:
                break
        else:
            pytest.fail("no checkable gradient coordinate found")
        flat = tensor.data.ravel()
        orig = flat[idx]
        flat[idx] = orig + FD_STEP
        fp = logit()
        flat[idx] = orig - FD_STEP
        fm = logit()
        flat[idx] = orig
        numeric = (fp - fm) / (2.0 * FD_STEP)
        rel = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)
        assert rel < FD_REL_TOL
    model.zero_grad()


def test_gradients_match_finite_differences():
    """Every op and the full desk-scale model, 50 seeded trials, under 2 min."""
    start = time.perf_counter()
    trials = 0
    for seed in (0, 1, 2):
        for name, build, arrays in _op_catalog(seed):
            _check_build(name, build, arrays)
            trials += 1
    for trial in range(5):
        _check_model_trial(trial)
        trials += 1
    assert trials == 50
    assert time.perf_counter() - start < 120.0


# ---- token counts ----

def test_patch_and_fusion_token_counts():
    large = ModelConfig(input_h=192, input_w=192, input_t=64, patch=16)
    large.validate()
    assert large.n_patches == 576
    assert large.fusion_len == 596

    desk = ModelConfig()
    desk.validate()
    assert desk.n_patches == 32
    assert desk.fusion_len == 52

    # the forward pass must agree with the arithmetic
    model = Model(desk, seed=0)
    rng = np.random.default_rng(0)
    crop = rng.normal(size=(desk.input_t, desk.input_h, desk.input_w))
    feats = [float(rng.normal()) if kind == "numeric" else int(rng.integers(card))
             for kind, card in desk.feature_spec]
    art = model.forward(crop, feats)
    assert art.image_attention[-1].data.shape == (desk.n_heads, 33, 33)
    assert art.fusion_attention[-1].data.shape == (desk.n_heads, 52, 52)


# ---- loss values ----

def test_loss_fixtures_match_recomputation():
    anchor = ad.tensor(np.zeros((1, 2)))
    pos_near = ad.tensor(np.array([[0.2, 0.0]]))
    neg_near = ad.tensor(np.array([[0.5, 0.0]]))
    want = max(math.sqrt(0.2 ** 2) - math.sqrt(0.5 ** 2) + 1.0, 0.0)
    got = triplet_loss(anchor, pos_near, neg_near).item()
    assert abs(got - want) < 1e-12
    assert abs(got - 0.7) < 1e-12

    pos_same = ad.tensor(np.zeros((1, 2)))
    neg_far = ad.tensor(np.array([[2.0, 0.0]]))
    assert abs(triplet_loss(anchor, pos_same, neg_far).item()) < 1e-12

    half = ad.tensor(np.array(0.5))
    assert abs(bce_loss(half, 1).item() - math.log(2.0)) < 1e-12
    assert abs(bce_loss(half, 0).item() - math.log(2.0)) < 1e-12
    p9 = ad.tensor(np.array(0.9))
    want = 0.95 * math.log(1.0 / 0.9) + 0.05 * math.log(1.0 / 0.1)
    assert abs(bce_loss(p9, 1, label_smoothing=0.1).item() - want) < 1e-12

    aligned = ad.tensor(np.array([[0.0, 3.0]]))
    orthogonal = ad.tensor(np.array([[3.0, 0.0]]))
    opposite = ad.tensor(np.array([[0.0, -3.0]]))
    assert abs(cosine_loss(aligned, 1).item() - 0.0) < 1e-12
    assert abs(cosine_loss(orthogonal, 1).item() - 1.0) < 1e-12
    assert abs(cosine_loss(opposite, 1).item() - 2.0) < 1e-12

    # weighted combination against a plain-numpy recomputation
    defaults = TrainConfig()
    assert defaults.bce_weight == 1.0
    assert defaults.cosine_weight == 10.0
    batch_vals = [([[0.4, -0.3]], 1), ([[-1.25, 0.75]], 0), ([[0.5, 0.125]], 1)]
    batch = [(ad.tensor(np.array(lv)), lab) for lv, lab in batch_vals]
    got = combined_loss(batch, bce_weight=1.0, cosine_weight=10.0,
                        label_smoothing=0.1).item()
    bces, coses = [], []
    for lv, lab in batch_vals:
        z = np.asarray(lv, dtype=np.float64)[0]
        ez = np.exp(z - z.max())
        p_pos = ez[1] / ez.sum()
        target = lab * 0.9 + 0.05
        bces.append(-(target * np.log(p_pos) + (1.0 - target) * np.log(1.0 - p_pos)))
        coses.append(1.0 - z[lab] / np.linalg.norm(z))
    want = float(np.mean(bces) + 10.0 * np.mean(coses))
    assert abs(got - want) < 1e-12


# ---- test-time augmentation ----

def test_tta_disabled_variance_reproducibility_threshold(desk_run):
    model, _ = load_checkpoint(desk_run / "checkpoint.mmtc")
    _, _, splits = _open_run(desk_run)
    case = splits["test"][0]

    # augmentation off: every repetition sees the identical crop
    for q in (1, 2, 5, 17):
        res = tta_predict(model, case, q_reps=q, k_jitter=0, seed=11, flip=False)
        assert len(res.q_probs) == q
        assert res.variance == 0.0
        assert res.mean == res.max_prob

    first = tta_predict(model, case, q_reps=100, k_jitter=3, seed=0)
    second = tta_predict(model, case, q_reps=100, k_jitter=3, seed=0)
    assert first.q_probs == second.q_probs
    assert (first.mean, first.max_prob, first.variance, first.predicted) \
        == (second.mean, second.max_prob, second.variance, second.predicted)
    reseeded = tta_predict(model, case, q_reps=100, k_jitter=3, seed=1)
    assert reseeded.q_probs != first.q_probs

    # the decision is "at least 0.5", not "strictly above"
    at_half = InferenceResult.from_probs("t", "test", 1, [0.5, 0.5])
    assert at_half.predicted == 1
    below = float(np.nextafter(0.5, 0.0))
    assert InferenceResult.from_probs("t", "test", 0, [below]).predicted == 0
    spread = InferenceResult.from_probs("t", "test", 1, [0.2, 0.8])
    assert abs(spread.mean - 0.5) < 1e-12
    assert abs(spread.max_prob - 0.8) < 1e-12
    assert abs(spread.variance - 0.09) < 1e-12


# ---- relevance ----

def _zero_patches(case, patch_ids, mcfg):
    """Zeroes the voxels of the given patches, in volume coordinates."""
    vox = case.volume.voxels.copy()
    cz, cy, cx = case.volume.bbox_center()
    zs = cz - mcfg.input_t // 2
    ys = cy - mcfg.input_h // 2
    xs = cx - mcfg.input_w // 2
    ny, nx = mcfg.input_h // mcfg.patch, mcfg.input_w // mcfg.patch
    depth, height, width = vox.shape
    p = mcfg.patch
    for pid in patch_ids:
        pz, rem = divmod(int(pid), ny * nx)
        py, px = divmod(rem, nx)
        z0, y0, x0 = zs + pz * p, ys + py * p, xs + px * p
        vox[max(z0, 0):min(z0 + p, depth),
            max(y0, 0):min(y0 + p, height),
            max(x0, 0):min(x0 + p, width)] = 0.0
    vol = Volume(vox, case.volume.spacing, case.volume.bbox)
    return TrainCase(case.case_id, vol, case.features, case.label)


def test_relevance_normalization_propagation_and_masking(image_run):
    run_dir, cfg_path, build_seconds = image_run
    start = time.perf_counter()
    cfg, paths, splits = _open_run(run_dir, config_path=cfg_path)
    model, _ = load_checkpoint(paths.checkpoint)
    maps = json.loads(paths.maps.read_text())["maps"]

    # stored maps: nonnegative everywhere, peak exactly 1 unless degenerate
    assert len(maps) == 100
    for raw in maps.values():
        patch_rel = np.asarray(raw["patch_relevance"])
        feat_rel = np.asarray(raw["feature_relevance"])
        assert patch_rel.min() >= 0.0
        assert feat_rel.min() >= 0.0
        if not raw["degenerate_image"]:
            assert abs(patch_rel.max() - 1.0) < 1e-12
        if not raw["degenerate_table"]:
            assert abs(feat_rel.max() - 1.0) < 1e-12

    fresh = explain(model, splits["test"][0], target=1)
    assert fresh.patch_relevance.min() >= 0.0
    assert abs(fresh.patch_relevance.max() - 1.0) < 1e-12

    # two-block accumulation against a hand expansion: (I + A2)(I + A1)
    a1 = np.array([[0.25, 0.5], [0.125, 0.25]])
    a2 = np.array([[0.5, 0.25], [0.0625, 0.125]])
    want = np.array([[61 / 32, 17 / 16], [7 / 32, 23 / 16]])
    assert np.abs(propagate_stack([a1, a2]) - want).max() < 1e-12
    assert np.abs(propagate_stack([a1]) - (np.eye(2) + a1)).max() < 1e-12

    # masking: dropping the top-20% relevance patches must hurt the decision
    # probability more than dropping as many random patches. Repetitions stay
    # flip-free with one-voxel jitter so the augmentation-free model is
    # evaluated in distribution.
    mcfg = cfg.model
    n_p = mcfg.n_patches
    top_k = int(round(0.2 * n_p))

    def omega(case):
        return tta_predict(model, case, q_reps=8, k_jitter=1, seed=0,
                           flip=False)

    eligible = [case for split in ("validation", "test") for case in splits[split]
                if case.label == 1 and omega(case).predicted == 1]
    eligible.sort(key=lambda case: case.case_id)
    assert len(eligible) >= 30

    diffs = []
    for idx, case in enumerate(eligible):
        rel = np.asarray(maps[case.case_id]["patch_relevance"])
        top = np.argsort(rel, kind="stable")[::-1][:top_k]
        rng = np.random.default_rng([777, idx])
        rand = rng.choice(n_p, size=top_k, replace=False)
        drop_gap = omega(_zero_patches(case, rand, mcfg)).max_prob \
            - omega(_zero_patches(case, top, mcfg)).max_prob
        diffs.append(drop_gap)
    _, p_value = paired_one_sided_t(np.array(diffs))
    assert p_value < 0.05

    elapsed = build_seconds + (time.perf_counter() - start)
    assert elapsed < 600.0


# ---- statistics ----

def test_statistics_match_reference_fixtures():
    # rank correlation against the closed form on every n=6 permutation
    base = np.arange(1.0, 7.0)
    for perm in permutations(range(6)):
        shuffled = base[list(perm)]
        d2 = float(np.sum((base - shuffled) ** 2))
        assert abs(spearman(base, shuffled) - (1.0 - d2 / 35.0)) < 1e-12

    # scipy.stats.pearsonr reference
    i = np.arange(24)
    x = np.sin(i + 1.0)
    y = np.sin(2.0 * i + 3.0) + 0.5 * np.sin(i + 1.0)
    r, p = pearson(x, y)
    assert abs(r - 0.45738957437321537) < 1e-9
    assert abs(p - 0.024625016693266572) < 1e-6

    # statsmodels Logit maximum-likelihood reference
    j = np.arange(60)
    x1 = np.sin(0.7 * j + 0.3)
    x2 = np.cos(1.3 * j + 1.1)
    labels = ((0.8 * x1 + 0.5 * x2 + 0.9 * np.sin(3.1 * j)) > 0).astype(float)
    weights, intercept, diag = fit_logistic(np.column_stack([x1, x2]), labels)
    assert diag["converged"]
    assert abs(weights[0] - 1.9517128405392887) < 1e-4
    assert abs(weights[1] - 1.1980202340105375) < 1e-4
    assert abs(intercept - 0.24356763433073395) < 1e-4

    # tie-free AUC against exhaustive pair counting
    scores = np.sin(1.7 * np.arange(20) + 0.2)
    labels = np.array([1, 0, 0, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1, 0, 1, 0, 0, 1, 0])
    assert abs(roc_auc(labels, scores) - 0.37373737373737376) < 1e-12
    scores2 = np.cos(0.9 * np.arange(17) + 0.4)
    labels2 = np.array([0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0, 0])
    assert abs(roc_auc(labels2, scores2) - 0.59722222222222221) < 1e-12


# ---- end-to-end quality ----

def test_pipeline_quality_gates(desk_run):
    report = json.loads((desk_run / "report" / "report.json").read_text())

    assert report["split_metrics"]["test"]["auc"] >= 0.75

    uninformed = report["correlations"]["u_uninformed"]
    assert not uninformed["degenerate"]
    assert uninformed["r"] < 0.0
    assert uninformed["p"] < 0.05

    strat = report["stratified"]["uninformed"]
    assert strat[0]["fraction"] == 0.2
    assert strat[-1]["fraction"] == 1.0
    assert strat[0]["auc"] >= strat[-1]["auc"] + 0.05

    # comparison section: both estimators, both curve families
    informed = report["correlations"]["u_informed"]
    assert {"r", "p", "degenerate"} <= set(informed)
    n_test = report["split_metrics"]["test"]["n_cases"]
    for kind in ("uninformed", "informed"):
        assert len(report["cumulative"][kind]["curve"]) == n_test
        assert len(report["cumulative"][kind]["random"]) == n_test
        fractions = [row["fraction"] for row in report["stratified"][kind]]
        assert fractions == [0.2, 0.4, 0.6, 0.8, 1.0]


def test_rerun_is_byte_identical(desk_run, tmp_path_factory):
    again = tmp_path_factory.mktemp("desk_again") / "run"
    cfg = resolve_config(environ={}, run_dir=str(again))
    run_step("all", cfg)

    def tree(root):
        return {
            str(path.relative_to(root)):
                hashlib.sha256(path.read_bytes()).hexdigest()
            for path in sorted(root.rglob("*")) if path.is_file()
        }

    first, second = tree(desk_run), tree(again)
    assert sorted(first) == sorted(second)
    mismatched = [name for name in first if first[name] != second[name]]
    assert mismatched == []
