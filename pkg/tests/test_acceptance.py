"""The ten acceptance criteria, each timed and reported as one PASS/FAIL line."""

import contextlib
import json
import time

import joblib
import numpy as np
import torch

from artifactqc import metrics
from artifactqc.cli import EXIT_OK, main
from artifactqc.core import Architecture
from artifactqc.data import make_kfold, read_image, write_image
from artifactqc.pipeline import run_pipeline
from artifactqc.segmentation.models import DoubleUNet, ResidualBlock, build_model
from artifactqc.segmentation.schedule import replay_early_stop, replay_plateau
from artifactqc.severity import select_base_models
from artifactqc.stacking import META_KINDS, MetaLearnerKind, fit_meta_learner, make_meta_features, make_meta_learner
from artifactqc.synthetic import synthetic_slide

import conftest
from conftest import IndexedBase, noisy_base, one_hot
from oracles import dice, mean_iou, pairwise_auc, precision_recall, soft_iou
from test_data import manifest_of
from test_metrics import random_pairs
from test_models import finite_difference_check, tensor_batch
from test_severity import seven_way_tie
from test_stacking import majority_oracle


@contextlib.contextmanager
def criterion(number, title, limit_s, extra_seconds=0.0):
    """Time the body, enforce ``limit_s`` and record a PASS/FAIL line."""
    start = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - start + extra_seconds
        assert elapsed < limit_s, f"took {elapsed:.1f}s, limit {limit_s}s"
    except BaseException as exc:
        elapsed = time.perf_counter() - start + extra_seconds
        conftest.ACCEPTANCE_LINES[number] = f"FAIL {number:2d} {title} ({elapsed:.2f}s): {exc}"
        print(conftest.ACCEPTANCE_LINES[number])
        raise
    conftest.ACCEPTANCE_LINES[number] = f"PASS {number:2d} {title} ({elapsed:.2f}s)"
    print(conftest.ACCEPTANCE_LINES[number])


def test_01_metric_oracle():
    with criterion(1, "metric oracle on 200 random 16x16 pairs", 5):
        for pred, truth in random_pairs(200):
            assert pred.shape == (16, 16)
            assert abs(metrics.dice_coef(pred, truth) - dice(pred, truth)) <= 1e-9
            assert abs(metrics.soft_iou(pred, truth) - soft_iou(pred, truth)) <= 1e-9
            assert abs(metrics.mean_iou(pred, truth) - mean_iou(pred, truth)) <= 1e-9
            p, r = metrics.precision_recall(pred, truth)
            op, orr = precision_recall(pred, truth)
            assert abs(p - op) <= 1e-9 and abs(r - orr) <= 1e-9


def test_02_fifty_eight_of_sixty():
    with criterion(2, "58 of 60 above 0.90 gives 96.66%", 1):
        acc = metrics.thresholded_accuracy([0.97] * 58 + [0.9, 0.42], 0.90)
        assert acc == 58 / 60
        assert f"{int(acc * 1e4) / 100:.2f}" == "96.66"


def test_03_scheduler_traces():
    with criterion(3, "plateau and early-stop traces", 1):
        trace = replay_plateau([1.0, 0.9, 0.95, 0.96, 0.97, 0.98], lr=1e-4, patience=4, factor=0.1)
        assert trace[:5] == [1e-4] * 5 and abs(trace[5] - 1e-5) <= 1e-17
        long = replay_plateau([1.0] * 21, lr=1e-4, patience=4, factor=0.1)
        assert abs(long[-1] - 1e-9) <= 1e-21
        assert replay_plateau([1.0] * 21, lr=1e-4) == long
        assert replay_early_stop([3.0, 2.0, 1.0] + [1.0] * 10 + [0.5], patience=10) == 13
        assert replay_early_stop([1.0] + [1.0] * 9, patience=10) is None


def test_04_architecture_checks():
    with criterion(4, "architecture identities and gradient checks", 120):
        torch.manual_seed(0)
        net = DoubleUNet(0.125).eval()
        x = tensor_batch(2, 32, seed=4)
        with torch.no_grad():
            outs = net(x)
            parts = net.forward_intermediates(x, out1_override=torch.ones(2, 1, 32, 32))
        assert len(outs) == 2 and all(o.shape == (2, 1, 32, 32) for o in outs)
        assert torch.equal(parts["gated_input"], x)

        block = ResidualBlock(8, 8).eval()
        with torch.no_grad():
            block.last_conv.weight.zero_()
            block.last_conv.bias.zero_()
            h = torch.randn(2, 8, 16, 16)
            assert torch.equal(block(h), h)

        for arch, side in [(Architecture.DOUBLE_UNET, 32), (Architecture.RESUNET_PP, 16)]:
            torch.manual_seed(1)
            model = build_model(arch, (side, side, 3), 0.125)
            truth = (tensor_batch(2, side, seed=3)[:, :1] > 0.5).float()
            gap = finite_difference_check(model.network, tensor_batch(2, side, seed=2), truth, n_params=8)
            assert gap <= 1e-3, f"{arch.value} relative gradient gap {gap:.2e}"


def test_05_overfit(overfit_resunet, overfit_double_unet, overfit_data):
    trained = {"resunet_pp": overfit_resunet, "double_unet": overfit_double_unet}
    fixture_seconds = sum(t for _, _, t in trained.values())
    images, masks = overfit_data
    with criterion(5, "overfit 8 blob tiles to soft IOU >= 0.9", 600, extra_seconds=fixture_seconds):
        from artifactqc.segmentation.training import predict_proba_maps

        assert len(images) == 8
        for name, (model, history, _) in trained.items():
            assert model.width_scale == 0.125 and len(history.records) <= 200
            probs = predict_proba_maps(model, images)
            score = np.mean([metrics.soft_iou(p, m) for p, m in zip(probs, masks)])
            assert score >= 0.9, f"{name} soft IOU {score:.4f}"


def test_06_fold_properties():
    with criterion(6, "make_kfold(600, 6)", 1):
        manifest = manifest_of(600)
        plan = make_kfold(manifest, 6, seed=0)
        assert [len(f) for f in plan.folds] == [100] * 6
        flat = [i for f in plan.folds for i in f]
        assert len(set(flat)) == 600 and sorted(flat) == manifest.ids
        tested = [i for rot in plan.rotations(n_valid=60) for i in rot.test_ids]
        assert sorted(tested) == manifest.ids


def test_07_roc_oracle():
    with criterion(7, "ROC AUC against pairwise counting", 5):
        rng = np.random.default_rng(7)
        for _ in range(50):
            n = int(rng.integers(4, 40))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            scores = np.round(rng.random(n), 1)
            assert abs(metrics.roc_auc_binary(scores, labels) - pairwise_auc(scores.tolist(), labels.tolist())) <= 1e-12
        assert metrics.roc_auc_binary([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
        assert metrics.roc_auc_binary([0.4] * 8, [0, 1] * 4) == 0.5
        rng = np.random.default_rng(9)
        assert abs(metrics.roc_auc_binary(rng.random(10000), rng.integers(0, 2, 10000)) - 0.5) <= 0.05


def test_08_selection_rule():
    with criterion(8, "seven-way tie selection", 1):
        results = seven_way_tie()
        reference = select_base_models(results, 6)
        dropped = max(results[:7], key=lambda r: r.val_loss)
        assert dropped not in reference and len(reference) == 6
        assert all(r.test_accuracy == results[0].test_accuracy for r in reference)
        rng = np.random.default_rng(0)
        for _ in range(20):
            shuffled = [results[i] for i in rng.permutation(len(results))]
            assert select_base_models(shuffled, 6) == reference


def test_09_stacking_properties():
    with criterion(9, "stacking on perfect and 80% bases", 120):
        labels = np.random.default_rng(0).integers(0, 3, 300)
        perfect = [IndexedBase(one_hot(labels), f"p{i}") for i in range(3)]
        feats = make_meta_features(perfect, np.arange(300), labels)
        for kind in META_KINDS:
            accuracy = np.mean(fit_meta_learner(kind, feats, seed=0).predict(feats.features) == labels)
            floor = 0.999 if kind is MetaLearnerKind.GB_REGRESSOR else 1.0
            assert accuracy >= floor, f"{kind.value}: {accuracy}"

        rng = np.random.default_rng(2024)
        n, half = 10000, 5000
        labels = rng.integers(0, 3, n)
        votes = [noisy_base(labels, 0.8, rng) for _ in range(3)]
        bases = [IndexedBase(v, f"b{i}") for i, v in enumerate(votes)]
        feats = make_meta_features(bases, np.arange(n), labels)
        meta = make_meta_learner("logistic_regression").fit(feats.features[:half], labels[:half])
        stacked = np.mean(meta.predict(feats.features[half:]) == labels[half:])
        best_single = max(np.mean(v[half:].argmax(axis=1) == labels[half:]) for v in votes)
        oracle = majority_oracle(np.hstack(votes)[half:], labels[half:])
        assert stacked >= best_single, f"stacked {stacked:.4f} < best base {best_single:.4f}"
        assert stacked >= oracle - 0.01


def test_10_end_to_end_run(tmp_path, overfit_resunet, desk_stack):
    model, _, _ = overfit_resunet
    with criterion(10, "end-to-end run on a 512x512 slide", 60):
        image, _ = synthetic_slide([[None, 0.3], [0.04, 0.14]], tile_side=256, seed=11)
        write_image(image, tmp_path / "slide.png")
        model.save(tmp_path / "resunet.npz")
        joblib.dump(desk_stack, tmp_path / "stack.joblib")
        argv = ["run", "--image", str(tmp_path / "slide.png"), "--seg", f"tissue_fold={tmp_path / 'resunet.npz'}",
                "--stack", str(tmp_path / "stack.joblib"), "--tile", "256"]
        assert main(argv + ["--out", str(tmp_path / "a")]) == EXIT_OK
        assert main(argv + ["--out", str(tmp_path / "b")]) == EXIT_OK

        verdicts = [json.loads(line) for line in (tmp_path / "a" / "verdicts.jsonl").read_text().splitlines()]
        assert len(verdicts) == 4
        assert [v["decision"] for v in verdicts] == ["retain", "exclude_region", "retain", "flag_slide_prep"]

        files = sorted(p.name for p in (tmp_path / "a").iterdir())
        assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

        source = read_image(tmp_path / "slide.png")
        report = run_pipeline(source, {"tissue_fold": model}, desk_stack, tile_side=256)
        for v, mask in zip(verdicts, report.masks):
            x, y = v["origin"]
            tile = np.rint(source[y : y + 256, x : x + 256] * 255).astype(np.uint8)
            overlay = np.rint(read_image(tmp_path / "a" / f"{v['tile_id']}_overlay.png") * 255).astype(np.uint8)
            changed = np.any(overlay != tile, axis=-1)
            np.testing.assert_array_equal(changed, mask.astype(bool))
            assert changed.mean() == v["artifact_fraction"]
