"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two training criteria run the real pipeline on the seeded synthetic
mosaic benchmark (200 mosaics of 96x96, six texture classes) and take a few
minutes each on a desktop CPU; everything else is fast.
"""

import math
from contextlib import contextmanager

import numpy as np
import pytest
from oracles import best_split_entropy, conv2d_reference

from texseg import cli, data, gradcheck, model, ops, train
from texseg.loss_metrics import LossConfig, balanced_accuracy, class_weights, pixel_loss
from texseg.model import NetworkConfig
from texseg.rng import substream
from texseg.tensor import UNLABELED


@contextmanager
def criterion(number, name):
    try:
        yield
    except BaseException:
        print(f"CRITERION {number} ({name}): FAIL")
        raise
    print(f"CRITERION {number} ({name}): PASS")


REDUCED_CONFIG = NetworkConfig(
    kernels_per_layer=16,
    dilation_schedule=[1, 1, 2, 3, 5, 8],
    num_dilated_layers=6,
)


@pytest.fixture(scope="session")
def mosaic_suite(tmp_path_factory):
    """Criterion 7 benchmark: 200 mosaics, 96x96, 6 classes, 30% unlabeled."""
    root = tmp_path_factory.mktemp("mosaics30")
    data.make_synthetic_manifest(root, seed=77, count=200, size=96,
                                 num_classes=6, unlabeled_fraction=0.3)
    return data.load_manifest(root / "manifest.json")


@pytest.fixture(scope="session")
def sparse_mosaic_suite(tmp_path_factory):
    """Criterion 8 benchmark: labels masked down to 20% coverage."""
    root = tmp_path_factory.mktemp("mosaics20")
    data.make_synthetic_manifest(root, seed=78, count=200, size=96,
                                 num_classes=6, unlabeled_fraction=0.8)
    return data.load_manifest(root / "manifest.json")


def test_criterion_1_parameter_counts(capsys):
    targets = {
        "Proposed": 1.30,
        "w/o concatenation": 0.93,
        "w/o InstanceNorm": 1.29,
        "16 kernels/layer": 0.47,
        "Exponential dilation": 1.03,
        "9 dilated layers": 1.18,
        "64 kernels/layer": 4.23,
    }
    with criterion(1, "parameter counts"):
        assert cli.main(["inspect", "--table2"]) == 0
        table = capsys.readouterr().out
        variants = {v.name: v for v in model.builtin_variants()}
        for name, expected_1e5 in targets.items():
            assert name in table
            count = model.param_count(model.build(variants[name].config, seed=0))
            assert abs(count - expected_1e5 * 1e5) <= 0.01 * expected_1e5 * 1e5, (
                f"{name}: {count} outside 1% of {expected_1e5}e5"
            )


def test_criterion_2_receptive_field():
    with criterion(2, "receptive field arithmetic"):
        assert model.receptive_field(NetworkConfig()) == 287
        assert model.receptive_field(NetworkConfig(dilation_schedule="ones")) == 21
        exponential = NetworkConfig(dilation_schedule=[1, 1, 2, 4, 8, 16, 32, 64], num_dilated_layers=8)
        assert model.receptive_field(exponential) == 257


def test_criterion_3_gradient_suite(capsys):
    with criterion(3, "gradient suite"):
        results = gradcheck.run_suite(seed=0)
        worst = max(r.error for r in results)
        assert worst <= 1e-5, f"worst relative error {worst}"
        assert any(r.name == "network.end_to_end" for r in results)
        assert cli.main(["gradcheck", "--seed", "0"]) == 0
        capsys.readouterr()


def test_criterion_4_op_oracles():
    with criterion(4, "op oracles"):
        rng = substream(101, "acc-conv")
        for dilation in (1, 2, 3, 5):
            x = rng.standard_normal((2, 7, 7))
            w = rng.standard_normal((3, 2, 3, 3))
            b = rng.standard_normal(3)
            got = ops.dilated_conv2d_forward(x, ops.ConvParams(w, b, dilation))
            assert np.abs(got - conv2d_reference(x, w, b, dilation)).max() <= 1e-6

        # exactness on integer-valued data: float sums are exact there, so
        # the group identity must hold bitwise
        from oracles import dihedral_reference

        xi = rng.integers(-8, 9, size=(2, 6, 5)).astype(np.float32)
        wi = rng.integers(-4, 5, size=(3, 2, 3, 3)).astype(np.float32)
        for op in range(8):
            p = ops.ConvParams(wi, None, 2)
            lhs = dihedral_reference(ops.dilated_conv2d_forward(xi, p), op)
            rhs = ops.dilated_conv2d_forward(
                dihedral_reference(xi, op), ops.ConvParams(dihedral_reference(wi, op), None, 2)
            )
            assert np.array_equal(lhs, rhs)

        x = (rng.standard_normal((3, 9, 9)) * 100.0).astype(np.float64)
        norm = ops.NormParams(gamma=0.5 + rng.random(3), beta=rng.standard_normal(3))
        base = ops.instance_norm_forward(x, norm)
        for a, b in [(0.1, 5.0), (10.0, -3.0)]:
            assert np.abs(ops.instance_norm_forward(a * x + b, norm) - base).max() <= 1e-5


def test_criterion_5_loss_identities():
    with criterion(5, "loss identities"):
        w6 = class_weights([1] * 6)
        uniform = np.full(6, 1 / 6)
        entropy = pixel_loss(uniform, UNLABELED, w6, LossConfig(alpha=1.0), w_u=1.0)
        assert abs(entropy - math.log(6)) <= 1e-6

        rng = substream(102, "acc-loss")
        probs = ops.softmax_channels(rng.standard_normal((6, 5, 5)))
        labels = rng.integers(0, 6, size=(5, 5)).astype(np.uint8)
        labels[rng.random((5, 5)) < 0.4] = UNLABELED
        roi = np.ones((5, 5), dtype=bool)
        from texseg.loss_metrics import image_loss

        total, sup, unsup, _ = image_loss(probs, labels, roi, w6, LossConfig(alpha=0.0))
        assert unsup == 0.0 and total == sup

        for _ in range(10):
            counts = rng.integers(0, 400, size=6)
            if not counts.any():
                continue
            w = class_weights(counts)
            assert abs(float(w.values @ counts) - float(counts.sum())) <= 1e-6

        cm = rng.integers(1, 40, size=(6, 6))
        scaled = cm.copy()
        scaled[3] *= 2
        assert balanced_accuracy(scaled) == pytest.approx(balanced_accuracy(cm))


def test_criterion_6_splitter():
    with criterion(6, "hill-climbing splitter"):
        rng = substream(103, "acc-split")
        dummy = [
            data.ManifestEntry(f"case{i}", None, None, None, rng.integers(0, 900, size=6))
            for i in range(172)
        ]
        manifest = data.DatasetManifest(classes=[f"k{j}" for j in range(6)], entries=dummy)
        split = data.hill_climb_split(manifest, 5, max_stale_iters=500, rng=substream(104, "s"))
        assert sorted(split.fold_sizes(), reverse=True) == [36, 34, 34, 34, 34]
        assert all(b > a for a, b in zip(split.accepted_scores, split.accepted_scores[1:]))

        toy_counts = substream(105, "toy").integers(0, 30, size=(6, 3))
        toy = data.DatasetManifest(
            classes=["a", "b", "c"],
            entries=[
                data.ManifestEntry(f"t{i}", None, None, None, toy_counts[i]) for i in range(6)
            ],
        )
        optimum = best_split_entropy(toy_counts, [3, 3])
        best = max(
            data.hill_climb_split(toy, 2, 300, substream(200 + r, "restart")).mean_entropy
            for r in range(20)
        )
        assert best == pytest.approx(optimum, abs=1e-9)


@pytest.fixture(scope="session")
def trained_fold(mosaic_suite):
    split = data.hill_climb_split(mosaic_suite, 5, 500, substream(77, "split"))
    settings = train.TrainSettings(
        learning_rate=5e-4, max_epochs=40, patience=50, seed=77, stop_at_metric=0.85
    )
    result = train.run_fold(mosaic_suite, split, 0, REDUCED_CONFIG, LossConfig(alpha=0.1), settings)
    return result


def test_criterion_7_desk_scale_learning(trained_fold):
    with criterion(7, "desk-scale learning"):
        assert trained_fold.epochs_run <= 40
        assert trained_fold.report.bacc >= 0.85, (
            f"held-out bacc {trained_fold.report.bacc:.4f} after {trained_fold.epochs_run} epochs"
        )


def test_criterion_8_semi_supervised_effect(sparse_mosaic_suite):
    with criterion(8, "semi-supervised effect"):
        split = data.hill_climb_split(sparse_mosaic_suite, 5, 500, substream(78, "split"))
        held = [data.load_record(sparse_mosaic_suite, c) for c in split.cases_in_fold(0)]
        entropy_at_init = train.mean_unlabeled_entropy(model.build(REDUCED_CONFIG, 78), held)

        results = {}
        for alpha in (0.1, 0.0):
            settings = train.TrainSettings(learning_rate=5e-4, max_epochs=8, patience=50, seed=78)
            results[alpha] = train.run_fold(
                sparse_mosaic_suite, split, 0, REDUCED_CONFIG, LossConfig(alpha=alpha), settings
            )
        bacc_semi = results[0.1].report.bacc
        bacc_supervised = results[0.0].report.bacc
        assert bacc_semi >= bacc_supervised - 0.01, (
            f"alpha=0.1 bacc {bacc_semi:.4f} vs alpha=0 bacc {bacc_supervised:.4f}"
        )
        entropy_at_convergence = train.mean_unlabeled_entropy(results[0.1].network, held)
        assert entropy_at_convergence < entropy_at_init, (
            f"unlabeled entropy {entropy_at_convergence:.4f} did not drop below "
            f"initialization {entropy_at_init:.4f}"
        )


def test_criterion_9_determinism_and_serialization(tmp_path_factory):
    with criterion(9, "determinism and serialization"):
        root = tmp_path_factory.mktemp("determinism")
        manifest = data.make_synthetic_manifest(root, seed=5, count=10, size=32,
                                                num_classes=6, unlabeled_fraction=0.3)
        split = data.hill_climb_split(manifest, 2, 50, substream(5, "split"))
        cfg = NetworkConfig(
            kernels_per_layer=4,
            dilation_schedule=[1, 2],
            num_dilated_layers=2,
            head_widths=[6],
            num_classes=6,
            dropout_rate=0.25,
        )
        settings = train.TrainSettings(learning_rate=1e-3, max_epochs=2, seed=5)
        paths = []
        for run in range(2):
            result = train.run_fold(manifest, split, 0, cfg, LossConfig(alpha=0.1), settings)
            path = root / f"run{run}.ckpt"
            model.save_checkpoint(result.network, path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes(), "checkpoints differ across reruns"

        net = model.load_checkpoint(paths[0])
        again = root / "roundtrip.ckpt"
        model.save_checkpoint(net, again)
        assert again.read_bytes() == paths[0].read_bytes(), "round trip is not bitwise identical"
