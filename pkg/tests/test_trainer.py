import copy
import csv
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from natra.common import TrainingDivergedError
from natra.directions import CatalogEntry, TransformationCatalog, compute_basis, sample_latents
from natra.inversion import Encoder
from natra.toy import LayeredGenerator
from natra.toy.dataset import sample_dataset
from natra.trainer import (
    METHODS,
    AttackConfig,
    Classifier,
    EvalConfig,
    EvalReport,
    TrainConfig,
    TrainRun,
    baseline_mix,
    baseline_pixel_adv,
    baseline_random,
    escaped_examples,
    evaluate,
    mix_examples,
    natra_train,
    pgd_pixel,
    predict_labels,
    run_method,
    save_run,
    train_clean,
)


class ConstantClassifier(torch.nn.Module):
    """Always predicts the same class, with no gradient path to the input."""

    def __init__(self, hot: int = 0, n_classes: int = 2):
        super().__init__()
        self.logits = torch.full((n_classes,), -1.0)
        self.logits[hot] = 1.0

    def forward(self, x):
        return self.logits.expand(x.shape[0], -1)


@pytest.fixture(scope="module")
def world():
    """Untrained generator/encoder pair with a small catalog and basis."""
    generator = LayeredGenerator(seed=0)
    generator.eval()
    encoder = Encoder(seed=0)
    basis = compute_basis(sample_latents(80, seed=21), 4)
    catalog = TransformationCatalog(
        basis_id="b",
        generator_checksum="g",
        entries=[
            CatalogEntry("slide", 0, -1.5, 1.5, task_relevant=False),
            CatalogEntry("tint", 1, -1.0, 1.0, task_relevant=False),
            CatalogEntry("grow", 2, -1.0, 1.0, task_relevant=True),
        ],
    )
    return generator, encoder, catalog, basis


@pytest.fixture(scope="module")
def tiny_data():
    return sample_dataset(16, seed=3)


def light_config(**overrides) -> TrainConfig:
    """Fast knobs for stub-world loops; attacks stay tiny but real."""
    base = dict(
        epochs=1,
        batch_size=8,
        rho=0.05,
        cap=0.1,
        attack=AttackConfig(iterations=2, restarts=1, seed=0),
        expansion=None,
        expanded=False,
    )
    base.update(overrides)
    return TrainConfig(**base)


def weights_equal(a: torch.nn.Module, b: torch.nn.Module) -> bool:
    sa, sb = a.state_dict(), b.state_dict()
    return all(torch.equal(sa[k], sb[k]) for k in sa)


class TestClassifier:
    def test_probabilities_on_simplex(self):
        clf = Classifier(num_classes=3, seed=1)
        probs = clf.probabilities(torch.rand(5, 3, 32, 32))
        assert (probs >= 0).all()
        assert torch.allclose(probs.sum(dim=1), torch.ones(5), atol=1e-6)

    def test_seed_controls_init(self):
        assert weights_equal(Classifier(seed=4), Classifier(seed=4))
        assert not weights_equal(Classifier(seed=4), Classifier(seed=5))

    def test_stays_small(self):
        n = sum(p.numel() for p in Classifier().parameters())
        assert n < 150_000

    def test_predict_matches_argmax(self, tiny_data):
        clf = Classifier(seed=0)
        preds = clf.predict(tiny_data.images)
        with torch.no_grad():
            expected = clf(torch.as_tensor(
                tiny_data.images.transpose(0, 3, 1, 2), dtype=torch.float32
            )).argmax(dim=1).numpy()
        assert np.array_equal(preds, expected)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [
            {"epochs": -1},
            {"batch_size": 0},
            {"lr": 0.0},
            {"clean_weight": -0.5},
            {"fixed_epsilon": -0.01},
            {"pixel_iterations": -1},
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs).validate()


class TestTrainClean:
    def test_zero_epochs_leaves_weights_alone(self, tiny_data):
        clf = Classifier(seed=7)
        before = copy.deepcopy(clf)
        history = train_clean(clf, tiny_data, light_config(epochs=0))
        assert history == []
        assert weights_equal(clf, before)

    def test_deterministic(self, tiny_data):
        runs = []
        for _ in range(2):
            clf = Classifier(seed=7)
            runs.append((train_clean(clf, tiny_data, light_config(epochs=2)), clf))
        assert runs[0][0] == runs[1][0]
        assert weights_equal(runs[0][1], runs[1][1])

    def test_loss_decreases(self):
        data = sample_dataset(64, seed=5)
        clf = Classifier(seed=0)
        history = train_clean(clf, data, light_config(epochs=5, batch_size=16))
        assert history[-1]["clean_loss"] < history[0]["clean_loss"]

    def test_divergence_reported(self, tiny_data):
        clf = Classifier(seed=0)
        with torch.no_grad():
            clf.head.weight.fill_(float("nan"))
        with pytest.raises(TrainingDivergedError):
            train_clean(clf, tiny_data, light_config())

    def test_empty_dataset_rejected(self, tiny_data):
        with pytest.raises(ValueError, match="empty"):
            train_clean(Classifier(), tiny_data.subset([]), light_config())


class TestPgdPixel:
    def test_zero_budget_returns_input_copy(self, tiny_data):
        clf = Classifier(seed=0)
        out = pgd_pixel(clf, tiny_data.images[:4], tiny_data.labels[:4], 0.0)
        assert np.array_equal(out, tiny_data.images[:4])
        assert out is not tiny_data.images

    def test_stays_in_box_and_unit_range(self, tiny_data):
        clf = Classifier(seed=0)
        eps = 0.1
        out = pgd_pixel(clf, tiny_data.images, tiny_data.labels, eps, iterations=5, restarts=2)
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert np.abs(out - tiny_data.images).max() <= eps + 1e-6

    def test_never_below_clean_loss(self, tiny_data):
        clf = Classifier(seed=1)
        labels = torch.as_tensor(tiny_data.labels)
        out = pgd_pixel(clf, tiny_data.images, tiny_data.labels, 0.05, iterations=4)

        def losses(images):
            x = torch.as_tensor(images.transpose(0, 3, 1, 2), dtype=torch.float32)
            with torch.no_grad():
                return torch.nn.functional.cross_entropy(clf(x), labels, reduction="none")

        assert (losses(out) >= losses(tiny_data.images) - 1e-6).all()

    def test_deterministic(self, tiny_data):
        clf = Classifier(seed=2)
        a = pgd_pixel(clf, tiny_data.images, tiny_data.labels, 0.05, restarts=2, seed=9)
        b = pgd_pixel(clf, tiny_data.images, tiny_data.labels, 0.05, restarts=2, seed=9)
        assert np.array_equal(a, b)


class TestBaselinePixelAdv:
    def test_zero_budget_equals_clean_tuning(self, tiny_data):
        adv_clf = Classifier(seed=3)
        adv_hist = baseline_pixel_adv(adv_clf, tiny_data, light_config(epochs=2, pixel_epsilon=0.0))
        clean_clf = Classifier(seed=3)
        clean_hist = train_clean(clean_clf, tiny_data, light_config(epochs=2))
        assert [h["adv_loss"] for h in adv_hist] == [h["clean_loss"] for h in clean_hist]
        assert weights_equal(adv_clf, clean_clf)

    def test_dataset_not_mutated(self, tiny_data):
        frozen = tiny_data.images.copy()
        baseline_pixel_adv(Classifier(seed=0), tiny_data, light_config(pixel_iterations=2))
        assert np.array_equal(tiny_data.images, frozen)


class TestBaselineRandom:
    def test_zero_noise_equals_clean_tuning(self, tiny_data, world):
        generator, encoder, _, _ = world
        rand_clf = Classifier(seed=3)
        rand_hist = baseline_random(
            rand_clf, tiny_data, generator, encoder, light_config(epochs=2, noise_epsilon=0.0)
        )
        clean_clf = Classifier(seed=3)
        clean_hist = train_clean(clean_clf, tiny_data, light_config(epochs=2))
        assert [h["clean_loss"] for h in rand_hist] == [h["clean_loss"] for h in clean_hist]
        assert weights_equal(rand_clf, clean_clf)

    def test_noise_stays_in_ball(self, tiny_data, world):
        generator, encoder, _, _ = world
        eps = 0.04
        z_all = encoder.invert(tiny_data.images)
        seen = []

        class Recorder(torch.nn.Module):
            def decode(self, z):
                seen.append(np.asarray(z))
                return generator.decode(z)

            def eval(self):
                return self

        baseline_random(
            Classifier(seed=0), tiny_data, Recorder(), encoder,
            light_config(noise_epsilon=eps, batch_size=len(tiny_data)),
        )
        assert seen
        # Rows arrive shuffled; each must sit within the ball of some code.
        gaps = np.abs(seen[0][:, None, :] - z_all[None, :, :]).max(axis=2)
        assert gaps.min(axis=1).max() <= eps + 1e-12

    def test_augmentation_stream_used(self, tiny_data, world):
        generator, encoder, _, _ = world
        history = baseline_random(
            Classifier(seed=0), tiny_data, generator, encoder, light_config(noise_epsilon=0.05)
        )
        assert history[0]["aug_loss"] > 0.0


class TestMixing:
    def test_full_weight_returns_first_example(self, tiny_data):
        a, b = tiny_data.images[:4], tiny_data.images[4:8]
        assert np.array_equal(mix_examples(a, b, np.ones(4)), a)
        assert np.array_equal(mix_examples(a, b, np.zeros(4)), b)

    def test_half_blend_is_mean_image(self, tiny_data):
        a, b = tiny_data.images[:4], tiny_data.images[4:8]
        mixed = mix_examples(a, b, np.full(4, 0.5))
        assert np.allclose(mixed, (a + b) / 2.0)

    @settings(max_examples=30, deadline=None)
    @given(lam=st.floats(min_value=0.0, max_value=1.0))
    def test_mixed_labels_stay_on_simplex(self, lam):
        ya = np.eye(3)[[0, 2]]
        yb = np.eye(3)[[1, 1]]
        mixed = mix_examples(ya, yb, np.full(2, lam))
        assert (mixed >= 0).all()
        assert np.allclose(mixed.sum(axis=1), 1.0)

    def test_rejects_out_of_range_weights(self, tiny_data):
        with pytest.raises(ValueError, match="0, 1"):
            mix_examples(tiny_data.images[:2], tiny_data.images[2:4], np.array([1.5, 0.5]))

    def test_unknown_space_rejected(self, tiny_data):
        with pytest.raises(ValueError, match="space"):
            baseline_mix(Classifier(), tiny_data, "pixel", light_config())

    def test_latent_space_needs_world(self, tiny_data):
        with pytest.raises(ValueError, match="generator"):
            baseline_mix(Classifier(), tiny_data, "latent", light_config())

    def test_input_mix_runs_deterministically(self, tiny_data):
        runs = []
        for _ in range(2):
            clf = Classifier(seed=1)
            runs.append(baseline_mix(clf, tiny_data, "input", light_config(epochs=2)))
        assert runs[0] == runs[1]

    def test_latent_mix_runs(self, tiny_data, world):
        generator, encoder, _, _ = world
        history = baseline_mix(
            Classifier(seed=1), tiny_data, "latent", light_config(), generator, encoder
        )
        assert len(history) == 1 and np.isfinite(history[0]["mix_loss"])


class TestNatraTrain:
    def test_zero_epochs_leaves_weights_alone(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        clf = Classifier(seed=7)
        before = copy.deepcopy(clf)
        history = natra_train(
            clf, tiny_data, generator, encoder, catalog, basis, light_config(epochs=0)
        )
        assert history == []
        assert weights_equal(clf, before)

    def test_history_shape_and_determinism(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        runs = []
        for _ in range(2):
            clf = Classifier(seed=7)
            history = natra_train(
                clf, tiny_data, generator, encoder, catalog, basis, light_config(epochs=2)
            )
            runs.append((history, clf))
        history = runs[0][0]
        assert len(history) == 2
        assert set(history[0]) == {
            "epoch", "clean_loss", "aug_loss", "transform_rate", "mean_epsilon",
        }
        assert runs[0][0] == runs[1][0]
        assert weights_equal(runs[0][1], runs[1][1])

    def test_fixed_budget_skips_adaptation(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        history = natra_train(
            Classifier(seed=0), tiny_data, generator, encoder, catalog, basis,
            light_config(adaptive=False, fixed_epsilon=0.05),
        )
        assert history[0]["mean_epsilon"] == pytest.approx(0.05)

    def test_dataset_not_mutated(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        frozen = tiny_data.images.copy()
        natra_train(
            Classifier(seed=0), tiny_data, generator, encoder, catalog, basis, light_config()
        )
        assert np.array_equal(tiny_data.images, frozen)


class TestRunMethod:
    def test_unknown_method_rejected(self, tiny_data):
        with pytest.raises(ValueError, match="method"):
            run_method("Natra", Classifier(), tiny_data)

    def test_wraps_clean_run(self, tiny_data):
        run = run_method("Original", Classifier(seed=1), tiny_data, config=light_config(epochs=2))
        assert run.method == "Original"
        assert run.epochs == 2 and len(run.history) == 2
        assert run.config["batch_size"] == 8

    def test_method_name_overrides_ablation_flags(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        base = light_config()
        oa = run_method(
            "NaTra-OA", Classifier(seed=1), tiny_data, generator, encoder, catalog, basis, base
        )
        assert oa.config["adaptive"] is False and oa.config["expanded"] is True
        ol = run_method(
            "NaTra-OL", Classifier(seed=1), tiny_data, generator, encoder, catalog, basis, base
        )
        assert ol.config["adaptive"] is True and ol.config["expanded"] is False

    def test_history_length_enforced(self):
        run = TrainRun(method="Original", epochs=3, seed=0, config={}, history=[{}])
        with pytest.raises(ValueError, match="history"):
            run.validate()

    def test_enum_is_complete(self):
        assert METHODS == (
            "Original", "Adv", "MixI", "MixL", "Random", "NaTra-OL", "NaTra-OA", "NaTra",
        )


def overfit_classifier(dataset, seed: int = 0) -> Classifier:
    """Train until the tiny set is memorized; evaluation tests need a
    classifier that is exactly right on its clean data."""
    clf = Classifier(seed=seed)
    for round_ in range(6):
        train_clean(clf, dataset, light_config(epochs=10, batch_size=8, seed=round_))
        if (clf.predict(dataset.images) == dataset.labels).all():
            return clf
    raise AssertionError("classifier failed to memorize 16 examples")


class TestEvaluate:
    def test_empty_testset_rejected(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        with pytest.raises(ValueError, match="empty"):
            evaluate(Classifier(), generator, encoder, catalog, basis, tiny_data.subset([]))

    def test_accuracy_matches_manual_count(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        ten = tiny_data.subset(range(10))
        clf = ConstantClassifier(hot=1)
        cfg = EvalConfig(entry_points=2, attack=AttackConfig(iterations=1, restarts=1))
        metrics = evaluate(clf, generator, encoder, catalog, basis, ten, cfg)
        expected = 100.0 * float((ten.labels == 1).mean())
        assert metrics["clean"] == pytest.approx(expected)
        # A constant prediction is immune to every perturbation.
        for key in ("transformed", "latent_pgd", "pixel_pgd"):
            assert metrics[key] == pytest.approx(expected)

    def test_memorizing_classifier_scores_perfect_clean(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        clf = overfit_classifier(tiny_data)
        cfg = EvalConfig(entry_points=2, attack=AttackConfig(iterations=1, restarts=1))
        metrics = evaluate(clf, generator, encoder, catalog, basis, tiny_data, cfg)
        assert metrics["clean"] == 100.0

    def test_reports_each_catalog_entry(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        cfg = EvalConfig(entry_points=2, attack=AttackConfig(iterations=1, restarts=1))
        metrics = evaluate(ConstantClassifier(), generator, encoder, catalog, basis, tiny_data, cfg)
        assert "transformed:slide" in metrics and "transformed:tint" in metrics
        # Task-relevant entries are not transformations of the same class.
        assert "transformed:grow" not in metrics
        assert all(0.0 <= v <= 100.0 for v in metrics.values())


class TestEscapedExamples:
    def test_constant_classifier_never_escapes(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        ids = escaped_examples(
            ConstantClassifier(), generator, encoder, catalog, basis, tiny_data, magnitudes=3
        )
        assert ids == []

    def test_subset_of_clean_correct(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        clf = Classifier(seed=11)
        ids = escaped_examples(clf, generator, encoder, catalog, basis, tiny_data, magnitudes=3)
        correct = set(np.where(clf.predict(tiny_data.images) == tiny_data.labels)[0])
        assert set(ids) <= correct
        assert ids == sorted(ids)

    def test_rejects_bad_magnitude_count(self, tiny_data, world):
        generator, encoder, catalog, basis = world
        with pytest.raises(ValueError, match="magnitudes"):
            escaped_examples(
                ConstantClassifier(), generator, encoder, catalog, basis, tiny_data, magnitudes=0
            )


class TestEvalReport:
    def sample_report(self) -> EvalReport:
        report = EvalReport()
        report.add_row(
            "Original",
            {"clean": 97.0, "transformed": 61.5, "transformed:slide": 61.5, "latent_pgd": 40.0},
            escaped_ids=[4, 2],
        )
        report.add_row(
            "NaTra",
            {"clean": 96.0, "transformed": 84.0, "transformed:slide": 84.0, "latent_pgd": 70.0},
            escaped_ids=[2],
        )
        return report

    def test_rejects_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            EvalReport().add_row("Baseline", {"clean": 50.0})

    def test_rejects_out_of_range_accuracy(self):
        with pytest.raises(ValueError, match="100"):
            EvalReport().add_row("Original", {"clean": 101.0})

    def test_column_order(self):
        report = self.sample_report()
        assert report.columns() == ["clean", "transformed", "transformed:slide", "latent_pgd"]

    def test_render_is_fixed_width(self):
        lines = self.sample_report().render().splitlines()
        assert len({len(line) for line in lines}) == 1
        assert lines[0].startswith("method")
        assert any("NaTra" in line and "84.00" in line for line in lines)

    def test_escaped_ids_sorted(self):
        assert self.sample_report().escaped["Original"] == [2, 4]

    def test_json_round_trip(self, tmp_path):
        report = self.sample_report()
        report.save(tmp_path / "report.json")
        loaded = EvalReport.load(tmp_path / "report.json")
        assert loaded.rows == report.rows
        assert loaded.escaped == report.escaped


class TestSaveRun:
    def test_writes_artifact_layout(self, tmp_path, tiny_data):
        clf = Classifier(seed=1)
        run = run_method("Original", clf, tiny_data, config=light_config(epochs=2))
        report = EvalReport()
        report.add_row("Original", {"clean": 88.0})
        out = save_run(tmp_path / "runs" / "original", run, clf, report)
        assert (out / "config.json").exists()
        assert (out / "checkpoint.pt").exists()
        assert (out / "report.json").exists()
        config = json.loads((out / "config.json").read_text())
        assert config["method"] == "Original" and config["epochs"] == 2

    def test_metrics_round_trip(self, tmp_path, tiny_data):
        clf = Classifier(seed=1)
        run = run_method("Original", clf, tiny_data, config=light_config(epochs=3))
        out = save_run(tmp_path / "run", run, clf)
        with open(out / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert [float(r["clean_loss"]) for r in rows] == [
            h["clean_loss"] for h in run.history
        ]

    def test_zero_epoch_run_writes_header(self, tmp_path, tiny_data):
        clf = Classifier(seed=1)
        run = run_method("Original", clf, tiny_data, config=light_config(epochs=0))
        out = save_run(tmp_path / "run", run, clf)
        assert (out / "metrics.csv").read_text().strip() == "epoch"


class TestPredictLabels:
    def test_chunking_matches_single_pass(self, tiny_data):
        clf = Classifier(seed=0)
        small = predict_labels(clf, tiny_data.images, batch_size=5)
        full = predict_labels(clf, tiny_data.images, batch_size=256)
        assert np.array_equal(small, full)

    def test_empty_input(self):
        assert predict_labels(Classifier(), np.zeros((0, 32, 32, 3))).size == 0
