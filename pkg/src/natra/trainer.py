"""Fine-tuning on fooling latent transformations, baselines, evaluation.

The main loop alternates per batch between tuning each example's attack
budget against the current classifier and taking one gradient step on a
mixed loss over clean pairs and fooling transformed pairs with smoothed
labels. Baselines share the same loop skeleton so method comparisons
differ only in how a batch is augmented. Evaluation reports clean,
per-transformation, and attack-robust accuracy for any logits-producing
classifier, plus the set of examples that escape it.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .attack import (
    DEFAULT_CAP,
    DEFAULT_EPSILON,
    DEFAULT_RHO,
    DEFAULT_SMOOTHING_C,
    AttackConfig,
    adapt_epsilon_batch,
    build_nat_transforms_batch,
    build_nat_transforms_expanded_batch,
    pgd_latent_batch,
)
from .common import (
    TrainingDivergedError,
    derive_seed,
    init_conv,
    init_linear,
    np_rng,
    save_checkpoint,
    to_tensor,
    torch_generator,
    write_json,
)
from .directions import (
    DirectionBasis,
    LatentRegressionBasis,
    TransformationCatalog,
    entry_template,
)
from .expansion import FitConfig, fit_expanded_batch

METHODS = (
    "Original",
    "Adv",
    "MixI",
    "MixL",
    "Random",
    "NaTra-OL",
    "NaTra-OA",
    "NaTra",
)

DEFAULT_PIXEL_EPSILON = 8.0 / 255.0
SHAPE_TASK = "shape_class"


class Classifier(nn.Module):
    """Small convolutional classifier shared by every training method.

    forward returns logits; probabilities leads through a softmax so
    downstream consumers get a proper distribution.
    """

    def __init__(self, num_classes: int = 2, image_size: int = 32, seed: int = 0):
        super().__init__()
        if image_size % 8 != 0:
            raise ValueError("image size must be divisible by 8")
        gen = torch_generator(seed, "classifier-init")
        self.num_classes = num_classes
        self.conv1 = nn.Conv2d(3, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 48, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(48, 64, 3, stride=2, padding=1)
        self.conv4 = nn.Conv2d(64, 96, 3, stride=1, padding=1)
        self.head = nn.Linear(96 * (image_size // 8) ** 2, num_classes)
        for conv in (self.conv1, self.conv2, self.conv3, self.conv4):
            init_conv(conv, gen)
        init_linear(self.head, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.conv1(x), 0.2)
        h = F.leaky_relu(self.conv2(h), 0.2)
        h = F.leaky_relu(self.conv3(h), 0.2)
        h = F.leaky_relu(self.conv4(h), 0.2)
        return self.head(h.flatten(1))

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self.forward(x), dim=1)

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Hard labels for (B, H, W, C) images, chunked to bound memory."""
        return predict_labels(self, images, batch_size)


@torch.no_grad()
def predict_labels(classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    arr = np.asarray(images)
    out = []
    for start in range(0, arr.shape[0], batch_size):
        logits = classifier(to_tensor(arr[start : start + batch_size]))
        out.append(logits.argmax(dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def task_labels(dataset, task: str) -> np.ndarray:
    """Labels for the shape task or a thresholded-attribute task."""
    if task == SHAPE_TASK:
        return np.asarray(dataset.labels, dtype=np.int64)
    return dataset.attribute_labels(task)


@dataclass
class TrainConfig:
    """Knobs shared across training methods; attack knobs nest inside."""

    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    task: str = SHAPE_TASK
    # Clean and transformed streams weigh equally by default.
    clean_weight: float = 1.0
    aug_weight: float = 1.0
    adaptive: bool = True  # per-example budgets; False falls back to fixed_epsilon
    expanded: bool = True  # multi-code inversions; False uses single codes
    fixed_epsilon: float = DEFAULT_EPSILON
    rho: float = DEFAULT_RHO
    cap: float = DEFAULT_CAP
    smoothing_c: float = DEFAULT_SMOOTHING_C
    noise_epsilon: float = DEFAULT_EPSILON
    pixel_epsilon: float = DEFAULT_PIXEL_EPSILON
    pixel_iterations: int = 7
    pixel_restarts: int = 1
    attack: AttackConfig = field(default_factory=AttackConfig)
    expansion: FitConfig | None = None

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.clean_weight < 0 or self.aug_weight < 0:
            raise ValueError("stream weights must be >= 0")
        for name in ("fixed_epsilon", "noise_epsilon", "pixel_epsilon"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.pixel_iterations < 0 or self.pixel_restarts < 0:
            raise ValueError("pixel attack counts must be >= 0")
        self.attack.validate()


@dataclass
class TrainRun:
    """One method's training record: what ran, how, and its metric history."""

    method: str
    epochs: int
    seed: int
    config: dict
    history: list

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if len(self.history) != self.epochs:
            raise ValueError(
                f"history length {len(self.history)} must equal epochs {self.epochs}"
            )


def _config_blob(config: TrainConfig) -> dict:
    return asdict(config)


def _check_dataset(dataset) -> None:
    if len(dataset) == 0:
        raise ValueError("dataset is empty")


def _epoch_order(n: int, seed: int, epoch: int) -> torch.Tensor:
    return torch.randperm(n, generator=torch_generator(seed, "trainer-shuffle", epoch))


def _finite_or_raise(loss: torch.Tensor, stage: str, step: int) -> float:
    value = float(loss.detach())
    if not math.isfinite(value):
        raise TrainingDivergedError(stage, step, value)
    return value


def natra_train(
    classifier,
    dataset,
    generator,
    encoder,
    catalog: TransformationCatalog,
    basis: DirectionBasis | LatentRegressionBasis,
    config: TrainConfig | None = None,
    extractor=None,
) -> list:
    """Fine-tune on clean pairs plus per-batch fooling transformations.

    Each batch first refreshes its examples' budgets against the current
    classifier weights, then searches the catalog for fooling
    transformations inside those budgets, then takes one step on the
    weighted sum of the clean loss and the smoothed-label loss over
    whatever transformations were found. Returns the per-epoch history;
    the classifier is trained in place.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    _check_dataset(dataset)
    generator.eval()
    labels = task_labels(dataset, cfg.task)
    n = len(dataset)

    expansions = None
    if cfg.expanded:
        fit_cfg = cfg.expansion or FitConfig(
            iterations=150, seed=derive_seed(cfg.seed, "trainer-expansion")
        )
        fits = fit_expanded_batch(generator, dataset.images, encoder, fit_cfg, extractor)
        expansions = [fit.expanded for fit in fits]
    z_all = encoder.invert(dataset.images)
    images_t = to_tensor(dataset.images)
    labels_t = torch.from_numpy(labels)

    opt = torch.optim.Adam(classifier.parameters(), lr=cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(n, cfg.seed, epoch)
        clean_sum = aug_sum = 0.0
        n_batches = n_pairs = 0
        eps_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx_t = order[start : start + cfg.batch_size]
            idx = idx_t.numpy()
            batch_labels = labels[idx]

            if cfg.adaptive:
                adapt_cfg = replace(
                    cfg.attack, seed=derive_seed(cfg.seed, "trainer-adapt", epoch, n_batches)
                )
                eps = adapt_epsilon_batch(
                    classifier, generator, z_all[idx], batch_labels,
                    cfg.rho, cfg.cap, adapt_cfg,
                )
            else:
                eps = np.full(idx.size, float(cfg.fixed_epsilon))

            nt_cfg = replace(
                cfg.attack, seed=derive_seed(cfg.seed, "trainer-transform", epoch, n_batches)
            )
            if expansions is not None:
                transforms = build_nat_transforms_expanded_batch(
                    dataset.images[idx], batch_labels, classifier, generator,
                    [expansions[int(i)] for i in idx], catalog, basis, eps,
                    nt_cfg, cfg.smoothing_c,
                )
            else:
                transforms = build_nat_transforms_batch(
                    dataset.images[idx], batch_labels, classifier, generator,
                    encoder, catalog, basis, eps, nt_cfg, cfg.smoothing_c,
                )
            aug_images = [image for pairs in transforms for image, _ in pairs]
            aug_targets = [label.probabilities for pairs in transforms for _, label in pairs]

            logits = classifier(images_t[idx_t])
            clean_loss = F.cross_entropy(logits, labels_t[idx_t])
            if aug_images:
                aug_logits = classifier(to_tensor(np.stack(aug_images)))
                targets = torch.as_tensor(np.stack(aug_targets), dtype=aug_logits.dtype)
                aug_loss = F.cross_entropy(aug_logits, targets)
            else:
                aug_loss = logits.new_zeros(())
            loss = cfg.clean_weight * clean_loss + cfg.aug_weight * aug_loss
            _finite_or_raise(loss, "natra_train", step)
            opt.zero_grad()
            loss.backward()
            opt.step()

            clean_sum += float(clean_loss.detach())
            aug_sum += float(aug_loss.detach())
            eps_sum += float(eps.sum())
            n_pairs += len(aug_images)
            n_batches += 1
            step += 1
        history.append(
            {
                "epoch": epoch,
                "clean_loss": clean_sum / n_batches,
                "aug_loss": aug_sum / n_batches,
                "transform_rate": n_pairs / n,
                "mean_epsilon": eps_sum / n,
            }
        )
    classifier.eval()
    return history


def train_clean(classifier, dataset, config: TrainConfig | None = None) -> list:
    """Plain fine-tuning on the clean pairs; the Original reference point."""
    cfg = config or TrainConfig()
    cfg.validate()
    _check_dataset(dataset)
    labels_t = torch.from_numpy(task_labels(dataset, cfg.task))
    images_t = to_tensor(dataset.images)
    n = len(dataset)

    opt = torch.optim.Adam(classifier.parameters(), lr=cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(n, cfg.seed, epoch)
        loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx_t = order[start : start + cfg.batch_size]
            loss = F.cross_entropy(classifier(images_t[idx_t]), labels_t[idx_t])
            _finite_or_raise(loss, "train_clean", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach())
            n_batches += 1
            step += 1
        history.append({"epoch": epoch, "clean_loss": loss_sum / n_batches})
    classifier.eval()
    return history


def pgd_pixel(
    classifier,
    images,
    labels,
    epsilon: float,
    iterations: int = 7,
    step: float | None = None,
    restarts: int = 1,
    seed: int = 0,
) -> np.ndarray:
    """Sign-step ascent on pixels inside the epsilon box, clamped to [0, 1].

    Keeps the best iterate per example across restarts, starting from the
    clean image itself; later restarts begin from seeded uniform noise.
    A zero budget returns the images unchanged.
    """
    arr = np.asarray(images, dtype=np.float64)
    if epsilon == 0.0:
        return arr.copy()
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    x0 = to_tensor(arr)
    target = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    step_size = step if step is not None else epsilon / 4.0

    def batch_loss(x):
        return F.cross_entropy(classifier(x), target, reduction="none")

    with torch.no_grad():
        best = x0.clone()
        best_loss = batch_loss(x0)
    for restart in range(max(restarts, 1)):
        if restart == 0:
            x = x0.clone()
        else:
            gen = torch_generator(seed, "pixel-pgd", restart)
            noise = (torch.rand(x0.shape, generator=gen) * 2.0 - 1.0) * (epsilon / 2.0)
            x = torch.clamp(x0 + noise, 0.0, 1.0)
        for _ in range(iterations):
            x = x.detach().requires_grad_(True)
            losses = batch_loss(x)
            if losses.requires_grad:
                (grad,) = torch.autograd.grad(losses.sum(), x, allow_unused=True)
            else:
                # A loss that ignores x (constant classifier) has no graph.
                grad = None
            if grad is None:
                grad = torch.zeros_like(x)
            with torch.no_grad():
                x = x + step_size * torch.sign(grad)
                x = torch.clamp(x, x0 - epsilon, x0 + epsilon).clamp(0.0, 1.0)
                losses = batch_loss(x)
                improved = losses > best_loss
                best[improved] = x[improved]
                best_loss = torch.where(improved, losses, best_loss)
    return best.permute(0, 2, 3, 1).numpy().astype(np.float64)


def baseline_pixel_adv(classifier, dataset, config: TrainConfig | None = None) -> list:
    """Input-space adversarial training: each batch is replaced by its
    pixel-budget attack against the current weights."""
    cfg = config or TrainConfig()
    cfg.validate()
    _check_dataset(dataset)
    labels = task_labels(dataset, cfg.task)
    labels_t = torch.from_numpy(labels)
    n = len(dataset)

    opt = torch.optim.Adam(classifier.parameters(), lr=cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(n, cfg.seed, epoch)
        loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx_t = order[start : start + cfg.batch_size]
            idx = idx_t.numpy()
            adv = pgd_pixel(
                classifier,
                dataset.images[idx],
                labels[idx],
                cfg.pixel_epsilon,
                iterations=cfg.pixel_iterations,
                restarts=cfg.pixel_restarts,
                seed=derive_seed(cfg.seed, "pixel-adv", epoch, n_batches),
            )
            loss = F.cross_entropy(classifier(to_tensor(adv)), labels_t[idx_t])
            _finite_or_raise(loss, "baseline_pixel_adv", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach())
            n_batches += 1
            step += 1
        history.append({"epoch": epoch, "adv_loss": loss_sum / n_batches})
    classifier.eval()
    return history


def baseline_random(
    classifier, dataset, generator, encoder, config: TrainConfig | None = None
) -> list:
    """Augment with decodes of noised inversions, labels unchanged.

    Noise is seeded N(0, 1) scaled by noise_epsilon and clamped into the
    same-size box, so draws stay inside the ball. A zero noise budget
    skips the augmentation stream entirely and reduces to clean tuning.
    """
    cfg = config or TrainConfig()
    cfg.validate()
    _check_dataset(dataset)
    generator.eval()
    labels_t = torch.from_numpy(task_labels(dataset, cfg.task))
    images_t = to_tensor(dataset.images)
    z_all = encoder.invert(dataset.images) if cfg.noise_epsilon > 0 else None
    n = len(dataset)

    opt = torch.optim.Adam(classifier.parameters(), lr=cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(n, cfg.seed, epoch)
        clean_sum = aug_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx_t = order[start : start + cfg.batch_size]
            clean_loss = F.cross_entropy(classifier(images_t[idx_t]), labels_t[idx_t])
            if z_all is not None:
                z_batch = z_all[idx_t.numpy()]
                rng = np_rng(cfg.seed, "random-noise", epoch, n_batches)
                noise = cfg.noise_epsilon * rng.standard_normal(z_batch.shape)
                noise = np.clip(noise, -cfg.noise_epsilon, cfg.noise_epsilon)
                aug = generator.decode(z_batch + noise)
                aug_loss = F.cross_entropy(classifier(to_tensor(aug)), labels_t[idx_t])
                loss = cfg.clean_weight * clean_loss + cfg.aug_weight * aug_loss
                aug_sum += float(aug_loss.detach())
            else:
                loss = cfg.clean_weight * clean_loss
            _finite_or_raise(loss, "baseline_random", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            clean_sum += float(clean_loss.detach())
            n_batches += 1
            step += 1
        history.append(
            {
                "epoch": epoch,
                "clean_loss": clean_sum / n_batches,
                "aug_loss": aug_sum / n_batches,
            }
        )
    classifier.eval()
    return history


def mix_examples(a: np.ndarray, b: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Convex blend of two example batches with per-row coefficients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mismatched shapes {a.shape} and {b.shape}")
    lam = np.asarray(lam, dtype=np.float64).reshape(a.shape[0], *([1] * (a.ndim - 1)))
    if ((lam < 0) | (lam > 1)).any():
        raise ValueError("mixing coefficients must lie in [0, 1]")
    return lam * a + (1.0 - lam) * b


def baseline_mix(
    classifier,
    dataset,
    space: str,
    config: TrainConfig | None = None,
    generator=None,
    encoder=None,
) -> list:
    """Mixup in input space (pixel blends) or latent space (decode blends).

    Pairs come from a seeded within-batch permutation; labels blend with
    the same coefficients, so targets stay on the simplex.
    """
    if space not in ("input", "latent"):
        raise ValueError(f"unknown mix space {space!r}; expected 'input' or 'latent'")
    if space == "latent" and (generator is None or encoder is None):
        raise ValueError("latent mixing needs the generator and encoder")
    cfg = config or TrainConfig()
    cfg.validate()
    _check_dataset(dataset)
    labels = task_labels(dataset, cfg.task)
    n_classes = int(labels.max()) + 1 if len(labels) else 2
    onehot = np.eye(max(n_classes, int(getattr(classifier, "num_classes", n_classes))))[labels]
    z_all = encoder.invert(dataset.images) if space == "latent" else None
    if generator is not None:
        generator.eval()
    n = len(dataset)

    opt = torch.optim.Adam(classifier.parameters(), lr=cfg.lr)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = _epoch_order(n, cfg.seed, epoch)
        loss_sum = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size].numpy()
            perm = np_rng(cfg.seed, "mix-pair", epoch, n_batches).permutation(idx.size)
            lam = np_rng(cfg.seed, "mix-lambda", epoch, n_batches).uniform(size=idx.size)
            if space == "input":
                mixed = mix_examples(dataset.images[idx], dataset.images[idx][perm], lam)
            else:
                mixed = generator.decode(mix_examples(z_all[idx], z_all[idx][perm], lam))
            targets = mix_examples(onehot[idx], onehot[idx][perm], lam)
            logits = classifier(to_tensor(mixed))
            loss = F.cross_entropy(logits, torch.as_tensor(targets, dtype=logits.dtype))
            _finite_or_raise(loss, "baseline_mix", step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_sum += float(loss.detach())
            n_batches += 1
            step += 1
        history.append({"epoch": epoch, "mix_loss": loss_sum / n_batches})
    classifier.eval()
    return history


def run_method(
    method: str,
    classifier,
    dataset,
    generator=None,
    encoder=None,
    catalog: TransformationCatalog | None = None,
    basis=None,
    config: TrainConfig | None = None,
    extractor=None,
) -> TrainRun:
    """Train one method and wrap its record. The method name is
    authoritative: ablation flags in the config are overridden to match."""
    cfg = config or TrainConfig()
    if method == "Original":
        history = train_clean(classifier, dataset, cfg)
    elif method == "Adv":
        history = baseline_pixel_adv(classifier, dataset, cfg)
    elif method == "MixI":
        history = baseline_mix(classifier, dataset, "input", cfg)
    elif method == "MixL":
        history = baseline_mix(classifier, dataset, "latent", cfg, generator, encoder)
    elif method == "Random":
        history = baseline_random(classifier, dataset, generator, encoder, cfg)
    elif method in ("NaTra", "NaTra-OA", "NaTra-OL"):
        cfg = replace(
            cfg,
            adaptive=method != "NaTra-OA",
            expanded=method != "NaTra-OL",
        )
        history = natra_train(
            classifier, dataset, generator, encoder, catalog, basis, cfg, extractor
        )
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    run = TrainRun(
        method=method,
        epochs=cfg.epochs,
        seed=cfg.seed,
        config=_config_blob(cfg),
        history=history,
    )
    run.validate()
    return run


@dataclass
class EvalConfig:
    """Evaluation protocol knobs; the latent attack nests an AttackConfig."""

    task: str = SHAPE_TASK
    entry_points: int = 5  # magnitudes sampled across each entry's range
    batch_size: int = 256
    attack: AttackConfig = field(default_factory=AttackConfig)
    pixel_epsilon: float = DEFAULT_PIXEL_EPSILON
    pixel_iterations: int = 7
    pixel_restarts: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.entry_points < 1:
            raise ValueError("entry_points must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.pixel_epsilon < 0:
            raise ValueError("pixel_epsilon must be >= 0")
        self.attack.validate()


def _accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return 100.0 * float((predictions == labels).mean())


def evaluate(
    classifier,
    generator,
    encoder,
    catalog: TransformationCatalog,
    basis: DirectionBasis | LatentRegressionBasis,
    testset,
    config: EvalConfig | None = None,
) -> dict:
    """Accuracy under clean data, catalog edits, and both attacks.

    Per-entry transformed accuracy decodes edits at magnitudes sampled
    across the entry's range; the aggregate transformed score averages
    the task-irrelevant entries so each transformation counts equally.
    All values are percentages in [0, 100].
    """
    cfg = config or EvalConfig()
    cfg.validate()
    if len(testset) == 0:
        raise ValueError("testset is empty")
    labels = task_labels(testset, cfg.task)
    n_layers, latent_dim = generator.num_layers, generator.latent_dim
    generator.eval()

    metrics = {"clean": _accuracy(predict_labels(classifier, testset.images, cfg.batch_size), labels)}

    z = encoder.invert(testset.images)
    stacks = np.repeat(z[:, None, :], n_layers, axis=1)
    entry_scores = []
    for entry in catalog.task_irrelevant():
        template = entry_template(entry, basis, n_layers, latent_dim)
        correct = 0
        total = 0
        for magnitude in np.linspace(entry.magnitude_lo, entry.magnitude_hi, cfg.entry_points):
            edited = generator.decode_stack(stacks + magnitude * template)
            preds = predict_labels(classifier, edited, cfg.batch_size)
            correct += int((preds == labels).sum())
            total += labels.size
        score = 100.0 * correct / total
        metrics[f"transformed:{entry.name}"] = score
        entry_scores.append(score)
    if entry_scores:
        metrics["transformed"] = float(np.mean(entry_scores))

    attack_cfg = replace(cfg.attack, seed=derive_seed(cfg.seed, "eval-latent"))
    adv_preds = []
    for start in range(0, len(testset), cfg.batch_size):
        best, _ = pgd_latent_batch(
            classifier, generator, z[start : start + cfg.batch_size],
            labels[start : start + cfg.batch_size], attack_cfg,
        )
        adv_preds.append(predict_labels(classifier, generator.decode(best), cfg.batch_size))
    metrics["latent_pgd"] = _accuracy(np.concatenate(adv_preds), labels)

    pixel_preds = []
    for start in range(0, len(testset), cfg.batch_size):
        adv = pgd_pixel(
            classifier,
            testset.images[start : start + cfg.batch_size],
            labels[start : start + cfg.batch_size],
            cfg.pixel_epsilon,
            iterations=cfg.pixel_iterations,
            restarts=cfg.pixel_restarts,
            seed=derive_seed(cfg.seed, "eval-pixel", start),
        )
        pixel_preds.append(predict_labels(classifier, adv, cfg.batch_size))
    metrics["pixel_pgd"] = _accuracy(np.concatenate(pixel_preds), labels)
    return metrics


def escaped_examples(
    classifier,
    generator,
    encoder,
    catalog: TransformationCatalog,
    basis: DirectionBasis | LatentRegressionBasis,
    dataset,
    magnitudes: int = 7,
    task: str = SHAPE_TASK,
    batch_size: int = 256,
) -> list:
    """Ids classified correctly clean but flipped by some catalog edit.

    Magnitudes are sampled across each task-irrelevant entry's range; an
    example escapes as soon as any sampled edit changes its prediction
    away from the label. Always a subset of the clean-correct ids.
    """
    if magnitudes < 1:
        raise ValueError("magnitudes must be >= 1")
    labels = task_labels(dataset, task)
    generator.eval()
    clean_correct = predict_labels(classifier, dataset.images, batch_size) == labels
    escaped = np.zeros(len(dataset), dtype=bool)

    z = encoder.invert(dataset.images)
    n_layers, latent_dim = generator.num_layers, generator.latent_dim
    stacks = np.repeat(z[:, None, :], n_layers, axis=1)
    for entry in catalog.task_irrelevant():
        template = entry_template(entry, basis, n_layers, latent_dim)
        for magnitude in np.linspace(entry.magnitude_lo, entry.magnitude_hi, magnitudes):
            edited = generator.decode_stack(stacks + magnitude * template)
            preds = predict_labels(classifier, edited, batch_size)
            escaped |= clean_correct & (preds != labels)
    return [int(i) for i in np.where(escaped)[0]]


_FIXED_COLUMNS = ("clean", "transformed", "latent_pgd", "pixel_pgd")


@dataclass
class EvalReport:
    """Accuracy table over methods plus each method's escaped-example ids."""

    rows: dict = field(default_factory=dict)
    escaped: dict = field(default_factory=dict)

    def add_row(self, method: str, metrics: dict, escaped_ids=None) -> None:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        for key, value in metrics.items():
            if not 0.0 <= float(value) <= 100.0:
                raise ValueError(f"{method}/{key}: accuracy {value} outside [0, 100]")
        self.rows[method] = {key: float(value) for key, value in metrics.items()}
        if escaped_ids is not None:
            self.escaped[method] = sorted(int(i) for i in escaped_ids)

    def columns(self) -> list:
        seen = set()
        for row in self.rows.values():
            seen.update(row)
        fixed = [c for c in _FIXED_COLUMNS if c in seen]
        entries = sorted(c for c in seen if c.startswith("transformed:"))
        return fixed[:2] + entries + fixed[2:]

    def render(self) -> str:
        """Fixed-width text table; missing cells render as blanks."""
        columns = self.columns()
        name_width = max([len("method")] + [len(m) for m in self.rows])
        widths = [max(len(c), 7) for c in columns]
        header = "  ".join(
            ["method".ljust(name_width)] + [c.rjust(w) for c, w in zip(columns, widths)]
        )
        lines = [header, "-" * len(header)]
        for method in METHODS:
            if method not in self.rows:
                continue
            row = self.rows[method]
            cells = [
                (f"{row[c]:.2f}" if c in row else "").rjust(w)
                for c, w in zip(columns, widths)
            ]
            lines.append("  ".join([method.ljust(name_width)] + cells))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "accuracy": {m: dict(r) for m, r in self.rows.items()},
            "escaped": {m: list(ids) for m, ids in self.escaped.items()},
        }

    def save(self, path: Path | str) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "EvalReport":
        report = cls()
        escaped = obj.get("escaped", {})
        for method, metrics in obj.get("accuracy", {}).items():
            report.add_row(method, metrics, escaped.get(method))
        return report

    @classmethod
    def load(cls, path: Path | str) -> "EvalReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def save_run(run_dir: Path | str, run: TrainRun, classifier, report: EvalReport | None = None) -> Path:
    """Write one run's artifacts: config, metric history, weights, report."""
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(
        out / "config.json",
        {"method": run.method, "epochs": run.epochs, "seed": run.seed, "config": run.config},
    )
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        if run.history:
            keys = list(run.history[0])
            writer.writerow(keys)
            for row in run.history:
                writer.writerow([repr(row[k]) for k in keys])
        else:
            writer.writerow(["epoch"])
    save_checkpoint(
        out / "checkpoint.pt",
        classifier,
        {"method": run.method, "seed": run.seed, "epochs": run.epochs},
    )
    if report is not None:
        report.save(out / "report.json")
    return out
