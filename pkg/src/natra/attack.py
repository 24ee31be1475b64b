"""Latent-space attacks: projected ascent, budget tuning, label smoothing.

The inner maximization runs projected gradient ascent on the classifier
loss through the frozen generator. Each example gets its own budget: the
smallest grid level at which an attack flips the prediction, capped. That
per-example budget also sets the label smoothing weight, so examples that
are easy to attack train against softer targets.

Transformation attacks restrict the ascent to a single catalog direction
over its layer range, and keep only iterates that change the prediction
at the reconstruction. Restart noise is seeded per (batch row, restart),
so a batch is reproducible row by row; a single-example call behaves as
row 0 of a batch of one.
"""

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import csv
import numpy as np
import torch
import torch.nn.functional as F

from .common import NatraError, derive_seed, np_rng, torch_generator
from .directions import (
    DirectionBasis,
    LatentRegressionBasis,
    TransformationCatalog,
    entry_template,
)

PROB_CLAMP = 1e-12
DEFAULT_EPSILON = 0.03
DEFAULT_ITERATIONS = 10
DEFAULT_RESTARTS = 5
DEFAULT_RHO = 0.01
DEFAULT_CAP = 0.1
DEFAULT_SMOOTHING_C = 2.0


@dataclass(frozen=True)
class AttackConfig:
    """Projected-ascent knobs; step defaults to a quarter of the radius."""

    epsilon: float = DEFAULT_EPSILON
    step: float | None = None
    iterations: int = DEFAULT_ITERATIONS
    restarts: int = DEFAULT_RESTARTS
    seed: int = 0
    norm: str = "linf"

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.restarts < 0:
            raise ValueError("restarts must be >= 0")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown norm {self.norm!r}")

    @property
    def step_size(self) -> float:
        return self.step if self.step is not None else self.epsilon / 4.0


@dataclass
class EpsilonTable:
    """Per-example attack budgets on a fixed grid, capped at cap."""

    rho: float = DEFAULT_RHO
    cap: float = DEFAULT_CAP
    values: dict = field(default_factory=dict)

    def set(self, example_id: str, epsilon: float) -> None:
        if not 0.0 <= epsilon <= self.cap + 1e-12:
            raise ValueError(
                f"epsilon {epsilon} for {example_id!r} outside [0, {self.cap}]"
            )
        self.values[str(example_id)] = float(epsilon)

    def get(self, example_id: str, default: float | None = None) -> float | None:
        return self.values.get(str(example_id), default)

    def save_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["example_id", "epsilon"])
            for key in sorted(self.values):
                writer.writerow([key, repr(self.values[key])])

    @classmethod
    def load_csv(
        cls, path: Path | str, rho: float = DEFAULT_RHO, cap: float = DEFAULT_CAP
    ) -> "EpsilonTable":
        table = cls(rho=rho, cap=cap)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0] != ["example_id", "epsilon"]:
            raise NatraError(f"{Path(path).name}: expected header example_id,epsilon")
        for row in rows[1:]:
            if len(row) != 2:
                raise NatraError(f"{Path(path).name}: malformed row {row!r}")
            table.set(row[0], float(row[1]))
        return table


@dataclass
class SmoothedLabel:
    """Convex mix of a one-hot label with a Dirichlet draw."""

    probabilities: np.ndarray
    weight: float
    direction: np.ndarray
    c: float = DEFAULT_SMOOTHING_C

    def validate(self) -> None:
        if (self.probabilities < 0).any():
            raise ValueError("label probabilities must be non-negative")
        if abs(float(self.probabilities.sum()) - 1.0) > 1e-9:
            raise ValueError("label probabilities must sum to 1 within 1e-9")

    @property
    def hard_label(self) -> int:
        return int(np.argmax(self.probabilities))


def smooth_label(
    label: int,
    epsilon_i: float,
    n_classes: int,
    c: float = DEFAULT_SMOOTHING_C,
    seed: int = 0,
) -> SmoothedLabel:
    """Mix onehot(label) with a seeded Dirichlet(1) draw, weight c * epsilon_i."""
    if epsilon_i < 0:
        raise ValueError("epsilon_i must be >= 0")
    weight = c * epsilon_i
    if weight >= 1.0:
        raise ValueError(f"smoothing weight {weight} must stay below 1")
    if not 0 <= label < n_classes:
        raise ValueError(f"label {label} outside [0, {n_classes - 1}]")
    direction = np_rng(seed, "label-smoothing").dirichlet(np.ones(n_classes))
    probabilities = (1.0 - weight) * np.eye(n_classes)[label] + weight * direction
    smoothed = SmoothedLabel(
        probabilities=probabilities, weight=weight, direction=direction, c=c
    )
    smoothed.validate()
    return smoothed


def cross_entropy(prediction, label) -> float:
    """Cross-entropy of a probability vector against a hard or soft label.

    Zero probabilities are clamped at 1e-12 and reported as a RuntimeWarning
    so silent -inf losses cannot leak into training statistics.
    """
    probs = np.asarray(prediction, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("prediction must be a 1-D probability vector")
    if isinstance(label, SmoothedLabel):
        target = label.probabilities
    elif isinstance(label, (int, np.integer)):
        target = np.eye(probs.shape[0])[int(label)]
    else:
        target = np.asarray(label, dtype=np.float64)
        if target.shape != probs.shape:
            raise ValueError("soft label shape does not match prediction")
    support = target > 0
    if (probs[support] < PROB_CLAMP).any():
        warnings.warn(
            "zero probability at a labeled class, clamped at 1e-12", RuntimeWarning
        )
    return float(-(target[support] * np.log(np.clip(probs[support], PROB_CLAMP, None))).sum())


def project_linf(candidate, center, epsilon: float):
    """Coordinate-wise clamp of candidate into the l-inf ball around center."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    cand = np.asarray(candidate, dtype=np.float64)
    mid = np.asarray(center, dtype=np.float64)
    return np.clip(cand, mid - epsilon, mid + epsilon)


def _project_l2(candidate: torch.Tensor, center: torch.Tensor, epsilon: float):
    delta = candidate - center
    norms = delta.flatten(1).norm(dim=1).clamp_min(1e-30)
    scale = torch.clamp(epsilon / norms, max=1.0)
    return center + delta * scale.reshape(-1, *([1] * (delta.ndim - 1)))


def _restart_noise(shape, dtype, seed: int, row_ids, restart: int) -> torch.Tensor:
    rows = [
        torch.randn(
            shape[1:],
            generator=torch_generator(seed, "pgd-noise", int(row), restart),
            dtype=torch.float32,
        )
        for row in row_ids
    ]
    return torch.stack(rows).to(dtype)


def _ascend(loss_fn, z0, project, config: AttackConfig, noise_scale, row_ids, score_fn=None):
    """Shared projected-ascent loop with per-example best-iterate tracking.

    loss_fn maps a (B, ...) tensor to (per-example losses, logits). The
    starting point is always evaluated, so the returned loss never falls
    below the loss at z0. score_fn, when given, replaces the loss as the
    selection criterion; ties keep the earliest iterate.
    """
    step = config.step_size
    if score_fn is None:
        score_fn = lambda losses, logits: losses

    def evaluate(z, best):
        with torch.no_grad():
            losses, logits = loss_fn(z)
        score = score_fn(losses, logits)
        best_z, best_loss, best_score = best
        better = torch.isfinite(losses) & (score > best_score)
        best_z = torch.where(better.reshape(-1, *([1] * (z.ndim - 1))), z, best_z)
        return best_z, torch.where(better, losses, best_loss), torch.where(better, score, best_score)

    batch = z0.shape[0]
    with torch.no_grad():
        losses0, logits0 = loss_fn(z0)
    if not torch.isfinite(losses0).all():
        raise NatraError("loss is not finite at the starting point")
    score0 = score_fn(losses0, logits0)
    best = (z0.clone(), losses0.clone(), score0.clone())

    completed = torch.zeros(batch, dtype=torch.bool)
    for restart in range(config.restarts):
        noise = _restart_noise(z0.shape, z0.dtype, config.seed, row_ids, restart)
        z = project(z0 + noise_scale * noise).detach()
        alive = torch.ones(batch, dtype=torch.bool)
        for _ in range(config.iterations):
            best = evaluate(z, best)
            zg = z.detach().requires_grad_(True)
            losses, _ = loss_fn(zg)
            if losses.requires_grad:
                (grad,) = torch.autograd.grad(losses.sum(), zg, allow_unused=True)
            else:
                # A loss that ignores z (constant classifier) has no graph.
                grad = None
            if grad is None:
                grad = torch.zeros_like(zg)
            bad = ~torch.isfinite(grad.flatten(1).sum(dim=1)) | ~torch.isfinite(losses.detach())
            if bad.any():
                warnings.warn(
                    f"restart {restart}: non-finite gradient on {int(bad.sum())} example(s), aborted",
                    RuntimeWarning,
                )
            alive &= ~bad
            # Freeze aborted rows at their last finite point; NaN times a
            # zero mask would still be NaN.
            grad = torch.where(
                alive.reshape(-1, *([1] * (z.ndim - 1))), grad.detach(), torch.zeros_like(grad)
            )
            z = project(z.detach() + step * grad)
        best = evaluate(z, best)
        completed |= alive
    if config.restarts > 0 and config.iterations > 0 and not completed.all():
        raise NatraError(
            f"every restart aborted for example rows {torch.where(~completed)[0].tolist()}"
        )
    return best


def _as_target(labels):
    arr = np.asarray(labels)
    if arr.ndim == 2:
        return torch.as_tensor(arr, dtype=torch.float32)
    return torch.as_tensor(arr, dtype=torch.long)


def pgd_latent_batch(
    classifier,
    generator,
    z0s,
    labels,
    config: AttackConfig | None = None,
    row_ids=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Projected gradient ascent over a batch of flat latent codes.

    Returns the best visited iterate and its loss per example; every
    iterate stays inside the epsilon ball around its starting code.
    """
    config = config or AttackConfig()
    config.validate()
    dtype = next(generator.parameters()).dtype
    z0 = torch.as_tensor(np.asarray(z0s), dtype=dtype)
    if z0.ndim != 2:
        raise ValueError("z0s must be a (B, D) array")
    if row_ids is None:
        row_ids = range(z0.shape[0])
    target = _as_target(labels)
    lo, hi = z0 - config.epsilon, z0 + config.epsilon

    if config.norm == "linf":
        project = lambda z: torch.clamp(z, lo, hi)
    else:
        project = lambda z: _project_l2(z, z0, config.epsilon)

    def loss_fn(z):
        logits = classifier(generator.decode_tensor(z))
        return F.cross_entropy(logits, target.to(logits.device), reduction="none"), logits

    best_z, best_loss, _ = _ascend(
        loss_fn, z0, project, config, config.epsilon / 2.0, list(row_ids)
    )
    return best_z.numpy().astype(np.float64), best_loss.numpy().astype(np.float64)


def pgd_latent(
    classifier, generator, z0, label, config: AttackConfig | None = None
) -> tuple[np.ndarray, float]:
    """Single-example ascent; behaves as row 0 of a batch of one."""
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 1:
        raise ValueError("z0 must be a flat (D,) code")
    soft = label.probabilities if isinstance(label, SmoothedLabel) else label
    labels = np.asarray(soft)[None] if np.ndim(soft) == 1 else np.array([soft])
    best, losses = pgd_latent_batch(classifier, generator, z0[None], labels, config)
    return best[0], float(losses[0])


def _grid_levels(rho: float, cap: float) -> list:
    if not rho > 0:
        raise ValueError("rho must be positive")
    if not cap > 0:
        raise ValueError("cap must be positive")
    levels = []
    k = 1
    while k * rho < cap - 1e-12:
        levels.append(round(k * rho, 12))
        k += 1
    levels.append(cap)
    return levels


def adapt_epsilon_batch(
    classifier,
    generator,
    z0s,
    labels,
    rho: float = DEFAULT_RHO,
    cap: float = DEFAULT_CAP,
    config: AttackConfig | None = None,
) -> np.ndarray:
    """Smallest grid level at which each example falls, cap if none.

    Examples the classifier already misclassifies at their reconstruction
    get budget 0. Each level runs a fresh attack with step cap/4 scaled to
    the level, so budgets are monotone in attack strength.
    """
    config = config or AttackConfig()
    config.validate()
    z0 = np.asarray(z0s, dtype=np.float64)
    label_arr = np.asarray(labels)
    batch = z0.shape[0]
    out = np.full(batch, float(cap))

    with torch.no_grad():
        dtype = next(generator.parameters()).dtype
        logits = classifier(generator.decode_tensor(torch.as_tensor(z0, dtype=dtype)))
    clean_wrong = logits.argmax(dim=1).numpy() != label_arr
    out[clean_wrong] = 0.0

    active = np.where(~clean_wrong)[0]
    for level in _grid_levels(rho, cap):
        if active.size == 0:
            break
        level_config = replace(config, epsilon=level, step=None)
        best, _ = pgd_latent_batch(
            classifier,
            generator,
            z0[active],
            label_arr[active],
            level_config,
            row_ids=active,
        )
        with torch.no_grad():
            attacked = classifier(
                generator.decode_tensor(torch.as_tensor(best, dtype=dtype))
            )
        flipped = attacked.argmax(dim=1).numpy() != label_arr[active]
        out[active[flipped]] = level
        active = active[~flipped]
    return out


def adapt_epsilon(
    classifier,
    generator,
    z0,
    label,
    rho: float = DEFAULT_RHO,
    cap: float = DEFAULT_CAP,
    config: AttackConfig | None = None,
) -> float:
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.ndim != 1:
        raise ValueError("z0 must be a flat (D,) code")
    out = adapt_epsilon_batch(
        classifier, generator, z0[None], np.array([label]), rho, cap, config
    )
    return float(out[0])


def _fooling_search(
    entries,
    basis,
    generator,
    eps_arr: np.ndarray,
    label_arr: np.ndarray,
    n_classes: int,
    base_pred: torch.Tensor,
    target: torch.Tensor,
    config: AttackConfig,
    smoothing_c: float,
    make_loss_fn,
    decode_best,
) -> list:
    """Entry loop shared by the single-code and expanded transform builders.

    For every task-irrelevant catalog entry, ascend the classifier loss on
    the scalar edit magnitude, bounded by both the entry's curated range
    and each example's budget divided by the template's sup norm. An
    iterate joins the output only if it changes the prediction relative to
    the example's reconstruction; each kept image is paired with a label
    smoothed by the example's budget.
    """
    n_layers, latent_dim = generator.num_layers, generator.latent_dim
    dtype = next(generator.parameters()).dtype
    results = [[] for _ in range(eps_arr.shape[0])]
    for entry in entries:
        template = entry_template(entry, basis, n_layers, latent_dim)
        sup = float(np.abs(template).max())
        if sup == 0.0:
            continue
        r_max = eps_arr / sup
        lo = np.maximum(entry.magnitude_lo, -r_max)
        hi = np.minimum(entry.magnitude_hi, r_max)
        usable = (lo <= hi) & (eps_arr > 0)
        rows = np.where(usable)[0]
        if rows.size == 0:
            continue

        template_t = torch.as_tensor(template, dtype=dtype)
        lo_t = torch.as_tensor(lo[rows], dtype=dtype).reshape(-1, 1)
        hi_t = torch.as_tensor(hi[rows], dtype=dtype).reshape(-1, 1)
        target_rows = target[rows]
        pred_rows = base_pred[rows]
        loss_fn = make_loss_fn(rows, template_t, target_rows)

        def fooling_score(losses, logits):
            fooled = logits.argmax(dim=1) != pred_rows
            return torch.where(fooled, losses, torch.full_like(losses, -np.inf))

        r0 = torch.clamp(torch.zeros(rows.size, 1, dtype=dtype), lo_t, hi_t)
        entry_seed = derive_seed(config.seed, "nat-transform", entry.name)
        entry_config = replace(config, seed=entry_seed)
        noise_scale = (hi_t - lo_t) / 4.0
        best_r, _, best_score = _ascend(
            loss_fn,
            r0,
            lambda r: torch.clamp(r, lo_t, hi_t),
            entry_config,
            noise_scale,
            [int(i) for i in rows],
            score_fn=fooling_score,
        )

        kept = torch.isfinite(best_score)
        if not kept.any():
            continue
        out_images = decode_best(rows, best_r, template_t)
        for j, row in enumerate(rows):
            if not bool(kept[j]):
                continue
            label_seed = derive_seed(config.seed, "nat-smooth", entry.name, int(row))
            smoothed = smooth_label(
                int(label_arr[row]),
                float(eps_arr[row]),
                n_classes,
                c=smoothing_c,
                seed=label_seed,
            )
            results[int(row)].append((out_images[j].astype(np.float64), smoothed))
    return results


def _check_transform_inputs(images, catalog) -> np.ndarray:
    if not catalog.entries:
        raise ValueError("catalog has no entries")
    imgs = np.asarray(images)
    if imgs.ndim == 3:
        raise ValueError("images must be a (B, H, W, C) batch")
    return imgs


def build_nat_transforms_batch(
    images,
    labels,
    classifier,
    generator,
    encoder,
    catalog: TransformationCatalog,
    basis: DirectionBasis | LatentRegressionBasis,
    epsilons,
    config: AttackConfig | None = None,
    smoothing_c: float = DEFAULT_SMOOTHING_C,
) -> list:
    """Fooling catalog transformations for each example in a batch.

    Inverts each image to a single code, then searches every
    task-irrelevant catalog entry for magnitudes that flip the prediction
    within the per-example budget. Returns one list of
    (image, SmoothedLabel) pairs per example; empty lists are valid.
    """
    config = config or AttackConfig()
    config.validate()
    imgs = _check_transform_inputs(images, catalog)
    label_arr = np.asarray(labels, dtype=np.int64)
    eps_arr = np.asarray(epsilons, dtype=np.float64)
    batch = imgs.shape[0]
    n_layers, latent_dim = generator.num_layers, generator.latent_dim
    dtype = next(generator.parameters()).dtype

    z = encoder.invert(imgs)
    stacks = torch.as_tensor(z, dtype=dtype).unsqueeze(1).expand(batch, n_layers, latent_dim)
    with torch.no_grad():
        recon = generator.forward(stacks)
        base_logits = classifier(recon)
    base_pred = base_logits.argmax(dim=1)
    n_classes = int(base_logits.shape[1])
    target = torch.as_tensor(label_arr, dtype=torch.long)

    def make_loss_fn(rows, template_t, target_rows):
        base_rows = stacks[rows]

        def loss_fn(r):
            edited = base_rows + r.reshape(-1, 1, 1) * template_t
            logits = classifier(generator.forward(edited))
            return F.cross_entropy(logits, target_rows, reduction="none"), logits

        return loss_fn

    def decode_best(rows, best_r, template_t):
        with torch.no_grad():
            edited = stacks[rows] + best_r.reshape(-1, 1, 1) * template_t
            return generator.forward(edited).permute(0, 2, 3, 1).numpy()

    return _fooling_search(
        catalog.task_irrelevant(),
        basis,
        generator,
        eps_arr,
        label_arr,
        n_classes,
        base_pred,
        target,
        config,
        smoothing_c,
        make_loss_fn,
        decode_best,
    )


def build_nat_transforms(
    image,
    label,
    classifier,
    generator,
    encoder,
    catalog: TransformationCatalog,
    basis: DirectionBasis | LatentRegressionBasis,
    epsilon_i: float,
    config: AttackConfig | None = None,
    smoothing_c: float = DEFAULT_SMOOTHING_C,
) -> list:
    """Single-example variant; behaves as row 0 of a batch of one."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError("image must be (H, W, C)")
    return build_nat_transforms_batch(
        img[None],
        np.array([label]),
        classifier,
        generator,
        encoder,
        catalog,
        basis,
        np.array([epsilon_i]),
        config,
        smoothing_c,
    )[0]


def _compose_rows(generator, codes, importances, split_layer, offsets):
    """Differentiable batched composition with per-example stack offsets.

    codes (B, N, D) and importances (B, N, C_l) come from expanded
    inversions; offsets (B, L, D) shift every code's stack the way single
    codes are shifted by an edit. Returns (B, C, H, W) images.
    """
    b, n, d = codes.shape
    layers = generator.num_layers
    stacks = generator.as_stack(codes.reshape(b * n, d)).reshape(b, n, layers, d)
    stacks = stacks + offsets.reshape(b, 1, layers, d).to(stacks.dtype)
    fm = generator.head(stacks.reshape(b * n, layers, d), split_layer)
    channels = fm.features.shape[1]
    weighted = fm.features * importances.reshape(b * n, channels, 1, 1).to(fm.features.dtype)
    merged = weighted.reshape(b, n, *weighted.shape[1:]).sum(dim=1)
    return generator.tail(merged, split_layer, codes=stacks.mean(dim=1))


def build_nat_transforms_expanded_batch(
    images,
    labels,
    classifier,
    generator,
    expansions,
    catalog: TransformationCatalog,
    basis: DirectionBasis | LatentRegressionBasis,
    epsilons,
    config: AttackConfig | None = None,
    smoothing_c: float = DEFAULT_SMOOTHING_C,
) -> list:
    """Fooling catalog transformations built on expanded inversions.

    Same contract as build_nat_transforms_batch, but each example's
    reconstruction is its composed ExpandedLatent and the entry
    displacement shifts all of its codes together. expansions must hold
    one ExpandedLatent per image, all sharing split layer and code count.
    """
    config = config or AttackConfig()
    config.validate()
    imgs = _check_transform_inputs(images, catalog)
    batch = imgs.shape[0]
    if len(expansions) != batch:
        raise ValueError("need one expanded latent per image")
    if len({exp.split_layer for exp in expansions}) > 1:
        raise ValueError("expanded latents must share a split layer")
    if len({exp.n_codes for exp in expansions}) > 1:
        raise ValueError("expanded latents must share a code count")
    split = expansions[0].split_layer
    label_arr = np.asarray(labels, dtype=np.int64)
    eps_arr = np.asarray(epsilons, dtype=np.float64)
    n_layers, latent_dim = generator.num_layers, generator.latent_dim
    dtype = next(generator.parameters()).dtype

    codes = torch.as_tensor(np.stack([e.codes for e in expansions]), dtype=dtype)
    imps = torch.as_tensor(np.stack([e.importances for e in expansions]), dtype=dtype)
    no_offset = torch.zeros(batch, n_layers, latent_dim, dtype=dtype)
    with torch.no_grad():
        recon = _compose_rows(generator, codes, imps, split, no_offset)
        base_logits = classifier(recon)
    base_pred = base_logits.argmax(dim=1)
    n_classes = int(base_logits.shape[1])
    target = torch.as_tensor(label_arr, dtype=torch.long)

    def make_loss_fn(rows, template_t, target_rows):
        rows_t = torch.as_tensor(rows, dtype=torch.long)

        def loss_fn(r):
            offsets = r.reshape(-1, 1, 1) * template_t
            out = _compose_rows(generator, codes[rows_t], imps[rows_t], split, offsets)
            logits = classifier(out)
            return F.cross_entropy(logits, target_rows, reduction="none"), logits

        return loss_fn

    def decode_best(rows, best_r, template_t):
        rows_t = torch.as_tensor(rows, dtype=torch.long)
        with torch.no_grad():
            offsets = best_r.reshape(-1, 1, 1) * template_t
            out = _compose_rows(generator, codes[rows_t], imps[rows_t], split, offsets)
            return out.permute(0, 2, 3, 1).numpy()

    return _fooling_search(
        catalog.task_irrelevant(),
        basis,
        generator,
        eps_arr,
        label_arr,
        n_classes,
        base_pred,
        target,
        config,
        smoothing_c,
        make_loss_fn,
        decode_best,
    )


def build_nat_transforms_expanded(
    image,
    label,
    classifier,
    generator,
    expanded,
    catalog: TransformationCatalog,
    basis: DirectionBasis | LatentRegressionBasis,
    epsilon_i: float,
    config: AttackConfig | None = None,
    smoothing_c: float = DEFAULT_SMOOTHING_C,
) -> list:
    """Single-example variant; behaves as row 0 of a batch of one."""
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError("image must be (H, W, C)")
    return build_nat_transforms_expanded_batch(
        img[None],
        np.array([label]),
        classifier,
        generator,
        [expanded],
        catalog,
        basis,
        np.array([epsilon_i]),
        config,
        smoothing_c,
    )[0]
