"""Universal perturbation training: iterate over datapoints, accumulate the
chosen objective's gradient w.r.t. the perturbation, and update it with the
momentum-sign rule under an L-inf budget with saturation halving.

The optimizer ascends the supplied direction: label-wise and pair-wise losses
contribute their negated gradients, the list-wise surrogate its NDCG-ascent
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import autodiff as ad
from .container import load_container, save_container
from .errors import ConfigurationError, FormatError
from .evaluate import EvalContext
from .landmarks import farthest_cluster, sample_ranking_subset
from .model import descriptor_table
from .objectives import (
    LabelWise,
    ListWise,
    PairWise,
    labelwise_loss,
    listwise_surrogate,
    pairwise_loss,
)
from .resizing import apply_perturbation, perturbation_resize, random_input_resize

PERTURBATION_KIND = "perturbation"
SATURATION_LEVEL = 0.99


@dataclass
class Perturbation:
    delta: np.ndarray  # (C, base_h, base_w)
    epsilon: float
    train_mdr: float | None = None
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.epsilon < 0:
            raise ConfigurationError(f"epsilon must be >= 0, got {self.epsilon}")
        self.check_budget()

    def check_budget(self):
        if np.max(np.abs(self.delta), initial=0.0) > self.epsilon + 1e-12:
            raise ConfigurationError("perturbation violates its L-inf budget")

    @staticmethod
    def zeros(channels=3, base_size=64, epsilon=10.0):
        return Perturbation(np.zeros((channels, base_size, base_size)), epsilon)


@dataclass
class OptimizerState:
    momentum: np.ndarray
    mu: float = 1.0
    learning_rate: float = 1.0
    iteration: int = 0
    saturation_threshold: float = 0.5

    def __post_init__(self):
        if self.mu < 0 or self.learning_rate <= 0:
            raise ConfigurationError("need mu >= 0 and learning_rate > 0")
        if not (0.0 < self.saturation_threshold <= 1.0):
            raise ConfigurationError("saturation threshold must be in (0, 1]")


def momentum_step(state, pert, grad):
    """g <- mu*g + grad/||grad||_1 ; delta <- clip(delta + lr*sign(g), +-eps).

    An all-zero gradient skips the step but still advances the counter.
    Returns whether a step was applied.
    """
    if grad.shape != pert.delta.shape:
        raise ConfigurationError(f"gradient shape {grad.shape} != delta shape {pert.delta.shape}")
    state.iteration += 1
    l1 = float(np.abs(grad).sum())
    if l1 == 0.0:
        return False
    state.momentum *= state.mu
    state.momentum += grad / l1
    pert.delta += state.learning_rate * np.sign(state.momentum)
    np.clip(pert.delta, -pert.epsilon, pert.epsilon, out=pert.delta)
    return True


def saturation_rescale(pert, threshold, state=None):
    """Halve delta (and reset momentum) once enough entries pin at the budget."""
    if not (0.0 < threshold <= 1.0):
        raise ConfigurationError("saturation threshold must be in (0, 1]")
    if pert.epsilon == 0.0:
        return False
    frac = float(np.mean(np.abs(pert.delta) >= SATURATION_LEVEL * pert.epsilon))
    if frac >= threshold:
        pert.delta /= 2.0
        if state is not None:
            state.momentum[:] = 0.0
        return True
    return False


@dataclass
class UapConfig:
    epsilon: float = 10.0  # L-inf budget on the 0-255 pixel scale
    learning_rate: float = 1.0
    mu: float = 0.9
    saturation_threshold: float = 1.0
    max_epochs: int = 22
    stall_epochs: int = 7
    min_rel_improvement: float = 0.01
    seed: int = 0
    per_anchor: int = 1
    draws_per_anchor: int = 1
    anchors_per_step: int = 1
    base_size: int = 64
    epoch_subsample: int | None = None
    train_split: str = "all"  # "all" or "queries"
    init: str = "zeros"  # "zeros" or "random" (sign noise at half budget)
    perturb_references: bool = False
    evals_per_epoch: int = 8
    eval_draws: int = 1
    restarts: int = 1

    def to_dict(self):
        return dict(self.__dict__)


def _objective_gradient(objective, model, lm, clean_descs, anchor, desc, delta_leaf, rng, subset_seed, per_anchor=1):
    """Backward one datapoint's objective; return the ascent direction for delta."""
    if isinstance(objective, LabelWise):
        loss = labelwise_loss(model.logits_tensor(desc, frozen=True), int(lm.assignments[anchor]))
        if loss.item() == 0.0:
            return np.zeros_like(delta_leaf.data)
        ad.backward(loss)
        return -delta_leaf.grad
    if isinstance(objective, PairWise):
        ci = int(lm.assignments[anchor])
        positives = lm.members(ci)
        positives = positives[positives != anchor]
        if len(positives) == 0:
            return np.zeros_like(delta_leaf.data)
        negatives = lm.members(farthest_cluster(lm, ci))
        n = min(max(1, per_anchor), len(positives))
        ks = rng.choice(positives, size=n, replace=False)
        js = rng.choice(negatives, size=n, replace=True)
        loss = pairwise_loss(desc, clean_descs[js], clean_descs[ks], alpha=objective.alpha)
        if loss.item() == 0.0:
            return np.zeros_like(delta_leaf.data)
        ad.backward(loss)
        return -delta_leaf.grad
    if isinstance(objective, ListWise):
        subset = sample_ranking_subset(lm, anchor, seed=subset_seed)
        surrogate = listwise_surrogate(subset, desc, clean_descs[subset.member_indices])
        if surrogate is None:
            return np.zeros_like(delta_leaf.data)
        ad.backward(surrogate)
        return np.array(delta_leaf.grad)
    raise ConfigurationError(f"unknown objective: {objective!r}")


def run_uap_training(objective, model, dataset, lm, policy, config=None, clean_descs=None):
    """Generate a universal perturbation against `model` on `dataset`.

    Runs `config.restarts` independent optimizations from derived seeds and
    returns the perturbation with the best training mDR seen across them,
    with that run's mDR history attached. Deterministic given the config
    seed and the policy seed.
    """
    config = config or UapConfig()
    if isinstance(objective, LabelWise) and model.classifier is None:
        raise ConfigurationError("label-wise attack needs a trained classifier head")
    if len(lm.assignments) != len(dataset.images):
        raise ConfigurationError("landmark assignments do not cover the dataset")
    if clean_descs is None:
        clean_descs = descriptor_table(model, dataset.images, size=config.base_size)

    best = None
    for restart in range(max(1, config.restarts)):
        seed = config.seed + 104729 * restart
        pert = _train_once(objective, model, dataset, lm, policy, config, clean_descs, seed)
        if best is None or (pert.train_mdr or -np.inf) > (best.train_mdr or -np.inf):
            best = pert
    return best


def _train_once(objective, model, dataset, lm, policy, config, clean_descs, seed):
    """One seeded optimization pass; returns its best-iterate perturbation."""
    channels = dataset.images[0].shape[0]
    pert = Perturbation.zeros(channels, config.base_size, config.epsilon)
    if config.init == "random":
        init_rng = np.random.default_rng([seed, 0xA11])
        pert.delta += 0.5 * config.epsilon * np.sign(
            init_rng.standard_normal(pert.delta.shape)
        )
    elif config.init != "zeros":
        raise ConfigurationError(f"unknown init: {config.init!r}")
    state = OptimizerState(
        momentum=np.zeros_like(pert.delta),
        mu=config.mu,
        learning_rate=config.learning_rate,
        saturation_threshold=config.saturation_threshold,
    )
    eval_ctxs = [
        EvalContext(model, dataset, policy, seed=seed + 7919 * i)
        for i in range(max(1, config.eval_draws))
    ]

    if config.train_split == "queries":
        indices = np.asarray(dataset.query_indices)
    elif config.train_split == "all":
        indices = np.arange(len(dataset.images))
    else:
        raise ConfigurationError(f"unknown train_split: {config.train_split!r}")
    best_delta = pert.delta.copy()
    best_mdr = -np.inf
    history = []
    stall = 0
    sample_count = 0
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng([seed, 0x0A7, epoch])
        order = rng.permutation(indices)
        if config.epoch_subsample is not None:
            order = order[: config.epoch_subsample]
        chunk = max(1, int(np.ceil(len(order) / max(1, config.evals_per_epoch))))
        epoch_best = -np.inf
        prev_best = best_mdr
        batch = max(1, config.anchors_per_step)
        batch_grad = np.zeros_like(pert.delta)
        batch_fill = 0
        for position, anchor in enumerate(order):
            image = dataset.images[anchor]
            draws = max(1, config.draws_per_anchor)
            grad = None
            for draw in range(draws):
                x_res, (hh, ww) = random_input_resize(
                    policy, image, draw_index=draws * sample_count + draw
                )
                delta_leaf = ad.Tensor(pert.delta, requires_grad=True)
                d_res = perturbation_resize(delta_leaf, hh, ww)
                x_adv = apply_perturbation(x_res, d_res)
                desc = model.descriptor_tensor(x_adv, frozen=True)
                piece = _objective_gradient(
                    objective,
                    model,
                    lm,
                    clean_descs,
                    int(anchor),
                    desc,
                    delta_leaf,
                    rng,
                    subset_seed=[seed, 0x11F, sample_count],
                    per_anchor=config.per_anchor,
                )
                grad = piece if grad is None else grad + piece
            sample_count += 1
            l1 = np.abs(grad).sum()
            batch_grad += grad / (draws * l1) if l1 > 0 else 0.0
            batch_fill += 1
            if batch_fill < batch and position != len(order) - 1:
                continue
            momentum_step(state, pert, batch_grad)
            batch_grad = np.zeros_like(pert.delta)
            batch_fill = 0
            pert.check_budget()
            saturation_rescale(pert, state.saturation_threshold, state)
            pert.check_budget()
            if (position + 1) % chunk == 0 or position == len(order) - 1:
                mdr = float(np.mean([
                    c.evaluate(pert, perturb_references=config.perturb_references).mdr
                    for c in eval_ctxs
                ]))
                history.append(mdr)
                epoch_best = max(epoch_best, mdr)
                if mdr > best_mdr:
                    best_mdr = mdr
                    best_delta = pert.delta.copy()

        threshold = prev_best * (1.0 + config.min_rel_improvement) if prev_best > 0 else prev_best
        stall = 0 if epoch_best > threshold else stall + 1
        if stall >= config.stall_epochs:
            break

    return Perturbation(
        delta=best_delta,
        epsilon=config.epsilon,
        train_mdr=float(best_mdr) if np.isfinite(best_mdr) else None,
        history=history,
    )


# ---------------------------------------------------------------------------
# Perturbation I/O
# ---------------------------------------------------------------------------


def save_perturbation(pert, path):
    save_container(
        path,
        {
            "kind": PERTURBATION_KIND,
            "epsilon": pert.epsilon,
            "train_mdr": pert.train_mdr,
            "history": pert.history,
        },
        [pert.delta],
    )


def load_perturbation(path):
    header, arrays = load_container(path)
    if header.get("kind") != PERTURBATION_KIND:
        raise FormatError(f"{path}: kind {header.get('kind')!r} is not a perturbation")
    return Perturbation(
        delta=arrays[0],
        epsilon=float(header["epsilon"]),
        train_mdr=header.get("train_mdr"),
        history=list(header.get("history") or []),
    )


def export_png(pert, path):
    """8-bit visualization: values mapped affinely from [-eps, eps] to [0, 255]."""
    eps = pert.epsilon if pert.epsilon > 0 else 1.0
    arr = (pert.delta + eps) / (2 * eps) * 255.0
    arr = np.clip(np.round(arr), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(arr).save(path)
