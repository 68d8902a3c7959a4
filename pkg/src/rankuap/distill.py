"""Black-box substitute distillation: query a ranking oracle, then train a
substitute embedding by coarse-to-fine ordinal regression on the returned
lists. The substitute can then stand in for the victim in the white-box
attack.

The oracle interface is a single capability: query(image) -> the full ordered
list of reference indices, most similar first.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .errors import ConfigurationError, OracleError
from .model import EmbeddingModel, descriptor_table

DEFAULT_BASE_SIZE = 64


class VictimOracle:
    """In-process oracle backed by a local model over the reference split.

    Descriptors are extracted at a fixed base size so repeated queries are
    deterministic.
    """

    def __init__(self, model, dataset, base_size=DEFAULT_BASE_SIZE):
        self.model = model
        self.reference_indices = np.asarray(dataset.reference_indices)
        self.base_size = base_size
        self._ref_descs = descriptor_table(
            model, [dataset.images[i] for i in self.reference_indices], size=base_size
        )

    def query(self, image):
        img = np.asarray(image, dtype=np.float64)
        if img.shape[1:] != (self.base_size, self.base_size):
            img = ad.bilinear_resize(
                ad.constant(img[None]), self.base_size, self.base_size
            ).data[0]
        q = self.model.descriptor(img)
        d = np.linalg.norm(self._ref_descs - q, axis=1)
        order = np.argsort(d, kind="stable")
        return [int(self.reference_indices[j]) for j in order]


class FolderOracle:
    """Directory-exchange oracle for attacking an external system.

    Each query writes `queries/q_NNNNN.png`; the external system is expected to
    answer with `responses/q_NNNNN.txt` holding one reference index per line,
    most similar first. Polls until the response appears or the timeout runs
    out.
    """

    def __init__(self, root, timeout=60.0, poll_interval=0.05):
        self.root = Path(root)
        self.timeout = timeout
        self.poll_interval = poll_interval
        self.counter = 0
        (self.root / "queries").mkdir(parents=True, exist_ok=True)
        (self.root / "responses").mkdir(parents=True, exist_ok=True)

    def query(self, image):
        name = f"q_{self.counter:05d}"
        self.counter += 1
        arr = np.clip(np.round(np.asarray(image)), 0, 255).astype(np.uint8)
        Image.fromarray(arr.transpose(1, 2, 0)).save(self.root / "queries" / f"{name}.png")
        response = self.root / "responses" / f"{name}.txt"
        deadline = time.monotonic() + self.timeout
        while not response.is_file():
            if time.monotonic() >= deadline:
                raise OracleError(f"no response for {name} within {self.timeout}s")
            time.sleep(self.poll_interval)
        lines = response.read_text().split()
        try:
            return [int(tok) for tok in lines]
        except ValueError as exc:
            raise OracleError(f"malformed response {name}: {exc}") from exc


@dataclass
class RankingCollection:
    """Stored oracle answers plus the black-box budget actually spent."""

    rankings: list  # one full ordered index list per probe
    probe_indices: list
    queries_spent: int


def collect_rankings(oracle, images, probe_indices=None, retries=2):
    """Query the oracle once per probe image, with a simple retry policy.

    Every attempt counts against the budget. A probe that still fails after
    the retries is reported in one aggregated error.
    """
    if probe_indices is None:
        probe_indices = list(range(len(images)))
    rankings = []
    spent = 0
    failures = []
    for idx in probe_indices:
        answer = None
        for _ in range(1 + retries):
            spent += 1
            try:
                answer = list(oracle.query(images[idx]))
                break
            except OracleError:
                continue
        if answer is None:
            failures.append(int(idx))
            continue
        if len(set(answer)) != len(answer):
            raise OracleError(f"oracle ranking for probe {idx} repeats indices")
        rankings.append(answer)
    if failures:
        raise OracleError(
            f"no ranking for {len(failures)} probe(s) after {retries} retries: {failures}"
        )
    return RankingCollection(
        rankings=rankings, probe_indices=list(probe_indices), queries_spent=spent
    )


def bin_and_sample(ranking, num_bins, seed):
    """One uniformly sampled index per contiguous rank bin, in bin order.

    Bin sizes differ by at most one; the remainder goes to the leading bins,
    so sampled original-rank positions are strictly increasing.
    """
    n = len(ranking)
    if not (1 <= num_bins <= n):
        raise ConfigurationError(f"num_bins {num_bins} not in [1, {n}]")
    words = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    rng = np.random.default_rng(words + [0xB145])
    base, rem = divmod(n, num_bins)
    out = []
    start = 0
    for b in range(num_bins):
        size = base + (1 if b < rem else 0)
        out.append(ranking[start + int(rng.integers(size))])
        start += size
    return out


def ordinal_regression_loss(q, refs_in_rank_order, beta, discounts=None):
    """Sum over m > n of lambda_m * [d(q, r_n) - d(q, r_m) + beta]_+ .

    `q` is the substitute's differentiable query descriptor and
    `refs_in_rank_order` its differentiable member descriptors ordered
    most-similar-first per the oracle. The hinge pushes every worse-ranked
    member at least `beta` farther than every better-ranked one. The default
    discount is lambda_m = 1/log2(m+1) with 1-based rank m.
    """
    m_total = len(refs_in_rank_order)
    if m_total < 2:
        return ad.Tensor(0.0)
    if discounts is None:
        discounts = [1.0 / np.log2(m + 1.0) for m in range(1, m_total + 1)]
    dists = [ad.euclidean_distance(q, r) for r in refs_in_rank_order]
    total = ad.Tensor(0.0)
    for m in range(1, m_total):
        for n in range(m):
            hinge = ad.relu(
                ad.add(ad.Tensor(float(beta)), ad.sub(dists[n], dists[m]))
            )
            total = ad.add(total, ad.scale(hinge, float(discounts[m])))
    return total


@dataclass
class DistillationConfig:
    num_bins: int = 32
    top_k: int = 10
    margin_coarse: float = 0.2
    margin_fine: float = 0.05
    coarse_epochs: int = 4
    fine_epochs: int = 4
    coarse_lr: float = 0.05
    fine_lr: float = 0.01
    momentum: float = 0.9
    base_size: int = DEFAULT_BASE_SIZE
    seed: int = 0

    def __post_init__(self):
        if self.margin_fine > self.margin_coarse:
            raise ConfigurationError("fine margin must not exceed the coarse margin")
        if self.num_bins < 1 or self.top_k < 1:
            raise ConfigurationError("num_bins and top_k must be >= 1")


def _resize_cache(dataset, size):
    cache = {}
    for i, img in enumerate(dataset.images):
        if img.shape[1:] == (size, size):
            cache[i] = img
        else:
            cache[i] = ad.bilinear_resize(ad.constant(img[None]), size, size).data[0]
    return cache


def _train_stage(model, dataset, collection, subsets_fn, beta, lr, momentum, epochs, seed, cache):
    velocity = [np.zeros_like(p.data) for p in model.parameters()]
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 0xD157, epoch])
        order = rng.permutation(len(collection.probe_indices))
        for j in order:
            probe = collection.probe_indices[j]
            members = subsets_fn(collection.rankings[j], epoch, j)
            q = model.descriptor_tensor(ad.constant(cache[probe]))
            refs = [model.descriptor_tensor(ad.constant(cache[r])) for r in members]
            loss = ordinal_regression_loss(q, refs, beta)
            if loss.item() == 0.0:
                continue
            model.zero_grad()
            ad.backward(loss)
            for v, prm in zip(velocity, model.parameters()):
                if prm.grad is None:
                    continue
                v *= momentum
                v += prm.grad
                prm.data -= lr * v
    return model


def distill(oracle, arch, dataset, config=None, init_model=None, probe_indices=None, collection=None):
    """Train a substitute embedding to mimic the oracle's rankings.

    Stage 1 regresses coarse bin-sampled subsets of the full lists; stage 2
    refines on the top-k prefixes with reduced margin and learning rate. The
    substitute starts from `init_model` when given (the pre-trained analog),
    else from a random initialization of `arch`.
    """
    config = config or DistillationConfig()
    if collection is None:
        if probe_indices is None:
            probe_indices = [int(i) for i in dataset.reference_indices]
        collection = collect_rankings(oracle, dataset.images, probe_indices)
    if config.top_k > min(len(r) for r in collection.rankings):
        raise ConfigurationError("top_k exceeds the shortest oracle ranking")

    model = init_model if init_model is not None else EmbeddingModel(arch, seed=config.seed)
    model.metadata["distilled"] = True
    model.metadata["oracle_budget"] = collection.queries_spent
    cache = _resize_cache(dataset, config.base_size)

    def coarse_subset(ranking, epoch, j):
        bins = min(config.num_bins, len(ranking))
        return bin_and_sample(ranking, bins, seed=(config.seed, 0xC04, epoch, j))

    def fine_subset(ranking, epoch, j):
        return ranking[: config.top_k]

    _train_stage(
        model, dataset, collection, coarse_subset, config.margin_coarse,
        config.coarse_lr, config.momentum, config.coarse_epochs, config.seed, cache,
    )
    _train_stage(
        model, dataset, collection, fine_subset, config.margin_fine,
        config.fine_lr, config.momentum, config.fine_epochs, config.seed + 1, cache,
    )
    return model


def rank_overlap(model, oracle_rankings, probe_indices, dataset, k=10, base_size=DEFAULT_BASE_SIZE):
    """Mean fraction of shared items between substitute and oracle top-k lists."""
    sub_oracle = VictimOracle(model, dataset, base_size=base_size)
    overlaps = []
    for probe, ranking in zip(probe_indices, oracle_rankings):
        ours = sub_oracle.query(dataset.images[probe])
        overlaps.append(len(set(ours[:k]) & set(ranking[:k])) / float(k))
    return float(np.mean(overlaps))
