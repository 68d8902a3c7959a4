"""The victim/substitute retrieval model: a small fully-convolutional backbone
with a MAC or GeM pooling head producing unit-norm descriptors.

Also hosts victim training (standard triplet objective with semi-hard
sampling), the pseudo-label classifier head for the label-wise baseline, and
checkpoint I/O.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .container import load_container, save_container
from .errors import ConfigurationError, FormatError, ShapeError

CHECKPOINT_KIND = "embedding-model"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 2
    padding: int = 1


@dataclass(frozen=True)
class ArchSpec:
    convs: tuple = (ConvSpec(8), ConvSpec(16), ConvSpec(32))
    pooling: str = "gem"  # "gem" | "mac"
    gem_p: float = 3.0
    in_channels: int = 3

    def __post_init__(self):
        if self.pooling not in ("gem", "mac"):
            raise ConfigurationError(f"unknown pooling: {self.pooling}")

    @property
    def descriptor_dim(self):
        return self.convs[-1].out_channels

    @property
    def min_input(self):
        for size in range(1, 512):
            h = size
            ok = True
            for c in self.convs:
                if h + 2 * c.padding < c.kernel:
                    ok = False
                    break
                h = (h + 2 * c.padding - c.kernel) // c.stride + 1
                if h < 1:
                    ok = False
                    break
            if ok:
                return size
        raise ConfigurationError("architecture accepts no reasonable input size")

    def to_dict(self):
        return {
            "convs": [[c.out_channels, c.kernel, c.stride, c.padding] for c in self.convs],
            "pooling": self.pooling,
            "gem_p": self.gem_p,
            "in_channels": self.in_channels,
        }

    @staticmethod
    def from_dict(d):
        return ArchSpec(
            convs=tuple(ConvSpec(*row) for row in d["convs"]),
            pooling=d["pooling"],
            gem_p=float(d["gem_p"]),
            in_channels=int(d["in_channels"]),
        )


@dataclass
class Descriptor:
    vector: np.ndarray
    source_id: int = -1


class EmbeddingModel:
    """F(.): image in [0,255] at any admissible size -> unit-norm descriptor."""

    def __init__(self, arch, seed=0):
        self.arch = arch
        self.metadata = {"seed": seed}
        self.classifier = None  # optional (W, b) Tensors over pseudo-labels
        rng = np.random.default_rng([seed, 0xA11])
        self.layers = []
        cin = arch.in_channels
        for spec in arch.convs:
            fan_in = cin * spec.kernel * spec.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(spec.out_channels, cin, spec.kernel, spec.kernel))
            b = np.zeros(spec.out_channels)
            self.layers.append((ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True)))
            cin = spec.out_channels
        self.train_history = []

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        params = [t for pair in self.layers for t in pair]
        if self.classifier is not None:
            params.extend(self.classifier)
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- forward ------------------------------------------------------------

    def _check_size(self, h, w):
        m = self.arch.min_input
        if h < m or w < m:
            raise ShapeError(f"input {h}x{w} below model minimum {m}x{m}")

    def descriptor_tensor(self, x, frozen=False):
        """Differentiable descriptor of a CHW tensor with values in [0,255].

        With `frozen`, backbone parameters are treated as constants so only the
        input (e.g. the perturbation upstream of it) receives gradient.
        """
        if x.data.ndim != 3:
            raise ShapeError(f"expected CHW image, got shape {x.data.shape}")
        self._check_size(x.data.shape[1], x.data.shape[2])
        h = ad.reshape(ad.scale(x, 1.0 / 255.0), (1,) + x.data.shape)
        for (w, b), spec in zip(self.layers, self.arch.convs):
            if frozen:
                w, b = ad.constant(w.data), ad.constant(b.data)
            h = ad.relu(ad.conv2d(h, w, stride=spec.stride, padding=spec.padding, bias=b))
        if self.arch.pooling == "mac":
            pooled = ad.mac_pool(h)
        else:
            pooled = ad.gem_pool(h, self.arch.gem_p)
        flat = ad.reshape(pooled, (-1,))
        if np.linalg.norm(flat.data) < 1e-9:
            # dead activations (possible under adversarial input); fall back to
            # a uniform direction so the descriptor stays unit-norm
            flat = ad.add(flat, ad.constant(np.full(flat.data.shape, 1e-9)))
        return ad.l2_normalize(flat)

    def descriptor(self, image):
        """Descriptor of a CHW ndarray; no gradient is retained."""
        return self.descriptor_tensor(ad.constant(image), frozen=True).data

    def logits_tensor(self, descriptor, frozen=False):
        if self.classifier is None:
            raise ConfigurationError("model has no classifier head")
        w, b = self.classifier
        if frozen:
            w, b = ad.constant(w.data), ad.constant(b.data)
        return ad.fully_connected(descriptor, w, b)


def extract_descriptor(model, image, source_id=-1):
    image = np.asarray(image, dtype=np.float64)
    if image.min() < 0 or image.max() > 255:
        raise ShapeError("image values must lie in [0, 255]")
    return Descriptor(vector=model.descriptor(image), source_id=source_id)


def descriptor_table(model, images, size=None):
    """Stack descriptors for a list of CHW images, optionally resized first."""
    out = np.empty((len(images), model.arch.descriptor_dim))
    for i, img in enumerate(images):
        if size is not None and img.shape[1:] != (size, size):
            img = ad.bilinear_resize(ad.constant(img[None]), size, size).data[0]
        out[i] = model.descriptor(img)
    return out


# ---------------------------------------------------------------------------
# Victim training
# ---------------------------------------------------------------------------


def train_victim(
    dataset,
    arch=None,
    seed=0,
    epochs=30,
    lr=0.05,
    momentum=0.9,
    margin=0.3,
    aug_sides=(32, 96),
    optimizer="sgd",
):
    """Train an embedding model with the standard triplet objective.

    Semi-hard negatives are mined against an epoch-start descriptor table of
    the reference split. Each image is forwarded at a random square size in
    `aug_sides` so descriptors stay stable across the resize range.
    `optimizer` selects plain momentum SGD or Adam (adaptive steps; use a
    smaller lr, around 0.005). Deterministic given the seed.
    """
    arch = arch or ArchSpec()
    labels = dataset.labels
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 4:
        raise ConfigurationError("victim training needs >= 2 classes with >= 4 images each")

    model = EmbeddingModel(arch, seed=seed)
    model.metadata.update(
        {"seed": seed, "epochs": epochs, "dataset_hash": dataset.content_hash()}
    )
    refs = dataset.reference_indices
    ref_labels = labels[refs]
    by_class = {int(c): np.flatnonzero(ref_labels == c) for c in classes}

    if optimizer not in ("sgd", "adam"):
        raise ConfigurationError(f"unknown optimizer: {optimizer!r}")
    velocity = [np.zeros_like(p.data) for p in model.parameters()]
    second = [np.zeros_like(p.data) for p in model.parameters()]
    adam_t = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 0xEC, epoch])
        table = descriptor_table(model, [dataset.images[i] for i in refs])
        order = rng.permutation(len(refs))
        epoch_losses = []
        for a in order:
            la = int(ref_labels[a])
            pos_pool = by_class[la]
            pos_pool = pos_pool[pos_pool != a]
            p = int(rng.choice(pos_pool))
            d_ap = float(np.linalg.norm(table[a] - table[p]))
            neg_pool = np.flatnonzero(ref_labels != la)
            cand = rng.choice(neg_pool, size=min(10, len(neg_pool)), replace=False)
            d_an = np.linalg.norm(table[cand] - table[a], axis=1)
            semi = cand[(d_an > d_ap) & (d_an < d_ap + margin)]
            if len(semi):
                n = int(semi[0])
            else:
                n = int(cand[int(np.argmin(d_an))])

            def _aug(img):
                side = int(rng.integers(aug_sides[0], aug_sides[1] + 1))
                if img.shape[1:] == (side, side):
                    return ad.constant(img)
                return ad.constant(ad.bilinear_resize(ad.constant(img[None]), side, side).data[0])

            fa = model.descriptor_tensor(_aug(dataset.images[refs[a]]))
            fp = model.descriptor_tensor(_aug(dataset.images[refs[p]]))
            fn = model.descriptor_tensor(_aug(dataset.images[refs[n]]))
            hinge = ad.relu(
                ad.add(
                    ad.Tensor(margin),
                    ad.sub(ad.euclidean_distance(fa, fp), ad.euclidean_distance(fa, fn)),
                )
            )
            loss = hinge.item()
            epoch_losses.append(loss)
            if loss <= 0.0:
                continue
            model.zero_grad()
            ad.backward(hinge)
            if optimizer == "adam":
                adam_t += 1
                b1, b2, eps = 0.9, 0.999, 1e-8
                for m1, m2, prm in zip(velocity, second, model.parameters()):
                    if prm.grad is None:
                        continue
                    m1 *= b1
                    m1 += (1 - b1) * prm.grad
                    m2 *= b2
                    m2 += (1 - b2) * prm.grad**2
                    mhat = m1 / (1 - b1**adam_t)
                    vhat = m2 / (1 - b2**adam_t)
                    prm.data -= lr * mhat / (np.sqrt(vhat) + eps)
            else:
                for v, prm in zip(velocity, model.parameters()):
                    if prm.grad is None:
                        continue
                    v *= momentum
                    v += prm.grad
                    prm.data -= lr * v
        model.train_history.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
    return model


def train_classifier(model, descriptors, pseudo_labels, seed=0, steps=200, lr=0.5):
    """Fit the pseudo-label softmax head on frozen descriptors (full-batch GD)."""
    descriptors = np.asarray(descriptors)
    pseudo_labels = np.asarray(pseudo_labels)
    k = int(pseudo_labels.max()) + 1
    if k < 2:
        raise ConfigurationError("classifier head needs at least 2 pseudo-label classes")
    n, dim = descriptors.shape
    rng = np.random.default_rng([seed, 0xC1F])
    w = rng.normal(0.0, 0.01, size=(k, dim))
    b = np.zeros(k)
    onehot = np.eye(k)[pseudo_labels]
    for _ in range(steps):
        z = descriptors @ w.T + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (g.T @ descriptors)
        b -= lr * g.sum(axis=0)
    model.classifier = (ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True))
    return model


# ---------------------------------------------------------------------------
# Checkpoint I/O
# ---------------------------------------------------------------------------


def save_checkpoint(model, path):
    header = {
        "kind": CHECKPOINT_KIND,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch.to_dict(),
        "metadata": model.metadata,
        "has_classifier": model.classifier is not None,
    }
    arrays = [t.data for pair in model.layers for t in pair]
    if model.classifier is not None:
        arrays.extend(t.data for t in model.classifier)
    save_container(path, header, arrays)


def load_checkpoint(path):
    header, arrays = load_container(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise FormatError(f"{path}: kind {header.get('kind')!r} is not an embedding model")
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {header.get('version')}, expected {CHECKPOINT_VERSION}"
        )
    arch = ArchSpec.from_dict(header["arch"])
    model = EmbeddingModel(arch, seed=int(header["metadata"].get("seed", 0)))
    model.metadata = dict(header["metadata"])
    expected = 2 * len(arch.convs) + (2 if header["has_classifier"] else 0)
    if len(arrays) != expected:
        raise FormatError(f"{path}: expected {expected} parameter blocks, got {len(arrays)}")
    it = iter(arrays)
    layers = []
    for w, b in zip(it, it):
        layers.append((ad.Tensor(w, requires_grad=True), ad.Tensor(b, requires_grad=True)))
    model.layers = layers[: len(arch.convs)]
    if header["has_classifier"]:
        cw, cb = layers[len(arch.convs)]
        model.classifier = (cw, cb)
    return model
