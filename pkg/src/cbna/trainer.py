"""Desk-scale supervised training of the toy model on the source domain.

Forward in training mode normalizes every BN layer with the statistics of the
current batch (gradients flow through the batch mean and variance) and tracks
running statistics with an exponential moving average. Backpropagation is
written out per layer kind.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .batchnorm import BatchStats, compute_batch_stats, update_running_stats
from .errors import DataError, TrainingError
from .segnet import SegModel
from .tensor import as_tensor, im2col, pad_same, softmax_channels

LOG_CLAMP = 1e-12


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-3
    lr_final: float | None = None  # defaults to lr / 10
    momentum_bn: float = 0.1
    seed: int = 0
    sgd_momentum: float = 0.9
    flip: bool = True
    weight_offset: float = 1.02

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("need epochs >= 1, batch_size >= 1 and lr > 0")

    def lr_at(self, epoch: int) -> float:
        final = self.lr / 10 if self.lr_final is None else self.lr_final
        return final if epoch >= self.epochs - self.epochs // 4 else self.lr


def class_weights_from_frequencies(pixel_counts, offset: float = 1.02) -> np.ndarray:
    """w_s = 1 / ln(offset + p_s) for pixel frequency p_s."""
    counts = np.asarray(pixel_counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("at least one class needs a positive pixel count")
    return 1.0 / np.log(offset + counts / total)


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label indices must lie in [0, {num_classes}), got range "
                        f"[{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def _label_probs(posteriors, labels):
    return np.take_along_axis(posteriors, labels[..., None], axis=3)[..., 0]


def weighted_ce_loss(posteriors, labels, weights) -> float:
    """Class-weighted cross-entropy, averaged over pixels of each image, then over the batch."""
    posteriors = as_tensor(posteriors)
    if np.shape(labels) != posteriors.shape[:3]:
        raise DataError(f"labels {np.shape(labels)} do not match posteriors {posteriors.shape}")
    labels = _check_labels(labels, posteriors.shape[3])
    w = np.asarray(weights, np.float64)[labels]
    logp = np.log(np.maximum(_label_probs(posteriors, labels).astype(np.float64), LOG_CLAMP))
    return float(-(w * logp).mean(axis=(1, 2)).mean())


def ce_logit_grad(posteriors, labels, weights) -> np.ndarray:
    """Gradient of :func:`weighted_ce_loss` with respect to the logits."""
    b, h, w_, s = posteriors.shape
    labels = _check_labels(labels, s)
    w = np.asarray(weights, posteriors.dtype)[labels][..., None]
    g = posteriors.copy()
    np.put_along_axis(g, labels[..., None], _label_probs(g, labels)[..., None] - 1, axis=3)
    return g * w / (b * h * w_)


# -- training-mode forward / backward -----------------------------------------

def forward_train(model: SegModel, x):
    """Logits, per-layer caches and the batch statistics of every BN layer."""
    x = as_tensor(x)
    caches: list = []
    batch_stats: list[BatchStats] = []
    skips = []
    for layer in model.layers:
        kind = layer.kind
        if kind in ("conv", "head"):
            kh, kw, ci, co = layer.weights.shape
            xp = pad_same(x, kh, kw) if layer.padding == "same" else x
            cols = im2col(xp, kh, kw, layer.stride)
            caches.append((cols, x.shape, xp.shape))
            x = cols @ layer.weights.reshape(-1, co) + layer.bias
        elif kind == "bn":
            stats = compute_batch_stats(x)
            batch_stats.append(stats)
            inv_std = (1.0 / np.sqrt(stats.var + layer.eps)).astype(x.dtype)
            xhat = (x - stats.mean.astype(x.dtype)) * inv_std
            caches.append((xhat, inv_std))
            x = xhat * layer.gamma + layer.beta
        elif kind == "relu":
            mask = x > 0
            caches.append(mask)
            x = x * mask
        elif kind == "down":
            f = layer.factor
            b, h, w, c = x.shape
            caches.append(None)
            x = x.reshape(b, h // f, f, w // f, f, c).mean(axis=(2, 4), dtype=x.dtype)
        elif kind == "up":
            caches.append(None)
            x = np.repeat(np.repeat(x, layer.factor, axis=1), layer.factor, axis=2)
        elif kind == "skip":
            caches.append(None)
            skips.append(x)
        elif kind == "concat":
            caches.append(x.shape[3])
            x = np.concatenate([x, skips.pop()], axis=3)
    return x, caches, batch_stats


def _col2im(dcols, x_shape, xp_shape, kh, kw, stride):
    b, ho, wo, _ = dcols.shape
    c = x_shape[3]
    dcols = dcols.reshape(b, ho, wo, kh, kw, c)
    dxp = np.zeros(xp_shape, dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += dcols[:, :, :, i, j]
    ph, pw = (xp_shape[1] - x_shape[1]) // 2, (xp_shape[2] - x_shape[2]) // 2
    return dxp[:, ph:ph + x_shape[1], pw:pw + x_shape[2]]


def backward(model: SegModel, caches, dlogits) -> dict:
    """Parameter gradients keyed by layer index: {'weights','bias'} or {'gamma','beta'}."""
    grads = {}
    g = dlogits
    skip_grads = []
    for idx in range(len(model.layers) - 1, -1, -1):
        layer, cache = model.layers[idx], caches[idx]
        kind = layer.kind
        if kind in ("conv", "head"):
            cols, x_shape, xp_shape = cache
            kh, kw, ci, co = layer.weights.shape
            g2 = g.reshape(-1, co)
            grads[idx] = {
                "weights": (cols.reshape(-1, kh * kw * ci).T @ g2).reshape(layer.weights.shape),
                "bias": g2.sum(axis=0),
            }
            dcols = (g2 @ layer.weights.reshape(-1, co).T).reshape(cols.shape)
            if idx == 0:
                break
            g = _col2im(dcols, x_shape, xp_shape, kh, kw, layer.stride)
        elif kind == "bn":
            xhat, inv_std = cache
            n = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
            grads[idx] = {"gamma": (g * xhat).sum(axis=(0, 1, 2)), "beta": g.sum(axis=(0, 1, 2))}
            dxhat = g * layer.gamma
            g = inv_std / n * (n * dxhat - dxhat.sum(axis=(0, 1, 2)) - xhat * (dxhat * xhat).sum(axis=(0, 1, 2)))
        elif kind == "relu":
            g = g * cache
        elif kind == "down":
            f = layer.factor
            g = np.repeat(np.repeat(g, f, axis=1), f, axis=2) / (f * f)
        elif kind == "up":
            f = layer.factor
            b, h, w, c = g.shape
            g = g.reshape(b, h // f, f, w // f, f, c).sum(axis=(2, 4))
        elif kind == "concat":
            skip_grads.append(g[..., cache:])
            g = g[..., :cache]
        elif kind == "skip":
            g = g + skip_grads.pop()
    return grads


def loss_and_grads(model: SegModel, x, labels, weights):
    logits, caches, batch_stats = forward_train(model, x)
    post = softmax_channels(logits)
    loss = weighted_ce_loss(post, labels, weights)
    grads = backward(model, caches, ce_logit_grad(post, labels, weights))
    return loss, grads, batch_stats


# -- training loop ---------------------------------------------------------------

def iter_batches(n: int, batch_size: int, rng, mix_n: int | None = None):
    """Yield lists of (dataset_id, index) for one epoch.

    With ``mix_n`` every batch draws half its samples from dataset 0 and half
    from dataset 1 (which is cycled in a fresh random order as needed).
    """
    if mix_n is None:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield [(0, int(i)) for i in order[start:start + batch_size]]
        return
    half = max(1, batch_size // 2)
    order = rng.permutation(n)
    other = rng.permutation(mix_n)
    pos = 0
    for start in range(0, n, half):
        chunk = order[start:start + half]
        picks = []
        for _ in range(len(chunk)):
            if pos == len(other):
                other, pos = rng.permutation(mix_n), 0
            picks.append(int(other[pos]))
            pos += 1
        yield [(0, int(i)) for i in chunk] + [(1, i) for i in picks]


def train(model: SegModel, data, cfg: TrainConfig, mix=None, on_step=None) -> SegModel:
    """Minibatch SGD (with classical momentum) on the weighted cross-entropy.

    ``data``/``mix`` are datasets with ``images`` (N, H, W, 3) and ``labels``
    (N, H, W). ``on_step(epoch, step, loss, lr)`` is called after every update.
    Returns a new model; the input model is left untouched.
    """
    sources = [data] if mix is None else [data, mix]
    if len(data.images) == 0:
        raise ValueError("training dataset is empty")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    model = model.copy()
    model.layers = [replace(l, momentum=cfg.momentum_bn) if l.kind == "bn" else l for l in model.layers]
    counts = sum(np.bincount(s.labels.ravel(), minlength=model.num_classes) for s in sources)
    weights = class_weights_from_frequencies(counts, cfg.weight_offset).astype(np.float32)
    velocity: dict = {}
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for batch in iter_batches(len(data.images), cfg.batch_size, rng, None if mix is None else len(mix.images)):
            x = np.stack([sources[d].images[i] for d, i in batch])
            y = np.stack([sources[d].labels[i] for d, i in batch])
            if cfg.flip:
                flip = rng.random(len(batch)) < 0.5
                x[flip] = x[flip, :, ::-1]
                y[flip] = y[flip, :, ::-1]
            loss, grads, batch_stats = loss_and_grads(model, x, y, weights)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            _sgd_update(model, grads, velocity, lr, cfg.sgd_momentum)
            bn_iter = iter(batch_stats)
            model.layers = [update_running_stats(l, next(bn_iter)) if l.kind == "bn" else l for l in model.layers]
            if on_step is not None:
                on_step(epoch, step, loss, lr)
            step += 1
    return model


def _sgd_update(model, grads, velocity, lr, momentum):
    for idx, g in grads.items():
        layer = model.layers[idx]
        for name, grad in g.items():
            v = velocity.get((idx, name))
            v = grad if v is None else momentum * v + grad
            velocity[(idx, name)] = v
            setattr(layer, name, (getattr(layer, name) - lr * v).astype(getattr(layer, name).dtype))


# -- gradient checking ---------------------------------------------------------

def _parameters(model):
    for idx, layer in enumerate(model.layers):
        if layer.kind in ("conv", "head"):
            yield idx, "weights"
            yield idx, "bias"
        elif layer.kind == "bn":
            yield idx, "gamma"
            yield idx, "beta"


def check_gradients(model: SegModel, x, labels, weights=None, h: float = 1e-3, max_params: int = 1000,
                    min_h: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    Runs on a float64 shadow copy of ``model``, BN in training mode. A probe
    whose +h and -h evaluations land on different ReLU activation patterns has
    stepped over a kink; it is repeated with h / 10 (down to ``min_h``).
    """
    m = model.astype(np.float64)
    n_params = sum(getattr(m.layers[i], name).size for i, name in _parameters(m))
    if n_params > max_params:
        raise ValueError(f"fragment has {n_params} parameters, limit is {max_params}")
    x = as_tensor(x).astype(np.float64)
    weights = np.ones(m.num_classes) if weights is None else np.asarray(weights, np.float64)
    _, grads, _ = loss_and_grads(m, x, labels, weights)
    relus = [i for i, layer in enumerate(m.layers) if layer.kind == "relu"]

    def probe():
        logits, caches, _ = forward_train(m, x)
        return weighted_ce_loss(softmax_channels(logits), labels, weights), [caches[i] for i in relus]

    def central(arr, pos, step):
        orig = arr[pos]
        arr[pos] = orig + step
        up, mask_up = probe()
        arr[pos] = orig - step
        down, mask_down = probe()
        arr[pos] = orig
        same = all(np.array_equal(a, b) for a, b in zip(mask_up, mask_down))
        return (up - down) / (2 * step), same

    worst = 0.0
    for idx, name in _parameters(m):
        arr = getattr(m.layers[idx], name)
        analytic = grads[idx][name]
        for pos in np.ndindex(arr.shape):
            step = h
            numeric, smooth = central(arr, pos, step)
            while not smooth and step / 10 >= min_h:
                step /= 10
                numeric, smooth = central(arr, pos, step)
            a = analytic[pos]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-7))
    return worst
