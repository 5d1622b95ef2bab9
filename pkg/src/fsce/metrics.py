"""Evaluation metrics and the class-activation heatmap."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import resize_bilinear, to_float
from .errors import ContractError, ShapeError
from .models import Backbone
from .tensor import Tape, Tensor


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.shape} predictions vs {labels.shape} labels")
    if predictions.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float((predictions == labels).mean())


def confusion_matrix(predictions: np.ndarray, labels: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Counts with true class along rows, predicted class along columns."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ShapeError(f"{predictions.shape} predictions vs {labels.shape} labels")
    out = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(out, (labels, predictions), 1)
    return out


def silhouette_score(features: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette over samples with Euclidean distances.

    For sample i with mean intra-cluster distance a(i) (excluding itself)
    and b(i) the smallest mean distance to any other cluster,
    s(i) = (b - a) / max(a, b).
    """
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2:
        raise ShapeError(f"features must be (M, D), got {x.shape}")
    if labels.shape != (x.shape[0],):
        raise ShapeError(f"{x.shape[0]} feature rows vs labels {labels.shape}")
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ContractError("silhouette needs at least two clusters")
    singleton = classes[counts < 2]
    if singleton.size:
        raise ContractError(f"cluster {singleton[0]} has a single member, "
                            "its intra-cluster distance is undefined")
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    dist = np.sqrt(np.maximum(d2, 0.0))
    m = x.shape[0]
    # mean distance from every sample to every cluster
    mean_to = np.zeros((m, classes.size))
    for ci, c in enumerate(classes):
        mask = labels == c
        mean_to[:, ci] = dist[:, mask].sum(axis=1) / mask.sum()
    s = np.zeros(m)
    for ci, c in enumerate(classes):
        mask = labels == c
        nc = mask.sum()
        # remove the zero self-distance from the own-cluster mean
        a = mean_to[mask, ci] * nc / (nc - 1)
        others = np.delete(mean_to[mask], ci, axis=1)
        b = others.min(axis=1)
        s[mask] = (b - a) / np.maximum(a, b)
    return float(s.mean())


def grad_cam(model: Backbone, image: np.ndarray, class_id: int,
             tap: str) -> np.ndarray:
    """Gradient-weighted activation heatmap for one image at a tap point.

    Channel weights are the spatial means of the class-score gradient at the
    tap; the heatmap is the rectified weighted sum of tap activations,
    upsampled to the input size and scaled so its peak is 1 (all zeros when
    nothing activates).
    """
    img = to_float(image) if np.asarray(image).dtype == np.uint8 \
        else np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ShapeError(f"image must be (H, W), got {img.shape}")
    if not 0 <= class_id < model.config.num_classes:
        raise ContractError(f"class {class_id} outside 0..{model.config.num_classes - 1}")
    was_training = model.training
    model.eval()
    try:
        x = Tensor(img[None, None], constant=True)
        with Tape() as tape:
            logits, act = model.forward_with_tap(x, tap)
            onehot = np.zeros(logits.shape, dtype=logits.dtype)
            onehot[0, class_id] = 1
            score = T.tsum(T.mul(logits, Tensor(onehot, constant=True)))
        tape.backward(score)
    finally:
        model.train(was_training)
    if act.grad is None:
        raise ContractError(f"no gradient reached tap {tap!r}")
    alpha = act.grad.mean(axis=(2, 3), keepdims=True)
    heat = np.maximum((alpha * act.data).sum(axis=1)[0], 0.0)
    heat = resize_bilinear(heat, img.shape)
    peak = heat.max()
    if peak > 0:
        heat = heat / peak
    return heat.astype(np.float32)


def write_pgm(path, image: np.ndarray):
    """Store a grayscale image as a binary PGM (P5, maxval 255). Float input
    is taken as [0, 1] and quantized."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError(f"PGM wants a 2-D image, got {img.shape}")
    if img.dtype != np.uint8:
        img = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(img).tobytes())
