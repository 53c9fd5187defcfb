"""Learning core: flat-parameter models, clipped-loss SGD, aggregation.

Models are dense feed-forward stacks stored as one flat float64 vector so
aggregation and checkpointing stay trivial. The training loss is softmax
cross-entropy (natural log) clipped per sample; clipped samples contribute
exactly zero gradient. Local training optionally adds a proximal pull
toward the incoming global model.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

ACTIVATIONS = ("none", "relu", "tanh")
LEARNING_RATE_CAP = 0.1
DEFAULT_CLIP = math.log2(10.0)  # about 3.33 nats

CHECKPOINT_VERSION = 1


class NumericalDivergenceError(RuntimeError):
    """Non-finite parameters or gradients during local training."""

    def __init__(self, client_id, step: int):
        self.client_id = client_id
        self.step = step
        super().__init__(
            f"non-finite values in local training (client {client_id}, step {step}); "
            f"lower the learning rate or tighten the loss clip"
        )


def param_count(layer_shapes) -> int:
    return sum((fan_in + 1) * fan_out for fan_in, fan_out in layer_shapes)


@dataclass
class ModelParams:
    """Flat parameter vector plus the layer geometry that interprets it."""

    values: np.ndarray
    layer_shapes: tuple
    activations: tuple

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float).ravel()
        self.layer_shapes = tuple((int(a), int(b)) for a, b in self.layer_shapes)
        self.activations = tuple(self.activations)
        if len(self.activations) != len(self.layer_shapes):
            raise ValueError(
                f"{len(self.layer_shapes)} layers but {len(self.activations)} activation tags"
            )
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}, expected one of {ACTIVATIONS}")
        for fan_in, fan_out in self.layer_shapes:
            if fan_in < 1 or fan_out < 1:
                raise ValueError(f"layer shapes must be positive, got {(fan_in, fan_out)}")
        expected = param_count(self.layer_shapes)
        if len(self.values) != expected:
            raise ValueError(
                f"flat vector has {len(self.values)} entries, geometry needs {expected}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError("parameters must be finite")

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layer_shapes, self.activations)

    def layers(self):
        """Views (W, b) per layer into the flat vector, no copies."""
        out = []
        offset = 0
        for fan_in, fan_out in self.layer_shapes:
            w = self.values[offset : offset + fan_in * fan_out].reshape(fan_in, fan_out)
            offset += fan_in * fan_out
            b = self.values[offset : offset + fan_out]
            offset += fan_out
            out.append((w, b))
        return out


def init_params(layer_shapes, activations, seed: int = 0, scale: float | None = None) -> ModelParams:
    """Seeded uniform init (Glorot-style width unless ``scale`` given), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in layer_shapes:
        width = scale if scale is not None else math.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-width, width, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return ModelParams(np.concatenate(chunks), tuple(layer_shapes), tuple(activations))


def _apply_activation(z: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return np.maximum(z, 0.0)
    if act == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z: np.ndarray, a: np.ndarray, act: str) -> np.ndarray:
    if act == "relu":
        return (z > 0.0).astype(float)
    if act == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


def _forward(params: ModelParams, features: np.ndarray):
    """Returns (outputs, per-layer (input, pre-activation, activation) trace)."""
    a = np.asarray(features, dtype=float)
    if a.ndim != 2 or a.shape[1] != params.layer_shapes[0][0]:
        raise ValueError(
            f"features must be (n, {params.layer_shapes[0][0]}), got {a.shape}"
        )
    trace = []
    for (w, b), act in zip(params.layers(), params.activations):
        z = a @ w + b
        a_next = _apply_activation(z, act)
        trace.append((a, z, a_next))
        a = a_next
    return a, trace


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Per-sample cross-entropy in nats, plus softmax probabilities."""
    n_out = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_out:
        raise ValueError(f"labels must lie in [0, {n_out}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1)
    probs = exp / total[:, None]
    rows = np.arange(len(labels))
    losses = np.log(total) - shifted[rows, labels]
    return losses, probs


def forward_loss(params: ModelParams, features, labels, clip_zeta: float = DEFAULT_CLIP):
    """Mean per-sample-clipped cross-entropy and the clip mask.

    Each sample's loss is min(raw, clip_zeta); the mask flags samples the
    clip silenced (their gradient is defined to be zero).
    """
    if not clip_zeta > 0:
        raise ValueError(f"clip_zeta must be > 0, got {clip_zeta!r}")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate the loss of an empty batch")
    logits, _ = _forward(params, features)
    losses, _ = _softmax_xent(logits, labels)
    mask = losses > clip_zeta
    clipped = np.where(mask, clip_zeta, losses)
    return float(clipped.mean()), mask


def loss_and_gradient(
    params: ModelParams,
    features,
    labels,
    clip_zeta: float = DEFAULT_CLIP,
    prox_mu: float = 0.0,
    anchor: ModelParams | None = None,
):
    """Clipped mean loss, flat gradient, and the clip mask for one batch.

    Clipped samples are zeroed out of the gradient but stay in the batch
    mean's denominator. With prox_mu > 0 the gradient gains
    prox_mu * (params - anchor), pulling updates toward ``anchor``.
    """
    if not clip_zeta > 0:
        raise ValueError(f"clip_zeta must be > 0, got {clip_zeta!r}")
    if prox_mu < 0:
        raise ValueError(f"prox_mu must be >= 0, got {prox_mu!r}")
    if prox_mu > 0 and anchor is None:
        raise ValueError("prox_mu > 0 requires an anchor model")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot take a gradient over an empty batch")

    logits, trace = _forward(params, features)
    losses, probs = _softmax_xent(logits, labels)
    mask = losses > clip_zeta
    clipped = np.where(mask, clip_zeta, losses)
    loss = float(clipped.mean())

    n = len(labels)
    delta = probs.copy()
    delta[np.arange(n), labels] -= 1.0
    delta[mask] = 0.0
    delta /= n

    grads = []
    layers = params.layers()
    for idx in range(len(layers) - 1, -1, -1):
        a_in, z, a_out = trace[idx]
        act = params.activations[idx]
        dz = delta * _activation_grad(z, a_out, act)
        grads.append((a_in.T @ dz, dz.sum(axis=0)))
        if idx > 0:
            delta = dz @ layers[idx][0].T
    grads.reverse()

    flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    if prox_mu > 0:
        if anchor.layer_shapes != params.layer_shapes:
            raise ValueError("anchor geometry differs from params")
        flat = flat + prox_mu * (params.values - anchor.values)
    return loss, flat, mask


def learning_rate(tier: int, delta1: float = 0.005, alpha: float = 1.45) -> float:
    """Tier-indexed step size: delta1 * max(log_alpha(tier), 1), capped at 0.1.

    Higher tiers train less often, so they take larger steps; the log base
    alpha controls how fast the boost grows.
    """
    if tier < 1:
        raise ValueError(f"tier must be >= 1, got {tier}")
    if not delta1 > 0:
        raise ValueError(f"delta1 must be > 0, got {delta1!r}")
    if not alpha > 1:
        raise ValueError(f"alpha must be > 1, got {alpha!r}")
    rate = delta1 * max(math.log(tier) / math.log(alpha), 1.0)
    return min(rate, LEARNING_RATE_CAP)


@dataclass
class TrainSpec:
    """One client's marching orders for a single participation."""

    d_samples: int
    learning_rate: float
    batch_size: int = 10
    clip_zeta: float = DEFAULT_CLIP
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        if self.d_samples < 0:
            raise ValueError(f"d_samples must be >= 0, got {self.d_samples}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.learning_rate <= LEARNING_RATE_CAP):
            raise ValueError(
                f"learning_rate must be in [0, {LEARNING_RATE_CAP}], got {self.learning_rate!r}"
            )
        if not self.clip_zeta > 0:
            raise ValueError(f"clip_zeta must be > 0, got {self.clip_zeta!r}")
        if self.prox_mu < 0:
            raise ValueError(f"prox_mu must be >= 0, got {self.prox_mu!r}")


def client_rng(seed: int, client_id: int, iteration: int) -> np.random.Generator:
    """Independent stream per (run seed, client, iteration)."""
    return np.random.default_rng([seed, client_id, iteration])


def local_train(
    global_params: ModelParams,
    features,
    labels,
    spec: TrainSpec,
    rng: np.random.Generator,
    client_id=None,
) -> ModelParams:
    """Mini-batch SGD over exactly ``spec.d_samples`` sample presentations.

    Samples are consumed from a seeded shuffle of the local data, reshuffled
    whenever exhausted, so d_samples beyond the local dataset size cycles
    through it. A client with no local data returns the global model
    unchanged (it contributes nothing).
    """
    labels = np.asarray(labels)
    features = np.asarray(features, dtype=float)
    n_local = len(labels)
    params = global_params.copy()
    if n_local == 0:
        if spec.d_samples > 0:
            log.debug("client %s has no local data; skipping its %d samples",
                      client_id, spec.d_samples)
        return params

    order = rng.permutation(n_local)
    ptr = 0
    remaining = spec.d_samples
    step = 0
    while remaining > 0:
        take = min(spec.batch_size, remaining)
        batch = np.empty(take, dtype=int)
        filled = 0
        while filled < take:
            if ptr == n_local:
                order = rng.permutation(n_local)
                ptr = 0
            grab = min(take - filled, n_local - ptr)
            batch[filled : filled + grab] = order[ptr : ptr + grab]
            ptr += grab
            filled += grab
        step += 1
        _, grad, _ = loss_and_gradient(
            params,
            features[batch],
            labels[batch],
            clip_zeta=spec.clip_zeta,
            prox_mu=spec.prox_mu,
            anchor=global_params,
        )
        if not np.isfinite(grad).all():
            raise NumericalDivergenceError(client_id, step)
        params.values = params.values - spec.learning_rate * grad
        if not np.isfinite(params.values).all():
            raise NumericalDivergenceError(client_id, step)
        remaining -= take
    return params


def aggregate(contributions) -> ModelParams:
    """Dataset-size weighted average of client models.

    ``contributions`` is a list of (ModelParams, weight) pairs; weights are
    local dataset sizes. If every weight is zero the mean falls back to
    unweighted (and says so in the log).
    """
    if not contributions:
        raise ValueError("cannot aggregate zero contributions")
    first = contributions[0][0]
    for params, weight in contributions:
        if params.layer_shapes != first.layer_shapes:
            raise ValueError("contributions disagree on model geometry")
        if not (math.isfinite(weight) and weight >= 0):
            raise ValueError(f"weights must be finite and >= 0, got {weight!r}")
    total = sum(w for _, w in contributions)
    if total == 0:
        log.warning("all aggregation weights are zero; falling back to unweighted mean")
        stacked = np.stack([p.values for p, _ in contributions])
        mean = stacked.mean(axis=0)
    else:
        stacked = np.stack([p.values for p, _ in contributions])
        weights = np.array([w for _, w in contributions]) / total
        mean = weights @ stacked
    return ModelParams(mean, first.layer_shapes, first.activations)


@dataclass(frozen=True)
class ParticipationSet:
    """Who reports at iteration l, and how stale each report is."""

    iteration: int
    client_ids: tuple
    staleness: dict

    def __len__(self) -> int:
        return len(self.client_ids)


def participants(iteration: int, plan) -> ParticipationSet:
    """Clients whose tier index divides the iteration counter.

    A tier-j client reports every j iterations, so its update was computed
    against the global model from j iterations ago (its staleness).
    """
    if iteration < 1:
        raise ValueError(f"iteration must be >= 1, got {iteration}")
    chosen = {
        i: j for i, j in plan.assignment.items() if iteration % j == 0
    }
    return ParticipationSet(
        iteration=iteration,
        client_ids=tuple(sorted(chosen)),
        staleness=chosen,
    )


def evaluate(params: ModelParams, features, labels) -> tuple[float, float]:
    """(accuracy, unclipped mean cross-entropy) on a labeled set."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits, _ = _forward(params, np.asarray(features, dtype=float))
    losses, _ = _softmax_xent(logits, labels)
    predictions = logits.argmax(axis=1)
    return float((predictions == labels).mean()), float(losses.mean())


# --- checkpoints ---


def save_checkpoint(params: ModelParams, path) -> None:
    """JSON geometry header on one line, then the flat little-endian vector."""
    header = {
        "version": CHECKPOINT_VERSION,
        "layer_shapes": [list(s) for s in params.layer_shapes],
        "activations": list(params.activations),
        "count": len(params.values),
        "dtype": "<f8",
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(params.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        header_line = f.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            raise ValueError(f"{path}: malformed checkpoint header: {err}") from err
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
        payload = f.read()
    expected = header["count"] * 8
    if len(payload) != expected:
        raise ValueError(
            f"{path}: payload holds {len(payload)} bytes, header promises {expected}"
        )
    values = np.frombuffer(payload, dtype="<f8").astype(float)
    return ModelParams(
        values,
        tuple(tuple(s) for s in header["layer_shapes"]),
        tuple(header["activations"]),
    )
