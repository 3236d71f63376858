"""Minimal feed-forward network with a softmax distribution head.

Hidden layers are affine + rectifier; the output layer emits raw logits over
the label grid, and predictions are the expectation of the softmaxed pmf.
Backpropagation is written out directly: the only nontrivial gradient is the
loss head, which losses.py supplies analytically, and everything upstream is
the standard affine/rectifier chain rule.  Training is functional —
``train_step`` consumes (params, opt_state) and returns fresh ones — which is
what makes runs bit-reproducible given (seed, config, dataset).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .grid import DEFAULT_POLICY, LabelGrid, NumericPolicy, pmf_moments, softmax_probs
from .losses import (
    FAMILY_FULL_KL,
    LossBreakdown,
    LossSpec,
    batch_loss,
    batch_loss_and_grad,
)

__all__ = [
    "CHECKPOINT_FORMAT",
    "TrainingDivergedError",
    "MlpParams",
    "OptimizerState",
    "TrainConfig",
    "Metrics",
    "TrainResult",
    "init_mlp",
    "forward",
    "adam_update",
    "init_adam",
    "train_step",
    "lr_at",
    "predict",
    "evaluate",
    "derive_seeds",
    "train_run",
    "params_to_vec",
    "vec_to_params",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mlp-ckpt-v1"

SPLIT_TAGS = ("full", "train", "val")


class TrainingDivergedError(RuntimeError):
    """A forward pass, loss, or parameter update produced non-finite values."""


def _validated_dims(dims) -> tuple[int, ...]:
    out = tuple(int(d) for d in dims)
    if len(out) < 2 or any(d < 1 for d in out):
        raise ValueError(f"dims must list at least 2 sizes, all >= 1, got {out}")
    return out


@dataclass(frozen=True)
class MlpParams:
    """Immutable layer parameters for dims [d_in, hidden..., n_bins]."""

    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def __post_init__(self):
        dims = _validated_dims(self.dims)
        n_layers = len(dims) - 1
        if len(self.weights) != n_layers or len(self.biases) != n_layers:
            raise ValueError(f"expected {n_layers} weight/bias pairs for dims {dims}")
        ws, bs = [], []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
                raise ValueError(
                    f"layer {i}: expected weights {(dims[i], dims[i + 1])} and "
                    f"biases ({dims[i + 1]},), got {w.shape} and {b.shape}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: parameters must be finite")
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    @property
    def d_in(self) -> int:
        return self.dims[0]

    @property
    def n_bins(self) -> int:
        return self.dims[-1]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


def init_mlp(dims, seed: int) -> MlpParams:
    """Seeded init: weights zero-mean normal scaled by 1/sqrt(fan_in), biases zero."""
    dims = _validated_dims(dims)
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        ws.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(dims, tuple(ws), tuple(bs))


def _forward_cached(params: MlpParams, x: np.ndarray):
    """Batch forward pass returning logits plus per-layer backprop caches.

    Cache entry i holds (input to layer i, rectifier mask of layer i's output
    or None for the final linear layer).
    """
    caches = []
    h = x
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        a = h @ w + b
        if i < last:
            mask = a > 0.0
            caches.append((h, mask))
            h = np.where(mask, a, 0.0)
        else:
            caches.append((h, None))
            h = a
    if not np.all(np.isfinite(h)):
        raise TrainingDivergedError("non-finite activations in forward pass")
    return h, caches


def forward(params: MlpParams, features) -> np.ndarray:
    """Logits for one feature vector (d_in,) or a batch (batch, d_in)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.d_in:
        raise ValueError(f"features must have shape (..., {params.d_in}), got {x.shape}")
    logits, _ = _forward_cached(params, np.atleast_2d(x))
    return logits[0] if x.ndim == 1 else logits


def _backward(params: MlpParams, caches, d_logits: np.ndarray):
    """Gradients of a scalar loss w.r.t. all weights/biases, given d loss/d logits."""
    gw = [None] * params.n_layers
    gb = [None] * params.n_layers
    d_a = d_logits
    for i in range(params.n_layers - 1, -1, -1):
        h_in, _ = caches[i]
        gw[i] = h_in.T @ d_a
        gb[i] = d_a.sum(axis=0)
        if i > 0:
            d_a = np.where(caches[i - 1][1], d_a @ params.weights[i].T, 0.0)
    return gw, gb


@dataclass(frozen=True)
class OptimizerState:
    """Adam state: hyperparameters, step counter, and moment accumulators."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m_w: tuple[np.ndarray, ...]
    v_w: tuple[np.ndarray, ...]
    m_b: tuple[np.ndarray, ...]
    v_b: tuple[np.ndarray, ...]

    def __post_init__(self):
        if not (np.isfinite(self.lr) and self.lr >= 0.0):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr!r}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if not self.eps > 0.0:
            raise ValueError(f"eps must be positive, got {self.eps!r}")
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step!r}")


def init_adam(
    params: MlpParams,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    zeros = lambda arrs: tuple(np.zeros_like(a) for a in arrs)
    return OptimizerState(
        lr, beta1, beta2, eps, 0,
        zeros(params.weights), zeros(params.weights),
        zeros(params.biases), zeros(params.biases),
    )


def _adam_arrays(p, g, m, v, state: OptimizerState, bc1: float, bc2: float):
    m2 = state.beta1 * m + (1.0 - state.beta1) * g
    v2 = state.beta2 * v + (1.0 - state.beta2) * (g * g)
    return p - state.lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + state.eps), m2, v2


def adam_update(params: MlpParams, state: OptimizerState, gw, gb):
    """One bias-corrected Adam step; returns (params', state')."""
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_w, m_w, v_w = [], [], []
    for p, g, m, v in zip(params.weights, gw, state.m_w, state.v_w):
        p2, m2, v2 = _adam_arrays(p, g, m, v, state, bc1, bc2)
        new_w.append(p2), m_w.append(m2), v_w.append(v2)
    new_b, m_b, v_b = [], [], []
    for p, g, m, v in zip(params.biases, gb, state.m_b, state.v_b):
        p2, m2, v2 = _adam_arrays(p, g, m, v, state, bc1, bc2)
        new_b.append(p2), m_b.append(m2), v_b.append(v2)
    if not all(np.all(np.isfinite(a)) for a in new_w + new_b):
        raise TrainingDivergedError("non-finite parameters after optimizer update")
    params2 = MlpParams(params.dims, tuple(new_w), tuple(new_b))
    state2 = replace(
        state, step=t,
        m_w=tuple(m_w), v_w=tuple(v_w), m_b=tuple(m_b), v_b=tuple(v_b),
    )
    return params2, state2


def _mean_breakdown(comps: dict, spec: LossSpec) -> LossBreakdown:
    smooth = float(np.mean(comps["l_smooth"])) if spec.family == FAMILY_FULL_KL else None
    return LossBreakdown(
        spec.family,
        float(np.mean(comps["l_ld"])),
        float(np.mean(comps["l_exp"])),
        smooth,
        float(np.mean(comps["total"])),
    )


def train_step(
    params: MlpParams,
    opt_state: OptimizerState,
    batch,
    g: LabelGrid,
    spec: LossSpec,
    policy: NumericPolicy = DEFAULT_POLICY,
):
    """One optimizer step on a (features, target_pmfs) batch.

    The batch gradient is the arithmetic mean of per-sample loss gradients in
    the given order.  Returns (params', opt_state', mean LossBreakdown).
    """
    feats, targets = batch
    feats = np.asarray(feats, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0 or feats.shape[1] != params.d_in:
        raise ValueError(f"batch features must have shape (b >= 1, {params.d_in}), got {feats.shape}")
    if targets.shape != (feats.shape[0], params.n_bins):
        raise ValueError(
            f"batch targets must have shape ({feats.shape[0]}, {params.n_bins}), got {targets.shape}"
        )
    logits, caches = _forward_cached(params, feats)
    comps, dlogits = batch_loss_and_grad(targets, logits, g, spec, policy)
    bad = np.flatnonzero(~(np.isfinite(comps["total"]) & np.isfinite(dlogits).all(axis=-1)))
    if bad.size:
        raise TrainingDivergedError(
            f"non-finite loss or gradient at batch sample(s) {bad[:10].tolist()}"
        )
    gw, gb = _backward(params, caches, dlogits / feats.shape[0])
    params2, opt2 = adam_update(params, opt_state, gw, gb)
    return params2, opt2, _mean_breakdown(comps, spec)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer protocol and architecture for one seeded run."""

    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-3
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 30
    loss: LossSpec = field(default_factory=lambda: LossSpec(FAMILY_FULL_KL))
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    val_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size!r}")
        if not (np.isfinite(self.lr) and self.lr >= 0.0):
            raise ValueError(f"lr must be finite and >= 0, got {self.lr!r}")
        if not 0.0 < self.lr_decay_factor <= 1.0:
            raise ValueError(f"lr_decay_factor must be in (0, 1], got {self.lr_decay_factor!r}")
        if self.lr_decay_every < 1:
            raise ValueError(f"lr_decay_every must be >= 1, got {self.lr_decay_every!r}")
        if not isinstance(self.loss, LossSpec):
            raise ValueError("loss must be a LossSpec")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden sizes must be >= 1, got {self.hidden!r}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must be in (0, 1), got {self.val_fraction!r}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepped decay: lr * factor^floor(epoch / every); epoch is 0-based."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch!r}")
    return cfg.lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def predict(params: MlpParams, features, g: LabelGrid):
    """Expectation of the predicted pmf: a real label, not a bin index."""
    if len(g) != params.n_bins:
        raise ValueError(f"grid has {len(g)} bins but the network emits {params.n_bins}")
    probs = softmax_probs(forward(params, features))
    mu, _ = pmf_moments(probs, g.values)
    return float(mu) if np.ndim(mu) == 0 else mu


@dataclass(frozen=True)
class Metrics:
    """Per-split evaluation snapshot: mean loss components plus MAE."""

    epoch: int
    split: str
    breakdown: LossBreakdown
    mae: float

    def __post_init__(self):
        if self.epoch < 0:
            raise ValueError(f"epoch must be >= 0, got {self.epoch!r}")
        if self.split not in SPLIT_TAGS:
            raise ValueError(f"split must be one of {SPLIT_TAGS}, got {self.split!r}")
        if not (np.isfinite(self.mae) and self.mae >= 0.0):
            raise ValueError(f"mae must be finite and >= 0, got {self.mae!r}")


def evaluate(
    params: MlpParams,
    dataset: Dataset,
    g: LabelGrid,
    spec: LossSpec,
    policy: NumericPolicy = DEFAULT_POLICY,
    epoch: int = 0,
    split: str | None = None,
) -> Metrics:
    """Mean loss components and MAE of ``params`` over a dataset split."""
    if not np.array_equal(g.values, dataset.grid.values):
        raise ValueError("grid does not match the dataset's grid")
    logits = forward(params, dataset.features)
    comps = batch_loss(dataset.target_pmfs, logits, g, spec, policy)
    mae = float(np.mean(np.abs(comps["pred_mu"] - dataset.target_mu)))
    return Metrics(epoch, split or dataset.split, _mean_breakdown(comps, spec), mae)


def derive_seeds(seed: int) -> tuple[int, int, int]:
    """Spawn independent (split, init, shuffle) sub-seeds from one run seed."""
    split_seed, init_seed, shuffle_seed = np.random.SeedSequence(seed).generate_state(3)
    return int(split_seed), int(init_seed), int(shuffle_seed)


@dataclass(frozen=True)
class TrainResult:
    """Final parameters plus the (train, val) metrics pair for every epoch."""

    params: MlpParams
    history: tuple[Metrics, ...]


def train_run(
    train_ds: Dataset,
    val_ds: Dataset,
    g: LabelGrid,
    cfg: TrainConfig,
    policy: NumericPolicy = DEFAULT_POLICY,
    quiet: bool = False,
) -> TrainResult:
    """One seeded training run: shuffled mini-batches, stepped lr, per-epoch metrics.

    Initialization and shuffling use sub-seeds derived from ``cfg.seed``, so
    the run is a deterministic function of (seed, config, datasets).
    """
    _, init_seed, shuffle_seed = derive_seeds(cfg.seed)
    params = init_mlp((train_ds.d_in, *cfg.hidden, len(g)), init_seed)
    opt = init_adam(params, lr=cfg.lr)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    n = len(train_ds)
    history: list[Metrics] = []
    for epoch in range(cfg.epochs):
        opt = replace(opt, lr=lr_at(epoch, cfg))
        perm = shuffle_rng.permutation(n)
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            batch = (train_ds.features[idx], train_ds.target_pmfs[idx])
            try:
                params, opt, _ = train_step(params, opt, batch, g, cfg.loss, policy)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(
                    f"epoch {epoch + 1}, step {step + 1}: {exc}"
                ) from exc
        train_m = evaluate(params, train_ds, g, cfg.loss, policy, epoch=epoch + 1, split="train")
        val_m = evaluate(params, val_ds, g, cfg.loss, policy, epoch=epoch + 1, split="val")
        history += [train_m, val_m]
        if not quiet:
            log.info(
                "epoch %3d  lr %.1e  train total %.6f  val total %.6f  val mae %.4f",
                epoch + 1, opt.lr, train_m.breakdown.total, val_m.breakdown.total, val_m.mae,
            )
    return TrainResult(params, tuple(history))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def params_to_vec(params: MlpParams) -> np.ndarray:
    """Flatten to one float64 vector: W0 (row-major), b0, W1, b1, ..."""
    parts = []
    for w, b in zip(params.weights, params.biases):
        parts.append(w.ravel())
        parts.append(b)
    return np.concatenate(parts)


def vec_to_params(dims, vec) -> MlpParams:
    """Inverse of :func:`params_to_vec` for the given dims."""
    dims = _validated_dims(dims)
    vec = np.asarray(vec, dtype=np.float64)
    ws, bs, pos = [], [], 0
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        ws.append(vec[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out))
        pos += fan_in * fan_out
        bs.append(vec[pos:pos + fan_out])
        pos += fan_out
    if pos != vec.size:
        raise ValueError(f"dims {dims} need {pos} parameters, got {vec.size}")
    return MlpParams(dims, tuple(ws), tuple(bs))


def save_checkpoint(params: MlpParams, path) -> None:
    """Lossless binary checkpoint: one JSON header line (format tag + dims)
    followed by the raw little-endian float64 bytes of the flat parameter
    vector.  Byte-identical for identical params."""
    header = json.dumps({"dims": list(params.dims), "format": CHECKPOINT_FORMAT}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(params_to_vec(params), dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpParams:
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint") from None
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    dims = header.get("dims")
    if not isinstance(dims, list):
        raise ValueError(f"{path}: checkpoint header lacks a dims list")
    return vec_to_params(dims, np.frombuffer(payload, dtype="<f8"))
