"""Adam optimisation, epoch loop and validation-based model selection."""
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import build_batch, subsample_train
from .evaluation import evaluate_ranks, ndcg_at_n, recall_at_n
from .model import (ModelConfig, ModelMode, as_leaves, forward, frozen_rows, init_params,
                    trainable_names)
from .objectives import (ContrastConfig, autoregressive_ce_loss, item_contrastive_loss,
                         total_loss, user_contrastive_loss, valid_steps)

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    mode: str = "tssr"
    d: int = 128
    max_len: int = 10
    n_heads: int = 4
    n_uni_layers: int = 2
    n_multi_layers: int = 1
    multi_ffn: bool = True
    dropout: float = 0.1
    tau: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    train_fraction: float = 1.0
    clip_norm: float = None
    freeze_content: bool = False
    init_std: float = 0.02
    dtype: str = "float32"
    eval_every: int = 1

    def __post_init__(self):
        self.mode = ModelMode.parse(self.mode).value
        for name in ("d", "max_len", "n_heads", "batch_size", "max_epochs", "eval_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate < 0 or self.patience < 0:
            raise ValueError("learning_rate and patience must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        self.contrast()  # validates tau and lambdas

    def contrast(self):
        lam1, lam2 = (self.lambda1, self.lambda2) if self.mode == "tssr" else (0.0, 0.0)
        return ContrastConfig(self.tau, lam1, lam2, self.lambda3)

    def model_config(self, n_items, dim_raw=0):
        return ModelConfig(n_items=n_items, d=self.d, max_len=self.max_len, n_heads=self.n_heads,
                           n_uni_layers=self.n_uni_layers, n_multi_layers=self.n_multi_layers,
                           multi_ffn=self.multi_ffn, dropout=self.dropout, dim_raw=dim_raw,
                           mode=self.mode, freeze_content=self.freeze_content, init_std=self.init_std)

    def to_dict(self):
        return asdict(self)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, frozen=None):
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    ``frozen`` maps parameter names to a row index whose gradient is dropped
    (PAD embeddings stay exactly as they are).
    """
    frozen = frozen or {}
    for name, g in grads.items():
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise nx.NonFiniteError(f"non-finite gradient for {name}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if name in frozen:
            g = g.copy()
            g[frozen[name]] = 0
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        if name in frozen:
            update[frozen[name]] = 0
        p -= update.astype(p.dtype, copy=False)
    return params, state


def compute_losses(batch, P, cfg, contrast, rng=None):
    """Forward pass plus the three objectives; returns ``(parts, total, trace)``."""
    trace, logits = forward(batch, P, cfg, rng)
    L_ce = autoregressive_ce_loss(logits, batch.target, batch.mask)
    L_u = L_i = None
    if cfg.mode is ModelMode.TSSR:
        if contrast.lambda1 > 0:
            L_u = user_contrastive_loss(trace.F_id, trace.F_con, batch.mask, contrast.tau)
        if contrast.lambda2 > 0 and valid_steps(batch.mask)[0].size:
            L_i = item_contrastive_loss(trace.F_id, trace.F_con, trace.E_id_raw, trace.E_con_raw,
                                        batch.mask, contrast.tau)
    elif contrast.lambda1 > 0 or contrast.lambda2 > 0:
        raise ValueError(f"contrastive losses are only defined in tssr mode, not {cfg.mode.value}")
    total = total_loss(L_u, L_i, L_ce, contrast)
    parts = {"L_u": 0.0 if L_u is None else float(L_u.data),
             "L_i": 0.0 if L_i is None else float(L_i.data),
             "L_ce": float(L_ce.data), "total": float(total.data)}
    return parts, total, trace


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads


@dataclass
class TrainResult:
    params: dict
    model_config: ModelConfig
    history: list
    best_epoch: int
    best_val_ndcg10: float
    diverged: bool = False


def train(config, split, content_table=None, callback=None):
    """Fit on ``split.train``; select the epoch with the best validation NDCG@10.

    ``callback(record)`` is invoked after every epoch with the history record.
    """
    mode = ModelMode.parse(config.mode)
    if mode.uses_content and content_table is None:
        raise ValueError(f"mode {mode.value} needs a content table")
    dtype = np.dtype(config.dtype)
    dim_raw = content_table.dim_raw if content_table is not None else 0
    cfg = config.model_config(split.n_items, dim_raw)
    contrast = config.contrast()

    seeds = np.random.SeedSequence(config.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    shuffle_rng = np.random.default_rng(seeds[1])
    dropout_rng = np.random.default_rng(seeds[2])

    params = init_params(cfg, content_table, seed=init_seed, dtype=dtype)
    names = trainable_names(cfg, params)
    frozen = frozen_rows(cfg)
    state = OptimizerState()

    split = subsample_train(split, config.train_fraction, config.seed)
    full = build_batch(split.train, cfg.max_len, cfg.pad)
    n = len(full)
    if n == 0:
        raise ValueError("no training sequences")

    history = []
    best = (-1.0, 0, {k: v.copy() for k, v in params.items()})
    bad_epochs = 0
    diverged = False
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        order = shuffle_rng.permutation(n)
        sums = {"L_u": 0.0, "L_i": 0.0, "L_ce": 0.0, "total": 0.0}
        n_batches = 0
        try:
            for lo in range(0, n, config.batch_size):
                idx = order[lo: lo + config.batch_size]
                batch = type(full)(full.id_seq[idx], full.target[idx], full.mask[idx])
                P = as_leaves(params, names)
                parts, total, _ = compute_losses(batch, P, cfg, contrast,
                                                 dropout_rng if cfg.dropout > 0 else None)
                if not math.isfinite(parts["total"]):
                    raise nx.NonFiniteError("total loss is not finite")
                total.backward()
                grads = {k: P[k].grad for k in names if P[k].grad is not None}
                if config.clip_norm:
                    grads = _clip(grads, config.clip_norm)
                adam_step(params, grads, state, lr=config.learning_rate, frozen=frozen)
                for k in sums:
                    sums[k] += parts[k]
                n_batches += 1
        except nx.NonFiniteError as exc:
            logger.warning("training diverged in epoch %d: %s", epoch, exc)
            diverged = True
            break

        record = {"epoch": epoch}
        record.update({k: v / n_batches for k, v in sums.items()})
        if split.validation and (epoch % config.eval_every == 0 or epoch == config.max_epochs):
            ranks = evaluate_ranks(params, cfg, split.validation)
            record["val_recall10"] = recall_at_n(ranks, 10)
            record["val_ndcg10"] = ndcg_at_n(ranks, 10)
        else:
            record["val_recall10"] = record["val_ndcg10"] = None
        record["wall_ms"] = int(round(1000 * (time.perf_counter() - start)))
        history.append(record)
        if callback is not None:
            callback(record)
        logger.info("epoch %d total=%.4f val_ndcg10=%s", epoch, record["total"], record["val_ndcg10"])

        if record["val_ndcg10"] is None:
            if not split.validation:
                best = (-1.0, epoch, {k: v.copy() for k, v in params.items()})
            continue
        if record["val_ndcg10"] > best[0]:
            best = (record["val_ndcg10"], epoch, {k: v.copy() for k, v in params.items()})
            bad_epochs = 0
        else:
            bad_epochs += config.eval_every
            if bad_epochs >= config.patience:
                break

    return TrainResult(best[2], cfg, history, best[1], best[0], diverged)
