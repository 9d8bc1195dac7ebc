"""All-ranking top-N metrics and alignment/uniformity diagnostics."""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import build_batch
from .model import ModelMode, as_leaves, forward, score_items

CUTOFFS = (10, 20)


@dataclass
class EvalReport:
    recall: dict
    ndcg: dict
    n_users: int
    alignment: float = None
    uniformity: float = None
    config: dict = field(default_factory=dict)

    def to_dict(self):
        out = asdict(self)
        out["recall"] = {str(k): v for k, v in self.recall.items()}
        out["ndcg"] = {str(k): v for k, v in self.ndcg.items()}
        return out


def ranks_from_scores(scores, target):
    """1-based rank of each target; items tied with the target count as above it."""
    scores = np.asarray(scores)
    target = np.asarray(target)
    s_true = scores[np.arange(scores.shape[0]), target][:, None]
    return (scores >= s_true).sum(axis=1).astype(np.int64)


def recall_at_n(ranks, n):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to evaluate")
    return float((ranks <= n).mean())


def ndcg_at_n(ranks, n):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise ValueError("no ranks to evaluate")
    gain = np.where(ranks <= n, 1.0 / np.log2(ranks + 1.0), 0.0)
    return float(gain.mean())


def _unwrap(model):
    # accept a fitted estimator, a TrainResult or a (params, config) pair
    if hasattr(model, "model_"):
        model = model.model_
    if isinstance(model, tuple):
        return model
    return model.params, model.model_config


def final_scores(params, cfg, seqs, exclude_history=False, batch_size=512):
    """Scores over all items at the last position of each sequence's input prefix.

    ``seqs`` are full sequences whose last item is the held-out target.
    Returns ``(scores, targets)``.
    """
    P = as_leaves(params)
    out, targets = [], []
    with nx.no_grad():
        for lo in range(0, len(seqs), batch_size):
            chunk = seqs[lo: lo + batch_size]
            batch = build_batch(chunk, cfg.max_len, cfg.pad)
            trace, _ = forward(batch, P, cfg, rng=None, score=False)
            last = nx.Tensor(trace.F.data[:, -1, :])
            scores = score_items(last, P, cfg.n_items).data.astype(np.float64)
            if exclude_history:
                for r, s in enumerate(chunk):
                    items = getattr(s, "items", s)
                    scores[r, np.asarray(items[:-1], dtype=np.int64)] = -np.inf
            out.append(scores)
            targets.append(batch.target[:, -1])
    if not out:
        return np.zeros((0, cfg.n_items)), np.zeros(0, dtype=np.int64)
    return np.concatenate(out), np.concatenate(targets)


def evaluate_ranks(params, cfg, seqs, exclude_history=False):
    scores, target = final_scores(params, cfg, seqs, exclude_history)
    return ranks_from_scores(scores, target)


def all_rank(model, seqs, exclude_history=False):
    params, cfg = _unwrap(model)
    return evaluate_ranks(params, cfg, seqs, exclude_history)


def alignment_metric(pooled_id, pooled_con):
    """Mean squared distance between paired L2-normalised rows (alpha = 2)."""
    a = _normalize(pooled_id)
    b = _normalize(pooled_con)
    return float(((a - b) ** 2).sum(axis=1).mean())


def uniformity_metric(embeddings, t=2.0, chunk=2048):
    """log mean over distinct unordered pairs of exp(-t * ||x - y||^2), rows normalised."""
    x = _normalize(embeddings)
    n = x.shape[0]
    if n < 2:
        raise ValueError("uniformity needs at least two embeddings")
    total = 0.0
    for lo in range(0, n, chunk):
        block = x[lo: lo + chunk]
        sq = np.maximum(2.0 - 2.0 * block @ x.T, 0.0)
        k = np.exp(-t * sq)
        rows = np.arange(lo, lo + block.shape[0])[:, None]
        k[np.arange(n)[None, :] <= rows] = 0.0  # keep j > i only
        total += k.sum()
    return float(np.log(total / (n * (n - 1) / 2)))


def _normalize(x):
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("zero-norm representation")
    return x / norm


def pooled_unimodal(params, cfg, seqs, batch_size=512):
    """Mean-pooled unimodal encoder outputs ``(id, con)`` for each sequence prefix."""
    if cfg.mode is not ModelMode.TSSR:
        raise ValueError("alignment diagnostics need both unimodal streams (tssr mode)")
    P = as_leaves(params)
    ids, cons = [], []
    with nx.no_grad():
        for lo in range(0, len(seqs), batch_size):
            batch = build_batch(seqs[lo: lo + batch_size], cfg.max_len, cfg.pad)
            trace, _ = forward(batch, P, cfg, rng=None, score=False)
            w = batch.mask[:, :, None] / batch.mask.sum(axis=1)[:, None, None]
            ids.append((trace.F_id.data * w).sum(axis=1))
            cons.append((trace.F_con.data * w).sum(axis=1))
    return np.concatenate(ids), np.concatenate(cons)


def evaluate(model, split, diagnostics=False, part="test", exclude_history=False, config=None):
    params, cfg = _unwrap(model)
    if part not in ("test", "validation"):
        raise ValueError("part must be 'test' or 'validation'")
    seqs = split.test if part == "test" else split.validation
    ranks = evaluate_ranks(params, cfg, seqs, exclude_history)
    report = EvalReport(recall={n: recall_at_n(ranks, n) for n in CUTOFFS},
                        ndcg={n: ndcg_at_n(ranks, n) for n in CUTOFFS},
                        n_users=int(ranks.size), config=dict(config or cfg.to_dict()))
    if diagnostics and cfg.mode is ModelMode.TSSR:
        pid, pcon = pooled_unimodal(params, cfg, seqs)
        report.alignment = alignment_metric(pid, pcon)
        report.uniformity = uniformity_metric(np.concatenate([pid, pcon]))
    return report
