"""User-grained and item-grained contrastive losses, next-item cross-entropy."""
from dataclasses import dataclass

import numpy as np

from . import numerics as nx


@dataclass
class ContrastConfig:
    tau: float = 0.5
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0

    def __post_init__(self):
        if not 0 < self.tau <= 10:
            raise ValueError(f"tau must be in (0, 10], got {self.tau}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be non-negative")


def mean_pool(F, mask):
    return nx.masked_mean(F, mask, axis=1)


def _symmetric_infonce(sim):
    """Mean over rows of -log p(row i -> col i) - log p(col i -> row i)."""
    n = sim.shape[0]
    diag = np.arange(n)
    fwd = nx.pick(nx.log_softmax(sim, axis=1), diag)
    bwd = nx.pick(nx.log_softmax(nx.transpose(sim), axis=1), diag)
    return nx.scale(nx.sum(nx.add(fwd, bwd)), -1.0 / n)


def user_contrastive_loss(F_id, F_con, mask, tau):
    """Cross-modal InfoNCE between mean-pooled sequence representations.

    Cosine similarity over temperature; every other user in the batch is a
    negative. Both directions are summed per user, then averaged.
    """
    a = nx.l2_normalize(mean_pool(F_id, mask))
    b = nx.l2_normalize(mean_pool(F_con, mask))
    sim = nx.scale(nx.matmul(a, nx.transpose(b)), 1.0 / tau)
    return _symmetric_infonce(sim)


def valid_steps(mask):
    """Flat indices (into batch*t) of steps l whose successor l+1 is also real."""
    B, t = mask.shape
    ok = mask[:, :-1] & mask[:, 1:]
    rows, cols = np.nonzero(ok)
    src = rows * t + cols
    return src, src + 1


def item_contrastive_loss(F_id, F_con, E_id_raw, E_con_raw, mask, tau):
    """Cross-modal next-step InfoNCE with inner-product similarity.

    The state of one modality at step l scores the raw embedding of the other
    modality at step l+1 against every valid step-(l+1) target in the batch.
    Normalised by the number of valid (user, step) pairs.
    """
    src, dst = valid_steps(mask)
    if src.size == 0:
        raise ValueError("item contrastive loss needs at least one pair of adjacent real positions")
    d = F_id.shape[-1]

    def rows(x, idx):
        return nx.take(nx.reshape(x, (-1, d)), idx)

    q_id, q_con = rows(F_id, src), rows(F_con, src)
    t_id, t_con = rows(E_id_raw, dst), rows(E_con_raw, dst)
    n = src.size
    diag = np.arange(n)
    a = nx.pick(nx.log_softmax(nx.scale(nx.matmul(q_id, nx.transpose(t_con)), 1.0 / tau), axis=1), diag)
    b = nx.pick(nx.log_softmax(nx.scale(nx.matmul(q_con, nx.transpose(t_id)), 1.0 / tau), axis=1), diag)
    return nx.scale(nx.sum(nx.add(a, b)), -1.0 / n)


def autoregressive_ce_loss(logits, target, mask):
    """Mean next-item cross-entropy over real positions."""
    n_items = logits.shape[-1]
    target = np.asarray(target)
    sel = np.asarray(mask, dtype=bool)
    if np.any(target[sel] >= n_items) or np.any(target[sel] < 0):
        raise ValueError("PAD or out-of-range target at a counted position")
    rows, cols = np.nonzero(sel)
    flat = nx.take(nx.reshape(logits, (-1, n_items)), rows * logits.shape[1] + cols)
    lp = nx.pick(nx.log_softmax(flat, axis=-1), target[rows, cols])
    return nx.scale(nx.sum(lp), -1.0 / rows.size)


def total_loss(L_u, L_i, L_ce, config):
    """lambda1 * L_u + lambda2 * L_i + lambda3 * L_ce; ``None`` terms count as zero."""
    out = None
    for w, term in ((config.lambda1, L_u), (config.lambda2, L_i), (config.lambda3, L_ce)):
        if term is None or w == 0:
            continue
        piece = nx.scale(term, w) if isinstance(term, nx.Tensor) else w * float(term)
        out = piece if out is None else nx.add(out, piece)
    if out is None:
        return nx.Tensor(np.array(0.0))
    return out if isinstance(out, nx.Tensor) else nx.Tensor(np.array(out))
