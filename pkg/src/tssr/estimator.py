"""scikit-learn style wrapper around the training loop."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .data import DatasetSplit, InteractionSequence, build_batch
from .evaluation import evaluate, ndcg_at_n, ranks_from_scores
from .model import ModelMode, as_leaves, forward, save_checkpoint, score_items
from .training import TrainConfig, train
from .validation import check_content, check_sequences


class TSSRRecommender(BaseEstimator):
    """Next-item recommender over item-ID and content sequences.

    ``mode`` selects the full two-stream model (``"tssr"``) or one of the
    single-encoder baselines (``"id"``, ``"content"``, ``"hybrid"``).
    Sequences are lists of item indices in ``[0, n_items)``.

    Examples
    --------
    >>> rec = TSSRRecommender(mode="id", d=16, max_epochs=2)  # doctest: +SKIP
    >>> rec.fit(train_seqs, n_items=100).predict(histories, k=10)  # doctest: +SKIP
    """

    def __init__(self, mode="tssr", d=128, max_len=10, n_heads=4, n_uni_layers=2,
                 n_multi_layers=1, multi_ffn=True, dropout=0.1, tau=0.5, lambda1=1.0,
                 lambda2=1.0, lambda3=1.0, learning_rate=1e-4, batch_size=256, max_epochs=200,
                 patience=10, train_fraction=1.0, clip_norm=None, freeze_content=False,
                 init_std=0.02, dtype="float32", random_state=0):
        self.mode = mode
        self.d = d
        self.max_len = max_len
        self.n_heads = n_heads
        self.n_uni_layers = n_uni_layers
        self.n_multi_layers = n_multi_layers
        self.multi_ffn = multi_ffn
        self.dropout = dropout
        self.tau = tau
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lambda3 = lambda3
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.train_fraction = train_fraction
        self.clip_norm = clip_norm
        self.freeze_content = freeze_content
        self.init_std = init_std
        self.dtype = dtype
        self.random_state = random_state

    def train_config(self):
        params = self.get_params()
        params["seed"] = params.pop("random_state")
        return TrainConfig(**params)

    def fit(self, X, y=None, content=None, n_items=None, X_val=None):
        """Train on sequences ``X`` (or a :class:`DatasetSplit`).

        Each training sequence supervises every next-item transition it
        contains. ``X_val`` holds full sequences whose last item is the
        validation target used for model selection.
        """
        if isinstance(X, DatasetSplit):
            split = X
            n_items = split.n_items
        else:
            if n_items is None:
                seqs = check_sequences(X, min_length=2)
                n_items = 1 + int(max(s.max() for s in seqs))
            seqs = check_sequences(X, n_items, min_length=2)
            val = check_sequences(X_val, n_items, min_length=2) if X_val is not None else []
            split = DatasetSplit([InteractionSequence(str(i), list(s)) for i, s in enumerate(seqs)],
                                 [InteractionSequence(str(i), list(s)) for i, s in enumerate(val)],
                                 [], n_items)
        config = self.train_config()
        table = check_content(content, n_items)
        if ModelMode.parse(config.mode).uses_content and table is None:
            raise ValueError(f"mode {config.mode!r} requires content vectors")
        self.model_ = train(config, split, table)
        self.n_items_ = n_items
        self.history_ = self.model_.history
        self.best_epoch_ = self.model_.best_epoch
        return self

    # inference -------------------------------------------------------------------

    def _final_states(self, X, batch_size=512):
        check_is_fitted(self, "model_")
        cfg = self.model_.model_config
        seqs = check_sequences(X, self.n_items_, min_length=1)
        P = as_leaves(self.model_.params)
        states = []
        with nx.no_grad():
            for lo in range(0, len(seqs), batch_size):
                # append PAD as a placeholder next item so the history fills the inputs
                chunk = [np.append(s, cfg.pad) for s in seqs[lo: lo + batch_size]]
                batch = build_batch(chunk, cfg.max_len, cfg.pad)
                trace, _ = forward(batch, P, cfg, score=False)
                states.append(trace.F.data[:, -1, :])
        return np.concatenate(states) if states else np.zeros((0, cfg.d))

    def transform(self, X):
        """Fused representation at the most recent position of each history."""
        return self._final_states(X).astype(np.float64)

    def decision_function(self, X):
        """Scores for every item as the next interaction after each history."""
        F = self._final_states(X)
        P = as_leaves(self.model_.params)
        with nx.no_grad():
            return score_items(nx.Tensor(F), P, self.n_items_).data.astype(np.float64)

    def predict(self, X, k=10):
        """Top-``k`` item indices per history, best first."""
        scores = self.decision_function(X)
        k = min(k, scores.shape[1])
        top = np.argpartition(-scores, k - 1, axis=1)[:, :k]
        order = np.argsort(-np.take_along_axis(scores, top, axis=1), axis=1, kind="stable")
        return np.take_along_axis(top, order, axis=1)

    def score(self, X, y=None):
        """NDCG@10 of the next item ``y`` (or each sequence's last item if ``y`` is None)."""
        if y is None:
            seqs = check_sequences(X, self.n_items_, min_length=2)
            X, y = [s[:-1] for s in seqs], [s[-1] for s in seqs]
        ranks = ranks_from_scores(self.decision_function(X), np.asarray(y, dtype=np.int64))
        return ndcg_at_n(ranks, 10)

    def evaluate(self, split, diagnostics=False, part="test", exclude_history=False):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, split, diagnostics=diagnostics, part=part,
                        exclude_history=exclude_history)

    def save(self, path, extra=None):
        check_is_fitted(self, "model_")
        config = {"model": self.model_.model_config.to_dict(), "train": self.train_config().to_dict()}
        config.update(extra or {})
        save_checkpoint(path, self.model_.params, config)
