"""Synthetic tasks standing in for real fine-tuning datasets."""
from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .linalg import STREAM_DATA, SeededRng

SPLITS = ("train", "eval")


class SyntheticTask:
    """Base class: fixed train/eval arrays regenerated identically from ``seed``."""

    kind = "regression"
    name = "task"

    def __init__(self, seed, n_train=2048, n_eval=1024):
        if n_train < 1 or n_eval < 1:
            raise ConfigError("n_train and n_eval must be positive")
        self.seed = int(seed)
        self.n_train = int(n_train)
        self.n_eval = int(n_eval)
        self._rng = SeededRng(self.seed, STREAM_DATA)
        self.data = self._generate()

    def _generate(self):
        raise NotImplementedError

    def pretrained(self):
        return {}

    def split(self, split):
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
        return self.data[split]

    def batches(self, batch_size, seed=None):
        """Endless shuffled minibatches; yields ``(epoch, inputs, targets)``.

        The shuffle stream is separate from the generation stream and from any
        model or reinit stream.
        """
        x, y = self.data["train"]
        n = x.shape[0]
        bs = min(int(batch_size), n)
        rng = SeededRng(self.seed if seed is None else seed, STREAM_DATA + 1)
        epoch = 0
        while True:
            order = rng.permutation(n)
            for start in range(0, n - bs + 1, bs):
                idx = order[start:start + bs]
                yield epoch, x[idx], y[idx]
            epoch += 1


class LowRankRecovery(SyntheticTask):
    """Regression onto ``(W0 + dW) x + noise`` with a hidden rank-``true_rank`` ``dW``.

    ``W0`` is exposed through :meth:`pretrained` so a model built for this
    task starts from the exact base weight and only has to learn ``dW``.
    """

    name = "low_rank_recovery"

    def __init__(self, d_out=32, d_in=32, true_rank=8, noise_sigma=0.01, seed=0,
                 n_train=2048, n_eval=1024):
        if true_rank < 1 or true_rank > min(d_out, d_in):
            raise ConfigError(f"true_rank must lie in [1, min(d_out, d_in)], got {true_rank}")
        if noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        self.d_out, self.d_in = int(d_out), int(d_in)
        self.true_rank = int(true_rank)
        self.noise_sigma = float(noise_sigma)
        super().__init__(seed, n_train, n_eval)

    def _generate(self):
        rng = self._rng
        self.w0 = rng.normal((self.d_out, self.d_in)) / math.sqrt(self.d_in)
        u = rng.normal((self.d_out, self.true_rank))
        v = rng.normal((self.true_rank, self.d_in))
        # unit-variance targets per output for x ~ N(0, I)
        self.delta = u @ v / math.sqrt(self.true_rank * self.d_in)
        w = self.w0 + self.delta
        data = {}
        for split, n in (("train", self.n_train), ("eval", self.n_eval)):
            x = rng.normal((n, self.d_in))
            y = x @ w.T + self.noise_sigma * rng.normal((n, self.d_out))
            data[split] = (x, y)
        return data

    def pretrained(self):
        return {"layers.0": self.w0}


class GaussianClassification(SyntheticTask):
    """Balanced Gaussian blobs around random class means."""

    kind = "classification"
    name = "gaussian_classification"

    def __init__(self, n_classes=4, dim=32, separation=2.0, seed=0, n_train=2048, n_eval=1024):
        if n_classes < 2 or dim < 1:
            raise ConfigError("need n_classes >= 2 and dim >= 1")
        self.n_classes, self.dim, self.separation = int(n_classes), int(dim), float(separation)
        super().__init__(seed, n_train, n_eval)

    def _generate(self):
        rng = self._rng
        means = rng.normal((self.n_classes, self.dim)) * self.separation / math.sqrt(self.dim)
        self.means = means
        data = {}
        for split, n in (("train", self.n_train), ("eval", self.n_eval)):
            labels = rng.permutation(np.arange(n) % self.n_classes)
            x = means[labels] + rng.normal((n, self.dim))
            data[split] = (x, labels.astype(np.int64))
        return data


class SeqCopyClassify(SyntheticTask):
    """Predict the first token of a random sequence; needs attention to position 0."""

    kind = "classification"
    name = "seq_copy_classify"

    def __init__(self, seq_len=8, vocab=16, seed=0, n_train=2048, n_eval=1024):
        if vocab < 2 or seq_len < 1:
            raise ConfigError("need vocab >= 2 and seq_len >= 1")
        if vocab ** seq_len < n_train + n_eval:
            raise ConfigError("vocab ** seq_len too small for disjoint splits")
        self.seq_len, self.vocab = int(seq_len), int(vocab)
        self.n_classes = self.vocab
        super().__init__(seed, n_train, n_eval)

    def _generate(self):
        rng = self._rng
        need = self.n_train + self.n_eval
        seen, rows = set(), []
        while len(rows) < need:
            for row in rng.integers(0, self.vocab, (need, self.seq_len)):
                key = row.tobytes()
                if key not in seen:
                    seen.add(key)
                    rows.append(row)
                    if len(rows) == need:
                        break
        tokens = np.stack(rows).astype(np.int64)
        ev, tr = tokens[:self.n_eval], tokens[self.n_eval:]
        return {"train": (tr, tr[:, 0].copy()), "eval": (ev, ev[:, 0].copy())}


TASKS = {
    "low_rank_recovery": LowRankRecovery,
    "gaussian_classification": GaussianClassification,
    "seq_copy_classify": SeqCopyClassify,
}


def make_task(kind, seed, **kwargs):
    try:
        cls = TASKS[kind]
    except KeyError:
        raise ConfigError(f"unknown task kind {kind!r}; expected one of {sorted(TASKS)}") from None
    try:
        return cls(seed=seed, **kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad options for task {kind!r}: {exc}") from None
