"""Character n-gram language model with add-k smoothing."""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from pathlib import Path

from .corpus import Vocabulary
from .errors import ConfigError, DataError

START = -1
UNK = "<unk>"
_HEADER = "char-ngram-lm v1"


class CharNgramLm:
    """P(c | last ``order - 1`` tokens) over characters plus eos.

    Tokens are vocabulary ids (``1..V`` characters, ``V + 1`` eos); contexts
    shorter than ``order - 1`` are left-padded with a start symbol. The table
    only stores observed contexts; any other context is uniform, which is
    what add-k gives for zero counts.
    """

    def __init__(self, vocab: Vocabulary, order: int = 3, k: float = 0.1):
        if order < 1:
            raise ConfigError(f"LM order must be >= 1, got {order}")
        if k <= 0:
            raise ConfigError(f"add-k constant must be positive, got {k}")
        self.vocab = vocab
        self.order = order
        self.k = k
        self.table: dict[tuple, list[float]] = {}
        self.floor: dict[tuple, float] = {}

    @property
    def num_outcomes(self) -> int:
        return len(self.vocab) + 1

    def context(self, prefix) -> tuple:
        n = self.order - 1
        if n == 0:
            return ()
        padded = [START] * n + [int(t) for t in prefix]
        return tuple(padded[-n:])

    def log_probs(self, prefix) -> list[float]:
        """Log-probabilities of every outcome ``1..V+1`` after ``prefix``."""
        row = self.table.get(self.context(prefix))
        if row is None:
            return [-math.log(self.num_outcomes)] * self.num_outcomes
        return list(row)

    def log_prob(self, prefix, token) -> float:
        token = int(token)
        ctx = self.context(prefix)
        if not 1 <= token <= self.vocab.eos:
            # out of vocabulary: the smoothing share of one unseen outcome
            return self.floor.get(ctx, -math.log(self.num_outcomes))
        row = self.table.get(ctx)
        if row is None:
            return -math.log(self.num_outcomes)
        return row[token - 1]

    def save(self, path):
        lines = [
            _HEADER,
            f"order\t{self.order}",
            f"k\t{self.k!r}",
            f"alphabet\t{json.dumps(self.vocab.to_string(), ensure_ascii=False)}",
        ]
        for ctx in sorted(self.table):
            ctx_s = json.dumps([self._symbol(t) for t in ctx], ensure_ascii=False)
            for tok, lp in enumerate(self.table[ctx], start=1):
                lines.append(f"{ctx_s}\t{json.dumps(self._symbol(tok), ensure_ascii=False)}\t{lp!r}")
            lines.append(f"{ctx_s}\t{json.dumps(UNK)}\t{self.floor[ctx]!r}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "CharNgramLm":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != _HEADER:
            raise DataError(f"{path}: not a character n-gram LM file")
        try:
            header = dict(line.split("\t", 1) for line in lines[1:4])
            vocab = Vocabulary(json.loads(header["alphabet"]))
            lm = cls(vocab, int(header["order"]), float(header["k"]))
        except (ValueError, KeyError) as exc:
            raise DataError(f"{path}: malformed LM header ({exc})") from exc
        rows: dict[tuple, dict] = defaultdict(dict)
        for n, line in enumerate(lines[4:], start=5):
            try:
                ctx_s, tok_s, lp = line.split("\t")
                ctx = tuple(lm._id(s) for s in json.loads(ctx_s))
                tok = json.loads(tok_s)
                rows[ctx][UNK if tok == UNK else lm._id(tok)] = float(lp)
            except (ValueError, KeyError) as exc:
                raise DataError(f"{path}:{n}: malformed LM row ({exc})") from exc
        for ctx, row in rows.items():
            try:
                lm.table[ctx] = [row[t] for t in range(1, vocab.eos + 1)]
                lm.floor[ctx] = row[UNK]
            except KeyError as exc:
                raise DataError(f"{path}: context {ctx} lacks outcome {exc}") from exc
        return lm

    def _symbol(self, t):
        if t == START:
            return "<s>"
        if t == self.vocab.eos:
            return "</s>"
        return self.vocab.chars[t - 1]

    def _id(self, s):
        if s == "<s>":
            return START
        if s == "</s>":
            return self.vocab.eos
        return self.vocab.id_of(s)


def train_char_lm(corpus, vocab: Vocabulary, order: int = 3, k: float = 0.1) -> CharNgramLm:
    """Add-k estimates from id sequences, each closed by eos."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("cannot train an LM on an empty corpus")
    lm = CharNgramLm(vocab, order, k)
    counts: dict[tuple, Counter] = defaultdict(Counter)
    for seq in corpus:
        seq = [int(t) for t in seq]
        for i, tok in enumerate(seq + [vocab.eos]):
            counts[lm.context(seq[:i])][tok] += 1
    m = lm.num_outcomes
    for ctx, row in counts.items():
        denom = sum(row.values()) + k * m
        lm.table[ctx] = [math.log((row[t] + k) / denom) for t in range(1, vocab.eos + 1)]
        lm.floor[ctx] = math.log(k / denom)
    return lm


def lm_score(lm: CharNgramLm, prefix, next_token) -> float:
    return lm.log_prob(prefix, next_token)
