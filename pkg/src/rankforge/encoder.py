"""Tokenizer, vocabulary and a small pre-LN transformer encoder.

The encoder runs in two wirings:

* cross: ``[CLS] query [SEP] document [SEP]`` in one pass, segment 0 for the
  CLS+query span and 1 for the document span;
* bi: ``[CLS] text [SEP]`` per text, always segment 0, so a document's output
  never depends on the query it is later paired with.

Both return a :class:`RepBundle` whose tensors carry a leading batch axis.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .tensor import Tensor

PAD, CLS, SEP, UNK = 0, 1, 2, 3
N_SPECIAL = 4
MASK_VALUE = -1e9

_WORD = re.compile(r"[^\W_]+")

# Number of texts pushed through the encoder, by role; read by efficiency checks.
forward_counts: Counter = Counter()


def split_words(text: str) -> list[str]:
    """Lowercase and split on runs of non-alphanumeric characters."""
    return _WORD.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens = list(tokens)
        self.ids = {t: i + N_SPECIAL for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise InputError("vocabulary contains duplicate tokens")

    @property
    def size(self) -> int:
        return len(self.tokens) + N_SPECIAL

    def __len__(self) -> int:
        return self.size

    def lookup(self, word: str) -> int:
        return self.ids.get(word, UNK)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int | None = None) -> "Vocabulary":
        """Most frequent words first; frequency ties break alphabetically."""
        counts = Counter()
        for text in texts:
            counts.update(split_words(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_size is not None:
            ranked = ranked[: max(0, max_size - N_SPECIAL)]
        return cls([w for w, _ in ranked])

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)


def tokenize(text: str, vocab: Vocabulary, max_tokens: int | None = None) -> list[int]:
    ids = [vocab.lookup(w) for w in split_words(text)]
    return ids if max_tokens is None else ids[:max_tokens]


@dataclass
class EncoderConfig:
    vocab_size: int
    layers: int = 2
    heads: int = 4
    hidden: int = 32
    ffn: int = 64
    max_len: int = 64
    dropout: float = 0.0

    def validate(self) -> "EncoderConfig":
        if self.hidden <= 0 or self.heads <= 0 or self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} must be a positive multiple of heads={self.heads}")
        if self.max_len < 4:
            raise ConfigError(f"max_len={self.max_len} leaves no room for CLS/SEP")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout={self.dropout} outside [0, 1)")
        if self.layers < 0 or self.ffn <= 0 or self.vocab_size <= N_SPECIAL - 1:
            raise ConfigError("layers, ffn and vocab_size must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    h, f = cfg.hidden, cfg.ffn
    shapes = {
        "tok_emb": (cfg.vocab_size, h),
        "pos_emb": (cfg.max_len, h),
        "seg_emb": (2, h),
    }
    for i in range(cfg.layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.g": (h,), p + "ln1.b": (h,),
            p + "wq": (h, h), p + "bq": (h,),
            p + "wk": (h, h),
            p + "wv": (h, h), p + "bv": (h,),
            p + "wo": (h, h), p + "bo": (h,),
            p + "ln2.g": (h,), p + "ln2.b": (h,),
            p + "w1": (f, h), p + "b1": (f,),
            p + "w2": (h, f), p + "b2": (h,),
        })
    shapes["final_ln.g"] = (h,)
    shapes["final_ln.b"] = (h,)
    return shapes


def sinusoid_table(n: int, h: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    freq = 1.0 / 10000.0 ** (np.arange(0, h, 2) / h)
    table = np.zeros((n, h))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: h // 2])
    return table


def init_tensor(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Embeddings ~ N(0, 0.1); matrices ~ N(0, 1/fan_in); gains 1; biases 0.

    Position embeddings start from a scaled sinusoid table (still trained),
    which makes attending to a fixed relative offset easy to pick up.
    """
    leaf = name.rsplit(".", 1)[-1]
    if name.endswith("pos_emb"):
        return sinusoid_table(*shape) * 0.1
    if name.endswith("_emb"):
        return rng.normal(0.0, 0.1, shape)
    if leaf == "g":
        return np.ones(shape)
    if len(shape) == 2:
        return rng.normal(0.0, 1.0 / math.sqrt(shape[1]), shape)
    return np.zeros(shape)


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator | int = 0,
             prefix: str = "enc.") -> "EncoderParams":
        config.validate()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        tensors = {}
        for name, shape in encoder_param_shapes(config).items():
            tensors[name] = Tensor(init_tensor(name, shape, rng), requires_grad=True, name=prefix + name)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]


@dataclass
class RepBundle:
    """Encoder output for a batch of query-document pairs.

    Rows of ``query_reps``/``doc_reps`` where the matching mask is False are
    padding and must be ignored downstream.
    """

    mode: str
    query_reps: Tensor
    doc_reps: Tensor
    query_mask: np.ndarray
    doc_mask: np.ndarray
    cls_joint: Optional[Tensor] = None
    cls_query: Optional[Tensor] = None
    cls_doc: Optional[Tensor] = None

    def __post_init__(self):
        if self.mode == "cross":
            ok = self.cls_joint is not None and self.cls_query is None and self.cls_doc is None
        elif self.mode == "bi":
            ok = self.cls_joint is None and self.cls_query is not None and self.cls_doc is not None
        else:
            ok = False
        if not ok:
            raise ValueError(f"inconsistent CLS fields for RepBundle mode {self.mode!r}")

    @property
    def batch_size(self) -> int:
        return self.query_reps.shape[0]


@dataclass
class TextReps:
    """Bi-mode output for a batch of single texts."""

    cls: Tensor
    tokens: Tensor
    mask: np.ndarray

    def row(self, i: int) -> "TextReps":
        n = int(self.mask[i].sum())
        return TextReps(
            Tensor(self.cls.data[i : i + 1]),
            Tensor(self.tokens.data[i : i + 1, :n]),
            self.mask[i : i + 1, :n],
        )


def _attention(x: Tensor, params: EncoderParams, p: str, key_bias: np.ndarray) -> Tensor:
    cfg = params.config
    b, L, h = x.shape
    nh = cfg.heads
    d = h // nh

    def split(t):
        return T.transpose(T.reshape(t, (b, L, nh, d)), (0, 2, 1, 3))

    q = split(T.linear(x, params[p + "wq"], params[p + "bq"]))
    k = split(T.linear(x, params[p + "wk"]))
    v = split(T.linear(x, params[p + "wv"], params[p + "bv"]))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(d))
    weights = T.softmax(T.add_const(scores, key_bias), axis=-1)
    ctx = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, L, h))
    return T.linear(ctx, params[p + "wo"], params[p + "bo"])


def forward(params: EncoderParams, ids: np.ndarray, segments: np.ndarray, valid: np.ndarray,
            rng: np.random.Generator | None = None) -> Tensor:
    """Run the transformer over a padded id batch [B, L] -> hidden states [B, L, h]."""
    cfg = params.config
    ids = np.asarray(ids, dtype=np.int64)
    b, L = ids.shape
    if L > cfg.max_len:
        raise InputError(f"sequence of {L} tokens exceeds max_len={cfg.max_len}")
    positions = np.broadcast_to(np.arange(L), (b, L))
    x = T.add(T.add(T.embedding(params["tok_emb"], ids), T.embedding(params["pos_emb"], positions)),
              T.embedding(params["seg_emb"], segments))
    x = T.dropout(x, cfg.dropout, rng)
    key_bias = np.where(valid, 0.0, MASK_VALUE)[:, None, None, :]
    for i in range(cfg.layers):
        p = f"layer{i}."
        a = _attention(T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"]), params, p, key_bias)
        x = T.add(x, T.dropout(a, cfg.dropout, rng))
        y = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        y = T.linear(T.gelu_approx(T.linear(y, params[p + "w1"], params[p + "b1"])), params[p + "w2"], params[p + "b2"])
        x = T.add(x, T.dropout(y, cfg.dropout, rng))
    return T.layer_norm(x, params["final_ln.g"], params["final_ln.b"])


def _check_ids(ids: Sequence[int], vocab_size: int) -> None:
    for t in ids:
        if not 0 <= t < vocab_size:
            raise InputError(f"token id {t} outside vocabulary of size {vocab_size}")


def encode_bi_batch(texts: Sequence[Sequence[int]], params: EncoderParams, role: str = "document",
                    rng: np.random.Generator | None = None) -> TextReps:
    """Encode each text independently as ``[CLS] text [SEP]`` (padded batch)."""
    cfg = params.config
    if role not in ("query", "document"):
        raise InputError(f"unknown role {role!r}")
    n = len(texts)
    lens = [len(t) for t in texts]
    longest = max(lens, default=0)
    if longest + 2 > cfg.max_len:
        raise InputError(f"{role} of {longest} tokens exceeds max_len-2={cfg.max_len - 2}")
    L = longest + 2
    ids = np.full((n, L), PAD, dtype=np.int64)
    valid = np.zeros((n, L), dtype=bool)
    for i, t in enumerate(texts):
        _check_ids(t, cfg.vocab_size)
        ids[i, 0] = CLS
        ids[i, 1 : 1 + len(t)] = t
        ids[i, 1 + len(t)] = SEP
        valid[i, : len(t) + 2] = True
    forward_counts[role] += n
    hidden = forward(params, ids, np.zeros((n, L), dtype=np.int64), valid, rng)
    cls = T.take(hidden, (slice(None), 0))
    tokens = T.take(hidden, (slice(None), slice(1, 1 + longest)))
    mask = np.arange(longest)[None, :] < np.asarray(lens)[:, None]
    return TextReps(cls, tokens, mask)


def encode_bi(ids: Sequence[int], params: EncoderParams, role: str = "document") -> TextReps:
    """Encode one text on its own (batch of one, no padding)."""
    return encode_bi_batch([list(ids)], params, role)


def pair_bi(query: TextReps, doc: TextReps) -> RepBundle:
    return RepBundle(mode="bi", query_reps=query.tokens, doc_reps=doc.tokens,
                     query_mask=query.mask, doc_mask=doc.mask,
                     cls_query=query.cls, cls_doc=doc.cls)


def fit_cross(query_ids: Sequence[int], doc_ids: Sequence[int], max_len: int) -> tuple[list, list]:
    """Apply the cross layout budget, truncating the document side first."""
    if len(query_ids) > max_len - 3:
        raise InputError(f"query of {len(query_ids)} tokens exceeds max_len-3={max_len - 3}")
    room = max_len - 3 - len(query_ids)
    return list(query_ids), list(doc_ids)[:room]


def encode_cross_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], params: EncoderParams,
                       rng: np.random.Generator | None = None) -> RepBundle:
    cfg = params.config
    fitted = [fit_cross(q, d, cfg.max_len) for q, d in pairs]
    n = len(fitted)
    L = max(len(q) + len(d) + 3 for q, d in fitted)
    lq = max(len(q) for q, _ in fitted)
    ld = max(len(d) for _, d in fitted)
    ids = np.full((n, L), PAD, dtype=np.int64)
    segs = np.zeros((n, L), dtype=np.int64)
    valid = np.zeros((n, L), dtype=bool)
    q_pos = np.zeros((n, lq), dtype=np.int64)
    d_pos = np.zeros((n, ld), dtype=np.int64)
    q_mask = np.zeros((n, lq), dtype=bool)
    d_mask = np.zeros((n, ld), dtype=bool)
    for i, (q, d) in enumerate(fitted):
        _check_ids(q, cfg.vocab_size)
        _check_ids(d, cfg.vocab_size)
        seq = [CLS, *q, SEP, *d, SEP]
        ids[i, : len(seq)] = seq
        segs[i, len(q) + 2 : len(seq)] = 1
        valid[i, : len(seq)] = True
        q_pos[i, : len(q)] = np.arange(1, 1 + len(q))
        d_pos[i, : len(d)] = np.arange(len(q) + 2, len(q) + 2 + len(d))
        q_mask[i, : len(q)] = True
        d_mask[i, : len(d)] = True
    forward_counts["cross"] += n
    hidden = forward(params, ids, segs, valid, rng)
    rows = np.arange(n)[:, None]
    return RepBundle(
        mode="cross",
        cls_joint=T.take(hidden, (slice(None), 0)),
        query_reps=T.take(hidden, (rows, q_pos)),
        doc_reps=T.take(hidden, (rows, d_pos)),
        query_mask=q_mask,
        doc_mask=d_mask,
    )


def encode_cross(query_ids: Sequence[int], doc_ids: Sequence[int], params: EncoderParams) -> RepBundle:
    return encode_cross_batch([(query_ids, doc_ids)], params)
