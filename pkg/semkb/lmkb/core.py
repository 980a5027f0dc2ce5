"""
Language-model knowledge base core

Vocabulary and embedding table, the backbone interface with its two local
implementations (trainable ``ToyTransformer`` and the fixed
``DeterministicMock``), the cross-attention that aligns CSI patch embeddings
with the word-embedding space, the vocabulary head and temperature sampling.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax
from tqdm import tqdm

from ..errors import (
    ContextOverflowError,
    DegenerateDistributionError,
    InvalidConfigError,
    InvalidInputError,
    NumericDomainError,
    ShapeError,
    VocabError,
)
from .layers import ForwardCache, Layer, LayerNorm, TransformerBlock, init_uniform, softmax_backward

logger = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>", "<sep>")
PAD, UNK, BOS, EOS, SEP = range(len(SPECIALS))

# Output-head probabilities are kept inside this closed sub-interval of (0, 1)
_PROB_FLOOR = np.finfo(np.float64).tiny
_PROB_CEIL = np.nextafter(1.0, 0.0)

TokenSeq = List[int]


class Vocab:
    """Word-level vocabulary; ids 0-4 are the special tokens"""

    def __init__(self, words: Iterable[str]):
        tokens = list(SPECIALS)
        for word in words:
            if word not in tokens:
                tokens.append(word)
        self.tokens: List[str] = tokens
        self.index: Dict[str, int] = {w: i for i, w in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, word: str) -> int:
        return self.index.get(word, UNK)

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise VocabError(f"token id {token_id} outside vocabulary of size {len(self.tokens)}")
        return self.tokens[token_id]

    @staticmethod
    def is_special(token_id: int) -> bool:
        return 0 <= token_id < len(SPECIALS)


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    e_word: np.ndarray

    def __post_init__(self):
        if self.e_word.ndim != 2 or self.e_word.shape[1] < 1:
            raise ShapeError(f"embedding table must be [|V|, d], got {self.e_word.shape}")

    @property
    def vocab_size(self) -> int:
        return self.e_word.shape[0]

    @property
    def d_llm(self) -> int:
        return self.e_word.shape[1]


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int = 128
    l_depth: int = 2
    d_llm: int = 32
    heads: int = 2
    d_head: Optional[int] = None
    max_seq: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 1 or self.d_llm < 1 or self.heads < 1 or self.max_seq < 1:
            raise InvalidConfigError("vocab_size, d_llm, heads and max_seq must be positive")
        if self.l_depth < 0:
            raise InvalidConfigError("l_depth must be non-negative")
        if self.d_head is None and self.d_llm % self.heads:
            raise InvalidConfigError(f"d_llm={self.d_llm} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d_head if self.d_head is not None else self.d_llm // self.heads


@dataclass(eq=False)
class AlignmentParams:
    """
    Cross-attention parameters

    w_proj [d_llm, d_hat] reduces the word embeddings, per-head w_q
    [H, d_E, d_k], w_k / w_v [H, d_hat, d_k], and w_mix [H * d_k, d_E] mixes
    the concatenated heads back to d_E.
    """

    w_proj: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_mix: np.ndarray

    def __post_init__(self):
        d_llm, d_hat = self.w_proj.shape
        if d_hat > d_llm:
            raise InvalidConfigError(f"d_hat={d_hat} must not exceed d_llm={d_llm}")
        heads, d_e, d_k = self.w_q.shape
        if self.w_k.shape != (heads, d_hat, d_k) or self.w_v.shape != (heads, d_hat, d_k):
            raise ShapeError("w_k / w_v must be [heads, d_hat, d_k]")
        if self.w_mix.shape != (heads * d_k, d_e):
            raise ShapeError(f"w_mix must be [{heads * d_k}, {d_e}], got {self.w_mix.shape}")

    @classmethod
    def create(
        cls,
        d_e: int,
        d_llm: int,
        heads: int,
        rng: np.random.Generator,
        d_hat: Optional[int] = None,
        d_k: Optional[int] = None,
    ) -> "AlignmentParams":
        d_hat = d_hat if d_hat is not None else max(1, d_llm // 2)
        d_k = d_k if d_k is not None else max(1, d_e // heads)
        return cls(
            w_proj=init_uniform(rng, d_llm, (d_llm, d_hat)),
            w_q=init_uniform(rng, d_e, (heads, d_e, d_k)),
            w_k=init_uniform(rng, d_hat, (heads, d_hat, d_k)),
            w_v=init_uniform(rng, d_hat, (heads, d_hat, d_k)),
            w_mix=init_uniform(rng, heads * d_k, (heads * d_k, d_e)),
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        return {"w_proj": self.w_proj, "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_mix": self.w_mix}

    @property
    def heads(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.w_q.shape[2]


# -------------------------------------------------------------------------------------------------
# Backbones
# -------------------------------------------------------------------------------------------------

class Backbone(ABC):
    """Causal sequence model mapping [L, d] (or [B, L, d]) to the same shape"""

    frozen: bool = True
    max_seq: int
    d_model: int

    @abstractmethod
    def forward(self, m0: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def backward(self, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        ...

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray, np.ndarray]]:
        return iter(())

    def zero_grad(self):
        for _, _, grad in self.named_parameters():
            grad[...] = 0.0

    def _check_length(self, length: int):
        if length > self.max_seq:
            raise ContextOverflowError(f"sequence length {length} exceeds max_seq={self.max_seq}")


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected [L, d] or [B, L, d], got shape {x.shape}")


class ToyTransformer(Layer, Backbone):
    """
    Small decoder-only transformer with tied input/output embeddings

    ``forward`` / ``backward`` run the block stack only (l_depth = 0 is the
    identity); the text path ``lm_logits`` adds token and position
    embeddings, a final layer norm and the tied vocabulary head.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.max_seq = cfg.max_seq
        self.d_model = cfg.d_llm
        self.frozen = True
        rng = np.random.default_rng(cfg.seed)
        self._register("e_word", init_uniform(rng, cfg.d_llm, (cfg.vocab_size, cfg.d_llm)))
        self._register("pos", init_uniform(rng, cfg.d_llm, (cfg.max_seq, cfg.d_llm)))
        self.blocks = [TransformerBlock(cfg.d_llm, cfg.heads, cfg.head_dim, rng) for _ in range(cfg.l_depth)]
        self.ln_f = LayerNorm(cfg.d_llm)
        self._stack_cache = ForwardCache()
        self._lm_cache = ForwardCache()

    def children(self):
        named = {f"block{i}": block for i, block in enumerate(self.blocks)}
        named["ln_f"] = self.ln_f
        return named

    @property
    def table(self) -> EmbeddingTable:
        return EmbeddingTable(self.params["e_word"])

    def forward(self, m0: np.ndarray) -> np.ndarray:
        x, squeeze = _as_batch(m0)
        self._check_length(x.shape[1])
        for block in self.blocks:
            x = block.forward(x)
        self._stack_cache.set()
        return x[0] if squeeze else x

    def backward(self, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        self._stack_cache.consume("ToyTransformer")
        g, squeeze = _as_batch(grad_out)
        for block in reversed(self.blocks):
            g = block.backward(g)
        grads = {name: grad for name, _, grad in self.named_parameters() if name.startswith("block")}
        return grads, (g[0] if squeeze else g)

    def lm_logits(self, ids: Sequence[int]) -> np.ndarray:
        """Next-token logits [L, |V|] for every prefix of ``ids``"""
        ids = np.asarray(ids, dtype=np.int64)
        self._check_length(ids.size)
        x = embed_tokens(ids, self.table) + self.params["pos"][:ids.size]
        h = self.forward(x)
        hn = self.ln_f.forward(h[None])[0]
        self._lm_ids, self._lm_hn = ids, hn
        self._lm_cache.set()
        return hn @ self.params["e_word"].T

    def lm_backward(self, g_logits: np.ndarray):
        self._lm_cache.consume("ToyTransformer.lm")
        ids, hn = self._lm_ids, self._lm_hn
        e_word = self.params["e_word"]
        self.grads["e_word"] += g_logits.T @ hn
        g_h = self.ln_f.backward((g_logits @ e_word)[None])
        _, g_x = self.backward(g_h)
        np.add.at(self.grads["e_word"], ids, g_x[0])
        self.grads["pos"][:ids.size] += g_x[0]

    def next_logits(self, ids: Sequence[int]) -> np.ndarray:
        ids = list(ids)[-self.max_seq:]
        return self.lm_logits(ids)[-1]


class DeterministicMock(Backbone):
    """Fixed position-wise orthogonal map; causal, parameter-free, for tests"""

    def __init__(self, d_model: int, max_seq: int = 64, seed: int = 0):
        self.d_model = d_model
        self.max_seq = max_seq
        self.frozen = True
        q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((d_model, d_model)))
        self._w = q
        self._cache = ForwardCache()

    def forward(self, m0: np.ndarray) -> np.ndarray:
        x = np.asarray(m0, dtype=np.float64)
        self._check_length(x.shape[-2])
        self._cache.set()
        return x @ self._w

    def backward(self, grad_out: np.ndarray) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
        self._cache.consume("DeterministicMock")
        return {}, np.asarray(grad_out) @ self._w.T


def backbone_forward(m0: np.ndarray, backbone: Backbone) -> np.ndarray:
    return backbone.forward(m0)


def backbone_backward(grad_out: np.ndarray, backbone: Backbone) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """Parameter and input gradients of a scalar loss; needs a prior forward"""
    return backbone.backward(grad_out)


def train_language_model(
    model: ToyTransformer,
    sequences: Sequence[Sequence[int]],
    epochs: int,
    lr: float,
    seed: int = 0,
    progress: bool = False,
) -> List[float]:
    """
    Next-token cross-entropy pretraining with plain SGD

    Returns the mean loss per epoch. Sequences shorter than two tokens are skipped.
    """
    rng = np.random.default_rng(seed)
    usable = [list(s)[: model.max_seq + 1] for s in sequences if len(s) >= 2]
    history: List[float] = []
    for epoch in tqdm(range(epochs), desc="pretrain", disable=not progress):
        total = 0.0
        for idx in rng.permutation(len(usable)):
            seq = usable[idx]
            inputs, targets = seq[:-1], np.asarray(seq[1:])
            probs = softmax(model.lm_logits(inputs), axis=-1)
            rows = np.arange(targets.size)
            total += float(-np.mean(np.log(probs[rows, targets])))
            g = probs.copy()
            g[rows, targets] -= 1.0
            model.zero_grad()
            model.lm_backward(g / targets.size)
            for _, param, grad in model.named_parameters():
                param -= lr * grad
        history.append(total / max(1, len(usable)))
        logger.debug("pretrain epoch %d: loss %.4f", epoch, history[-1])
    if history:
        logger.info("language model pretrained for %d epochs, final loss %.4f", epochs, history[-1])
    return history


# -------------------------------------------------------------------------------------------------
# Embedding, alignment and output head
# -------------------------------------------------------------------------------------------------

def embed_tokens(r: Sequence[int], table: EmbeddingTable) -> np.ndarray:
    ids = np.asarray(r, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        return np.zeros((0, table.d_llm))
    bad = ids[(ids < 0) | (ids >= table.vocab_size)]
    if bad.size:
        raise VocabError(f"token id {int(bad[0])} outside vocabulary of size {table.vocab_size}")
    return table.e_word[ids]


def project_vocab(table: EmbeddingTable, w_proj: np.ndarray) -> np.ndarray:
    """E' = E_word W_proj"""
    if w_proj.ndim != 2 or w_proj.shape[0] != table.d_llm:
        raise ShapeError(f"w_proj {w_proj.shape} does not match d_llm={table.d_llm}")
    return table.e_word @ w_proj


def _check_alignment_shapes(q_src: np.ndarray, e_proj: np.ndarray, params: AlignmentParams):
    if q_src.shape[-1] != params.w_q.shape[1]:
        raise ShapeError(f"query width {q_src.shape[-1]} != d_E={params.w_q.shape[1]}")
    if e_proj.ndim != 2 or e_proj.shape[1] != params.w_k.shape[1]:
        raise ShapeError(f"projected vocabulary {e_proj.shape} does not match d_hat={params.w_k.shape[1]}")


def attention_scores(q_src: np.ndarray, e_proj: np.ndarray, params: AlignmentParams) -> np.ndarray:
    """Scaled scores Q K^T / sqrt(d_k), shape [H, N, |V|] for a 2-D query"""
    _check_alignment_shapes(q_src, e_proj, params)
    q = np.einsum("nd,hdk->hnk", q_src, params.w_q)
    k = np.einsum("vd,hdk->hvk", e_proj, params.w_k)
    return np.einsum("hnk,hvk->hnv", q, k) / np.sqrt(params.d_k)


def cross_attention(
    q_src: np.ndarray,
    e_proj: np.ndarray,
    params: AlignmentParams,
    return_cache: bool = False,
):
    """
    Multi-head cross-attention from CSI patch embeddings onto the vocabulary

    Args:
        q_src: queries [N, d_E] or a batch [B, N, d_E]
        e_proj: projected word embeddings [|V|, d_hat] used for keys and values
        params: alignment parameters
        return_cache: also return the activations needed by the backward pass

    Returns:
        Aligned embeddings with the same leading shape as ``q_src``
    """
    _check_alignment_shapes(q_src, e_proj, params)
    q_in, squeeze = _as_batch(q_src)
    b, n, _ = q_in.shape
    q = np.einsum("bnd,hdk->bhnk", q_in, params.w_q)
    k = np.einsum("vd,hdk->hvk", e_proj, params.w_k)
    v = np.einsum("vd,hdk->hvk", e_proj, params.w_v)
    attn = softmax(np.einsum("bhnk,hvk->bhnv", q, k) / np.sqrt(params.d_k), axis=-1)
    o = np.einsum("bhnv,hvk->bhnk", attn, v)
    concat = o.transpose(0, 2, 1, 3).reshape(b, n, params.heads * params.d_k)
    out = concat @ params.w_mix
    out = out[0] if squeeze else out
    if not return_cache:
        return out
    cache = {"q_in": q_in, "e_proj": e_proj, "q": q, "k": k, "v": v, "attn": attn, "concat": concat, "squeeze": squeeze}
    return out, cache


def cross_attention_backward(grad: np.ndarray, cache: dict, params: AlignmentParams):
    """
    Returns:
        (grads for w_q / w_k / w_v / w_mix, gradient w.r.t. q_src, gradient w.r.t. e_proj)
    """
    g, _ = _as_batch(grad)
    q_in, e_proj, q, k, v, attn, concat = (
        cache["q_in"], cache["e_proj"], cache["q"], cache["k"], cache["v"], cache["attn"], cache["concat"],
    )
    b, n, _ = q_in.shape
    heads, d_k = params.heads, params.d_k
    grads = {"w_mix": concat.reshape(b * n, -1).T @ g.reshape(b * n, -1)}
    g_o = (g @ params.w_mix.T).reshape(b, n, heads, d_k).transpose(0, 2, 1, 3)
    g_attn = np.einsum("bhnk,hvk->bhnv", g_o, v)
    g_v = np.einsum("bhnv,bhnk->hvk", attn, g_o)
    g_scores = softmax_backward(attn, g_attn) / np.sqrt(d_k)
    g_q = np.einsum("bhnv,hvk->bhnk", g_scores, k)
    g_k = np.einsum("bhnv,bhnk->hvk", g_scores, q)
    grads["w_q"] = np.einsum("bnd,bhnk->hdk", q_in, g_q)
    grads["w_k"] = np.einsum("vd,hvk->hdk", e_proj, g_k)
    grads["w_v"] = np.einsum("vd,hvk->hdk", e_proj, g_v)
    g_q_src = np.einsum("bhnk,hdk->bnd", g_q, params.w_q)
    g_e_proj = np.einsum("hvk,hdk->vd", g_k, params.w_k) + np.einsum("hvk,hdk->vd", g_v, params.w_v)
    if cache["squeeze"]:
        g_q_src = g_q_src[0]
    return grads, g_q_src, g_e_proj


def output_head(h: np.ndarray, w_out: np.ndarray) -> np.ndarray:
    """
    Row-wise softmax(h W_out) over the vocabulary

    Entries are clamped to [tiny, 1 - ulp] so every probability stays strictly
    inside (0, 1) even when the logits saturate.
    """
    if h.shape[-1] != w_out.shape[0]:
        raise ShapeError(f"hidden width {h.shape[-1]} does not match W_out {w_out.shape}")
    return np.clip(softmax(h @ w_out, axis=-1), _PROB_FLOOR, _PROB_CEIL)


def sample_with_temperature(
    logits: np.ndarray,
    tau: float,
    seed: Union[int, np.random.Generator],
) -> int:
    """
    Draw a token id from softmax(logits / tau)

    ``tau = 0`` is greedy argmax. ``seed`` may be an integer or a Generator
    that the caller keeps drawing from.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1 or logits.size == 0:
        raise ShapeError(f"expected a non-empty logit vector, got shape {logits.shape}")
    if np.any(np.isnan(logits)):
        raise NumericDomainError("logits contain NaN")
    if np.any(np.isposinf(logits)):
        raise InvalidInputError("logits contain +inf")
    if np.all(np.isneginf(logits)):
        raise DegenerateDistributionError("every logit is -inf")
    if tau < 0:
        raise InvalidConfigError(f"temperature must be >= 0, got {tau}")
    if tau == 0:
        return int(np.argmax(logits))
    probs = softmax(logits / tau)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return int(rng.choice(probs.size, p=probs))
