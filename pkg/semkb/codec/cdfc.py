"""
Cross-domain fusion codec

A small JSCC pair trained end to end through the MIMO link:

* encoder: masked bag-of-embeddings -> tanh layer -> linear, giving N_feat features
* decoder: tanh layer -> linear -> similarity logits against fixed gallery
  features with a learned log-scale

During training every source feature t_I is paired with a generated
paraphrase feature t_A that passed the similarity filter; the two are fused
with gradient-derived importance weights before transmission. Inference
transmits t_I alone.
"""

import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp, softmax
from tqdm import tqdm

from ..channel.mimo import (
    detect,
    effective_matrix,
    pack_streams,
    precode,
    svd_decompose,
    transmit,
    unpack_streams,
    with_quantized_precoder,
)
from ..errors import (
    BackendUnavailableError,
    EmptyGenerationError,
    GenerationError,
    InvalidConfigError,
    InvalidInputError,
    NumericDomainError,
    ShapeError,
    UndefinedMetricError,
    VocabError,
)
from ..lmkb.layers import init_uniform
from ..lmkb.sdg import DEFAULT_INSTRUCTION, build_prompt, generate, tokenize
from ..models import NoiseModel, PrecodeConfig, SvdTriple
from ..utils.rng import STREAM_INIT, STREAM_NOISE, STREAM_SDG, STREAM_SHUFFLE, derive_seed

logger = logging.getLogger(__name__)

PAIRINGS = ("cross", "matched")
_ENCODER_PARAMS = ("emb", "w1", "w2")
_DECODER_PARAMS = ("wd1", "wd2", "log_scale")


@dataclass(eq=False)
class JsccCodec:
    """Encoder parameters (emb, w1, w2) and decoder parameters (wd1, wd2, log_scale)"""

    emb: np.ndarray  # [|V|, d_emb]
    w1: np.ndarray  # [d_emb, d_hidden]
    w2: np.ndarray  # [d_hidden, N_feat]
    wd1: np.ndarray  # [N_feat, d_hidden]
    wd2: np.ndarray  # [d_hidden, d_gallery]
    log_scale: np.ndarray  # [1]
    active: np.ndarray  # bool [|V|], task-lexicon ids

    def __post_init__(self):
        if self.active.shape != (self.emb.shape[0],):
            raise ShapeError("active mask must cover the vocabulary")
        if self.w1.shape[0] != self.emb.shape[1] or self.w2.shape[0] != self.w1.shape[1]:
            raise ShapeError("encoder weights do not chain")
        if self.wd1.shape[0] != self.w2.shape[1] or self.wd2.shape[0] != self.wd1.shape[1]:
            raise ShapeError("decoder weights do not chain")

    @classmethod
    def create(
        cls,
        vocab_size: int,
        active_ids: Sequence[int],
        n_feat: int = 16,
        d_emb: int = 32,
        d_hidden: int = 32,
        d_gallery: int = 16,
        seed: int = 0,
    ) -> "JsccCodec":
        if min(vocab_size, n_feat, d_emb, d_hidden, d_gallery) < 1:
            raise InvalidConfigError("codec dimensions must be positive")
        rng = np.random.default_rng(derive_seed(seed, STREAM_INIT, 1))
        active = np.zeros(vocab_size, dtype=bool)
        active[np.asarray(list(active_ids), dtype=np.int64)] = True
        return cls(
            emb=rng.standard_normal((vocab_size, d_emb)),
            w1=init_uniform(rng, d_emb, (d_emb, d_hidden)),
            w2=init_uniform(rng, d_hidden, (d_hidden, n_feat)),
            wd1=init_uniform(rng, n_feat, (n_feat, d_hidden)),
            wd2=init_uniform(rng, d_hidden, (d_hidden, d_gallery)),
            log_scale=np.zeros(1),
            active=active,
        )

    @property
    def n_feat(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _ENCODER_PARAMS + _DECODER_PARAMS}

    def copy(self) -> "JsccCodec":
        return JsccCodec(**{name: value.copy() for name, value in self.parameters().items()}, active=self.active.copy())


@dataclass(frozen=True, eq=False)
class FeaturePair:
    t_i: np.ndarray
    t_a: np.ndarray
    sim: float

    @classmethod
    def of(cls, t_i: np.ndarray, t_a: np.ndarray) -> "FeaturePair":
        return cls(t_i, t_a, cosine_sim(t_i, t_a))


# Weights from scores are clamped this far inside (0, 1)
FUSION_EPS = 1e-12


@dataclass(frozen=True)
class FusionWeights:
    theta_i: float
    theta_a: float

    def __post_init__(self):
        if abs(self.theta_i + self.theta_a - 1.0) > 1e-12:
            raise InvalidInputError(f"fusion weights must sum to 1, got {self.theta_i} + {self.theta_a}")
        if not (0.0 < self.theta_i < 1.0 and 0.0 < self.theta_a < 1.0):
            raise InvalidInputError(f"fusion weights must lie in (0, 1), got {self.theta_i}, {self.theta_a}")

    @classmethod
    def from_scores(cls, eta_i: float, eta_a: float) -> "FusionWeights":
        theta = softmax(np.array([eta_i, eta_a], dtype=np.float64))
        theta_i = float(np.clip(theta[0], FUSION_EPS, 1.0 - FUSION_EPS))
        # theta_a taken as the complement
        return cls(theta_i=theta_i, theta_a=1.0 - theta_i)


@dataclass(frozen=True)
class FilterConfig:
    gamma: float = 0.5
    max_retries: int = 5

    def __post_init__(self):
        if not -1.0 <= self.gamma <= 1.0:
            raise InvalidConfigError(f"gamma must be in [-1, 1], got {self.gamma}")
        if self.max_retries < 1:
            raise InvalidConfigError("max_retries must be >= 1")


@dataclass(frozen=True, eq=False)
class FilterOutcome:
    pair: FeaturePair
    attempts: int
    fallback: bool
    text: Optional[str] = None

    @property
    def t_a(self) -> np.ndarray:
        return self.pair.t_a


@dataclass(frozen=True, eq=False)
class TaskContext:
    gallery: np.ndarray  # [G, d_gallery]
    label: int


@dataclass(frozen=True)
class CodecSample:
    text: str
    tokens: Tuple[int, ...]
    label: int


# -------------------------------------------------------------------------------------------------
# Encoder / decoder
# -------------------------------------------------------------------------------------------------

def _encode_forward(tokens: Sequence[int], codec: JsccCodec):
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise InvalidInputError("cannot encode an empty token sequence")
    vocab_size = codec.emb.shape[0]
    bad = ids[(ids < 0) | (ids >= vocab_size)]
    if bad.size:
        raise VocabError(f"token id {int(bad[0])} outside vocabulary of size {vocab_size}")
    used = ids[codec.active[ids]]
    x = codec.emb[used].mean(axis=0) if used.size else np.zeros(codec.emb.shape[1])
    h = np.tanh(x @ codec.w1)
    return h @ codec.w2, {"used": used, "x": x, "h": h}


def _encode_backward(g_t: np.ndarray, cache: dict, codec: JsccCodec) -> Dict[str, np.ndarray]:
    h, x, used = cache["h"], cache["x"], cache["used"]
    g_pre = (codec.w2 @ g_t) * (1.0 - h ** 2)
    g_emb = np.zeros_like(codec.emb)
    if used.size:
        np.add.at(g_emb, used, (codec.w1 @ g_pre) / used.size)
    return {"emb": g_emb, "w1": np.outer(x, g_pre), "w2": np.outer(h, g_t)}


def encode(tokens: Sequence[int], codec: JsccCodec) -> np.ndarray:
    """
    Feature vector of length N_feat

    Only task-lexicon tokens are pooled; a sequence without any encodes to zeros.
    """
    t, _ = _encode_forward(tokens, codec)
    return t


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot compare features of shapes {a.shape} and {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise UndefinedMetricError("cosine similarity of a zero-norm feature")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _decode_forward(y_hat: np.ndarray, codec: JsccCodec, gallery: np.ndarray):
    gallery = np.asarray(gallery, dtype=np.float64)
    if gallery.ndim != 2 or gallery.shape[0] == 0:
        raise InvalidInputError("decoder needs a non-empty gallery")
    if gallery.shape[1] != codec.wd2.shape[1]:
        raise ShapeError(f"gallery width {gallery.shape[1]} does not match decoder output {codec.wd2.shape[1]}")
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y_hat.shape != (codec.n_feat,):
        raise ShapeError(f"expected a feature of length {codec.n_feat}, got {y_hat.shape}")
    a = np.tanh(y_hat @ codec.wd1)
    u = a @ codec.wd2
    logits = np.exp(codec.log_scale[0]) * (gallery @ u)
    return logits, {"y_hat": y_hat, "a": a, "gallery": gallery, "logits": logits}


def _decode_backward(g_p: np.ndarray, cache: dict, codec: JsccCodec):
    a, gallery = cache["a"], cache["gallery"]
    g_u = np.exp(codec.log_scale[0]) * (gallery.T @ g_p)
    g_pre = (codec.wd2 @ g_u) * (1.0 - a ** 2)
    grads = {
        "wd1": np.outer(cache["y_hat"], g_pre),
        "wd2": np.outer(a, g_u),
        "log_scale": np.array([g_p @ cache["logits"]]),
    }
    return grads, codec.wd1 @ g_pre


def decode(y_hat: np.ndarray, codec: JsccCodec, gallery: np.ndarray) -> np.ndarray:
    """Similarity logits of a received feature against every gallery row"""
    logits, _ = _decode_forward(y_hat, codec, gallery)
    return logits


def task_loss(p: np.ndarray, label: int) -> float:
    """-log softmax(p)[label]"""
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < p.size:
        raise InvalidInputError(f"label {label} outside gallery of size {p.size}")
    return float(max(0.0, logsumexp(p) - p[label]))


def _task_loss_grad(p: np.ndarray, label: int) -> np.ndarray:
    g = softmax(p)
    g[label] -= 1.0
    return g


# -------------------------------------------------------------------------------------------------
# Similarity filter, importance weights and fusion
# -------------------------------------------------------------------------------------------------

def filter(
    t_i: np.ndarray,
    source: str,
    backend,
    codec: JsccCodec,
    cfg: FilterConfig,
    seed: int,
    instruction: str = DEFAULT_INSTRUCTION,
    tau: float = 1.0,
    max_len: int = 24,
) -> FilterOutcome:
    """
    Similarity-based filtering of generated source data

    Generates a paraphrase of ``source``, encodes it and keeps it when its
    cosine similarity to ``t_i`` exceeds ``cfg.gamma``; otherwise regenerates,
    for at most 1 + ``cfg.max_retries`` generations. When nothing passes,
    t_a falls back to t_i. Empty generations and texts without task-lexicon
    words count as rejected attempts.

    Raises:
        GenerationError: every attempt failed because the backend was unavailable
    """
    prompt = build_prompt(source, instruction)
    total = cfg.max_retries + 1
    if not np.any(t_i):
        logger.debug("zero source feature, skipping generation")
        return FilterOutcome(FeaturePair(t_i, t_i.copy(), 1.0), attempts=0, fallback=True)

    backend_failures = 0
    last_error: Optional[Exception] = None
    for attempt in range(total):
        try:
            generated = generate(prompt, tau, max_len, backend, derive_seed(seed, attempt))
        except EmptyGenerationError:
            continue
        except BackendUnavailableError as e:
            backend_failures += 1
            last_error = e
            continue
        t_a = encode(tokenize(generated.text, backend.vocab), codec)
        if not np.any(t_a):
            continue
        pair = FeaturePair.of(t_i, t_a)
        if pair.sim > cfg.gamma:
            return FilterOutcome(pair, attempts=attempt + 1, fallback=False, text=generated.text)

    if backend_failures == total:
        raise GenerationError(f"generation backend failed on all {total} attempts") from last_error
    logger.debug("no generation passed gamma=%.2f after %d attempts, using the source feature", cfg.gamma, total)
    return FilterOutcome(FeaturePair(t_i, t_i.copy(), 1.0), attempts=total, fallback=True)


def importance_weights(t_i: np.ndarray, t_a: np.ndarray, codec: JsccCodec, ctx: TaskContext) -> FusionWeights:
    """
    Softmax over the mean task-loss gradients of t_I and t_A

    Both features go through the decoder on the sample's label; the pooled
    gradients are signed means over feature components. Codec parameters are
    not touched.
    """
    scores = []
    for feature in (t_i, t_a):
        p, cache = _decode_forward(feature, codec, ctx.gallery)
        _, g_feature = _decode_backward(_task_loss_grad(p, ctx.label), cache, codec)
        if not np.all(np.isfinite(g_feature)):
            raise NumericDomainError("non-finite feature gradient in importance weighting")
        scores.append(float(np.mean(g_feature)))
    return FusionWeights.from_scores(*scores)


def _fusion_coefficients(w: FusionWeights, pairing: str) -> Tuple[float, float]:
    if pairing == "cross":
        return w.theta_a, w.theta_i
    if pairing == "matched":
        return w.theta_i, w.theta_a
    raise InvalidConfigError(f"unknown fusion pairing '{pairing}', expected one of {PAIRINGS}")


def fuse(t_i: np.ndarray, t_a: np.ndarray, w: FusionWeights, pairing: str = "cross") -> np.ndarray:
    """
    Cross pairing: z = theta_A * t_I + theta_I * t_A

    ``matched`` pairs each feature with its own weight. Identical inputs are
    returned unchanged.
    """
    t_i = np.asarray(t_i, dtype=np.float64)
    t_a = np.asarray(t_a, dtype=np.float64)
    if t_i.shape != t_a.shape:
        raise ShapeError(f"cannot fuse features of shapes {t_i.shape} and {t_a.shape}")
    c_i, c_a = _fusion_coefficients(w, pairing)
    if np.array_equal(t_i, t_a):
        return t_i.copy()
    return c_i * t_i + c_a * t_a


# -------------------------------------------------------------------------------------------------
# Channel
# -------------------------------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ChannelContext:
    """
    One MIMO link as seen by the codec

    ``h_true`` carries the transmission; ``triple`` is the CSI both link ends
    precode and detect with (predicted, stale, exact or quantized).
    """

    h_true: np.ndarray
    triple: SvdTriple
    cfg: PrecodeConfig
    snr_db: float

    @classmethod
    def from_csi(
        cls,
        h_true: np.ndarray,
        h_csi: np.ndarray,
        cfg: PrecodeConfig,
        snr_db: float,
        feedback_bits: Optional[int] = None,
    ) -> "ChannelContext":
        triple = with_quantized_precoder(svd_decompose(h_csi), cfg.d, feedback_bits)
        return cls(np.asarray(h_true, dtype=np.complex128), triple, cfg, snr_db)

    def with_snr(self, snr_db: float) -> "ChannelContext":
        return replace(self, snr_db=snr_db)

    @cached_property
    def stream_map(self) -> np.ndarray:
        return effective_matrix(self.h_true, self.triple, self.cfg)

    def transmit_feature(self, z: np.ndarray, seed: int) -> np.ndarray:
        """Send a real feature over the link and return the detected feature"""
        s = pack_streams(z, self.cfg.d)
        y = transmit(precode(s, self.triple, self.cfg), self.h_true, NoiseModel(self.snr_db, seed))
        return unpack_streams(detect(y, self.triple, self.cfg), np.size(z))

    def backward(self, g_y: np.ndarray) -> np.ndarray:
        """Gradient w.r.t. the sent feature given the gradient w.r.t. the detected one"""
        g_streams = self.stream_map.conj().T @ pack_streams(g_y, self.cfg.d)
        return unpack_streams(g_streams, np.size(g_y))


Channels = Union[ChannelContext, Sequence[ChannelContext]]


def _channel_for(channels: Channels, index: int) -> ChannelContext:
    if isinstance(channels, ChannelContext):
        return channels
    return channels[index % len(channels)]


# -------------------------------------------------------------------------------------------------
# Training and inference
# -------------------------------------------------------------------------------------------------

@dataclass
class StepMetrics:
    loss: float
    accepted: int = 0
    fallbacks: int = 0
    attempts: int = 0


def _accumulate(total: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], scale: float = 1.0):
    for name, g in grads.items():
        total[name] += scale * g


def train_step(
    batch: Sequence[CodecSample],
    codec: JsccCodec,
    channels: Channels,
    filter_cfg: FilterConfig,
    seed: int,
    *,
    gallery: np.ndarray,
    lr: float,
    backend=None,
    sdg_enabled: bool = True,
    pairing: str = "cross",
    instruction: str = DEFAULT_INSTRUCTION,
    tau: float = 1.0,
    max_len: int = 24,
    channel_offset: int = 0,
) -> StepMetrics:
    """
    One SGD step on a batch

    Per sample: encode -> filter -> importance weights -> fuse -> transmit
    over the link -> decode -> task loss. Fusion weights are constants of the
    step; the gradient flows through both encoder passes. Gradients are
    averaged over the batch and applied once. Sample k of the batch uses
    channel ``channel_offset + k``.
    """
    if not batch:
        raise InvalidInputError("empty training batch")
    if sdg_enabled and backend is None:
        raise InvalidConfigError("source-data generation needs a backend")
    _fusion_coefficients(FusionWeights(0.5, 0.5), pairing)

    params = codec.parameters()
    grads = {name: np.zeros_like(value) for name, value in params.items()}
    metrics = StepMetrics(loss=0.0)
    for k, sample in enumerate(batch):
        t_i, cache_i = _encode_forward(sample.tokens, codec)
        z, cache_a = t_i, None
        if sdg_enabled:
            outcome = filter(t_i, sample.text, backend, codec, filter_cfg, derive_seed(seed, STREAM_SDG, k),
                             instruction=instruction, tau=tau, max_len=max_len)
            metrics.attempts += outcome.attempts
            if outcome.fallback:
                metrics.fallbacks += 1
            else:
                metrics.accepted += 1
                w = importance_weights(t_i, outcome.t_a, codec, TaskContext(gallery, sample.label))
                c_i, c_a = _fusion_coefficients(w, pairing)
                _, cache_a = _encode_forward(tokenize(outcome.text, backend.vocab), codec)
                z = fuse(t_i, outcome.t_a, w, pairing)

        channel = _channel_for(channels, channel_offset + k)
        y_hat = channel.transmit_feature(z, derive_seed(seed, STREAM_NOISE, k))
        p, dec_cache = _decode_forward(y_hat, codec, gallery)
        metrics.loss += task_loss(p, sample.label)

        dec_grads, g_y = _decode_backward(_task_loss_grad(p, sample.label), dec_cache, codec)
        _accumulate(grads, dec_grads)
        g_z = channel.backward(g_y)
        if cache_a is None:
            _accumulate(grads, _encode_backward(g_z, cache_i, codec))
        else:
            _accumulate(grads, _encode_backward(c_i * g_z, cache_i, codec))
            _accumulate(grads, _encode_backward(c_a * g_z, cache_a, codec))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"non-finite codec gradient for {name}")
        params[name] -= lr * g / len(batch)
    metrics.loss /= len(batch)
    return metrics


def infer(
    tokens: Sequence[int],
    codec: JsccCodec,
    channel: ChannelContext,
    gallery: np.ndarray,
    seed: int = 0,
) -> np.ndarray:
    """Gallery indices by descending logit (ties -> lower index); no filter, no fusion"""
    t_i = encode(tokens, codec)
    logits = decode(channel.transmit_feature(t_i, seed), codec, gallery)
    return np.argsort(-logits, kind="stable")


@dataclass(frozen=True)
class CodecTrainConfig:
    epochs: int = 20
    lr: float = 0.1
    batch_size: int = 8
    seed: int = 0
    sdg_enabled: bool = True
    pairing: str = "cross"
    instruction: str = DEFAULT_INSTRUCTION
    tau: float = 1.0
    max_len: int = 24

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise InvalidConfigError("epochs and lr must be non-negative and batch_size positive")
        if self.pairing not in PAIRINGS:
            raise InvalidConfigError(f"unknown fusion pairing '{self.pairing}'")


def train_codec(
    samples: Sequence[CodecSample],
    codec: JsccCodec,
    channels: Channels,
    filter_cfg: FilterConfig,
    cfg: CodecTrainConfig,
    *,
    gallery: np.ndarray,
    backend=None,
    progress: bool = False,
) -> List[Dict[str, float]]:
    """
    Mini-batch training over shuffled samples

    Sample i always rides channel i (mod the number of channels). Returns per
    epoch the mean loss and the filter accept / fallback rates.
    """
    if not samples:
        raise InvalidInputError("codec training set is empty")
    history: List[Dict[str, float]] = []
    for epoch in tqdm(range(cfg.epochs), desc="train-cdfc", disable=not progress):
        order = np.random.default_rng(derive_seed(cfg.seed, STREAM_SHUFFLE, 1, epoch)).permutation(len(samples))
        loss_sum, accepted, fallbacks, attempts = 0.0, 0, 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            step_channels = [_channel_for(channels, int(i)) for i in idx]
            metrics = train_step(
                [samples[i] for i in idx],
                codec,
                step_channels,
                filter_cfg,
                derive_seed(cfg.seed, epoch, start),
                gallery=gallery,
                lr=cfg.lr,
                backend=backend,
                sdg_enabled=cfg.sdg_enabled,
                pairing=cfg.pairing,
                instruction=cfg.instruction,
                tau=cfg.tau,
                max_len=cfg.max_len,
            )
            loss_sum += metrics.loss * len(idx)
            accepted += metrics.accepted
            fallbacks += metrics.fallbacks
            attempts += metrics.attempts
        n = len(samples)
        history.append({
            "epoch": epoch,
            "loss": loss_sum / n,
            "accept_rate": accepted / n if cfg.sdg_enabled else 0.0,
            "fallback_rate": fallbacks / n if cfg.sdg_enabled else 0.0,
            "mean_attempts": attempts / n if cfg.sdg_enabled else 0.0,
        })
        logger.debug("cdfc epoch %d: %s", epoch, history[-1])
    if history:
        last = history[-1]
        logger.info("codec trained for %d epochs, final loss %.4f", cfg.epochs, last["loss"])
        if last["fallback_rate"] > 0.5:
            logger.warning("%.0f%% of generated sources were rejected in the last epoch", 100 * last["fallback_rate"])
    return history
