"""
Channel-data generation: CSI prediction through the language-model backbone

Chain for one history trace:

    complex_to_real -> normalize -> patch -> csi_embed (W_emb)
    -> cross-attention onto E_word W_proj -> frozen backbone
    -> softmax(W_out) per patch -> prediction head on the last patch -> to_csi

The prediction head starts from the last normalized history sample and adds
W_skip applied to the final L_patch samples. On top of that it adds W_linear
(with bias) applied to the last hidden state, scaled by 1/sqrt(d_E) and
concatenated with the last vocabulary distribution. All head weights start
at zero, so an untrained model repeats the last observed channel.

The 2 N_r N_t antenna-component rows are independent sequences processed as
one batch and share every weight. Training minimizes CE + lambda * NMSE with
plain SGD, after a ridge least-squares start of W_skip.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from tqdm import tqdm

from ..channel.csi_pipeline import PatchSet, complex_to_real, flatten_rows, normalize, patch, to_csi
from ..errors import CheckpointFormatError, InvalidConfigError, InvalidInputError, NumericDomainError, ShapeError
from ..models import ChannelTrace
from ..utils.evaluation import nmse
from ..utils.rng import STREAM_INIT, STREAM_SHUFFLE, derive_seed
from .core import (
    AlignmentParams,
    Backbone,
    BackboneConfig,
    EmbeddingTable,
    ToyTransformer,
    cross_attention,
    cross_attention_backward,
    output_head,
    project_vocab,
)
from .layers import init_uniform, softmax_backward

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CDG1"
_ARRAY_ORDER = ("w_emb", "w_proj", "w_q", "w_k", "w_v", "w_mix", "w_out", "w_skip", "w_linear", "b_linear")
# Relative ridge of the W_skip least-squares start
SKIP_RIDGE = 1e-6


@dataclass(eq=False)
class CdgModel:
    w_emb: np.ndarray  # [L_patch, d_E]
    alignment: AlignmentParams
    backbone: Backbone
    table: EmbeddingTable
    w_out: np.ndarray  # [d_E, |V|]
    w_skip: np.ndarray  # [L_patch, T_pre]
    w_linear: np.ndarray  # [d_E + |V|, T_pre]
    b_linear: np.ndarray  # [T_pre]
    stride: int

    def __post_init__(self):
        d_e = self.w_emb.shape[1]
        if d_e != self.backbone.d_model:
            raise InvalidConfigError(f"d_E={d_e} must equal the backbone width {self.backbone.d_model}")
        if self.table.d_llm != d_e:
            raise InvalidConfigError(f"d_E={d_e} must equal the embedding-table width d_llm={self.table.d_llm}")
        if self.table.d_llm != self.alignment.w_proj.shape[0]:
            raise ShapeError("embedding table width does not match W_proj")
        if self.w_out.shape != (d_e, self.table.vocab_size):
            raise ShapeError(f"W_out must be [{d_e}, {self.table.vocab_size}], got {self.w_out.shape}")
        t_pre = self.w_linear.shape[1]
        if self.w_linear.shape[0] != d_e + self.table.vocab_size or self.b_linear.shape != (t_pre,):
            raise ShapeError("W_linear / bias do not match d_E + |V| and T_pre")
        if self.w_skip.shape != (self.w_emb.shape[0], t_pre):
            raise ShapeError(f"W_skip must be [{self.w_emb.shape[0]}, {t_pre}], got {self.w_skip.shape}")
        if self.stride < 1:
            raise InvalidConfigError("stride must be >= 1")

    @classmethod
    def create(
        cls,
        backbone: Backbone,
        table: EmbeddingTable,
        l_patch: int,
        stride: int,
        t_pre: int,
        seed: int = 0,
        heads: int = 2,
        d_hat: Optional[int] = None,
    ) -> "CdgModel":
        if l_patch < 1 or t_pre < 1:
            raise InvalidConfigError("l_patch and t_pre must be >= 1")
        d_e = backbone.d_model
        vocab_size = table.vocab_size
        rng = np.random.default_rng(derive_seed(seed, STREAM_INIT))
        return cls(
            w_emb=init_uniform(rng, l_patch, (l_patch, d_e)),
            alignment=AlignmentParams.create(d_e, table.d_llm, heads, rng, d_hat=d_hat),
            backbone=backbone,
            table=table,
            w_out=init_uniform(rng, d_e, (d_e, vocab_size)),
            w_skip=np.zeros((l_patch, t_pre)),
            w_linear=np.zeros((d_e + vocab_size, t_pre)),
            b_linear=np.zeros(t_pre),
            stride=stride,
        )

    @property
    def l_patch(self) -> int:
        return self.w_emb.shape[0]

    @property
    def t_pre(self) -> int:
        return self.w_linear.shape[1]

    @property
    def d_e(self) -> int:
        return self.w_emb.shape[1]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name; backbone weights only when unfrozen"""
        params = {"w_emb": self.w_emb, **self.alignment.arrays(), "w_out": self.w_out,
                  "w_skip": self.w_skip, "w_linear": self.w_linear, "b_linear": self.b_linear}
        if not self.backbone.frozen:
            for name, value, _ in self.backbone.named_parameters():
                if name.startswith("block"):
                    params[f"backbone.{name}"] = value
        return params


@dataclass(frozen=True, eq=False)
class TargetTokens:
    ids: np.ndarray  # [rows, N_patch]
    derivation_tag: str = "nearest-vocab"


@dataclass(frozen=True)
class CdgTrainConfig:
    epochs: int = 30
    lr: float = 0.05
    lam: float = 1.0
    seed: int = 0
    warm_start: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.lr < 0:
            raise InvalidConfigError("epochs and lr must be non-negative")
        if self.lam < 0:
            raise InvalidConfigError(f"lambda must be non-negative, got {self.lam}")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    ce: float
    nmse: float


def csi_embed(p: PatchSet, w_emb: np.ndarray) -> np.ndarray:
    """[rows, N_patch, L_patch] @ [L_patch, d_E]"""
    if p.l_patch != w_emb.shape[0]:
        raise ShapeError(f"patch length {p.l_patch} does not match W_emb {w_emb.shape}")
    return p.patches @ w_emb


def align(e: np.ndarray, model: CdgModel, table: EmbeddingTable, return_cache: bool = False):
    e_proj = project_vocab(table, model.alignment.w_proj)
    return cross_attention(e, e_proj, model.alignment, return_cache=return_cache)


def _normalized(trace: ChannelTrace, model: CdgModel):
    if len(trace) < model.l_patch:
        raise InvalidInputError(f"trace of length {len(trace)} is shorter than l_patch={model.l_patch}")
    return normalize(complex_to_real(trace))


def _patch_history(trace: ChannelTrace, model: CdgModel) -> PatchSet:
    norm, stats = _normalized(trace, model)
    return patch(norm, model.l_patch, model.stride, stats)


def _head_features(hz_last: np.ndarray, probs_last: np.ndarray) -> np.ndarray:
    """[rows, d_E + |V|]: scaled last hidden state next to the last distribution"""
    return np.concatenate([hz_last / np.sqrt(hz_last.shape[-1]), probs_last], axis=-1)


def _forward(his: ChannelTrace, model: CdgModel):
    norm, stats = _normalized(his, model)
    ps = patch(norm, model.l_patch, model.stride, stats)
    e = csi_embed(ps, model.w_emb)
    za, att_cache = align(e, model, model.table, return_cache=True)
    hz = model.backbone.forward(za)
    probs = output_head(hz, model.w_out)

    tail = flatten_rows(norm)[:, -model.l_patch:]
    feats = _head_features(hz[:, -1, :], probs[:, -1, :])
    out = tail[:, -1:] + tail @ model.w_skip + feats @ model.w_linear + model.b_linear

    pred = to_csi(out, model.t_pre, his.n_r, his.n_t, ps.stats, his.sample_interval_ms, his.model_tag)
    pred = ChannelTrace(
        h=pred.h,
        t_index=his.t_index[-1] + 1 + np.arange(model.t_pre),
        sample_interval_ms=his.sample_interval_ms,
        model_tag=his.model_tag,
    )
    cache = {"patches": ps, "e": e, "att": att_cache, "hz": hz, "probs": probs, "tail": tail, "feats": feats}
    return pred, cache


def predict(his: ChannelTrace, model: CdgModel) -> ChannelTrace:
    """Predict the next T_pre channel matrices from a history trace"""
    pred, _ = _forward(his, model)
    return pred


def nearest_vocab(vectors: np.ndarray, e_proj: np.ndarray) -> np.ndarray:
    """Id of the most cosine-similar row of ``e_proj`` for each vector (ties -> lower id)"""
    v_norm = np.linalg.norm(vectors, axis=-1, keepdims=True)
    e_norm = np.linalg.norm(e_proj, axis=-1, keepdims=True)
    unit_v = vectors / np.where(v_norm == 0, 1.0, v_norm)
    unit_e = e_proj / np.where(e_norm == 0, 1.0, e_norm)
    return np.argmax(unit_v @ unit_e.T, axis=-1)


def derive_target_tokens(future: ChannelTrace, model: CdgModel, table: EmbeddingTable) -> TargetTokens:
    """
    Token ids for continuous CSI patches

    Each patch is embedded with W_emb, projected with W_proj and assigned the
    nearest row (cosine) of E_word W_proj.
    """
    ps = _patch_history(future, model)
    w_proj = model.alignment.w_proj
    projected = csi_embed(ps, model.w_emb) @ w_proj
    return TargetTokens(ids=nearest_vocab(projected, project_vocab(table, w_proj)))


def ce_loss(pred_dists: np.ndarray, targets: Union[TargetTokens, np.ndarray]) -> float:
    """
    Next-token cross-entropy

    ``pred_dists[..., n, :]`` is scored against ``targets[..., n + 1]``;
    summed over steps and averaged over leading (row) axes.
    """
    ids = targets.ids if isinstance(targets, TargetTokens) else np.asarray(targets)
    shifted = ids[..., 1:]
    if pred_dists.shape[:-1] != shifted.shape:
        raise ShapeError(f"predictions {pred_dists.shape[:-1]} do not align with targets {shifted.shape}")
    picked = np.take_along_axis(pred_dists, shifted[..., None], axis=-1)[..., 0]
    per_row = -np.sum(np.log(np.maximum(picked, 1e-300)), axis=-1)
    return float(np.mean(per_row))


nmse_loss = nmse


def total_loss(ce: float, nmse_value: float, lam: float) -> float:
    if lam < 0:
        raise InvalidConfigError(f"lambda must be non-negative, got {lam}")
    return ce + lam * nmse_value


def loss_and_gradients(
    model: CdgModel,
    his: ChannelTrace,
    future: ChannelTrace,
    lam: float,
    targets: Optional[TargetTokens] = None,
) -> Tuple[LossBreakdown, Dict[str, np.ndarray]]:
    """Joint loss and its gradient for every array in ``model.parameters()``"""
    pred, cache = _forward(his, model)
    probs = cache["probs"]
    rows, n_patch, _ = probs.shape
    if targets is None:
        targets = derive_target_tokens(his, model, model.table)
    ce = ce_loss(probs[:, :-1], targets) if n_patch > 1 else 0.0
    nmse_value = nmse_loss(pred, future)
    total = total_loss(ce, nmse_value, lam)

    # NMSE term, back through the denormalization and the prediction head
    stats = cache["patches"].stats
    pred_real = complex_to_real(pred).data
    truth_real = complex_to_real(future).data
    g_pred = lam * 2.0 * (pred_real - truth_real) / np.sum(truth_real ** 2)
    g_out = stats.sigma * g_pred.transpose(1, 2, 3, 0).reshape(rows, model.t_pre)
    grads: Dict[str, np.ndarray] = {
        "w_skip": cache["tail"].T @ g_out,
        "w_linear": cache["feats"].T @ g_out,
        "b_linear": g_out.sum(axis=0),
    }
    g_feats = g_out @ model.w_linear.T
    d_e = model.d_e

    g_logits = np.zeros_like(probs)
    g_logits[:, -1] = softmax_backward(probs[:, -1, :], g_feats[:, d_e:])
    if n_patch > 1:
        step_rows, step_cols = np.meshgrid(np.arange(rows), np.arange(n_patch - 1), indexing="ij")
        g_ce = probs[:, :-1].copy()
        g_ce[step_rows, step_cols, targets.ids[:, 1:]] -= 1.0
        g_logits[:, :-1] += g_ce / rows

    hz = cache["hz"]
    grads["w_out"] = np.einsum("rnd,rnv->dv", hz, g_logits)
    g_hz = g_logits @ model.w_out.T
    g_hz[:, -1] += g_feats[:, :d_e] / np.sqrt(d_e)

    model.backbone.zero_grad()
    backbone_grads, g_za = model.backbone.backward(g_hz)
    if not model.backbone.frozen:
        for name, g in backbone_grads.items():
            grads[f"backbone.{name}"] = g.copy()

    att_grads, g_e, g_e_proj = cross_attention_backward(g_za, cache["att"], model.alignment)
    grads.update(att_grads)
    grads["w_proj"] = model.table.e_word.T @ g_e_proj
    grads["w_emb"] = np.einsum("rnl,rnd->ld", cache["patches"].patches, g_e)
    return LossBreakdown(total=total, ce=ce, nmse=nmse_value), grads


def default_model(t_pre: int, l_patch: int = 4, stride: int = 2, seed: int = 0) -> CdgModel:
    backbone = ToyTransformer(BackboneConfig(seed=seed))
    return CdgModel.create(backbone, backbone.table, l_patch, stride, t_pre, seed=seed)


def fit_skip_path(
    dataset: Sequence[Tuple[ChannelTrace, ChannelTrace]],
    model: CdgModel,
    ridge: float = SKIP_RIDGE,
) -> np.ndarray:
    """
    Ridge least-squares fit of W_skip, written into the model and returned

    Every window of L_patch + T_pre consecutive samples inside a history
    followed by its future is one regression sample per row: the first
    L_patch normalized values predict the offsets of the next T_pre values
    from the last of them. Futures are normalized with their history's stats.
    The ridge is relative to the mean diagonal of the Gram matrix.
    """
    l_patch, t_pre = model.l_patch, model.t_pre
    xs, ys = [], []
    for his, future in dataset:
        norm, stats = _normalized(his, model)
        ahead = (flatten_rows(complex_to_real(future)) - stats.mu) / stats.sigma
        series = np.concatenate([flatten_rows(norm), ahead[:, :t_pre]], axis=1)
        if series.shape[1] < l_patch + t_pre:
            continue
        windows = sliding_window_view(series, l_patch + t_pre, axis=1).reshape(-1, l_patch + t_pre)
        xs.append(windows[:, :l_patch])
        ys.append(windows[:, l_patch:] - windows[:, l_patch - 1:l_patch])
    if not xs:
        raise InvalidInputError("no pair holds a full L_patch + T_pre window")

    x, y = np.concatenate(xs), np.concatenate(ys)
    gram = x.T @ x
    reg = ridge * max(float(np.trace(gram)) / l_patch, 1.0)
    model.w_skip[...] = np.linalg.solve(gram + reg * np.eye(l_patch), x.T @ y)
    logger.debug("fitted W_skip on %d windows", x.shape[0])
    return model.w_skip


def train_cdg(
    dataset: Sequence[Tuple[ChannelTrace, ChannelTrace]],
    cfg: CdgTrainConfig,
    model: Optional[CdgModel] = None,
    progress: bool = False,
) -> Tuple[CdgModel, List[Dict[str, float]]]:
    """
    SGD over (history, future) pairs, one update per pair

    With ``cfg.warm_start``, a positive lambda and a positive learning rate,
    W_skip is first set by ``fit_skip_path``. Target tokens are re-derived
    from each history at the start of every epoch and held fixed within it.
    The sample order is drawn from the seed. Returns the model and per-epoch
    mean total / CE / NMSE.
    """
    if not dataset:
        raise InvalidInputError("CDG training set is empty")
    if model is None:
        model = default_model(len(dataset[0][1]), seed=cfg.seed)
    if cfg.warm_start and cfg.lam > 0 and cfg.lr > 0 and cfg.epochs > 0:
        fit_skip_path(dataset, model)

    history: List[Dict[str, float]] = []
    for epoch in tqdm(range(cfg.epochs), desc="train-cdg", disable=not progress):
        targets = [derive_target_tokens(his, model, model.table) for his, _ in dataset]
        order = np.random.default_rng(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch)).permutation(len(dataset))
        sums = np.zeros(3)
        for idx in order:
            his, future = dataset[idx]
            loss, grads = loss_and_gradients(model, his, future, cfg.lam, targets[idx])
            params = model.parameters()
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericDomainError(f"non-finite gradient for {name} at epoch {epoch}")
                params[name] -= cfg.lr * g
            sums += (loss.total, loss.ce, loss.nmse)
        mean = sums / len(dataset)
        history.append({"epoch": epoch, "total": float(mean[0]), "ce": float(mean[1]), "nmse": float(mean[2])})
        logger.debug("cdg epoch %d: total %.4f ce %.4f nmse %.4f", epoch, *mean)
    if history:
        logger.info("CDG trained for %d epochs, final NMSE %.4f", cfg.epochs, history[-1]["nmse"])
    return model, history


# -------------------------------------------------------------------------------------------------
# Checkpoints
# -------------------------------------------------------------------------------------------------

def save_checkpoint(model: CdgModel, path: Union[str, Path]) -> Path:
    """'CDG1', u32 array count, then per array: u32 ndim, u32 dims, little-endian f32 data"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = [np.array([model.l_patch, model.stride, model.t_pre], dtype=np.float64)]
    params = model.parameters()
    arrays += [params[name] for name in _ARRAY_ORDER]
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(arrays))]
    for arr in arrays:
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def load_checkpoint(path: Union[str, Path], backbone: Backbone, table: EmbeddingTable) -> CdgModel:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad checkpoint magic at byte offset 0: {raw[:4]!r}")
    offset = 4

    def _take(n: int) -> bytes:
        nonlocal offset
        if offset + n > len(raw):
            raise CheckpointFormatError(f"checkpoint truncated at byte offset {offset}: need {n} more bytes")
        chunk = raw[offset:offset + n]
        offset += n
        return chunk

    (count,) = struct.unpack("<I", _take(4))
    if count != len(_ARRAY_ORDER) + 1:
        raise CheckpointFormatError(f"expected {len(_ARRAY_ORDER) + 1} arrays, found {count}")
    arrays = []
    for _ in range(count):
        (ndim,) = struct.unpack("<I", _take(4))
        shape = struct.unpack(f"<{ndim}I", _take(4 * ndim))
        n_values = int(np.prod(shape)) if shape else 1
        arrays.append(np.frombuffer(_take(4 * n_values), dtype="<f4").reshape(shape).astype(np.float64))
    if offset != len(raw):
        raise CheckpointFormatError(f"{len(raw) - offset} trailing bytes after offset {offset}")

    meta, rest = arrays[0], dict(zip(_ARRAY_ORDER, arrays[1:]))
    return CdgModel(
        w_emb=rest["w_emb"],
        alignment=AlignmentParams(rest["w_proj"], rest["w_q"], rest["w_k"], rest["w_v"], rest["w_mix"]),
        backbone=backbone,
        table=table,
        w_out=rest["w_out"],
        w_skip=rest["w_skip"],
        w_linear=rest["w_linear"],
        b_linear=rest["b_linear"],
        stride=int(meta[1]),
    )
