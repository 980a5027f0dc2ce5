"""
Experiment orchestration

One seed runs the whole pipeline: synthetic corpus -> language-model
pretraining -> user links -> CDG training and per-user prediction -> codec
training per system variant -> retrieval evaluation over an SNR or
feedback-bit grid. Seeds run in a thread pool; every random draw comes from a
stream derived from (seed, purpose, index), so results do not depend on the
number of workers.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .channel.csi_file import load_csi
from .channel.mimo import feedback_component_bits, generate_trace
from .codec.cdfc import (
    ChannelContext,
    CodecSample,
    CodecTrainConfig,
    FilterConfig,
    JsccCodec,
    infer,
    train_codec,
)
from .config import ExperimentConfig, Settings, config_hash
from .errors import InvalidConfigError, InvalidInputError
from .lmkb.cdg import CdgModel, CdgTrainConfig, predict, train_cdg
from .lmkb.core import Backbone, BackboneConfig, DeterministicMock, EmbeddingTable, ToyTransformer, train_language_model
from .models import ChannelModelParams, ChannelTrace, ModelTag, PrecodeConfig
from .services.backends import create_backend
from .utils.corpus import RetrievalCorpus, synth_dataset
from .utils.evaluation import RankingResult, map_score, nmse, rank_at_k
from .utils.rng import STREAM_CHANNEL, STREAM_EVAL, STREAM_INIT, STREAM_PRETRAIN, STREAM_USERS, derive_seed, stream_rng

logger = logging.getLogger(__name__)

# variant -> (source-data generation on, CSI prediction on)
VARIANTS: Dict[str, Tuple[bool, bool]] = {
    "full": (True, True),
    "no_sdg": (False, True),
    "no_cdg": (True, False),
    "no_both": (False, False),
}
AXES = ("snr", "feedback")
USER_RADIUS_M = (10.0, 100.0)


@dataclass(frozen=True)
class MetricRow:
    variant: str
    seed: int
    snr_db: float
    feedback_bits: int
    map: float
    rank1: float
    rank5: float
    rank10: float
    nmse: float
    stale_nmse: float

    def sort_key(self):
        return self.variant, self.seed, self.snr_db, self.feedback_bits


@dataclass(frozen=True)
class UserNmseRow:
    seed: int
    user_id: int
    x_m: float
    y_m: float
    nmse: float
    stale_nmse: float


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seeds: List[int]
    axis: str = "snr"
    rows: List[MetricRow] = field(default_factory=list)
    user_nmse: List[UserNmseRow] = field(default_factory=list)
    losses: Dict[str, dict] = field(default_factory=dict)
    filter_stats: Dict[str, dict] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def payload(self) -> dict:
        """Everything except wall-clock time"""
        data = asdict(self)
        data.pop("wall_clock_s")
        return data


@dataclass(frozen=True, eq=False)
class UserLink:
    user_id: int
    x_m: float
    y_m: float
    trace: ChannelTrace


@dataclass(eq=False)
class SeedArtifacts:
    seed: int
    corpus: RetrievalCorpus
    backbone: Backbone
    table: EmbeddingTable
    cdg_model: CdgModel
    train_links: List[UserLink]
    eval_links: List[UserLink]
    predictions: Dict[int, ChannelTrace]
    lm_losses: List[float]
    cdg_losses: List[dict]
    user_rows: List[UserNmseRow]


# -------------------------------------------------------------------------------------------------
# Users and links
# -------------------------------------------------------------------------------------------------

def place_users(n_users: int, fan_deg: float, seed: int) -> List[Tuple[float, float, float]]:
    """
    (x_m, y_m, angle_deg) per user, uniform over a fan-shaped sector facing +x

    User k draws from its own stream, so its position does not depend on n_users.
    """
    positions = []
    for user_id in range(n_users):
        rng = stream_rng(seed, STREAM_USERS, user_id)
        angle = rng.uniform(-fan_deg / 2.0, fan_deg / 2.0)
        radius = rng.uniform(*USER_RADIUS_M)
        rad = np.deg2rad(angle)
        positions.append((float(radius * np.cos(rad)), float(radius * np.sin(rad)), float(angle)))
    return positions


def _history_future(link: UserLink, t_his: int) -> Tuple[ChannelTrace, ChannelTrace]:
    return link.trace.window(0, t_his), link.trace.window(t_his, len(link.trace))


def generate_links(
    cfg: ExperimentConfig,
    seed: int,
    model_tag: str,
    first_user: int,
    n_users: int,
    length: Optional[int] = None,
) -> List[UserLink]:
    ch = cfg.channel
    length = length or cfg.cdg.t_his + cfg.cdg.t_pre
    positions = place_users(first_user + n_users, ch.los_fan_deg, seed)
    links = []
    for user_id in range(first_user, first_user + n_users):
        x, y, angle = positions[user_id]
        params = ChannelModelParams(
            n_r=ch.n_r,
            n_t=ch.n_t,
            doppler_hz=ch.doppler_hz,
            n_paths=ch.n_paths,
            k_factor_db=ch.k_factor_db,
            sample_interval_ms=ch.sample_interval_ms,
            model_tag=ModelTag(model_tag),
            aod_deg=angle,
            aoa_deg=angle,
        )
        trace = generate_trace(params, derive_seed(seed, STREAM_CHANNEL, user_id), length)
        links.append(UserLink(user_id, x, y, trace))
    return links


def links_from_file(cfg: ExperimentConfig) -> Tuple[List[UserLink], List[UserLink]]:
    """Cut an ingested trace into consecutive user windows, alternating train / eval"""
    trace = load_csi(cfg.channel.csi_file)
    if (trace.n_r, trace.n_t) != (cfg.channel.n_r, cfg.channel.n_t):
        raise InvalidConfigError(
            f"CSI file is {trace.n_r}x{trace.n_t} but the config asks for {cfg.channel.n_r}x{cfg.channel.n_t}"
        )
    length = cfg.cdg.t_his + cfg.cdg.t_pre
    n_windows = len(trace) // length
    if n_windows < 1:
        raise InvalidInputError(f"CSI file holds {len(trace)} samples, need at least {length}")
    links = [UserLink(k, 0.0, 0.0, trace.window(k * length, (k + 1) * length)) for k in range(n_windows)]
    train = links[::2]
    return train, (links[1::2] or train)


# -------------------------------------------------------------------------------------------------
# Per-seed preparation
# -------------------------------------------------------------------------------------------------

def build_backbone(cfg: ExperimentConfig, corpus: RetrievalCorpus, seed: int, progress: bool = False):
    """Backbone, embedding table and pretraining losses"""
    lm = cfg.lmkb
    if lm.backbone == "mock":
        if cfg.sdg.backend == "toy":
            raise InvalidConfigError("the toy generation backend needs lmkb.backbone = 'toy'")
        backbone = DeterministicMock(lm.d_llm, lm.max_seq, seed=derive_seed(seed, STREAM_INIT))
        e_word = stream_rng(seed, STREAM_INIT, 2).standard_normal((corpus.vocab.size, lm.d_llm)) / np.sqrt(lm.d_llm)
        return backbone, EmbeddingTable(e_word), []
    model = ToyTransformer(BackboneConfig(
        vocab_size=corpus.vocab.size,
        l_depth=lm.l_depth,
        d_llm=lm.d_llm,
        heads=lm.heads,
        max_seq=lm.max_seq,
        seed=derive_seed(seed, STREAM_INIT),
    ))
    losses = train_language_model(
        model,
        corpus.pretraining_sequences(),
        lm.pretrain_epochs,
        lm.pretrain_lr,
        seed=derive_seed(seed, STREAM_PRETRAIN),
        progress=progress,
    )
    model.frozen = not lm.unfreeze_backbone
    return model, model.table, losses


def prepare_seed(cfg: ExperimentConfig, seed: int, progress: bool = False) -> SeedArtifacts:
    corpus = synth_dataset(cfg.dataset, seed, cfg.sdg.instruction)
    backbone, table, lm_losses = build_backbone(cfg, corpus, seed, progress)

    if cfg.channel.csi_file:
        train_links, eval_links = links_from_file(cfg)
    else:
        n = cfg.channel.n_users
        eval_tag = cfg.channel.eval_model_tag or cfg.channel.model_tag
        train_links = generate_links(cfg, seed, cfg.channel.model_tag, 0, n)
        eval_links = generate_links(cfg, seed, eval_tag, n, n)

    t_his = cfg.cdg.t_his
    dataset = [_history_future(link, t_his) for link in train_links]
    model = CdgModel.create(backbone, table, cfg.cdg.l_patch, cfg.cdg.stride, cfg.cdg.t_pre,
                            seed=seed, heads=cfg.lmkb.heads)
    model, cdg_losses = train_cdg(
        dataset,
        CdgTrainConfig(epochs=cfg.cdg.epochs, lr=cfg.cdg.lr, lam=cfg.cdg.lam, seed=seed,
                       warm_start=cfg.cdg.warm_start),
        model,
        progress=progress,
    )

    predictions: Dict[int, ChannelTrace] = {}
    user_rows = []
    for link in train_links + eval_links:
        his, _ = _history_future(link, t_his)
        predictions[link.user_id] = predict(his, model)
    for link in eval_links:
        his, future = _history_future(link, t_his)
        stale = np.repeat(his.h[-1:], len(future), axis=0)
        user_rows.append(UserNmseRow(
            seed=seed,
            user_id=link.user_id,
            x_m=link.x_m,
            y_m=link.y_m,
            nmse=nmse(predictions[link.user_id], future),
            stale_nmse=nmse(stale, future.h),
        ))
    return SeedArtifacts(seed, corpus, backbone, table, model, train_links, eval_links, predictions,
                         lm_losses, cdg_losses, user_rows)


def channel_context(
    art: SeedArtifacts,
    link: UserLink,
    cfg: ExperimentConfig,
    use_cdg: bool,
    snr_db: float,
    feedback_bits: Optional[int],
) -> ChannelContext:
    """
    Link at the last predicted instant: the true channel carries the signal,
    the predicted (or, without CDG, the last observed) channel sets the SVD
    """
    his, future = _history_future(link, cfg.cdg.t_his)
    h_csi = art.predictions[link.user_id].h[-1] if use_cdg else his.h[-1]
    precode_cfg = PrecodeConfig(d=cfg.mimo.d, equalize=cfg.mimo.equalize)
    return ChannelContext.from_csi(future.h[-1], h_csi, precode_cfg, snr_db, feedback_bits or None)


# -------------------------------------------------------------------------------------------------
# Variants
# -------------------------------------------------------------------------------------------------

def variant_of(cfg: ExperimentConfig) -> str:
    flags = (not cfg.ablations.disable_sdg, not cfg.ablations.disable_cdg)
    return next(name for name, value in VARIANTS.items() if value == flags)


def train_variant(
    cfg: ExperimentConfig,
    art: SeedArtifacts,
    variant: str,
    settings: Optional[Settings] = None,
    progress: bool = False,
    feedback_bits: Optional[int] = None,
) -> Tuple[JsccCodec, List[dict]]:
    """
    Train the codec of one variant over the training users

    ``feedback_bits`` overrides ``mimo.feedback_bits`` for the precoders seen
    in training; 0 means unquantized.
    """
    use_sdg, use_cdg = VARIANTS[variant]
    bits = cfg.mimo.feedback_bits if feedback_bits is None else feedback_bits
    corpus = art.corpus
    backend = None
    if use_sdg:
        backend = create_backend(
            cfg.sdg.backend,
            corpus.vocab,
            model=art.backbone if isinstance(art.backbone, ToyTransformer) else None,
            settings=settings or Settings.from_env(),
            thesaurus=corpus.thesaurus,
            distractors=corpus.distractors,
            hallucination_rate=cfg.sdg.hallucination_rate,
            reorder=cfg.sdg.reorder,
        )
    codec = JsccCodec.create(
        corpus.vocab.size,
        corpus.active_ids,
        n_feat=cfg.cdfc.n_feat,
        d_emb=cfg.cdfc.d_emb,
        d_hidden=cfg.cdfc.d_hidden,
        d_gallery=cfg.dataset.d_gallery,
        seed=art.seed,
    )
    samples = [CodecSample(c.text, tuple(corpus.tokens(c)), corpus.prototype_index(c.label)) for c in corpus.train]
    channels = [
        channel_context(art, link, cfg, use_cdg, cfg.cdfc.train_snr_db, bits)
        for link in art.train_links
    ]
    history = train_codec(
        samples,
        codec,
        channels,
        FilterConfig(gamma=cfg.cdfc.gamma, max_retries=cfg.cdfc.max_retries),
        CodecTrainConfig(
            epochs=cfg.cdfc.epochs,
            lr=cfg.cdfc.lr,
            batch_size=cfg.cdfc.batch_size,
            seed=art.seed,
            sdg_enabled=use_sdg,
            pairing=cfg.cdfc.fusion_pairing,
            instruction=cfg.sdg.instruction,
            tau=cfg.sdg.tau,
            max_len=cfg.sdg.max_len,
        ),
        gallery=corpus.gallery,
        backend=backend,
        progress=progress,
    )
    return codec, history


def grid_points(cfg: ExperimentConfig, axis: str) -> List[Tuple[float, int]]:
    """(snr_db, feedback_bits) pairs; 0 bits means unquantized feedback"""
    if axis == "snr":
        return [(snr, cfg.mimo.feedback_bits or 0) for snr in cfg.sweep.snr_grid_db]
    if axis == "feedback":
        return [(cfg.sweep.feedback_snr_db, bits) for bits in cfg.sweep.feedback_grid]
    raise InvalidConfigError(f"unknown sweep axis '{axis}', expected one of {AXES}")


def evaluate_variant(
    cfg: ExperimentConfig,
    art: SeedArtifacts,
    variant: str,
    codec: JsccCodec,
    points: Sequence[Tuple[float, int]],
    first_index: int = 0,
) -> List[MetricRow]:
    """
    Retrieval metrics over the test captions; query i rides evaluation user i (mod users)

    ``first_index`` is the grid position of ``points[0]`` and keys the noise streams.
    """
    _, use_cdg = VARIANTS[variant]
    corpus = art.corpus
    seed = art.seed
    users = [u.nmse for u in art.user_rows]
    stale = [u.stale_nmse for u in art.user_rows]
    rows = []
    for point_idx, (snr_db, bits) in enumerate(points, start=first_index):
        contexts = [channel_context(art, link, cfg, use_cdg, snr_db, bits) for link in art.eval_links]
        results = []
        for i, caption in enumerate(corpus.test):
            ranking = infer(
                corpus.tokens(caption),
                codec,
                contexts[i % len(contexts)],
                corpus.gallery,
                seed=derive_seed(seed, STREAM_EVAL, point_idx, i),
            )
            results.append(RankingResult(ranking, corpus.relevant(caption.label)))
        rows.append(MetricRow(
            variant=variant,
            seed=seed,
            snr_db=float(snr_db),
            feedback_bits=int(bits),
            map=map_score(results),
            rank1=rank_at_k(results, 1),
            rank5=rank_at_k(results, 5),
            rank10=rank_at_k(results, 10),
            nmse=float(np.mean(users)) if use_cdg else float(np.mean(stale)),
            stale_nmse=float(np.mean(stale)),
        ))
    return rows


# -------------------------------------------------------------------------------------------------
# Runs
# -------------------------------------------------------------------------------------------------

@dataclass
class SeedResult:
    seed: int
    rows: List[MetricRow]
    user_rows: List[UserNmseRow]
    losses: dict
    filter_stats: dict


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    variants: Sequence[str],
    axis: str = "snr",
    settings: Optional[Settings] = None,
    progress: bool = False,
) -> SeedResult:
    logger.info("seed %d: preparing corpus, backbone and CDG", seed)
    art = prepare_seed(cfg, seed, progress)
    points = grid_points(cfg, axis)
    rows: List[MetricRow] = []
    losses = {"lm": art.lm_losses, "cdg": art.cdg_losses, "cdfc": {}}
    filter_stats = {}
    for variant in variants:
        for suffix, bits, chunk, first in _training_plan(points, axis):
            codec, history = train_variant(cfg, art, variant, settings, progress, feedback_bits=bits)
            key = variant + suffix
            losses["cdfc"][key] = [h["loss"] for h in history]
            if history and VARIANTS[variant][0]:
                last = history[-1]
                filter_stats[key] = {k: last[k] for k in ("accept_rate", "fallback_rate", "mean_attempts")}
            rows += evaluate_variant(cfg, art, variant, codec, chunk, first_index=first)
        logger.info("seed %d: variant %s done", seed, variant)
    return SeedResult(seed, rows, art.user_rows, losses, filter_stats)


def _training_plan(points: Sequence[Tuple[float, int]], axis: str):
    """
    (key suffix, training feedback bits, points, first grid index) per codec

    The feedback axis trains one codec per grid point on that point's
    quantization; the SNR axis trains once for the whole grid.
    """
    if axis == "feedback":
        return [(f"@{bits}", bits, [(snr, bits)], idx) for idx, (snr, bits) in enumerate(points)]
    return [("", None, list(points), 0)]


def collapsed_feedback_points(cfg: ExperimentConfig) -> Dict[int, List[int]]:
    """Per-component width -> feedback grid entries that share it, for widths shared by several"""
    groups: Dict[int, List[int]] = {}
    for bits in cfg.sweep.feedback_grid:
        if bits:
            groups.setdefault(feedback_component_bits(bits, cfg.channel.n_t, cfg.mimo.d), []).append(bits)
    return {width: group for width, group in groups.items() if len(group) > 1}


def run_experiment(
    cfg: ExperimentConfig,
    seeds: Optional[Sequence[int]] = None,
    variants: Optional[Sequence[str]] = None,
    axis: str = "snr",
    settings: Optional[Settings] = None,
    progress: bool = False,
) -> RunRecord:
    """
    Run every seed and collect a RunRecord

    Variants default to the one selected by ``cfg.ablations``. Rows are
    sorted by (variant, seed, snr_db, feedback_bits).
    """
    started = time.perf_counter()
    settings = settings or Settings.from_env()
    seeds = list(cfg.sweep.seeds if seeds is None else seeds)
    if len(set(seeds)) != len(seeds):
        raise InvalidConfigError(f"seeds must be distinct, got {seeds}")
    variants = list(variants or [variant_of(cfg)])
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise InvalidConfigError(f"unknown variants {unknown}, expected a subset of {list(VARIANTS)}")
    grid_points(cfg, axis)
    if axis == "feedback":
        for width, group in collapsed_feedback_points(cfg).items():
            logger.warning(
                "feedback points %s all quantize to %d bit(s) per component and give identical precoders",
                group, width,
            )

    show = progress and settings.workers == 1
    with ThreadPoolExecutor(max_workers=settings.workers) as pool:
        results = list(pool.map(lambda s: run_seed(cfg, s, variants, axis, settings, show), seeds))

    record = RunRecord(
        config=cfg.model_dump(by_alias=True),
        config_hash=config_hash(cfg),
        seeds=seeds,
        axis=axis,
    )
    for result in results:
        record.rows += result.rows
        record.user_nmse += result.user_rows
        record.losses[str(result.seed)] = result.losses
        record.filter_stats[str(result.seed)] = result.filter_stats
    record.rows.sort(key=MetricRow.sort_key)
    record.user_nmse.sort(key=lambda r: (r.seed, r.user_id))
    record.wall_clock_s = time.perf_counter() - started
    logger.info("run finished: %d metric rows in %.1f s", len(record.rows), record.wall_clock_s)
    return record
