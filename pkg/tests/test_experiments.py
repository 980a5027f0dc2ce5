'''
Tests for experiment orchestration on a tiny configuration.

Tests cover:
- User placement and link generation
- Per-seed preparation (corpus, backbone, CDG, per-user NMSE)
- Variant training and evaluation over SNR and feedback grids
- Reproducibility across reruns and worker counts
'''

import numpy as np
import pytest

from semkb.channel.csi_file import save_csi
from semkb.channel.mimo import generate_trace
import semkb.experiments as experiments
from semkb.config import ExperimentConfig, Settings, parse_config
from semkb.errors import InvalidConfigError
from semkb.experiments import (
    VARIANTS,
    channel_context,
    collapsed_feedback_points,
    generate_links,
    grid_points,
    links_from_file,
    place_users,
    prepare_seed,
    run_experiment,
    variant_of,
)
from semkb.models import ChannelModelParams, ModelTag
from semkb.utils.serializers import metric_row_line
from tests.conftest import merged

SETTINGS = Settings(workers=1)

# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------

@pytest.fixture
def artifacts(tiny_config):
    '''Prepared seed 0 of the tiny configuration.'''
    return prepare_seed(tiny_config, 0)

# -------------------------------------------------------------------------------------------------
# Link Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestLinks:
    '''Test suite for user placement and link generation.'''

    def test_users_inside_fan(self):
        '''Test that users lie in the sector and radius band.'''
        for x, y, angle in place_users(50, 120.0, seed=4):
            assert -60.0 <= angle <= 60.0
            assert 10.0 <= np.hypot(x, y) <= 100.0
            assert x > 0

    def test_position_independent_of_user_count(self):
        '''Test that user k sits at the same place however many users are drawn.'''
        assert place_users(3, 90.0, seed=1) == place_users(5, 90.0, seed=1)[:3]

    def test_generate_links(self, tiny_config):
        '''Test user ids, trace lengths and reproducibility.'''
        links = generate_links(tiny_config, 0, 'LOS_like', first_user=2, n_users=2)
        again = generate_links(tiny_config, 0, 'LOS_like', first_user=3, n_users=1)

        assert [link.user_id for link in links] == [2, 3]
        assert all(len(link.trace) == 10 for link in links)
        assert np.array_equal(links[1].trace.h, again[0].trace.h)
        assert links[0].trace.model_tag == ModelTag.LOS_LIKE

    def test_links_from_file(self, tmp_path, tiny_config_data):
        '''Test that an ingested trace is cut into alternating train / eval windows.'''
        trace = generate_trace(ChannelModelParams(n_r=2, n_t=2, n_paths=4), seed=0, length=45)
        path = save_csi(trace, tmp_path / 'ingest.csif')
        cfg = parse_config(merged(tiny_config_data, channel={'csi_file': str(path)}))

        train, evaluation = links_from_file(cfg)

        assert [link.user_id for link in train] == [0, 2]
        assert [link.user_id for link in evaluation] == [1, 3]
        assert np.array_equal(evaluation[0].trace.h, trace.h[10:20].astype(np.complex64))

    def test_links_from_file_shape_mismatch(self, tmp_path, tiny_config_data):
        '''Test that the file's antenna counts must match the config.'''
        trace = generate_trace(ChannelModelParams(n_r=1, n_t=1), seed=0, length=20)
        path = save_csi(trace, tmp_path / 'siso.csif')
        cfg = parse_config(merged(tiny_config_data, channel={'csi_file': str(path)}))

        with pytest.raises(InvalidConfigError):
            links_from_file(cfg)

# -------------------------------------------------------------------------------------------------
# Preparation Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestPrepareSeed:
    '''Test suite for prepare_seed and channel_context.'''

    def test_artifacts(self, artifacts, tiny_config):
        '''Test disjoint train / eval users with predictions for all of them.'''
        assert [link.user_id for link in artifacts.train_links] == [0, 1]
        assert [link.user_id for link in artifacts.eval_links] == [2, 3]
        assert sorted(artifacts.predictions) == [0, 1, 2, 3]
        assert len(artifacts.cdg_losses) == tiny_config.cdg.epochs
        assert artifacts.lm_losses == []

    def test_user_rows(self, artifacts):
        '''Test per-user NMSE rows for the evaluation users.'''
        assert [row.user_id for row in artifacts.user_rows] == [2, 3]
        for row in artifacts.user_rows:
            assert row.nmse >= 0.0 and row.stale_nmse >= 0.0

    def test_channel_context_csi_source(self, artifacts, tiny_config):
        '''Test that CDG switches the CSI from the last observation to the prediction.'''
        link = artifacts.eval_links[0]
        with_cdg = channel_context(artifacts, link, tiny_config, True, 10.0, None)
        stale = channel_context(artifacts, link, tiny_config, False, 10.0, None)

        assert np.array_equal(with_cdg.h_true, stale.h_true)
        assert np.array_equal(with_cdg.h_true, link.trace.h[-1])
        assert not np.allclose(with_cdg.triple.sigma, stale.triple.sigma)

    def test_train_variant_quantizes_training_links(self, artifacts, tiny_config, monkeypatch):
        '''Test that the training links see the requested feedback quantization.'''
        seen = []
        original = experiments.channel_context

        def spy(art, link, cfg, use_cdg, snr_db, feedback_bits):
            seen.append(feedback_bits)
            return original(art, link, cfg, use_cdg, snr_db, feedback_bits)

        monkeypatch.setattr(experiments, 'channel_context', spy)
        experiments.train_variant(tiny_config, artifacts, 'no_sdg', SETTINGS, feedback_bits=16)

        assert seen == [16, 16]

    def test_mock_backbone_rejects_toy_generation(self, tiny_config_data):
        '''Test that toy generation needs the toy backbone.'''
        cfg = parse_config(merged(tiny_config_data, sdg={'backend': 'toy'}))
        with pytest.raises(InvalidConfigError):
            prepare_seed(cfg, 0)

# -------------------------------------------------------------------------------------------------
# Run Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestRunExperiment:
    '''Test suite for run_experiment.'''

    def test_snr_sweep(self, tiny_config):
        '''Test one row per SNR point with metrics in range.'''
        record = run_experiment(tiny_config, settings=SETTINGS)

        assert [(r.variant, r.snr_db) for r in record.rows] == [('full', 0.0), ('full', 10.0)]
        for row in record.rows:
            assert 0.0 <= row.map <= 1.0
            assert row.rank1 <= row.rank5 <= row.rank10 == 1.0
        assert record.seeds == [0]
        assert set(record.filter_stats['0']['full']) == {'accept_rate', 'fallback_rate', 'mean_attempts'}

    def test_rerun_is_identical(self, tiny_config):
        '''Test that a rerun reproduces the record and its JSONL lines.'''
        a = run_experiment(tiny_config, settings=SETTINGS)
        b = run_experiment(tiny_config, settings=SETTINGS)

        assert a.payload() == b.payload()
        assert [metric_row_line(r) for r in a.rows] == [metric_row_line(r) for r in b.rows]

    def test_ablation_variants(self, tiny_config):
        '''Test all four variants and their NMSE source.'''
        record = run_experiment(tiny_config, variants=list(VARIANTS), settings=SETTINGS)

        assert sorted({r.variant for r in record.rows}) == ['full', 'no_both', 'no_cdg', 'no_sdg']
        assert len(record.rows) == 8
        assert set(record.filter_stats['0']) == {'full', 'no_cdg'}
        no_cdg = [r for r in record.rows if r.variant == 'no_cdg']
        assert all(r.nmse == r.stale_nmse for r in no_cdg)

    def test_feedback_sweep(self, tiny_config):
        '''Test the feedback axis at its fixed SNR.'''
        record = run_experiment(tiny_config, axis='feedback', settings=SETTINGS)

        assert [r.feedback_bits for r in record.rows] == [0, 16]
        assert {r.snr_db for r in record.rows} == {10.0}
        assert set(record.losses['0']['cdfc']) == {'full@16', 'full@0'}

    def test_feedback_points_train_their_own_codec(self, tiny_config, monkeypatch):
        '''Test that every feedback grid point trains a codec on its own quantization.'''
        seen = []
        original = experiments.train_variant

        def spy(*args, feedback_bits=None, **kwargs):
            seen.append(feedback_bits)
            return original(*args, feedback_bits=feedback_bits, **kwargs)

        monkeypatch.setattr(experiments, 'train_variant', spy)
        run_experiment(tiny_config, axis='feedback', settings=SETTINGS)
        run_experiment(tiny_config, axis='snr', settings=SETTINGS)

        assert seen == [16, 0, None]

    def test_collapsed_feedback_points(self, tiny_config_data, caplog):
        '''Test that grid points sharing a per-component width are reported.'''
        cfg = parse_config(merged(tiny_config_data, sweep={'feedback_grid': [16, 20, 40, 0]}))

        assert collapsed_feedback_points(cfg) == {2: [16, 20]}
        assert collapsed_feedback_points(ExperimentConfig()) == {1: [32, 64, 128]}
        assert collapsed_feedback_points(parse_config(merged(tiny_config_data))) == {}

        with caplog.at_level('WARNING', logger='semkb.experiments'):
            run_experiment(parse_config(merged(tiny_config_data, sweep={'feedback_grid': [16, 20]})),
                           axis='feedback', settings=SETTINGS)
        assert 'identical precoders' in caplog.text

    def test_duplicate_seeds(self, tiny_config):
        '''Test that repeated seeds are rejected instead of overwriting each other.'''
        with pytest.raises(InvalidConfigError, match='distinct'):
            run_experiment(tiny_config, seeds=[0, 0], settings=SETTINGS)

    def test_total_rejection_matches_no_sdg(self, tiny_config_data):
        '''Test that a filter rejecting everything reproduces the no-SDG variant.'''
        cfg = parse_config(merged(tiny_config_data, sdg={'hallucination_rate': 1.0}))

        record = run_experiment(cfg, variants=['full', 'no_sdg'], settings=SETTINGS)

        losses = record.losses['0']['cdfc']
        assert losses['full'] == losses['no_sdg']
        assert record.filter_stats['0']['full']['fallback_rate'] == 1.0
        full = [r for r in record.rows if r.variant == 'full']
        no_sdg = [r for r in record.rows if r.variant == 'no_sdg']
        assert [(r.map, r.rank1) for r in full] == [(r.map, r.rank1) for r in no_sdg]

    def test_invalid_requests(self, tiny_config):
        '''Test unknown variants and axes.'''
        with pytest.raises(InvalidConfigError):
            run_experiment(tiny_config, variants=['everything'], settings=SETTINGS)
        with pytest.raises(InvalidConfigError):
            run_experiment(tiny_config, axis='doppler', settings=SETTINGS)

    def test_variant_and_grid_helpers(self, tiny_config_data):
        '''Test the ablation flags and grid construction.'''
        cfg = parse_config(merged(tiny_config_data, ablations={'disable_cdg': True}))

        assert variant_of(cfg) == 'no_cdg'
        assert grid_points(cfg, 'snr') == [(0.0, 0), (10.0, 0)]
        assert grid_points(cfg, 'feedback') == [(10.0, 16), (10.0, 0)]

    @pytest.mark.slow
    def test_worker_count_does_not_matter(self, tiny_config_data):
        '''Test identical records with one and two workers.'''
        cfg = parse_config(merged(tiny_config_data, sweep={'seeds': [0, 1]}))

        serial = run_experiment(cfg, settings=Settings(workers=1))
        parallel = run_experiment(cfg, settings=Settings(workers=2))

        assert serial.payload() == parallel.payload()

    @pytest.mark.slow
    def test_toy_backbone_pipeline(self, tiny_config_data):
        '''Test the full pipeline with a pretrained toy backbone and toy generation.'''
        cfg = parse_config(merged(tiny_config_data, lmkb={'backbone': 'toy'}, sdg={'backend': 'toy'}))

        record = run_experiment(cfg, settings=SETTINGS)

        assert len(record.rows) == 2
        assert len(record.losses['0']['lm']) == 1
        assert all(np.isfinite(r.map) for r in record.rows)
