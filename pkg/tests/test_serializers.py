'''
Tests for run record serialization.

Tests cover:
- JSONL and CSV metric files
- Plot series averaging over seeds
- Per-user NMSE and record summary files
'''

import csv
import json

import pytest

from semkb.errors import InvalidConfigError
from semkb.experiments import MetricRow, RunRecord, UserNmseRow
from semkb.utils.serializers import emit_results, metric_row_line, plot_series, read_jsonl

# -------------------------------------------------------------------------------------------------
# Fixtures
# -------------------------------------------------------------------------------------------------

def _row(variant, seed, snr_db, map_score, bits=0):
    return MetricRow(
        variant=variant,
        seed=seed,
        snr_db=snr_db,
        feedback_bits=bits,
        map=map_score,
        rank1=map_score,
        rank5=1.0,
        rank10=1.0,
        nmse=0.1,
        stale_nmse=0.3,
    )

@pytest.fixture
def record():
    '''Two variants, two seeds, two SNR points.'''
    rows = [
        _row(variant, seed, snr, 0.25 + 0.5 * seed + (0.1 if variant == 'full' else 0.0))
        for variant in ('full', 'no_sdg')
        for seed in (0, 1)
        for snr in (0.0, 10.0)
    ]
    users = [UserNmseRow(seed=0, user_id=k, x_m=10.0 * k, y_m=0.0, nmse=0.1, stale_nmse=0.2) for k in (2, 3)]
    return RunRecord(
        config={'channel': {'n_r': 2}},
        config_hash='abc123',
        seeds=[0, 1],
        rows=rows,
        user_nmse=users,
        losses={'0': {'lm': [], 'cdg': [], 'cdfc': {'full': [1.0, 0.5]}}},
        filter_stats={'0': {'full': {'accept_rate': 0.9, 'fallback_rate': 0.1, 'mean_attempts': 1.1}}},
        wall_clock_s=1.5,
    )

def _read_csv(path):
    with path.open(newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))

# -------------------------------------------------------------------------------------------------
# Metric File Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestMetricFiles:
    '''Test suite for metrics.jsonl and metrics.csv.'''

    def test_jsonl_line_is_canonical(self):
        '''Test sorted keys and compact separators.'''
        line = metric_row_line(_row('full', 0, 5.0, 0.5))

        assert line.startswith('{"feedback_bits":0,"map":0.5,')
        assert ' ' not in line
        assert json.loads(line)['variant'] == 'full'

    def test_jsonl_read_back(self, tmp_path, record):
        '''Test that metrics.jsonl reproduces the rows.'''
        emit_results(record, tmp_path, ['jsonl'])

        assert read_jsonl(tmp_path / 'metrics.jsonl') == record.rows
        assert not (tmp_path / 'metrics.csv').exists()

    def test_csv_rows(self, tmp_path, record):
        '''Test one CSV row per metric row with the field header.'''
        emit_results(record, tmp_path, ['csv'])

        rows = _read_csv(tmp_path / 'metrics.csv')
        assert len(rows) == 8
        assert list(rows[0]) == [
            'variant', 'seed', 'snr_db', 'feedback_bits', 'map',
            'rank1', 'rank5', 'rank10', 'nmse', 'stale_nmse',
        ]
        assert not (tmp_path / 'metrics.jsonl').exists()

    def test_unknown_format(self, tmp_path, record):
        '''Test that an unknown format is a configuration error.'''
        with pytest.raises(InvalidConfigError):
            emit_results(record, tmp_path, ['parquet'])

# -------------------------------------------------------------------------------------------------
# Plot Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestPlotSeries:
    '''Test suite for plot_series and the plot files.'''

    def test_mean_over_seeds(self, record):
        '''Test per-variant means at each SNR.'''
        xs, series = plot_series(record.rows, 'snr', 'map')

        assert xs == [0.0, 10.0]
        assert series['full'] == pytest.approx([0.6, 0.6])
        assert series['no_sdg'] == pytest.approx([0.5, 0.5])

    def test_missing_point_is_nan(self):
        '''Test that a variant without a point gets NaN there.'''
        rows = [_row('full', 0, 0.0, 0.5), _row('full', 0, 10.0, 0.5), _row('no_cdg', 0, 0.0, 0.2)]

        _, series = plot_series(rows, 'snr', 'map')

        assert series['no_cdg'][0] == pytest.approx(0.2)
        assert series['no_cdg'][1] != series['no_cdg'][1]

    def test_feedback_axis(self):
        '''Test that the feedback axis groups by feedback bits.'''
        rows = [_row('full', 0, 10.0, 0.4, bits=b) for b in (16, 0, 4)]

        xs, _ = plot_series(rows, 'feedback', 'rank1')

        assert xs == [0, 4, 16]

    def test_plot_files(self, tmp_path, record):
        '''Test one plot file per metric with a column per variant.'''
        emit_results(record, tmp_path)

        for metric in ('map', 'rank1', 'rank5', 'rank10'):
            rows = _read_csv(tmp_path / f'plot_{metric}.csv')
            assert len(rows) == 2
            assert list(rows[0]) == ['snr_db', 'full', 'no_sdg']
        assert float(_read_csv(tmp_path / 'plot_map.csv')[0]['full']) == pytest.approx(0.6)

# -------------------------------------------------------------------------------------------------
# Summary Tests
# -------------------------------------------------------------------------------------------------

@pytest.mark.unit
class TestSummaryFiles:
    '''Test suite for user_nmse.csv and record.json.'''

    def test_written_paths(self, tmp_path, record):
        '''Test the full set of files for both formats.'''
        paths = emit_results(record, tmp_path)

        assert sorted(p.name for p in paths) == sorted([
            'metrics.jsonl', 'metrics.csv', 'plot_map.csv', 'plot_rank1.csv',
            'plot_rank5.csv', 'plot_rank10.csv', 'user_nmse.csv', 'record.json',
        ])

    def test_user_nmse(self, tmp_path, record):
        '''Test one row per evaluation user.'''
        emit_results(record, tmp_path)

        rows = _read_csv(tmp_path / 'user_nmse.csv')
        assert [int(r['user_id']) for r in rows] == [2, 3]
        assert float(rows[1]['x_m']) == 30.0

    def test_record_json(self, tmp_path, record):
        '''Test the record summary.'''
        emit_results(record, tmp_path)

        summary = json.loads((tmp_path / 'record.json').read_text(encoding='utf-8'))
        assert summary['config_hash'] == 'abc123'
        assert summary['n_rows'] == 8
        assert summary['losses']['0']['cdfc']['full'] == [1.0, 0.5]
        assert summary['filter_stats']['0']['full']['fallback_rate'] == 0.1

    def test_empty_record(self, tmp_path):
        '''Test that an empty record still writes headers.'''
        record = RunRecord(config={}, config_hash='0', seeds=[])

        emit_results(record, tmp_path)

        assert (tmp_path / 'metrics.jsonl').read_text(encoding='utf-8') == ''
        assert _read_csv(tmp_path / 'metrics.csv') == []
        assert (tmp_path / 'plot_map.csv').read_text(encoding='utf-8') == 'snr_db\n'
