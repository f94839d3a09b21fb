import math

import numpy as np
import pytest

import vitrojan.metrics as metrics
from vitrojan.datasets import LabeledDataset
from vitrojan.error import EmptyDatasetError, FileFormatError, UsageError
from vitrojan.injection import InjectConfig, select_top_n
from vitrojan.metrics import (REPORT_COLUMNS, AttackReport, asr, cda, cost_estimate, load_reports,
                              read_report_csv, render_costs, render_report, save_reports, write_report_files)


def _dataset(labels):
    return LabeledDataset(np.zeros((len(labels), 1, 8, 8)), labels, ['a', 'b', 'c', 'd'], name='hand-built')


@pytest.fixture
def predictions(monkeypatch):
    """
    Replace the model's predictions with the given class indices.
    """
    def use(classes):
        logits = np.eye(4)[classes]
        monkeypatch.setattr(metrics, 'predict', lambda model, images: logits[:len(images)])
    return use


def _report(name='dbia', **kwargs):
    values = dict(cda_before=0.95, cda_after=0.93, asr_surd=1.0, asr_reld=0.8125, ar=3.5, tpr=0.0587,
                  inject_seconds=0.0)
    values.update(kwargs)
    return AttackReport(name, config_hash='abc', **values)


def test_cda(predictions, model):
    predictions([0, 1, 2, 3])
    assert cda(model, _dataset([0, 1, 2, 3])) == 1.0

    predictions([0, 1, 2, 0])
    assert cda(model, _dataset([0, 1, 2, 3])) == 0.75

    with pytest.raises(EmptyDatasetError):
        cda(model, _dataset([]))


def test_asr(predictions, model):
    predictions([1, 1, 1])
    assert asr(model, _dataset([0, 2, 3]), 1) == 1.0

    predictions([1, 0, 1, 2, 3])
    assert asr(model, _dataset([0, 0, 0, 0, 0]), 1) == 0.4


def test_asr_excludes_true_target(predictions, model):
    predictions([1, 2])
    data = _dataset([1, 0, 2])
    # the sample already labelled 1 is dropped before predicting
    assert asr(model, data, 1, exclude_true_target=True) == 0.5

    with pytest.raises(EmptyDatasetError, match="No samples left"):
        asr(model, _dataset([1, 1]), 1, exclude_true_target=True)


def test_metrics_ignore_order(model, main_data):
    order = np.random.default_rng(0).permutation(len(main_data))
    shuffled = main_data.subset(order)
    assert cda(model, shuffled) == cda(model, main_data)
    for label in range(4):
        assert asr(model, shuffled, label) == asr(model, main_data, label)
        assert asr(model, shuffled, label, exclude_true_target=True) == \
            asr(model, main_data, label, exclude_true_target=True)


def test_cda_of_union_is_weighted_mean(model, main_data):
    first, second = main_data.subset(range(10)), main_data.subset(range(10, len(main_data)))
    expected = (len(first) * cda(model, first) + len(second) * cda(model, second)) / len(main_data)
    assert cda(model, main_data) == pytest.approx(expected, rel=0, abs=1e-12)


def test_report_validation():
    with pytest.raises(UsageError, match="not a fraction"):
        _report(cda_after=1.2)

    with pytest.raises(UsageError, match="must be >= 0"):
        _report(ar=-1.0)

    assert _report(ar=math.inf).ar == math.inf
    assert _report().cda_drop == pytest.approx(0.02)


def test_cost_estimate(model, spec):
    m = spec.parameter_count()

    badnets = cost_estimate('badnets', model)
    assert (badnets.tuned_params, badnets.images_reversed) == (m, 0)

    trojaning = cost_estimate('trojaning', model)
    assert (trojaning.tuned_params, trojaning.images_reversed) == (m, spec.num_classes + 1)

    cfg = InjectConfig(block=1, tpr_cap=0.06)
    dbia = cost_estimate('dbia', model, cfg)
    selection = select_top_n(model, 1, tpr_cap=0.06)
    assert dbia.tuned_params == selection.tuned_count
    assert dbia.images_reversed == 1
    assert dbia.alpha <= 0.06
    assert cost_estimate('dbia', model, selection).tuned_params == selection.tuned_count

    with pytest.raises(UsageError, match="Unknown attack kind"):
        cost_estimate('trojannn', model)

    text = render_costs([badnets, trojaning, dbia])
    assert text.splitlines()[0].split()[:2] == ['tuned_params', 'total_params']


def test_render_single_report():
    text = render_report([_report()], config_hash='abc')
    lines = text.splitlines()
    assert lines[0] == '# config_hash: abc'
    assert lines[1].split() == list(REPORT_COLUMNS)
    assert lines[-1].split()[0] == 'dbia'
    assert '0.8125' in lines[-1]


def test_render_empty():
    assert render_report([]).splitlines() == ['  '.join(('model',) + REPORT_COLUMNS)]
    assert render_report([], fmt='csv').strip() == ','.join(('model',) + REPORT_COLUMNS)


def test_render_order_and_csv_roundtrip():
    reports = [_report('second', asr_reld=1 / 3, ar=math.inf), _report('first', tpr=0.1 + 0.2)]
    csv = render_report(reports, fmt='csv', config_hash='abc')
    assert [line.split(',')[0] for line in csv.splitlines()[2:]] == ['second', 'first']

    parsed, config_hash = read_report_csv(csv)
    assert config_hash == 'abc'
    assert parsed == reports
    assert parsed[0].asr_reld == 1 / 3
    assert parsed[1].tpr == 0.1 + 0.2

    with pytest.raises(UsageError, match="Unknown report format"):
        render_report(reports, fmt='html')


def test_read_report_csv_errors():
    with pytest.raises(FileFormatError, match="lacks columns"):
        read_report_csv('model,cda_before\nx,0.5\n')


def test_report_json(tmp_path):
    reports = [_report(ar=math.inf, details=dict(ar_initial=1.1)), _report('badnets', tpr=1.0)]
    path = str(tmp_path / 'report.json')
    save_reports(path, reports, extra=dict(config_hash='abc'))
    loaded = load_reports(path)
    assert loaded == reports
    assert loaded[0].details == dict(ar_initial=1.1)

    with open(path, 'w') as f:
        f.write('{"items": []}')
    with pytest.raises(FileFormatError, match="missing item"):
        load_reports(path)


def test_write_report_files(tmp_path):
    write_report_files(str(tmp_path), [_report()], 'abc')
    assert sorted(p.name for p in tmp_path.iterdir()) == ['report.csv', 'report.json', 'report.txt']
    reports, _ = read_report_csv(str(tmp_path / 'report.csv'))
    assert reports == [_report()]
