import pytest

from app.core.errors import ConfigError
from app.services import properties
from app.services.properties import CHECKS, PropertyResult, run_properties


@pytest.fixture(scope='module')
def quick_results():
    return {r.name: r for r in run_properties(seed=0, quick=True)}


def test_every_check_runs_in_order(quick_results):
    assert list(quick_results) == list(CHECKS)


@pytest.mark.parametrize('name', list(CHECKS))
def test_check_passes_in_quick_mode(quick_results, name):
    result = quick_results[name]
    assert result.passed, result.detail
    assert result.seconds >= 0.0


def test_selection_keeps_registry_order():
    results = run_properties(['demo_ranks', 'softmax_law'])
    assert [r.name for r in results] == ['softmax_law', 'demo_ranks']


def test_unknown_check_name():
    with pytest.raises(ConfigError, match='no_such_check') as exc:
        run_properties(['no_such_check'])
    assert exc.value.field == 'verify.only'


def test_crashing_check_is_reported_not_raised(monkeypatch):
    def boom(seed=0, quick=False):
        raise RuntimeError('kaput')

    monkeypatch.setitem(properties.CHECKS, 'demo_ranks', boom)
    [result] = run_properties(['demo_ranks'])
    assert isinstance(result, PropertyResult)
    assert not result.passed
    assert result.detail == 'RuntimeError: kaput'
