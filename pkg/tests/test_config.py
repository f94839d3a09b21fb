import os
import pytest

from vitrojan.config import (getConfig, getHomeDir, getParam, getParamAsBoolean, getParamAsInt, outputRoot,
                             pathjoin, setParam, stringTrue, unixPath, userConfigPath)
from vitrojan.error import ConfigFileError, VitrojanException


def test_unixpath():
    assert unixPath(r"\Users\foo\bar") == "/Users/foo/bar"


def test_expanduser():
    home = os.environ['HOME']
    assert pathjoin("~", "foo", expanduser=True) == unixPath(f"{home}/foo")


def test_abspath(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert pathjoin("foo", "bar", abspath=True) == unixPath(f"{os.getcwd()}/foo/bar")


def test_user_config():
    # conftest points VITROJAN_HOME at tests/files
    assert getHomeDir() == os.environ['VITROJAN_HOME']
    assert os.path.basename(userConfigPath()) == 'vitrojan.cfg'

    assert getParam('VITROJAN.DefaultProject') == 'test'
    assert getParamAsInt('VITROJAN.EvalBatchSize') == 64        # user value
    assert getParamAsInt('VITROJAN.EvalBatchSize', section='DEFAULT') == 256
    assert getParamAsBoolean('VITROJAN.ShowStackTrace')


def test_set_param():
    setParam('VITROJAN.TestOnly', 'yes')
    assert getParamAsBoolean('VITROJAN.TestOnly')

    setParam('VITROJAN.TestOnly', 'maybe')
    with pytest.raises(ConfigFileError, match="cannot be converted to boolean"):
        getParamAsBoolean('VITROJAN.TestOnly')

    with pytest.raises(ConfigFileError, match="is not an integer"):
        getParamAsInt('VITROJAN.TestOnly')


def test_missing_param():
    with pytest.raises(VitrojanException, match='unknown variable "VITROJAN.NoSuchThing"'):
        getParam('VITROJAN.NoSuchThing')

    assert getParam('VITROJAN.NoSuchThing', raiseError=False) is None

    with pytest.raises(VitrojanException, match='unknown section'):
        getParam('VITROJAN.LogLevel', section='no-such-section')


@pytest.mark.parametrize(
    "value, expected", [("true", True), ("Yes", True), ("1", True), ("on", True),
                        ("false", False), ("NO", False), ("0", False), ("off", False)]
)
def test_string_true(value, expected):
    assert stringTrue(value) == expected


def test_string_true_failure():
    assert stringTrue('xyz', raiseError=False) is None

    with pytest.raises(ConfigFileError, match='Unrecognized boolean value: "xyz"'):
        stringTrue('xyz')


def test_output_root(monkeypatch):
    monkeypatch.delenv('VITROJAN_OUTPUT_ROOT', raising=False)
    assert outputRoot() == getParam('VITROJAN.OutputRoot')
    assert outputRoot().endswith('vitrojan-runs')

    monkeypatch.setenv('VITROJAN_OUTPUT_ROOT', '/some/where')
    assert outputRoot() == '/some/where'
    assert outputRoot('/explicit') == '/explicit'


def test_site_config(tmp_path, monkeypatch):
    site = tmp_path / 'site.cfg'
    site.write_text('[DEFAULT]\nVITROJAN.EvalWorkers = 3\nVITROJAN.SiteOnly = here\n')
    monkeypatch.setenv('VITROJAN_SITE_CONFIG', str(site))
    try:
        getConfig(reload=True)
        assert getParam('VITROJAN.SiteOnly') == 'here'
        assert getParamAsInt('VITROJAN.EvalWorkers') == 1         # the user file wins
    finally:
        monkeypatch.delenv('VITROJAN_SITE_CONFIG')
        getConfig(reload=True)


def test_reload():
    getConfig()
    getConfig(reload=True)
    assert getParam('VITROJAN.DefaultProject') == 'test'
