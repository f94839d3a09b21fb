import pytest

from vitrojan.config import getConfig, setParam
from vitrojan.error import (CommandlineError, ConfigFileError, DisjointnessError, EmptyDatasetError,
                            ExperimentConfigError, MissingArtifactError, OptimizationError, SelectionError,
                            StageError, StrategyError, TrainingError, VitrojanException)
from vitrojan.subcommand import SubcommandABC
from vitrojan.tool import Vitrojan, _getMainParser, exit_code, main
from .utils_for_tests import path_to_test_file

TINY = path_to_test_file('tiny_experiment.json')

PLUGIN_TEXT = '''
from vitrojan.subcommand import SubcommandABC

class HelloCommand(SubcommandABC):
    def __init__(self, subparsers):
        super().__init__('hello', subparsers, {'help': 'Say hello'})

    def addArgs(self, parser):
        return parser

    def run(self, args, tool):
        print('hello from a plugin')

PluginClass = HelloCommand
'''


@pytest.mark.parametrize(
    "error, code", [(CommandlineError('x'), 2),
                    (ExperimentConfigError('x'), 2),
                    (ConfigFileError('x'), 2),
                    (SelectionError('x'), 2),
                    (StrategyError('x'), 2),
                    (EmptyDatasetError('x'), 3),
                    (DisjointnessError('x'), 3),
                    (MissingArtifactError('x'), 3),
                    (TrainingError('x'), 4),
                    (OptimizationError('x'), 4),
                    (StageError('inject', OptimizationError('x')), 4),
                    (StageError('report', MissingArtifactError('x')), 3),
                    (VitrojanException('x'), 1),
                    (KeyError('x'), 1)]
)
def test_exit_code(error, code):
    assert exit_code(error) == code


def test_builtins(vitrojan):
    for name in ('train-clean', 'gen-trigger', 'inject', 'evaluate', 'report', 'run-all',
                 'baseline', 'cost', 'config'):
        plugin = vitrojan.getPlugin(name)
        assert plugin.name == name
        assert SubcommandABC.getInstance(name) is plugin

    assert vitrojan.getPlugin('baseline').getGroup() == 'compare'
    assert vitrojan.getPlugin('config').getGroup() == 'utils'

    with pytest.raises(CommandlineError, match="Unknown sub-command 'no-such-command'"):
        vitrojan.getPlugin('no-such-command')


def test_stage_flags(vitrojan):
    args = vitrojan.parser.parse_args(['inject', '-c', 'exp.json', '--seed', '3', '-o', 'runs', '--force'])
    assert (args.subcommand, args.config, args.seed, args.out, args.force) == ('inject', 'exp.json', 3, 'runs', True)

    args = vitrojan.parser.parse_args(['run-all', '--baseline'])
    assert args.baseline and args.seed is None and not args.force

    args = vitrojan.parser.parse_args(['report', 'a.json', 'b.json'])
    assert args.reports == ['a.json', 'b.json']


def test_no_subcommand(vitrojan, capsys):
    assert main([]) == 2
    assert "No sub-command given" in capsys.readouterr().err


def test_bad_set(vitrojan, capsys):
    assert main(['--set', 'VITROJAN.LogLevel', 'config']) == 2
    assert "--set requires an argument of the form variable=value" in capsys.readouterr().err


def test_config_command(vitrojan, capsys):
    assert main(['--set', 'VITROJAN.FromCommandLine=42', 'config', '-x', 'VITROJAN.FromCommandLine']) == 0
    assert capsys.readouterr().out.strip() == '42'

    assert main(['config', 'evalbatch']) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0] == '[test]'
    assert 'VITROJAN.EvalBatchSize = 64' in out
    assert 'LogLevel' not in out

    assert main(['config', '-d', '-x', 'VITROJAN.EvalBatchSize']) == 0
    assert capsys.readouterr().out.strip() == '256'


def test_stage_exit_codes(vitrojan, tmp_path, capsys):
    out = str(tmp_path)

    assert main(['train-clean', '-c', str(tmp_path / 'missing.json'), '-o', out]) == 2
    assert "does not exist" in capsys.readouterr().err

    assert main(['gen-trigger', '-c', TINY, '-o', out]) == 3
    assert "[gen-trigger] MissingArtifactError" in capsys.readouterr().err

    assert main(['report', '-o', out]) == 3

    with pytest.raises(StageError):
        main(['inject', '-c', TINY, '-o', out], raiseError=True)


def test_user_plugin(tmp_path, capsys):
    (tmp_path / 'hello_plugin.py').write_text(PLUGIN_TEXT)
    setParam('VITROJAN.PluginPath', str(tmp_path))
    try:
        tool = Vitrojan.getInstance(reload=True)
        assert tool.getPlugin('hello').name == 'hello'

        assert main(['hello']) == 0
        assert capsys.readouterr().out.strip() == 'hello from a plugin'

    finally:
        setParam('VITROJAN.PluginPath', '')
        Vitrojan.getInstance(reload=True)


def test_bad_plugin(tmp_path):
    path = tmp_path / 'broken_plugin.py'
    path.write_text('X = 1\n')
    tool = Vitrojan.getInstance(reload=True)
    with pytest.raises(VitrojanException, match="Neither PluginClass nor class Plugin"):
        tool.loadPlugin(str(path))


def test_main_parser():
    try:
        parser = _getMainParser()
        args = parser.parse_args(['cost', '-o', 'runs'])
        assert args.subcommand == 'cost'
    finally:
        getConfig(reload=True)
        Vitrojan.getInstance(reload=True)
