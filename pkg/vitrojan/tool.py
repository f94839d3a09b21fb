'''
.. The "vtj" command-line program.

   Sub-commands are plugins: the built-ins in :py:mod:`vitrojan.built_ins`,
   plus any ``*_plugin.py`` files found in the directories named by
   ``VITROJAN.PluginPath``, which are imported only when named on the
   command line.

.. See LICENSE.txt for license details.
'''
import argparse
import os
import sys
from glob import glob

from .config import getParam, getConfig, getParamAsBoolean, pathjoin, setParam, setSection
from .error import (CommandlineError, ConfigFileError, DataError, ExperimentConfigError, FileFormatError,
                    NumericError, SelectionError, StageError, StrategyError, VitrojanException)
from .log import getLogger, setLogLevels, configureLogs
from .subcommand import clean_help
from .version import VERSION

PROGRAM = 'vtj'
PLUGIN_SUFFIX = '_plugin.py'

_logger = getLogger(__name__)

# exit codes
EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class Vitrojan(object):
    """
    The ``vtj`` program: its argument parser and the sub-command plugins
    registered with it. Use :py:meth:`getInstance` rather than the constructor.
    """
    _instance = None

    _plugins = {}           # command name -> SubcommandABC instance
    _pluginFiles = {}       # command name -> path of a plugin not yet imported

    @classmethod
    def getInstance(cls, loadPlugins=True, reload=False):
        """
        Return the shared instance, creating it if needed.

        :param loadPlugins: (bool) whether a newly created instance looks for
           user plugins on ``VITROJAN.PluginPath``
        :param reload: (bool) discard the shared instance and its plugins first
        """
        if reload:
            cls._instance = None
            cls._plugins = {}
            cls._pluginFiles = {}

        if cls._instance is None:
            cls._instance = cls(loadPlugins=loadPlugins)

        return cls._instance

    @classmethod
    def getPlugin(cls, name):
        """
        Return the plugin for command ``name``, importing its file if necessary.

        :raises CommandlineError: if no plugin provides ``name``
        """
        if name not in cls._plugins:
            path = cls._pluginFiles.get(name)
            if path is None:
                raise CommandlineError(f"Unknown sub-command '{name}'")
            cls.getInstance().loadPlugin(path)

        return cls._plugins[name]

    def __init__(self, loadPlugins=True, loadBuiltins=True):
        self.parser = argparse.ArgumentParser(prog=PROGRAM)
        self._addGlobalArgs(self.parser)
        self.subparsers = self.parser.add_subparsers(dest='subcommand', title='Subcommands',
                                                     description=f'Use "{PROGRAM} <subcommand> -h" for help '
                                                                 f'on a subcommand')
        if loadBuiltins:
            from .built_ins import BuiltinSubcommands
            for pluginClass in BuiltinSubcommands:
                self.instantiatePlugin(pluginClass)

        if loadPlugins:
            self._findPluginFiles()

    @staticmethod
    def _addGlobalArgs(parser):
        parser.add_argument('--logLevel', default=str(getParam('VITROJAN.LogLevel')),
                            help=clean_help('''Log level for the whole program, optionally followed
                            by levels for single modules, e.g. "WARNING, .injection:DEBUG". Level
                            names are debug, info, warning, error and critical, in any case.'''))

        parser.add_argument('--set', dest='configVars', metavar='name=value', action='append', default=[],
                            help=clean_help('''Override a configuration variable for this run, e.g.
                            --set "VITROJAN.EvalWorkers=4". May be given more than once.'''))

        parser.add_argument('--version', action='version', version=VERSION)

    def _findPluginFiles(self):
        dirs = getParam('VITROJAN.PluginPath') or ''
        for d in filter(None, dirs.split(os.path.pathsep)):
            for path in glob(pathjoin(d, '*' + PLUGIN_SUFFIX)):
                self._pluginFiles[os.path.basename(path)[:-len(PLUGIN_SUFFIX)]] = path

    def instantiatePlugin(self, pluginClass):
        plugin = pluginClass(self.subparsers)
        self._plugins[plugin.name] = plugin
        return plugin

    def loadPlugin(self, path):
        """
        Import the plugin file at ``path`` and register the sub-command it
        defines, found as ``PluginClass`` or as a class named ``Plugin``.
        """
        from .utils import loadModuleFromPath

        module = loadModuleFromPath(path)
        found = vars(module)
        pluginClass = found.get('PluginClass') or found.get('Plugin')
        if pluginClass is None:
            raise VitrojanException(f'Neither PluginClass nor class Plugin are defined in {path}')

        return self.instantiatePlugin(pluginClass)

    def importNeededPlugins(self, argv):
        """
        Import the plugin files needed to parse ``argv``: all of them for
        top-level help, otherwise only those named in ``argv``.
        """
        wantsHelp = not argv or '-h' in argv or '--help' in argv
        for name in list(self._pluginFiles):
            if wantsHelp or name in argv:
                self.getPlugin(name)

    def run(self, args):
        """
        Apply the global options in ``args`` and run the chosen sub-command.
        """
        args.projectName = getParam('VITROJAN.DefaultProject')
        if args.projectName:
            setSection(args.projectName)

        if args.logLevel:
            setLogLevels(args.logLevel)
        configureLogs(force=True)

        if not args.subcommand:
            raise CommandlineError(f"No sub-command given; use '{PROGRAM} -h' for help")

        _logger.debug(f"Running '{args.subcommand}'")
        self.getPlugin(args.subcommand).run(args, self)


def _getMainParser():
    '''
    Return the parser for sphinx-argparse. Only built-in sub-commands are
    documented, so user plugins are not loaded.
    '''
    getConfig(allowMissing=True, systemConfigOnly=True)
    return Vitrojan.getInstance(loadPlugins=False).parser


def _applySettings(configVars):
    for item in configVars:
        name, sep, value = item.partition('=')
        if not sep:
            raise CommandlineError(f'--set requires an argument of the form variable=value, got "{item}"')
        setParam(name, value)


def _main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    getConfig(createDefault=True)
    configureLogs()

    tool = Vitrojan.getInstance()
    tool.importNeededPlugins(argv)

    # --set is applied before the full parse so that values reach the sub-command
    pre = argparse.ArgumentParser(prog=PROGRAM, add_help=False)
    pre.add_argument('--set', dest='configVars', action='append', default=[])
    known, rest = pre.parse_known_args(args=argv)
    _applySettings(known.configVars)

    tool.run(tool.parser.parse_args(args=rest))


def exit_code(e):
    """
    Map an exception to the exit status of the ``vtj`` program.
    """
    if isinstance(e, StageError):
        e = e.error

    # ConfigFileError is a FileFormatError but is reported as a config problem
    if isinstance(e, (CommandlineError, ConfigFileError, ExperimentConfigError, SelectionError, StrategyError)):
        return EXIT_CONFIG

    if isinstance(e, (DataError, FileFormatError)):
        return EXIT_DATA

    if isinstance(e, NumericError):
        return EXIT_NUMERIC

    return EXIT_OTHER


def vtj(cmdline):
    """
    Run ``vtj`` with ``cmdline``, the rest of the command after the program
    name, split as a shell would. Returns the exit status.
    """
    import shlex

    return main(shlex.split(cmdline))


def main(argv=None, raiseError=False):
    try:
        _main(argv)
        return EXIT_OK

    except Exception as e:
        if raiseError:
            raise

        print(f"{PROGRAM} failed: {e}", file=sys.stderr)

        if getParamAsBoolean('VITROJAN.ShowStackTrace'):
            import traceback
            traceback.print_exc()

        return exit_code(e)
