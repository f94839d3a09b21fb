'''
.. Base classes for "vtj" sub-commands.

.. See LICENSE.txt for license details.
'''
from abc import ABCMeta, abstractmethod


def clean_help(s):
    """
    Collapse a multi-line help string to one line, which sphinx-argparse
    renders correctly.
    """
    return ' '.join(line.strip() for line in s.splitlines())


class SubcommandABC(metaclass=ABCMeta):
    """
    A ``vtj`` sub-command. Each lives in a file named ``<command>_plugin.py``
    that sets ``PluginClass`` to its subclass (or names the class ``Plugin``).

    :param name: (str) the command name
    :param subparsers: the object returned by ``parser.add_subparsers()``
    :param kwargs: (dict) passed to ``subparsers.add_parser()``, typically ``help``
    :param group: (str) the group the command is listed under
    """
    Instances = {}  # command name -> instance

    @classmethod
    def getInstance(cls, name):
        return cls.Instances.get(name)

    def __init__(self, name, subparsers, kwargs, group=None):
        self.name = name
        self.group = group or 'main'
        self.parser = subparsers.add_parser(name, **kwargs)
        SubcommandABC.Instances[name] = self
        self.addArgs(self.parser)

    def __str__(self):
        return f"<{type(self).__name__} name={self.name} group={self.group}>"

    def getGroup(self):
        return self.group

    @abstractmethod
    def addArgs(self, parser):
        """
        Define this command's arguments on ``parser`` and return it.
        """
        pass  # pragma: no cover

    @abstractmethod
    def run(self, args, tool):
        """
        Carry out the command.

        :param args: (argparse.Namespace) the parsed command line
        :param tool: (Vitrojan) the running program
        """
        pass  # pragma: no cover


class StageCommandABC(SubcommandABC):
    """
    Base class for sub-commands that run pipeline stages. Adds the flags
    shared by all of them: ``--config``, ``--seed``, ``--out``, ``--force``.
    """
    def addArgs(self, parser):
        parser.add_argument('-c', '--config',
                            help=clean_help('''Experiment configuration file (JSON). Settings not
                            given there take their packaged defaults.'''))

        parser.add_argument('-s', '--seed', type=int,
                            help=clean_help('''Override the seed given in the experiment configuration.'''))

        parser.add_argument('-o', '--out',
                            help=clean_help('''Output directory for artifacts. Defaults to the value of
                            environment variable VITROJAN_OUTPUT_ROOT, or else config variable
                            VITROJAN.OutputRoot.'''))

        parser.add_argument('-f', '--force', action='store_true',
                            help=clean_help('''Recompute and overwrite outputs that already exist.'''))

        self.addStageArgs(parser)
        return parser

    def addStageArgs(self, parser):
        pass

    def experiment(self, args):
        """
        Return the (ExperimentConfig, output directory) named by ``args``.
        """
        from .config import outputRoot
        from .experiment import ExperimentConfig

        cfg = ExperimentConfig.load(args.config, seed=args.seed)
        return cfg, outputRoot(args.out)
