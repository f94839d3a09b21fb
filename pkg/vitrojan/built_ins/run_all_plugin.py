"""
.. vitrojan "run-all" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC
from ..log import getLogger

_logger = getLogger(__name__)


class RunAllCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Run every stage in order (train-clean, gen-trigger, inject, evaluate,
                  report) and print the report table.'''}
        super(RunAllCommand, self).__init__('run-all', subparsers, kwargs)

    def addStageArgs(self, parser):
        parser.add_argument('-b', '--baseline', action='store_true',
                            help='''Also run the data-poisoning baseline and include it in the report.''')
        return parser

    def run(self, args, tool):
        from ..experiment import run_all

        cfg, out = self.experiment(args)
        text = run_all(cfg, out, force=args.force, baseline=args.baseline)

        _logger.info(f"Artifacts are in {out}")
        print(text)


PluginClass = RunAllCommand
