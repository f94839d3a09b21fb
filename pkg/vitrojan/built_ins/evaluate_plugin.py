"""
.. vitrojan "evaluate" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC


class EvaluateCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Measure the backdoored model against the clean one and write
                  report.json and an attention heatmap.'''}
        super(EvaluateCommand, self).__init__('evaluate', subparsers, kwargs)

    def run(self, args, tool):
        from ..experiment import evaluate_stage

        cfg, out = self.experiment(args)
        print(evaluate_stage(cfg, out, force=args.force))


PluginClass = EvaluateCommand
