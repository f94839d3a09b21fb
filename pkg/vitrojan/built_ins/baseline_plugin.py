"""
.. vitrojan "baseline" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC


class BaselineCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Fine-tune the clean model on a poisoned mix of its own training data,
                  for comparison with the data-free attack.'''}
        super(BaselineCommand, self).__init__('baseline', subparsers, kwargs, group='compare')

    def run(self, args, tool):
        from ..experiment import baseline_stage

        cfg, out = self.experiment(args)
        print(baseline_stage(cfg, out, force=args.force))


PluginClass = BaselineCommand
