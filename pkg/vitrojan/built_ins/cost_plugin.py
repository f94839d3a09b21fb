"""
.. vitrojan "cost" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC


class CostCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Print the number of tuned parameters and images needed by each
                  attack kind on the clean model.'''}
        super(CostCommand, self).__init__('cost', subparsers, kwargs, group='compare')

    def run(self, args, tool):
        from ..experiment import cost_stage

        cfg, out = self.experiment(args)
        print(cost_stage(cfg, out))


PluginClass = CostCommand
