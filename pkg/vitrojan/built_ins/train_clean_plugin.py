"""
.. vitrojan "train-clean" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC


class TrainCleanCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Generate the synthetic main-task and surrogate datasets, if needed,
                  and train the clean model on the main task.'''}
        super(TrainCleanCommand, self).__init__('train-clean', subparsers, kwargs)

    def run(self, args, tool):
        from ..experiment import train_clean_stage

        cfg, out = self.experiment(args)
        print(train_clean_stage(cfg, out, force=args.force))


PluginClass = TrainCleanCommand
