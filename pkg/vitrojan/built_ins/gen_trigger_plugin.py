"""
.. vitrojan "gen-trigger" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC


class GenTriggerCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Optimize the trigger pattern so the clean model's attention
                  concentrates on the trigger region of surrogate images.'''}
        super(GenTriggerCommand, self).__init__('gen-trigger', subparsers, kwargs)

    def run(self, args, tool):
        from ..experiment import gen_trigger_stage

        cfg, out = self.experiment(args)
        print(gen_trigger_stage(cfg, out, force=args.force))


PluginClass = GenTriggerCommand
