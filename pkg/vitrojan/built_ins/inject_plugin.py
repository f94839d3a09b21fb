"""
.. vitrojan "inject" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC


class InjectCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Build the poisoned surrogate set and tune the selected neurons of
                  the clean model to plant the backdoor.'''}
        super(InjectCommand, self).__init__('inject', subparsers, kwargs)

    def run(self, args, tool):
        from ..experiment import inject_stage

        cfg, out = self.experiment(args)
        print(inject_stage(cfg, out, force=args.force))


PluginClass = InjectCommand
