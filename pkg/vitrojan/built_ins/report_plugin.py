"""
.. vitrojan "report" sub-command

.. See LICENSE.txt for license details.
"""
from ..subcommand import StageCommandABC, clean_help


class ReportCommand(StageCommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Render report.json files as a table. Writes report.csv and
                  report.txt to the report directory of the output directory.'''}
        super(ReportCommand, self).__init__('report', subparsers, kwargs)

    def addStageArgs(self, parser):
        parser.add_argument('reports', nargs='*',
                            help=clean_help('''report.json files to combine. If none are given,
                            <out>/report/report.json is used.'''))
        return parser

    def run(self, args, tool):
        from ..config import outputRoot
        from ..experiment import ExperimentConfig, report_stage

        # with explicit report files, write outputs only if --out is given
        out = outputRoot(args.out) if (args.out or not args.reports) else None
        cfg = ExperimentConfig.load(args.config, seed=args.seed) if args.config else None
        print(report_stage(cfg, out, force=args.force, sources=args.reports))


PluginClass = ReportCommand
