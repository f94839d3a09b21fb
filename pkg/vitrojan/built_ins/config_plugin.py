'''
.. vitrojan "config" sub-command

.. See LICENSE.txt for license details.
'''
from ..error import VitrojanException, CommandlineError
from ..subcommand import SubcommandABC, clean_help


class ConfigCommand(SubcommandABC):
    def __init__(self, subparsers):
        kwargs = {'help': '''Show system configuration variables (log levels, output root,
                  evaluation threads, ...) as read from the package defaults and ~/vitrojan.cfg.'''}

        super(ConfigCommand, self).__init__('config', subparsers, kwargs, group='utils')

    def addArgs(self, parser):
        parser.add_argument('name', nargs='?', default='',
                            help=clean_help('''Show only variables whose name contains this text,
                            ignoring case. Environment variables ("$NAME") are listed only when
                            the text starts with "$". Without a name, all other variables
                            are shown.'''))

        parser.add_argument('-d', '--useDefault', action='store_true',
                            help=clean_help('''Read the [DEFAULT] section instead of the section of
                            the current project.'''))

        parser.add_argument('-e', '--edit', action='store_true',
                            help=clean_help('''Open ~/vitrojan.cfg with the program named by
                            VITROJAN.TextEditor.'''))

        parser.add_argument('-x', '--exact', action='store_true',
                            help=clean_help('''Treat the name as the exact, case-sensitive name of
                            one variable and print only its value.'''))
        return parser

    @staticmethod
    def edit():
        import shlex
        import subprocess
        from ..config import getParam, userConfigPath

        argv = shlex.split(getParam('VITROJAN.TextEditor')) + [userConfigPath()]
        print(' '.join(argv))
        status = subprocess.call(argv)
        if status != 0:
            raise VitrojanException(f"Editor command {argv} exited with status {status}")

    @staticmethod
    def matching(section, text):
        from ..config import getConfig, getParam

        wanted = text.lower()
        showEnv = text.startswith('$')

        for name, _ in sorted(getConfig().items(section, raw=True)):
            if name.startswith('$') != showEnv or wanted not in name.lower():
                continue
            yield name, getParam(name, section=section, raiseError=False)

    def run(self, args, tool):
        from ..config import getConfig, getParam, DEFAULT_SECTION

        if args.edit:
            self.edit()
            return

        section = args.projectName
        if args.useDefault or not section:
            section = DEFAULT_SECTION

        elif not getConfig().has_section(section):
            raise CommandlineError(f"Unknown configuration file section '{section}'")

        if args.exact:
            if not args.name:
                raise CommandlineError("config --exact requires a variable name")

            value = getParam(args.name, section=section, raiseError=False)
            if value is not None:
                print(value)
            return

        print(f"[{section}]")
        for name, value in self.matching(section, args.name):
            print(f"{name:>25} = {value}")


PluginClass = ConfigCommand
