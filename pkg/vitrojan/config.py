'''
.. System configuration for vitrojan.

   Configuration variables live in configparser files, read in this order
   (later files override earlier ones):

   1. ``vitrojan/etc/system.cfg`` inside the package
   2. ``vitrojan/etc/{platform}.cfg``, if present
   3. the file named by ``$VITROJAN_SITE_CONFIG``, if set
   4. the user's ``~/vitrojan.cfg`` (``$VITROJAN_HOME`` replaces ``$HOME``)

   Variables are read from the section named by ``VITROJAN.DefaultProject``,
   falling back to ``[DEFAULT]``. Experiment hyperparameters are not kept
   here; see :py:mod:`vitrojan.experiment`.

.. See LICENSE.txt for license details.
'''
import configparser
import os
import platform

from .error import ConfigFileError, VitrojanException
from .pkg_utils import getResource

DEFAULT_SECTION = 'DEFAULT'
USR_CONFIG_FILE = 'vitrojan.cfg'

HOME_ENV_VAR = 'VITROJAN_HOME'
SITE_CONFIG_ENV_VAR = 'VITROJAN_SITE_CONFIG'
OUTPUT_ROOT_ENV_VAR = 'VITROJAN_OUTPUT_ROOT'

PlatformName = platform.system()

IsWindows = PlatformName == 'Windows'

_ConfigParser = None  # type: configparser.ConfigParser

_ProjectSection = DEFAULT_SECTION

_DEFAULT_CONFIG = """# vitrojan user configuration. Package defaults are listed by "vtj config -d".
#
[DEFAULT]
VITROJAN.DefaultProject = my_project

[my_project]
# VITROJAN.LogLevel = INFO, .injection:DEBUG
# VITROJAN.OutputRoot = %(Home)s/vitrojan-runs
# VITROJAN.EvalWorkers = 4
"""

_TRUE_STRINGS = ('t', 'y', 'true', 'yes', 'on', '1')
_FALSE_STRINGS = ('f', 'n', 'false', 'no', 'off', '0')


def unixPath(path, abspath=False):
    """
    Return ``path`` with forward slashes, made absolute if ``abspath`` is True.
    """
    if abspath:
        path = os.path.abspath(str(path))
    return str(path).replace('\\', '/')


def pathjoin(*elements, expanduser=False, abspath=False, realpath=False):
    """
    Join path ``elements`` and return the result as a Unix-style path.

    :param expanduser: (bool) expand a leading '~'
    :param abspath: (bool) make the path absolute
    :param realpath: (bool) resolve symbolic links
    """
    path = os.path.join(*map(str, elements))
    for wanted, func in ((expanduser, os.path.expanduser),
                         (abspath, os.path.abspath),
                         (realpath, os.path.realpath)):
        if wanted:
            path = func(path)

    return unixPath(path)


def getSection():
    return _ProjectSection


def setSection(section):
    """
    Make ``section`` the section that :py:func:`getParam` reads by default.
    """
    global _ProjectSection
    _ProjectSection = section


def configLoaded():
    return _ConfigParser is not None


def getHomeDir():
    """
    The directory holding the user's ``vitrojan.cfg``: ``$VITROJAN_HOME`` if set,
    otherwise the user's home directory.
    """
    override = os.environ.get(HOME_ENV_VAR)
    if override or not IsWindows:
        return override or os.environ.get('HOME')

    env = os.environ
    drive, rest = os.path.splitdrive(env.get('HOMESHARE') or env.get('HOMEPATH') or '')
    return os.path.realpath((drive or env.get('HOMEDRIVE') or 'C:') + rest).replace('\\', '/')


def userConfigPath():
    return pathjoin(getHomeDir(), USR_CONFIG_FILE)


def ensure_default_config():
    '''
    Write a starter ``~/vitrojan.cfg`` unless a non-empty one exists.
    '''
    path = userConfigPath()
    if os.path.lexists(path) and os.path.getsize(path) > 0:
        return

    try:
        with open(path, 'w') as f:
            f.write(_DEFAULT_CONFIG)

    except OSError as e:
        raise VitrojanException(f"Can't write the default configuration file {path}: {e}")


def getConfig(reload=False, allowMissing=False, createDefault=False, systemConfigOnly=False):
    """
    Return the ConfigParser holding the configuration, reading the files on
    first use.

    :param reload: (bool) discard the current configuration and read the files again
    :param allowMissing: (bool) don't complain if the user's config file is missing
    :param createDefault: (bool) write a starter user config file if there is none
    :param systemConfigOnly: (bool) read nothing but the package's ``system.cfg``;
       used when building the documentation
    :return: a ``ConfigParser`` instance
    """
    if createDefault:
        ensure_default_config()

    if _ConfigParser is not None and not (reload or systemConfigOnly):
        return _ConfigParser

    return readConfigFiles(allowMissing=allowMissing, systemConfigOnly=systemConfigOnly)


def _readResource(relpath, required=True):
    try:
        text = getResource(relpath)
    except VitrojanException:
        if required:
            raise
        return

    _ConfigParser.read_string(text, source=relpath)


def _readFile(path, allowMissing):
    try:
        with open(path) as f:
            _ConfigParser.read_file(f)

    except OSError:
        if allowMissing:
            return

        problem = "Missing" if not os.path.lexists(path) else "Unreadable"
        raise ConfigFileError(f"{problem} configuration file {path}")


def readConfigFiles(allowMissing=False, systemConfigOnly=False):
    """
    Build a new configuration from the system, platform, site and user files.

    :return: the populated ConfigParser
    """
    global _ConfigParser

    parser = _ConfigParser = configparser.ConfigParser(comment_prefixes=('#',), strict=False,
                                                       empty_lines_in_values=False)
    parser.optionxform = str        # names are case-sensitive

    defaults = parser[DEFAULT_SECTION]
    defaults['Home'] = getHomeDir() or ''

    if not systemConfigOnly:
        defaults['User'] = os.getenv('USER', 'unknown')

        # environment variables are visible as '$NAME'
        for name, value in os.environ.items():
            defaults['$' + name] = value.replace('%', '%%')

    _readResource('etc/system.cfg')

    if systemConfigOnly:
        setSection(DEFAULT_SECTION)
        return parser

    _readResource(f'etc/{PlatformName}.cfg', required=False)

    site = os.getenv(SITE_CONFIG_ENV_VAR)
    if site:
        _readFile(site, allowMissing=True)

    _readFile(userConfigPath(), allowMissing)

    project = parser.get(DEFAULT_SECTION, 'VITROJAN.DefaultProject', fallback='')
    if project:
        if not parser.has_section(project):
            parser.add_section(project)
        setSection(project)

    return parser


def setParam(name, value, section=None):
    """
    Set variable ``name`` to ``str(value)`` in memory, in ``section`` or else
    the project section. Returns ``value``.
    """
    if _ConfigParser is None:
        getConfig(allowMissing=True)

    _ConfigParser.set(section or getSection(), name, str(value))
    return value


def getParam(name, section=None, raw=False, raiseError=True):
    """
    Return the value of configuration variable ``name`` as a string, reading
    the config files if needed. Environment variables are available as
    ``getParam('$NAME')``.

    :param section: (str) the section to read; default is the project section
    :param raw: (bool) if True, skip '%' interpolation
    :param raiseError: (bool) if False, return None for unknown names or sections
    :raises VitrojanException: for an unknown variable or section
    """
    if _ConfigParser is None:
        getConfig(allowMissing=True)

    section = section or getSection()
    try:
        return _ConfigParser.get(section, name, raw=raw)

    except configparser.NoSectionError:
        problem = f'unknown section "{section}"'

    except configparser.NoOptionError:
        problem = f'unknown variable "{name}"'

    if raiseError:
        raise VitrojanException(f'getParam: {problem}')

    return None


def stringTrue(value, raiseError=True):
    """
    Interpret ``value`` as a boolean. Returns None for unrecognized text when
    ``raiseError`` is False.
    """
    text = str(value).lower()
    if text in _TRUE_STRINGS or text in _FALSE_STRINGS:
        return text in _TRUE_STRINGS

    if raiseError:
        raise ConfigFileError(f'Unrecognized boolean value: "{text}"; expected one of '
                              f'{_TRUE_STRINGS + _FALSE_STRINGS}')
    return None


def getParamAsBoolean(name, section=None):
    """
    Return variable ``name`` as a boolean.

    :raises: :py:exc:`vitrojan.error.ConfigFileError` if the value isn't a boolean string
    """
    value = getParam(name, section=section)
    result = stringTrue(value, raiseError=False)
    if result is None:
        raise ConfigFileError(f'Variable "{name}" = "{value}" cannot be converted to boolean')

    return result


def getParamAsInt(name, section=None):
    value = getParam(name, section=section)
    try:
        return int(value)
    except ValueError:
        raise ConfigFileError(f'Variable "{name}" = "{value}" is not an integer')


def outputRoot(override=None):
    """
    Return the directory under which experiment artifacts are written: the
    explicit ``override`` (``--out``) if given, else ``$VITROJAN_OUTPUT_ROOT``,
    else the config variable ``VITROJAN.OutputRoot``.
    """
    return override or os.environ.get(OUTPUT_ROOT_ENV_VAR) or getParam('VITROJAN.OutputRoot')
