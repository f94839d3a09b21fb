"""
.. Logging support.

   Modules register for logging with the top-level statement
   ``_logger = vitrojan.log.getLogger(__name__)``. The logger returned may
   not be configured yet: configuration happens once the system config has
   been read (see :py:func:`configureLogs`), after which newly registered
   loggers are configured as they are created.

   Log levels are given as a comma-delimited string that sets a default
   level and, optionally, levels for individual modules, e.g.
   ``"INFO, .trigger:DEBUG, .injection:WARNING"``. A leading '.' names a
   module within the vitrojan package.

.. See LICENSE.txt for license details.
"""
import logging
import os

from .config import getParam, getParamAsBoolean, configLoaded

PKGNAME = __name__.split('.')[0]

_Loggers = {}      # loggers created herein, keyed by module or package name
_LogLevels = None  # log levels keyed by module or package name


def getLogger(name):
    '''
    Register a logger, which is configured once the configuration file is read.

    :param name: the name of the logger, conventionally passed as __name__.
    :return: a logging logger instance
    '''
    logger = _Loggers.get(name)

    if logger is None:
        logger = logging.getLogger(name)
        _Loggers[name] = logger

    pkgName = name.split('.')[0]
    if pkgName and pkgName != name and pkgName not in _Loggers:
        getLogger(pkgName)

    if configLoaded():
        _configureLogger(name)

    return logger


def parseLevels(levelStr=None):
    """
    Parse a log-level string into a dict of levels keyed by module name.

    :param levelStr: a comma-delimited string of ``module:LEVEL`` items. An item
        without ':' sets the default level for the package. If None, the value
        of config variable ``VITROJAN.LogLevel`` is used.
    :return: (dict) of log levels, keyed by module names
    """
    levelStr = levelStr or getParam('VITROJAN.LogLevel')
    result = {}

    for item in levelStr.split(','):
        item = item.strip()
        if not item:
            continue

        if ':' in item:
            module, level = [s.strip() for s in item.split(':')]
            if module.startswith('.'):
                module = PKGNAME + module
        else:
            module, level = PKGNAME, item

        result[module] = level.upper()

    return result


def setLogLevels(levelStr):
    '''
    Set the logging level string. Call :py:func:`configureLogs` with
    ``force=True`` afterwards to apply it to existing loggers.

    :param levelStr: (str) comma-delimited module:LEVEL pairs, or just a single LEVEL
    :return: none
    '''
    global _LogLevels
    _LogLevels = parseLevels(levelStr)


def _levelFor(logger):
    name = logger.name
    while name:
        if name in _LogLevels:
            return _LogLevels[name]
        name = name.rpartition('.')[0]

    # user plugins outside the package use the package level
    return _LogLevels.get(PKGNAME, 'WARNING')


def _addHandler(logger, formatStr, logFile=None):
    if logFile:
        logDir = os.path.dirname(logFile)
        if logDir:
            os.makedirs(logDir, exist_ok=True)
        handler = logging.FileHandler(logFile, mode='a')
    else:
        handler = logging.StreamHandler()

    handler.setFormatter(logging.Formatter(formatStr))
    logger.addHandler(handler)


def _configureLogger(name, force=False):
    logger = _Loggers[name]

    if logger.handlers and not force:
        return

    if not _LogLevels:
        setLogLevels(getParam('VITROJAN.LogLevel') or 'WARNING')

    logger.setLevel(_levelFor(logger))
    logger.propagate = False

    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        try:
            handler.flush()
        except ValueError:
            pass    # the stream was closed elsewhere, e.g. a replaced sys.stderr

        if isinstance(handler, logging.FileHandler):
            handler.close()

    if getParamAsBoolean('VITROJAN.LogConsole'):
        _addHandler(logger, getParam('VITROJAN.LogConsoleFormat'))

    logFile = getParam('VITROJAN.LogFile', raiseError=False)
    if logFile:
        _addHandler(logger, getParam('VITROJAN.LogFileFormat'), logFile=logFile)

    if not logger.handlers:
        logger.addHandler(logging.NullHandler())


def configureLogs(force=False):
    '''
    Configure all registered loggers from the current configuration. Unless
    ``force`` is True, loggers that already have handlers are left alone.

    :param force: (bool) if True, reconfigure loggers even if already configured.
    :return: none
    '''
    if not configLoaded():
        return

    for name in list(_Loggers):
        _configureLogger(name, force=force)


def setLogFile(pathname, remove_old_file=False):
    from .config import setParam

    if remove_old_file and os.path.isfile(pathname):
        os.remove(pathname)

    setParam('VITROJAN.LogFile', pathname)
    configureLogs(force=True)
