'''
.. Common functions

.. See LICENSE.txt for license details.
'''
import json
import os
import tempfile
from contextlib import contextmanager

from .config import unixPath
from .error import VitrojanException
from .log import getLogger

_logger = getLogger(__name__)


def mkdirs(newdir, mode=0o770):
    """
    Create the full path ``newdir``, ignoring the error if it already exists.

    :param newdir: the directory to create (along with any needed parent directories)
    :return: nothing
    """
    os.makedirs(newdir, mode, exist_ok=True)


@contextmanager
def atomic_write(path, mode='wb'):
    """
    Context manager yielding a file opened on a temporary name in the same
    directory as ``path``. On normal exit the file is renamed to ``path``; on
    error it is removed and ``path`` is left untouched.

    :param path: (str) the final pathname
    :param mode: (str) 'wb' or 'w'
    """
    dirname = os.path.dirname(os.path.abspath(path))
    mkdirs(dirname)

    fd, tmp = tempfile.mkstemp(dir=dirname, prefix='.' + os.path.basename(path) + '.', suffix='.tmp')
    try:
        with os.fdopen(fd, mode) as f:
            yield f
        os.replace(tmp, path)

    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def canonical_json(obj):
    """
    Serialize ``obj`` to JSON with sorted keys and fixed separators, so equal
    objects always produce identical text.
    """
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=True) + '\n'


def write_json(path, obj):
    with atomic_write(path, 'w') as f:
        f.write(canonical_json(obj))


def read_json(path):
    with open(path) as f:
        return json.load(f)


def loadModuleFromPath(module_path, raiseError=True):
    """
    Load a module from a '.py' file at a path that ends in the module name,
    i.e., from "foo/bar/Baz.py", the module name is 'Baz'.

    :param module_path: (str) the pathname of a python module
    :param raiseError: (bool) if True, raise an error if the module cannot be loaded
    :return: (module) the loaded module, or None on failure when not raising
    :raises: VitrojanException
    """
    import importlib.util

    module_path = unixPath(module_path)
    module_name = os.path.basename(module_path).split('.')[0]

    _logger.debug(f"Loading module {module_path}")

    try:
        spec = importlib.util.spec_from_file_location(module_name, module_path)
        module = importlib.util.module_from_spec(spec)
        spec.loader.exec_module(module)
        return module

    except Exception as e:
        if raiseError:
            raise VitrojanException(f"Can't load module '{module_name}' from path '{module_path}': {e}")

    return None
