'''
.. Access to files shipped inside the vitrojan package.

.. See LICENSE.txt for license details.
'''
import pkgutil

from .error import VitrojanException

DFLT_ENCODING = 'utf-8'


def getResource(relpath, decode=DFLT_ENCODING):
    """
    Extract a resource (e.g., file) from the given relative path in
    the vitrojan package.

    :param relpath: (str) a path relative to the vitrojan package
    :param decode: (str) the encoding used to decode the data, or
        None to return bytes.
    :return: the file contents
    """
    try:
        contents = pkgutil.get_data('vitrojan', relpath)
    except OSError:
        contents = None

    if contents is None:
        raise VitrojanException(f"Resource '{relpath}' was not found in the vitrojan package")

    return contents.decode(decode) if decode else contents
