#
# Base class and timer shared by the vitrojan modules
#
# See LICENSE.txt for license details.
#
import time


class VitrojanObject():
    """
    Base for the package's value classes. Subclasses with a ``name`` attribute
    show it in their string form.
    """
    def __str__(self):
        label = getattr(self, 'name', None)
        suffix = f' name="{label}"' if label else ''
        return f'<{self.__class__.__name__}{suffix}>'


class Timer:
    """
    Measures elapsed wall-clock time of a named task, either between
    ``start()`` and ``stop()`` or over a ``with`` block.
    """
    def __init__(self, task):
        self.task = task
        self.began = None
        self.ended = None

    def start(self):
        self.began, self.ended = time.perf_counter(), None
        return self

    def stop(self):
        self.ended = time.perf_counter()
        return self

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False

    def seconds(self):
        if self.began is None:
            return 0.0
        return (self.ended or time.perf_counter()) - self.began

    def __str__(self):
        if self.began is None:
            return f"<Timer '{self.task}' not started>"

        state = 'took' if self.ended is not None else 'running for'
        return f"<Timer '{self.task}' {state} {self.seconds():.3f}s>"
