import os
import os.path
import uuid
from typing import Union

RDWR_NOEXEC = 0o666  # create our underlying file as +rw-x


def open_exclusive(path: 'str', text: 'bool' = False):
    """Open a freshly created file for writing with explicit flags, refusing to clobber"""
    flags = os.O_RDWR | os.O_CREAT | os.O_EXCL
    if hasattr(os, 'O_BINARY'):
        flags |= os.O_BINARY
    fd = os.open(path, flags, RDWR_NOEXEC)
    return open(fd, 'w' if text else 'w+b', closefd=True)


class OutputFile:
    """Context manager that writes an output file atomically

    Notes::

    The managed name is a temporary sibling of ``destination``. When the block
    exits cleanly the temporary file replaces the destination in a single
    rename, so readers never observe a partial checkpoint or report ::

        >>> with OutputFile('/runs/a/final.dspn') as tmp:
        >>>     with open(tmp, 'wb') as f:
        >>>         f.write(payload)

    If the block raises, the temporary file is removed and the destination is
    left untouched.
    """
    def __init__(self, destination: 'Union[str, os.PathLike]'):
        self.destination = os.fspath(destination)
        self.name = None

    def __enter__(self) -> 'str':
        directory = os.path.dirname(os.path.abspath(self.destination))
        os.makedirs(directory, exist_ok=True)
        base = os.path.basename(self.destination)
        self.name = os.path.join(directory, f'.{base}.{uuid.uuid4().hex}.tmp')
        return self.name

    def __exit__(self, exc, value, tb):
        if exc is None and os.path.exists(self.name):
            os.replace(self.name, self.destination)
        elif os.path.exists(self.name):
            os.unlink(self.name)
        return False


def write_text(destination: 'Union[str, os.PathLike]', text: 'str'):
    with OutputFile(destination) as tmp:
        with open_exclusive(tmp, text=True) as f:
            f.write(text)


def write_bytes(destination: 'Union[str, os.PathLike]', blob: 'bytes'):
    with OutputFile(destination) as tmp:
        with open_exclusive(tmp) as f:
            f.write(blob)
