import logging
from pathlib import Path


class LazyFileHandler(logging.FileHandler):
    """File handler that opens its file, and creates the directory, on the first record."""

    def __init__(self, filename, mode='a', encoding='utf-8'):
        super().__init__(filename, mode=mode, encoding=encoding, delay=True)

    def _open(self):
        Path(self.baseFilename).parent.mkdir(parents=True, exist_ok=True)
        return super()._open()
