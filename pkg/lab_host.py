"""
Lab Host - shared base for the command-line host
Owns the debug log: a named logger writing to stderr and, optionally, a file.
Components receive `host.debug_log` as a plain callable.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional

DEBUG_FILE_ENV = "ADVLAB_DEBUG_FILE"


class LabHost:
    def __init__(self, name: str, verbose: bool = False, debug_file: Optional[str] = None):
        self.name = name
        self.logger = logging.getLogger(name)
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        for handler in list(self.logger.handlers):
            self.logger.removeHandler(handler)
            handler.close()

        stderr = logging.StreamHandler(sys.stderr)
        stderr.setLevel(logging.DEBUG if verbose else logging.WARNING)
        stderr.setFormatter(logging.Formatter("[%(name)s] %(message)s"))
        self.logger.addHandler(stderr)

        self.debug_file = debug_file or os.environ.get(DEBUG_FILE_ENV)
        if self.debug_file:
            Path(self.debug_file).parent.mkdir(parents=True, exist_ok=True)
            file_handler = logging.FileHandler(self.debug_file, encoding="utf-8")
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
            self.logger.addHandler(file_handler)

    def debug_log(self, message: str):
        self.logger.debug(message)

    def warn(self, message: str):
        self.logger.warning(message)

    def close(self):
        for handler in list(self.logger.handlers):
            handler.flush()
            handler.close()
            self.logger.removeHandler(handler)
