import os
import json
import struct
from datetime import datetime
from typing import Any, Dict, Optional
import numpy as np
from jsonpath_nz import log

#Exit codes used by main.py
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class TrifuseError(Exception):
    '''Base error, optionally tagged with the pipeline stage that raised it'''
    exit_code = EXIT_FAILURE

    def __init__(self, message: str, stage: Optional[str] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage

    def __str__(self):
        if self.stage:
            return f"[{self.stage}] {self.message}"
        return self.message

    def with_stage(self, stage: str) -> "TrifuseError":
        """Return the same error tagged with a stage (first tag wins)"""
        if self.stage is None:
            self.stage = stage
        return self


class ConfigError(TrifuseError, ValueError):
    exit_code = EXIT_CONFIG


class DataError(TrifuseError, ValueError):
    exit_code = EXIT_DATA


class NumericError(TrifuseError, ArithmeticError):
    exit_code = EXIT_NUMERIC


class BinaryReader:
    '''Sequential little-endian reader that reports truncation with the byte offset'''

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.source = source
        self.offset = 0

    def _take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise DataError(f"{self.source}: truncated {what} at byte offset {self.offset} "
                            f"(need {size} bytes, {len(self.data) - self.offset} available)")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def read_struct(self, fmt: str, what: str = "header"):
        return struct.unpack(fmt, self._take(struct.calcsize(fmt), what))

    def read_array(self, shape, dtype: str, what: str = "payload") -> np.ndarray:
        count = int(np.prod(shape))
        itemsize = np.dtype(dtype).itemsize
        chunk = self._take(count * itemsize, what)
        return np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()

    def expect_end(self):
        if self.offset != len(self.data):
            raise DataError(f"{self.source}: {len(self.data) - self.offset} unexpected trailing bytes "
                            f"at byte offset {self.offset}")


def read_binary(path: str) -> bytes:
    if not os.path.exists(path):
        raise DataError(f"File not found: {path}")
    with open(path, 'rb') as f:
        return f.read()


def default_output_dir() -> str:
    """Timestamped output directory under the current working directory"""
    return os.path.join(os.getcwd(), f'trifuse_{datetime.now().strftime("%Y%m%d_%H%M%S")}')


def save_dict_to_file(data_dict: Dict[str, Any], filepath: str):
    """Save dictionary to a JSON file, creating directories if they don't exist.

    Keys are sorted so that identical summaries produce identical bytes.

    Args:
        data_dict (dict): Dictionary to save
        filepath (str): Full path including filename where the JSON should be saved
    """
    try:
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)

        with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
            json.dump(data_dict, f, indent=4, sort_keys=True)
            f.write('\n')
        log.info(f"Successfully saved data to {filepath}")

    except Exception as e:
        log.error(f"Failed to save dictionary to file: {e}")
        log.error(f"Filepath: {filepath}")
        log.traceback(e)
        raise


def load_dict_from_file(filepath: str) -> Dict[str, Any]:
    '''Load a JSON object written by save_dict_to_file'''
    if not os.path.exists(filepath):
        raise DataError(f"File not found: {filepath}")
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise DataError(f"{filepath}:{e.lineno}: invalid JSON ({e.msg})") from e
    if not isinstance(data, dict):
        raise DataError(f"{filepath}: expected a JSON object")
    return data
