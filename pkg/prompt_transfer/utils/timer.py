import logging
import time
from typing import Optional


class Timer:
    """
    with Timer("source stage took {time_s:.1f}s"):
        ...
    """

    def __init__(self, message: str):
        self._start_time: Optional[float] = None
        self._message_template = message
        self.elapsed_s = 0.0

    def __call__(self, message: str) -> 'Timer':
        self._message_template = message
        return self

    def __enter__(self) -> 'Timer':
        self._start_time = time.time()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.elapsed_s = time.time() - self._start_time
        if exc_type is None:
            logging.info(self._message_template.format(
                time_s=self.elapsed_s,
                time_ms=self.elapsed_s * 1000
            ))
