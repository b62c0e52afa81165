"""
Resource usage of a run, stamped into the summary
"""

import os
import time
from datetime import datetime
from typing import Optional

import psutil
from pydantic import BaseModel, Field


class RunMetrics(BaseModel):
    """Wall time and memory of one scenario run"""

    started: datetime = Field(default_factory=datetime.now)
    wall_seconds: float = 0.0
    steps: int = 0
    peak_rss_mb: float = 0.0
    cpu_count: int = Field(default_factory=lambda: psutil.cpu_count() or 1)
    threads: int = 1


class RunMonitor:
    """Samples the current process every few steps"""

    def __init__(self, threads: int = 1, sample_every: int = 50, logger=None):
        self.metrics = RunMetrics(threads=threads)
        self.sample_every = max(1, sample_every)
        self.logger = logger
        self._process = psutil.Process(os.getpid())
        self._t0 = time.perf_counter()

    def _sample(self) -> None:
        rss = self._process.memory_info().rss / (1024 ** 2)
        self.metrics.peak_rss_mb = max(self.metrics.peak_rss_mb, round(rss, 2))
        self.metrics.wall_seconds = round(time.perf_counter() - self._t0, 3)

    def tick(self, step: Optional[int] = None) -> None:
        self.metrics.steps = step if step is not None else self.metrics.steps + 1
        if self.metrics.steps % self.sample_every == 0:
            self._sample()
            if self.logger:
                self.logger.debug(
                    f"step {self.metrics.steps}: {self.metrics.wall_seconds:.1f} s, "
                    f"rss {self.metrics.peak_rss_mb:.1f} MB"
                )

    def finish(self) -> RunMetrics:
        self._sample()
        return self.metrics
