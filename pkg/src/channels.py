"""Ordered message channels and communication counters shared by the simulators."""

import logging
import queue
import threading
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from errors import ChannelOrderError, InvalidParameter

logger = logging.getLogger(__name__)

MESSAGE_KINDS = ('all_gather', 'all_reduce', 'ring_pass', 'scalar_reduce')


@dataclass
class CollectiveMessage:
    kind: str
    payload: Any
    step_tag: int
    source: int = -1

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise InvalidParameter(f"unknown message kind {self.kind!r}")


class Channel:
    """
    Point-to-point FIFO between two simulated workers.

    Step tags must strictly increase on both ends; a reordered or replayed
    message raises ChannelOrderError.
    """

    def __init__(self, source, target, timeout=60.0):
        self.source = source
        self.target = target
        self.timeout = timeout
        self._queue = queue.Queue()
        self._last_sent = None
        self._last_received = None
        self._lock = threading.Lock()

    def send(self, message):
        with self._lock:
            if self._last_sent is not None and message.step_tag <= self._last_sent:
                raise ChannelOrderError(
                    f"channel {self.source}->{self.target}: tag {message.step_tag} after {self._last_sent}"
                )
            self._last_sent = message.step_tag
        message.source = self.source
        self._queue.put(message)

    def receive(self):
        try:
            message = self._queue.get(timeout=self.timeout)
        except queue.Empty:
            raise ChannelOrderError(
                f"channel {self.source}->{self.target}: no message within {self.timeout}s"
            )
        if self._last_received is not None and message.step_tag <= self._last_received:
            raise ChannelOrderError(
                f"channel {self.source}->{self.target}: received tag {message.step_tag} after {self._last_received}"
            )
        self._last_received = message.step_tag
        return message


def ring_channels(num_workers, timeout=60.0):
    """Channel ``i`` carries messages from worker ``i`` to worker ``i + 1``."""
    return [Channel(i, (i + 1) % num_workers, timeout=timeout) for i in range(num_workers)]


@dataclass
class CommStats:
    num_workers: int
    bytes_allgather: np.ndarray = field(default=None)
    bytes_allreduce: np.ndarray = field(default=None)
    sync_rounds: np.ndarray = field(default=None)
    overlap_ticks: np.ndarray = field(default=None)
    total_ticks: np.ndarray = field(default=None)

    COUNTERS = ('bytes_allgather', 'bytes_allreduce', 'sync_rounds', 'overlap_ticks', 'total_ticks')

    def __post_init__(self):
        for name in self.COUNTERS:
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(self.num_workers, dtype=np.int64))

    def add(self, counter, amount, worker=None):
        amount = int(amount)
        if amount < 0:
            raise InvalidParameter(f"counter {counter} cannot decrease (got {amount})")
        values = getattr(self, counter)
        if worker is None:
            values += amount
        else:
            values[worker] += amount

    def merge(self, other):
        for name in self.COUNTERS:
            getattr(self, name)[:] += getattr(other, name)
        return self

    def to_frame(self):
        data = {'worker': np.arange(self.num_workers)}
        for name in self.COUNTERS:
            data[name] = getattr(self, name).copy()
        return pd.DataFrame(data)

    def export(self, filename):
        df = self.to_frame()
        df.to_csv(filename, index=False)
        logger.info("CommStats written to %s", filename)
        return df
