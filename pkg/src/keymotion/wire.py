"""Multi-drop wire simulation and byte-link transports.

The simulated wire stands in for the differential serial bus: a shared
downlink (host to every board) and a merged uplink (boards to host).  Bytes
are delivered strictly in order per direction with a fixed propagation
latency; an optional corruption model flips or drops bytes, never reorders
them.  The frame codec is identical over the in-memory wire, the TCP
loopback binding, and any future raw serial attachment.
"""

from __future__ import annotations

import socket
from dataclasses import dataclass

import numpy as np

from .protocol import FrameDecoder
from .sim import Scheduler


@dataclass
class CorruptionModel:
    flip_rate: float = 0.0  # probability a byte is xor-corrupted
    drop_rate: float = 0.0  # probability a byte is dropped

    @property
    def active(self) -> bool:
        return self.flip_rate > 0 or self.drop_rate > 0


class WireSim:
    """Deterministic in-memory bus: one host port, many board ports.

    Host transmissions reach every attached board (multi-drop); board
    transmissions reach the host.  Boards do not hear each other (they only
    ever act on host frames, so modelling board-to-board coupling would add
    nothing but noise).
    """

    def __init__(self, scheduler: Scheduler, latency_us: int = 50,
                 corruption: CorruptionModel | None = None, seed: int = 0):
        self.scheduler = scheduler
        self.latency_us = int(latency_us)
        self.corruption = corruption or CorruptionModel()
        self._rng = np.random.default_rng(seed)
        self._boards = []  # (receiver callable, label) in attach order
        self._host_rx = None

    def attach_host(self, receiver) -> None:
        self._host_rx = receiver

    def attach_board(self, receiver, label: str = "") -> None:
        self._boards.append((receiver, label))

    def detach_all_boards(self) -> None:
        self._boards.clear()

    # -- transmission ------------------------------------------------------

    def host_send(self, data: bytes) -> None:
        for receiver, _ in list(self._boards):
            self._deliver(receiver, data)

    def board_send(self, data: bytes) -> None:
        if self._host_rx is not None:
            self._deliver(self._host_rx, data)

    def _deliver(self, receiver, data: bytes) -> None:
        data = self._mangle(data)
        if data:
            self.scheduler.call_after(self.latency_us,
                                      lambda d=data, r=receiver: r(d))

    def _mangle(self, data: bytes) -> bytes:
        if not self.corruption.active:
            return data
        out = bytearray()
        for b in data:
            if self.corruption.drop_rate and self._rng.random() < self.corruption.drop_rate:
                continue
            if self.corruption.flip_rate and self._rng.random() < self.corruption.flip_rate:
                bit = 1 << int(self._rng.integers(0, 8))
                b ^= bit
            out.append(b)
        return bytes(out)


class TcpByteLink:
    """Point-to-point byte link over a localhost TCP socket.

    Integration binding proving the codec is transport-independent; the
    in-memory wire remains the default for deterministic simulation.
    """

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.setblocking(True)
        self.decoder = FrameDecoder()

    @classmethod
    def pair(cls) -> tuple["TcpByteLink", "TcpByteLink"]:
        listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        client = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        client.connect(listener.getsockname())
        server, _ = listener.accept()
        listener.close()
        return cls(client), cls(server)

    def send(self, data: bytes) -> None:
        self._sock.sendall(data)

    def recv_frames(self, max_bytes: int = 65536, timeout_s: float = 1.0):
        self._sock.settimeout(timeout_s)
        try:
            data = self._sock.recv(max_bytes)
        except socket.timeout:
            return []
        return self.decoder.feed(data)

    def close(self) -> None:
        self._sock.close()
