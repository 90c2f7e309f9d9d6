"""Device event loop and the server-side link that drives it."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..fedmeta.protocols import PROTOCOL_IDS, PROTOCOL_NAMES, ClientRuntime, Exchange
from ..fedmeta.sparse import SparseUpdate
from . import codec
from .transport import Endpoint

log = logging.getLogger(__name__)


class ProtocolOrderError(codec.ProtocolError):
    """A message arrived that the current protocol state does not allow."""


def run_device_loop(endpoint: Endpoint, runtime: ClientRuntime) -> int:
    """Serve rounds until Bye; returns the number of rounds completed.

    Each round is TaskAssign, then ModelDown, answered by DenseUp (or SparseUp
    for TinyMetaFed). Nothing but the runtime's data source survives a round.
    """
    rounds = 0
    while True:
        msg = endpoint.receive()
        if isinstance(msg, codec.Bye):
            log.debug("device: Bye after %d rounds", rounds)
            return rounds
        if not isinstance(msg, codec.TaskAssign):
            raise ProtocolOrderError(f"expected TaskAssign or Bye, got {type(msg).__name__}")
        if msg.version != codec.PROTOCOL_VERSION:
            raise ProtocolOrderError(f"unsupported protocol version {msg.version}")
        protocol = PROTOCOL_NAMES.get(msg.protocol)
        if protocol is None:
            raise ProtocolOrderError(f"unknown protocol id {msg.protocol}")
        down = endpoint.receive()
        if not isinstance(down, codec.ModelDown) or isinstance(down, codec.DenseUp):
            raise ProtocolOrderError(f"expected ModelDown, got {type(down).__name__}")
        reply = runtime.handle(protocol, down.round, msg.task_seed, down.values)
        if isinstance(reply, SparseUpdate):
            endpoint.send(codec.SparseUp(down.round, reply.indices, reply.values))
        else:
            endpoint.send(codec.DenseUp(down.round, reply))
        rounds += 1


@dataclass
class FrameLedger:
    """Per-round transport bytes split into counted scalars and framing overhead."""

    rounds: list = field(default_factory=list)

    def add(self, bytes_down: int, bytes_up: int, scalars_down: int, scalars_up: int):
        self.rounds.append({
            "bytes_down": bytes_down, "bytes_up": bytes_up,
            "scalars_down": scalars_down, "scalars_up": scalars_up,
            "overhead_down": bytes_down - 4 * scalars_down,
            "overhead_up": bytes_up - 4 * scalars_up,
        })


class RemoteLink:
    """Server-side link that exchanges frames with device loops.

    With several endpoints the devices are used round-robin, one at a time.
    """

    def __init__(self, endpoints):
        self.endpoints = list(endpoints) if isinstance(endpoints, (list, tuple)) else [endpoints]
        self.ledger = FrameLedger()
        self._turn = 0

    def exchange(self, protocol: str, round: int, task_seed: int, down: np.ndarray) -> Exchange:
        ep = self.endpoints[self._turn % len(self.endpoints)]
        self._turn += 1
        sent0, recv0 = ep.bytes_sent, ep.bytes_received
        model = codec.ModelDown(round, np.asarray(down, dtype=np.float32))
        ep.send(codec.TaskAssign(task_seed, PROTOCOL_IDS[protocol]))
        ep.send(model)
        msg = ep.receive()
        expected = codec.SparseUp if protocol == "tinymetafed" else codec.DenseUp
        if type(msg) is not expected:
            raise ProtocolOrderError(f"expected {expected.__name__}, got {type(msg).__name__}")
        if msg.round != round:
            raise ProtocolOrderError(f"reply for round {msg.round}, expected {round}")
        down_scalars = codec.payload_scalars(model)
        up_scalars = codec.payload_scalars(msg)
        self.ledger.add(ep.bytes_sent - sent0, ep.bytes_received - recv0, down_scalars,
                        up_scalars)
        reply = (SparseUpdate(msg.indices, msg.values, msg.round)
                 if isinstance(msg, codec.SparseUp) else msg.values)
        return Exchange(reply, down_scalars, up_scalars)

    def close(self) -> None:
        for ep in self.endpoints:
            if not ep.closed:
                ep.send(codec.Bye())
                ep.close()
