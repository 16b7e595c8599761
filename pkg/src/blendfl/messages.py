"""Payloads exchanged between clients and servers, and the protocol trace log."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

SERVER = "server"

# payload types allowed to cross a party boundary
WIRE_TYPES = ("FeatureBatch", "GradientBatch", "ParamVector", "ModelBundle")


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FeatureBatch:
    """Encoder outputs for a set of sample ids, produced by one client."""
    client_id: int
    modality: str
    round_tag: object
    ids: tuple
    features: np.ndarray
    labels: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class GradientBatch:
    """Loss gradient w.r.t. a FeatureBatch's rows, sent back to its producer."""
    client_id: int
    modality: str
    round_tag: object
    ids: tuple
    grad: np.ndarray


@dataclass(frozen=True)
class TraceEvent:
    round: int
    kind: str
    src: object
    dst: object
    payload: Optional[str] = None

    @property
    def is_message(self) -> bool:
        return self.src != self.dst


@dataclass
class ProtocolTrace:
    """Append-only record of local phases and inter-party messages."""
    events: list = field(default_factory=list)

    def local(self, round_: int, kind: str, party) -> None:
        self.events.append(TraceEvent(round_, kind, party, party))

    def message(self, round_: int, kind: str, src, dst, payload) -> None:
        name = type(payload).__name__ if not isinstance(payload, str) else payload
        if name not in WIRE_TYPES:
            raise ProtocolError(f"{name} may not cross a party boundary")
        self.events.append(TraceEvent(round_, kind, src, dst, name))

    def phases(self, round_: int) -> list:
        """Event kinds of a round with consecutive repeats collapsed."""
        out = []
        for e in self.events:
            if e.round == round_ and (not out or out[-1] != e.kind):
                out.append(e.kind)
        return out

    def server_messages(self) -> list:
        return [e for e in self.events if e.is_message and SERVER in (e.src, e.dst)]
