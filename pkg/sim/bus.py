"""
Broadcast message bus between stations.

Messages published during step t are stamped delivered at step
t + latency_steps and read by receivers at the following step. Each receiver
loses a message independently with ``loss_probability``; a sender never
receives its own messages.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .wire_codec import AckMcmMessage, Message, message_kind

logger = logging.getLogger(__name__)


class BusConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')

    loss_probability: float = Field(default=0.0, ge=0.0, le=1.0)
    latency_steps: int = Field(default=0, ge=0)


@dataclass(frozen=True)
class Delivery:
    """One message as it lands in one receiver's inbox."""

    send_step: int
    deliver_step: int
    sender: int
    seq: int
    message: Message

    @property
    def order_key(self) -> Tuple[int, int, int, int]:
        return (self.send_step, self.sender, int(message_kind(self.message)), self.seq)


def deliver(bus: BusConfig, sent: Sequence[Tuple[int, Message]], rng: np.random.Generator,
            receivers: Iterable[int], send_step: int = 0) -> Dict[int, List[Delivery]]:
    """
    Fan published messages out to every other station.

    Args:
        bus: Loss and latency settings
        sent: (sender station id, message) pairs in publication order
        rng: Generator for loss draws; untouched when loss_probability is 0
        receivers: Station ids present on the floor
        send_step: Step the messages were published at

    Returns:
        Map receiver -> deliveries ordered by (send step, sender, message
        kind, emission order); receivers that got nothing are absent
    """
    audience = sorted(set(receivers))
    inboxes: Dict[int, List[Delivery]] = defaultdict(list)
    seqs: Dict[int, int] = defaultdict(int)
    ordered: List[Tuple[int, int, int, Message]] = []
    for sender, msg in sent:
        ordered.append((sender, int(message_kind(msg)), seqs[sender], msg))
        seqs[sender] += 1
    ordered.sort(key=lambda item: item[:3])

    for sender, _, seq, msg in ordered:
        for receiver in audience:
            if receiver == sender:
                continue
            if bus.loss_probability > 0.0 and rng.random() < bus.loss_probability:
                logger.debug(f"Bus dropped message from {sender} to {receiver} at step {send_step}")
                continue
            inboxes[receiver].append(
                Delivery(send_step, send_step + bus.latency_steps, sender, seq, msg))
    for box in inboxes.values():
        box.sort(key=lambda d: d.order_key)
    return dict(inboxes)


class MessageBus:
    """Holds deliveries until the step at which receivers read them."""

    def __init__(self, config: BusConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self._pending: Dict[int, Dict[int, List[Delivery]]] = defaultdict(lambda: defaultdict(list))

    def publish(self, step: int, sent: Sequence[Tuple[int, Message]],
                receivers: Iterable[int]) -> Dict[int, List[Delivery]]:
        """Publish a step's outboxes; returns the deliveries made, by receiver."""
        made = deliver(self.config, sent, self.rng, receivers, step)
        for receiver, deliveries in made.items():
            for d in deliveries:
                self._pending[d.deliver_step + 1][receiver].append(d)
        return made

    def collect(self, step: int) -> Dict[int, List[Message]]:
        """Inboxes readable at a step, dropping ACK_MCMs addressed to other stations."""
        due = self._pending.pop(step, {})
        inboxes: Dict[int, List[Message]] = {}
        for receiver, deliveries in due.items():
            deliveries.sort(key=lambda d: d.order_key)
            inboxes[receiver] = [
                d.message for d in deliveries
                if not (isinstance(d.message, AckMcmMessage)
                        and d.message.station_id_destinator != receiver)
            ]
        return inboxes

    @property
    def in_flight(self) -> int:
        return sum(len(box) for boxes in self._pending.values() for box in boxes.values())
