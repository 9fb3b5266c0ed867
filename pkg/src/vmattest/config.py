"""Scenario-wide knobs, one boolean per defense so each can be ablated."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Iterable

# CLI name -> Config attribute
DEFENSES = {
    "channel-integrity": "channel_integrity",
    "psk-auth": "psk_auth",
    "key-binding": "key_binding",
    "rollback": "rollback_protection",
    "single-connection": "single_connection",
}

ROUTING_MODES = ("per-instance", "legacy-prefix")


@dataclass(frozen=True)
class Config:
    channel_integrity: bool = True
    psk_auth: bool = True
    key_binding: bool = True
    rollback_protection: bool = True
    single_connection: bool = True
    # logical ticks a cached host verdict stays valid for sign_challenge
    staleness_window: int = 0
    # seconds of artificial delay per MCS call
    mcs_latency: float = 0.0
    routing: str = "per-instance"

    def __post_init__(self):
        if self.routing not in ROUTING_MODES:
            raise ValueError(f"unknown routing mode {self.routing!r}")
        if self.staleness_window < 0:
            raise ValueError("staleness_window must be >= 0")

    def without(self, defenses: Iterable[str]) -> "Config":
        """Return a copy with the named defenses (CLI spelling) switched off."""
        changes = {}
        for name in defenses:
            try:
                changes[DEFENSES[name]] = False
            except KeyError:
                raise ValueError(f"unknown defense {name!r}; expected one of {sorted(DEFENSES)}") from None
        return dataclasses.replace(self, **changes)

    def disabled(self) -> list[str]:
        return [name for name, attr in DEFENSES.items() if not getattr(self, attr)]
