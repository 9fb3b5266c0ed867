"""Desk-scale simulator for policy-driven VM runtime-integrity attestation.

The package models a cloud node with a hardware TPM, TEE-hosted emulated
TPMs, a monotonic counter service and IMA engines, plus an adversarial
message fabric used to replay the classic vTPM attacks against it.
"""

from .config import DEFENSES, Config
from .errors import SimulationError

__all__ = ["Config", "DEFENSES", "SimulationError"]
__version__ = "0.1.0"
