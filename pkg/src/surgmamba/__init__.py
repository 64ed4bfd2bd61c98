"""Streaming phase recognition with time-warped, re-grammed state space layers."""

from .model import CarryState, ModelConfig, ModelOutputs, SurgicalMamba, run_video
from .ssm import ContractError, chunked_scan, recurrent_scan

__all__ = [
    "CarryState",
    "ContractError",
    "ModelConfig",
    "ModelOutputs",
    "SurgicalMamba",
    "chunked_scan",
    "recurrent_scan",
    "run_video",
]
