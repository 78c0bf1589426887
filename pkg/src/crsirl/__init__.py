"""Conversational recommendation with learned intrinsic rewards.

A desk-scale workbench: synthetic recommendation worlds, a multi-round
conversational MDP with a simulated user, a softmax policy with
hand-derived gradients, and a bi-level trainer that learns an intrinsic
reward by meta-gradient descent on two outer objectives.
"""

from crsirl.errors import (
    CRSError,
    DegenerateWeightsError,
    EpisodeFinishedError,
    InvalidArgument,
    NoActionsError,
    NoPairError,
    NotACandidateError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "CRSError",
    "DegenerateWeightsError",
    "EpisodeFinishedError",
    "InvalidArgument",
    "NoActionsError",
    "NoPairError",
    "NotACandidateError",
    "NumericError",
]
