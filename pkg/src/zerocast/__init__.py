"""Same-host zero-copy publish/subscribe over shared-memory arenas."""

from zerocast.client import (
    BaselineMessage,
    BaselinePublisher,
    Context,
    LoanedMessage,
    Publisher,
    SharedMessage,
    Subscription,
)
from zerocast.schema import FIXED128, POINTCLOUD, Field, Schema, Seq

__all__ = [
    "FIXED128",
    "POINTCLOUD",
    "BaselineMessage",
    "BaselinePublisher",
    "Context",
    "Field",
    "LoanedMessage",
    "Publisher",
    "Schema",
    "Seq",
    "SharedMessage",
    "Subscription",
]
