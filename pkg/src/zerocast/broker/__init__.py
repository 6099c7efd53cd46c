"""The broker: metadata state machine plus the socket daemon around it."""

from zerocast.broker.state import BrokerConfig, BrokerState

__all__ = ["BrokerConfig", "BrokerState"]
