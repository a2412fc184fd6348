"""commlight: decentralized multi-agent Q-learning with learned,
per-recipient, per-coordinate gated messaging, trained and evaluated on
a deterministic queue-based traffic-signal simulator."""

__version__ = "0.1.0"
