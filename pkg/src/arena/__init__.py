"""Self-hostable platform for educational competitions with anonymous,
near-real-time leaderboards."""

__version__ = "0.1.0"
