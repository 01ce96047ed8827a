"""Parameter-efficient adaptation of sequence models to event-log data."""

__version__ = "0.1.0"
