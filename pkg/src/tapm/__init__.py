"""Transfer attacks from public models: attacks, games, and the PubDef defense at desk scale."""

__version__ = "0.1.0"
