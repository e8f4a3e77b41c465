"""DPI toolkit for OPC UA connection-protocol traffic and HEL flooding."""

__version__ = "0.1.0"
