"""Desk-scale codec trainer: four jointly trained rate points plus a
derived fifth, exported in the qcodec model format."""

__version__ = "0.1.0"
