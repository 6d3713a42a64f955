"""Desk-scale lab for distilling vision-language teachers into vision-only students."""

__version__ = "0.1.0"
