"""Desk-scale teacher-student distillation lab for sensorimotor driving."""

__version__ = "0.1.0"
