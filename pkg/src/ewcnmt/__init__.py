"""Transformer translation with pretrained language models and EWC fine-tuning."""

__version__ = "0.1.0"
