"""Desk-scale lab for speaker-identity leakage from an adapted seq2seq recognizer.

Modules: voice/features/corpus build a synthetic multi-speaker corpus;
asr trains and probes the recognizer; attack extracts ghost embeddings from
noise; svd_transfer swaps their factor structure with a genuine template;
synthesis turns embeddings back into audio; metrics scores verification
trials; pipeline/cli orchestrate everything into resumable artifacts.
"""

__version__ = "0.1.0"
