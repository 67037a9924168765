"""Cross-domain metric learning toolkit: relative triplet loss, batch-normalized
embedding heads, RMAC near-duplicate audits, distillation and double guidance."""

__version__ = "0.1.0"
