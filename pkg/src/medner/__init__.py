"""medner: a self-contained clinical-style NER toolkit.

Corpus ingestion / de-identification / splitting, a from-scratch
transformer token classifier with exact backpropagation, Adam training
with reduce-on-plateau decay, and token- plus span-level evaluation.
"""

__version__ = "0.1.0"
