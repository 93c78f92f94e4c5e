"""medssc: three-level sequential sentence classification for medical
scientific abstracts. A sentence-level multi-branch classifier, an
abstract-level convolutional-recurrent model, a segment-level soft-label
MLP, and score fusion, with training/evaluation tooling for the PubMed
RCT and NICTA-PIBOSO benchmarks.
"""

__version__ = "0.1.0"
