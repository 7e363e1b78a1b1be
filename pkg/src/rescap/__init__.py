"""Sequence-based DNA-binding protein prediction toolkit.

Submodules:
    seqio       FASTA parsing, manifests, duplicate detection
    featurize   one-hot encoding and embedding stores (PBEM format)
    redundancy  global-alignment dataset auditing
    autodiff    reverse-mode differentiable tensor core
    model       residual dilated encoder + capsule network and baselines
    harness     training, cross-validation and metrics
    cli         command-line interface
"""

__version__ = "0.1.0"
