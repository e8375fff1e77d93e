"""Freeze-prefix transfer learning as a defense against model inversion, at desk scale.

Submodules:

- ``tensor``: dense float tensors with tape-based reverse-mode autodiff
- ``models``: MLP classifiers, decoder priors, freeze partitions
- ``data``: IDX loading, synthetic blobs, class-disjoint splits
- ``train``: pre-training, partial fine-tuning, prior and eval-model training, checkpoints
- ``attack``: white-box latent inversion campaigns
- ``fisher``: per-layer empirical Fisher information
- ``metrics``: accuracy, attack accuracy, feature distances, robustness ratio
- ``lab``: configuration, sweeps, reports and the ``invlab`` CLI
"""

__version__ = "0.1.0"
