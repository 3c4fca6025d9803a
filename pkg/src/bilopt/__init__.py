"""Bilevel optimization of training instructions on synthetic task suites.

Submodules
----------
autodiff
    Tape-based reverse-mode differentiation with higher-order support.
model
    Toy conditional sequence model and checkpoint format.
instructions
    Learnable instruction embedders and extractors.
bilevel
    Inner loop, Neumann/IFT hypergradients, oracles and the training driver.
tasks
    Synthetic task families, splits, candidate pools and clustering.
harness
    Metrics, evaluation, experiments and the command-line interface.
"""

__version__ = "0.1.0"
