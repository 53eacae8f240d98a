"""
PointABM

Point cloud classification with a hybrid Transformer + bidirectional
state-space encoder, built on a small numpy autodiff engine.

Provides:
- Patch grouping (farthest point sampling, kNN) and serialization
- Selective scan with a hand-written backward pass
- Classifier training, masked-autoencoder pretraining, ablations
- Binary checkpoints and a hash-chained run event log
"""

import logging

__version__ = '0.1.0'

logging.getLogger(__name__).addHandler(logging.NullHandler())
