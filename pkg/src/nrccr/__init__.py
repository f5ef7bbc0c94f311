"""Noise-robust cross-lingual cross-modal retrieval, at desk scale.

Subpackages:

* ``diffmath``   - float64 tensors with taped reverse-mode gradients
* ``encoders``   - visual/text transformers, cross-attention teacher, heads
* ``objectives`` - triplet, distillation, cycle and adversarial losses
* ``corpus``     - synthetic bilingual world with a seeded noisy channel
* ``trainer``    - Adam, deterministic training loop, checkpoints
* ``retrieval``  - scoring, ranking and evaluation metrics
* ``cli``        - command-line orchestration and experiment harnesses
"""

__version__ = "0.1.0"

from .diffmath import Tape, Tensor, check_gradients

__all__ = ["Tape", "Tensor", "check_gradients", "__version__"]
