"""Single-channel speech dereverberation at desk scale.

Subpackage map:

* :mod:`dereverb.autodiff` — tensors, tape, reverse-mode gradients.
* :mod:`dereverb.nn` — layers, Adam, masked sequence loss.
* :mod:`dereverb.model` — architecture variants, normalization, checkpoints.
* :mod:`dereverb.dsp` — STFT analysis/synthesis, phase handling, WAV I/O.
* :mod:`dereverb.acoustics` — image-source room simulation and T60 estimation.
* :mod:`dereverb.pipeline` — dataset synthesis, statistics, batching, training.
* :mod:`dereverb.metrics` — STOI and SRMR objective scores, corpus reports.
* :mod:`dereverb.cli` — the ``dereverb`` command-line tool.
"""

from .autodiff import Rng, Tape, Tensor

__all__ = ["Rng", "Tape", "Tensor"]
__version__ = "0.1.0"
