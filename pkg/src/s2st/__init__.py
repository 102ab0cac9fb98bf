"""Desk-scale direct speech-to-speech translation.

Speech in, translated speech out, with no intermediate text pass: a
subsampling Conformer encoder, an attention-coupled autoregressive
phoneme decoder, and a duration-driven spectrogram synthesizer, all
trained jointly on one tape-based numpy autodiff engine.
"""

__version__ = "0.1.0"
