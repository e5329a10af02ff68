"""Simulation toolkit for RIS-aided, spectrogram-based spectrum sensing.

Modules: ``waveform`` (CP-OFDM synthesis), ``channel`` (RIS cascaded channel
and greedy phase optimizer), ``spectrogram`` (STFT and image rendering),
``dataset`` (corpus generation and annotation export), ``detector``
(classical baseline detector), ``evaluation`` (COCO-style AP) and ``cli``.
"""

__version__ = "0.1.0"
