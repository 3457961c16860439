"""Music source separation with STFT phase features.

Derivative-based phase pre-processing (instantaneous frequency and group
delay with STFT shift correction), small dense networks estimating
instrument amplitudes from mixture amplitude and/or phase, Wiener
post-filtering, oracle baselines and SDR scoring.
"""

__version__ = "0.1.0"

INSTRUMENTS = ("bass", "drums", "vocals", "other")
