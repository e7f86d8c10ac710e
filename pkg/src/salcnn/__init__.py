"""Bearing remaining-useful-life estimation: STFT spectrograms, a CNN with
channel/spatial attention and an LSTM, trained from scratch on numpy."""

__version__ = "0.1.0"
