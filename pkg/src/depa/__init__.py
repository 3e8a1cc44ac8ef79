"""Self-supervised spectrogram embeddings and a BLSTM depression detector."""

__version__ = "0.1.0"
