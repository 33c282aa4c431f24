"""Early-fusion multimodal federated learning simulator with incomplete modalities."""

__version__ = "0.1.0"
