"""Semi-supervised segmentation lab: label-aware mixing and adversarial feature alignment."""

__version__ = "0.1.0"
