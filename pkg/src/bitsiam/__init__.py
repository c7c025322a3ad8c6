"""SimSiam pretraining initialized from GroupNorm+WS ResNet-V2 checkpoints via GN->BN weight surgery."""

__version__ = "0.1.0"
