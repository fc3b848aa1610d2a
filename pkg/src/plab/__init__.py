"""Layer-wise plasticity lab: tiny transformers, fine-tuning conditions and representational-change metrics."""

__version__ = "0.1.0"
