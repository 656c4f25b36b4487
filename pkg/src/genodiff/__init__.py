"""Evolution-conditioned genotype-to-phenotype image diffusion at desk scale."""

__version__ = "0.1.0"
