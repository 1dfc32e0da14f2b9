"""One joint noise-prediction network for marginal, conditional, and
joint generation over paired latents, verified against analytic oracles."""

__version__ = "0.1.0"
