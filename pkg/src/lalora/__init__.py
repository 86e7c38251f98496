"""Differentially private federated LoRA with local alternating updates.

Modules: numkit (linear algebra, RNG, convolution), lora, dp, accountant,
smoothing, fedsim, theory, diagnostics, tasks, config, cli.
"""

__version__ = "0.1.0"
