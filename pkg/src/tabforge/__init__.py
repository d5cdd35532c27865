"""tabforge: mixed-type tabular data synthesis via a latent diffusion model.

Pipeline: column tokenizer -> transformer beta-VAE -> score-based diffusion
in the flattened latent space -> reverse-SDE/ODE sampling -> detokenize and
invert preprocessing. Includes masked-resampling imputation and a fidelity
metric suite (column densities, pair correlations, ML-efficiency gap).
"""

__version__ = "0.1.0"
