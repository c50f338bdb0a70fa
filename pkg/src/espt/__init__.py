"""Episodic few-shot image classification with spatial-consistency self-supervision.

tensor:      n-d arrays with reverse-mode autodiff and an SPD linear solve
backbone:    residual convolutional feature extractor producing spatial maps
episodes:    dataset splits, n-way k-shot episode sampling, synthetic data
transforms:  quarter-turn rotations for images and feature maps
losses:      ridge-reconstruction classifier and the consistency pretext loss
training:    episodic SGD training loop with Nesterov momentum
evaluation:  many-task accuracy estimation with confidence intervals
sweep:       paired-seed ablation sweeps over the loss weight / transform set
gradcheck:   finite-difference gradient verification
config:      run configuration files
cli:         command-line entry points
"""

from espt.tensor import Tensor, backward, solve_spd, stop_grad

__all__ = ["Tensor", "backward", "solve_spd", "stop_grad"]
__version__ = "0.1.0"
