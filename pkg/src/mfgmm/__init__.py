"""Mean-field variational Bayes for Gaussian mixtures: potentials, CAVI and free-energy landscapes."""

__version__ = "0.1.0"
