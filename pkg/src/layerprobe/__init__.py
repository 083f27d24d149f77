"""Layer-wise Grad-CAM deviation of a small CNN under coverage-guided
adversarial perturbations versus matched Gaussian noise."""

__version__ = "0.1.0"
