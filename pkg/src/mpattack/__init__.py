"""Multiple Perturbation Attack toolkit."""
