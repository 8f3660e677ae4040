"""Command line harness for training, quantizing, correcting and evaluating toy diffusion models."""
