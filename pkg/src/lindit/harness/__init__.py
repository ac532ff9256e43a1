"""Experiment harness: benchmarks, toy training, sampling, quantization and caption demos."""
