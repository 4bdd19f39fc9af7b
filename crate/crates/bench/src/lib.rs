//! Benchmark fixtures for the captioning kernels.
