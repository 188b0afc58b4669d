"""Two-view relative pose toolkit: a sparse-keypoint attention regressor plus a
classical essential-matrix baseline, synthetic data, metrics and benchmarks."""

__version__ = "0.1.0"
