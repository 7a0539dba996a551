"""Synthetic ground truth, metrics and the end-to-end benchmark."""

from .bench import BenchConfig, run_benchmark
from .metrics import MetricReport, psnr, ssim
from .synth import SceneBundle, SynthConfig, SyntheticScene, synth_scene

__all__ = ["BenchConfig", "MetricReport", "SceneBundle", "SynthConfig", "SyntheticScene", "psnr", "run_benchmark", "ssim", "synth_scene"]
