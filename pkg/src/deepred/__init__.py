"""Unsupervised image restoration: an untrained generator network regularized by a plug-in denoiser."""

from .admm import AdmmSolver, SolverConfig, TraceRecord, run, run_dip, run_red
from .denoisers import Denoiser, DenoiserSpec, denoise
from .generator import Generator, GeneratorConfig
from .imaging import Image, degrade, load_png, psnr, save_png
from .operators import blur_op, downsample_op, identity_op, mask_op

__version__ = "0.1.0"
