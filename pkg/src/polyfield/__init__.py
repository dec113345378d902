"""Statistics-driven synthetic 3D orientation-field generation.

Pipeline: crystal orientations are reduced to three bounded channels
(rogsh); multi-channel stationary covariances are parameterized and
screened (mosm); Gaussian fields realize the long-range statistics
(mogrf); a second-order denoising sampler with masked-value and
plane-statistics conditioning adds structure and solves the two
reconstruction tasks (diffusion); datasets, file formats, and analysis
live in pipeline / pmf1, and cli exposes everything as subcommands.
"""
from . import cli, diffusion, mogrf, mosm, pipeline, pmf1, rogsh, spatial_stats
from .diffusion import (GaussianDenoiser, Mask, SamplerConfig, inpaint_cond,
                        lgd_refine, noise_schedule, ortho_stats_cond)
from .mogrf import MogrfSpec
from .mosm import CovarianceGrid, MosmParams, ParamBounds
from .pmf1 import read_field, write_field
from .rogsh import euler_field_to_channels, euler_to_coeffs
from .spatial_stats import (OrthoStats, StatsMap, ortho_stats,
                            ortho_stats_from_images, stats_loss_and_grad,
                            two_point_stats)

__version__ = "0.1.0"
