"""Differentiable underwater gaussian splatting.

Renders a gaussian point cloud to clean radiance and depth, pushes the
result through a learnable spatially varying water model, scores every
gaussian for floater-likeness and prunes the worst, all with hand-derived
gradients end to end.
"""

from .core import (CameraView, Gaussian3D, GaussianCloud, Image, SH_C0,
                   covariance_from_params, inverse_sigmoid,
                   inverse_softplus, quat_to_rotation, sh_basis, sh_eval,
                   sigmoid, softplus)
from .errors import (CheckpointError, DivergenceDetected, FewerThanKViews,
                     IndexOutOfRange, MalformedPLY, NonDeterministicForward,
                     TapeMissing, UwsplatError)
from .medium import (BETA_PRIOR, MediumParams, VMGrid, compose_underwater,
                     forward_simulate, grid_query, make_medium,
                     make_vm_grid, vm_reconstruct, vm_values_dense)
from .mlp import DenseNet
from .raster import (ProjectedSplats, RasterSession, RenderBundle,
                     Splat2D, project_gaussian, rasterize, render_depth)
from .pruning import (PruneDecision, PruneWeights, ScoreRecord,
                      combined_score, effective_opacity, physics_component,
                      prune, uncertainty_component, view_statistics)
from .losses import (LossWeights, loss_beta, loss_img, loss_papsl,
                     loss_total, loss_z, psnr, ssim)
from .autodiff import (ForwardOptions, FrozenScores, GradCheckReport,
                       GradientBundle, backward_pipeline,
                       build_gradcheck_scene, finite_diff_check,
                       forward_pipeline, freeze_scores)
from .synthetic import (HeightField, SyntheticScene, exact_surface_depth,
                        floater_ratio, invert_simulation, make_scene)
from .trainer import TrainConfig, TrainedModel, render_eval, train
from .io import (load_checkpoint, load_scene, read_point_cloud,
                 save_checkpoint, save_scene, write_point_cloud)

__version__ = "0.1.0"
