"""Flow-constrained isotropic Gaussian splatting SLAM on the CPU.

Differentiable tile rasterization of isotropic 3D Gaussians (color, depth,
opacity and composite flow with analytic gradients), per-frame camera
tracking, keyframe joint pose+map optimization under an optical-flow
constraint, windowed bundle adjustment, two-stage global refinement, and
the evaluation / synthetic-data tooling to verify all of it.
"""

from .core import (CameraIntrinsics, Frame, Gaussian, GaussianMap, Pose,
                   project_point, quaternion_to_rotation, rotation_to_quaternion,
                   se3_exp, se3_log, unproject_pixel)
from .losses import (LossWeights, loss_depth_reg, loss_flow, loss_refine,
                     loss_rgb, loss_scale_invariant, ssim, ssim_with_grad)
from .metrics import (MetricsReport, Trajectory, ate_rmse, depth_rmse, psnr,
                      read_trajectory, write_trajectory)
from .renderer import (GradientBundle, RenderOutput, Splat2D, flow_backward,
                       project_gaussian, render, render_backward, render_flow)
from .slam import (FlowContext, SlamConfig, SlamResult, evaluate_objective,
                   global_refine, initialize, is_keyframe, local_ba,
                   optimize_keyframe, run, track_nonkeyframe)
from .synth import SynthScene, generate as synth_generate

__version__ = "0.1.0"
