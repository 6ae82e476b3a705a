"""Desk-scale CPU differentiable Gaussian splatting where every splat carries
a 16-dim identity encoding, enabling jointly trained instance segmentation
and group-level scene editing."""

from .scene import (Camera, Classifier, Gaussian, IDENTITY_DIM, InitConfig,
                    Scene, activated, deactivated, init_scene, rgb_to_sh0,
                    sh0_to_rgb)
from .projection import (Projected2D, Projection, build_cov3d, cull_and_sort,
                         project_gaussian, project_scene)
from .rasterizer import RenderOutput, SceneGradients, render_backward, \
    render_forward
from .losses import (identity_2d_loss, identity_3d_loss, reconstruction_loss,
                     ssim_value, total_loss)
from .trainer import TrainConfig, TrainingView, densify_and_prune, train
from .editor import (EditOperation, EditScript, FinetuneTarget, GroupLabels,
                     apply_edit_script, classify_gaussians, finetune_group,
                     inpaint_scaffold, recolor_group, recompose_swap,
                     remove_group, select_group)
from .associate import associate_masks_greedy
from .metrics import match_ids, mbiou, miou, psnr, segmentation_scores, ssim
from .synth import (BlobSceneSpec, ShellSceneSpec, SynthResult, look_at_camera,
                    make_blob_dataset, make_shell_dataset, render_id_mask,
                    ring_cameras, shuffle_mask_labels)
from .dataio import (DatasetMeta, ViewRecord, load_dataset, load_edit_script,
                     load_image, load_mask, load_points, load_scene,
                     save_dataset, save_image, save_mask, save_points,
                     save_scene, write_training_log)
from .gradcheck import GradCheckReport, run_gradient_suite
from .cli import cli

__version__ = "0.1.0"

__all__ = [
    "Camera", "Classifier", "Gaussian", "IDENTITY_DIM", "InitConfig", "Scene",
    "activated", "deactivated", "init_scene", "rgb_to_sh0", "sh0_to_rgb",
    "Projected2D", "Projection", "build_cov3d", "cull_and_sort",
    "project_gaussian", "project_scene",
    "RenderOutput", "SceneGradients", "render_backward", "render_forward",
    "identity_2d_loss", "identity_3d_loss", "reconstruction_loss",
    "ssim_value", "total_loss",
    "TrainConfig", "TrainingView", "densify_and_prune", "train",
    "EditOperation", "EditScript", "FinetuneTarget", "GroupLabels",
    "apply_edit_script", "classify_gaussians", "finetune_group",
    "inpaint_scaffold", "recolor_group", "recompose_swap", "remove_group",
    "select_group",
    "associate_masks_greedy",
    "match_ids", "mbiou", "miou", "psnr", "segmentation_scores", "ssim",
    "BlobSceneSpec", "ShellSceneSpec", "SynthResult", "look_at_camera",
    "make_blob_dataset", "make_shell_dataset", "render_id_mask",
    "ring_cameras", "shuffle_mask_labels",
    "DatasetMeta", "ViewRecord", "load_dataset", "load_edit_script",
    "load_image", "load_mask", "load_points", "load_scene", "save_dataset",
    "save_image", "save_mask", "save_points", "save_scene",
    "write_training_log",
    "GradCheckReport", "run_gradient_suite",
    "cli",
]
