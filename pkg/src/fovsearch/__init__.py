"""Foveated feature maps, inverse-RL gaze policies, and scanpath metrics."""

from . import autodiff, core, env, foveation, irl, metrics, model
from .core import (ActionGrid, FeaturePyramid, Fixation, Scanpath, SearchTrial,
                   action_to_fixation, fixation_to_action, load_trials,
                   read_tensor_container, write_tensor_container)
from .foveation import (RetinaParams, foveate_image, gaussian_pyramid,
                        half_max_resolution, resolution_map, transfer_amplitude,
                        weight_maps)
from .model import ModelConfig, forward, init_model, termination_forward

__version__ = "0.1.0"
