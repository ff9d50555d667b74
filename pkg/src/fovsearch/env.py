"""The visual-search MDP: state assembly, deterministic dynamics, rollouts.

States carry the full fixation history (perfect memory) plus a cached
nearest-fixation distance field on the model's working grid, so stepping only
takes a pointwise minimum.  Rollouts are greedy or sampled over the policy's
action distribution, terminated by the learned classifier (target-absent) or
by bounding-box containment (target-present).
"""

from __future__ import annotations

import os
from dataclasses import dataclass
import numpy as np

from . import foveation as fov
from . import model as mdl
from .core import (ActionGrid, FeaturePyramid, Fixation, Scanpath, SearchTrial,
                   action_to_fixation, load_pyramid)


@dataclass
class SearchState:
    image_id: str
    task: str
    fixations: list[Fixation]
    dmin: np.ndarray          # nearest-fixation distance on the base grid
    step_count: int = 0

    def resolution_map(self, params: fov.RetinaParams) -> np.ndarray:
        return fov.resolution_from_distance(self.dmin, params.alpha, params.p)


@dataclass
class RolloutConfig:
    mode: str = "greedy"              # "greedy" or "sample"
    max_new_fixations: int = 10       # 6 for target-present protocol
    tau: float = 0.01
    seed: int = 0
    ior_radius: float = 2.0           # baseline samplers only
    termination_threshold: float = 0.5

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ValueError(f"unknown rollout mode '{self.mode}'")
        if self.max_new_fixations < 1:
            raise ValueError("max_new_fixations must be >= 1")


def center_fixation(config: mdl.ModelConfig) -> Fixation:
    return Fixation(config.image_w / 2.0, config.image_h / 2.0)


def reset(trial: SearchTrial, config: mdl.ModelConfig) -> SearchState:
    """Fresh state with the protocol's central initial fixation."""
    f0 = center_fixation(config)
    return SearchState(
        image_id=trial.image_id,
        task=trial.task,
        fixations=[f0],
        dmin=mdl.state_distance_map([f0], config),
        step_count=0,
    )


def step(state: SearchState, action: int, config: mdl.ModelConfig) -> SearchState:
    """Deterministic transition: fixate the action cell's center."""
    f = action_to_fixation(action, config.grid)
    dmin_new = np.minimum(state.dmin, mdl.state_distance_map([f], config))
    return SearchState(
        image_id=state.image_id,
        task=state.task,
        fixations=state.fixations + [f],
        dmin=dmin_new,
        step_count=state.step_count + 1,
    )


def _bbox_contains(bbox, f: Fixation) -> bool:
    bx, by, bw, bh = bbox
    return bx <= f.x <= bx + bw and by <= f.y <= by + bh


def rollout(params: dict, trial: SearchTrial, pyramid: FeaturePyramid,
            config: mdl.ModelConfig, rollout_config: RolloutConfig) -> Scanpath:
    """Predict one scanpath for a trial.

    Greedy mode picks the most probable cell (ties break to the lowest index);
    sample mode draws from the temperature-softmax policy.  Target-absent
    searches stop when the termination classifier fires after a new fixation;
    target-present searches stop once a fixation lands in the target box.
    """
    from .irl import policy_dist

    rng = np.random.default_rng(rollout_config.seed)
    state = reset(trial, config)
    terminated = False

    out, _ = mdl.forward_batch(params, [(pyramid, state.dmin, trial.task)], config)
    q = out[0].q_values
    for _ in range(rollout_config.max_new_fixations):
        probs = policy_dist(q, rollout_config.tau)
        if rollout_config.mode == "greedy":
            action = int(np.argmax(probs))
        else:
            action = int(rng.choice(len(probs), p=probs))
        state = step(state, action, config)

        if trial.present and trial.bbox is not None:
            if _bbox_contains(trial.bbox, state.fixations[-1]):
                terminated = True
                break
            out, _ = mdl.forward_batch(params, [(pyramid, state.dmin, trial.task)], config)
            q = out[0].q_values
        else:
            out, _ = mdl.forward_batch(params, [(pyramid, state.dmin, trial.task)], config)
            q = out[0].q_values
            p_stop = mdl.termination_forward(params, q, len(state.fixations), config)
            if p_stop > rollout_config.termination_threshold:
                terminated = True
                break
    return Scanpath(list(state.fixations), terminated)


def baseline_ior_sample(priority_map: np.ndarray, n: int, ior_radius: float = 2.0,
                        seed: int = 0, greedy: bool = False,
                        grid: ActionGrid = ActionGrid()) -> Scanpath:
    """Sequential sampling from a priority map with inhibition of return.

    After each draw a disc of `ior_radius` cells around the chosen cell is
    zeroed; radius 0 disables inhibition.  The returned scanpath starts at the
    image center like every other scanpath.
    """
    pm = np.asarray(priority_map, dtype=np.float64).copy()
    if pm.shape != (grid.rows, grid.cols):
        raise ValueError(f"priority map shape {pm.shape} != {(grid.rows, grid.cols)}")
    if not (pm > 0).any():
        raise ValueError("priority map must have at least one positive cell")
    rng = np.random.default_rng(seed)
    rows, cols = np.indices(pm.shape)

    fixations = [Fixation(grid.image_w / 2.0, grid.image_h / 2.0)]
    for _ in range(n):
        flat = pm.ravel()
        total = flat.sum()
        if total <= 0:
            flat = np.ones_like(flat)
            total = flat.sum()
        if greedy:
            idx = int(np.argmax(flat))
        else:
            idx = int(rng.choice(flat.size, p=flat / total))
        fixations.append(action_to_fixation(idx, grid))
        if ior_radius > 0:
            r0, c0 = divmod(idx, grid.cols)
            pm[(rows - r0) ** 2 + (cols - c0) ** 2 <= ior_radius ** 2] = 0.0
    return Scanpath(fixations, terminated=False)


# ---------------------------------------------------------------------------
# Pyramid providers
# ---------------------------------------------------------------------------

class PyramidProvider:
    """Resolves image ids to feature pyramids; implementations cache."""

    def get(self, image_id: str) -> FeaturePyramid:
        raise NotImplementedError


class FfmpPyramids(PyramidProvider):
    def __init__(self, directory):
        self.directory = str(directory)
        self._cache: dict[str, FeaturePyramid] = {}

    def get(self, image_id: str) -> FeaturePyramid:
        if image_id not in self._cache:
            path = os.path.join(self.directory, f"{image_id}.ffmp")
            if not os.path.exists(path):
                raise FileNotFoundError(f"pyramid file not found: {path}")
            self._cache[image_id] = load_pyramid(path)
        return self._cache[image_id]


class GaussianPyramids(PyramidProvider):
    """Builds Gaussian pyramids from PNG images on demand."""

    def __init__(self, images_dir):
        self.images_dir = str(images_dir)
        self._cache: dict[str, FeaturePyramid] = {}

    def get(self, image_id: str) -> FeaturePyramid:
        if image_id not in self._cache:
            from PIL import Image

            path = os.path.join(self.images_dir, f"{image_id}.png")
            if not os.path.exists(path):
                raise FileNotFoundError(f"image file not found: {path}")
            with Image.open(path) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            self._cache[image_id] = fov.gaussian_pyramid(np.moveaxis(arr, 2, 0))
        return self._cache[image_id]


class InMemoryPyramids(PyramidProvider):
    def __init__(self, pyramids: dict[str, FeaturePyramid]):
        self._pyramids = dict(pyramids)

    def get(self, image_id: str) -> FeaturePyramid:
        if image_id not in self._pyramids:
            raise FileNotFoundError(f"no pyramid registered for image '{image_id}'")
        return self._pyramids[image_id]
