"""The learnable fixation-policy network.

Pipeline per state: project each pyramid level with a 1x1 conv to a common
channel count, bilinearly upsample to the stride-2 base grid, blend with the
fixation-contingent weight maps, then run a shared trunk of three stride-2
conv blocks (x8 spatial reduction) feeding an attention head (one map per
search target) and an object-center head (80 sigmoid maps).  The Q-row of the
active target, flattened row-major, is the action-value vector over the grid;
a small MLP on top of it predicts search termination.

Forward passes record an autodiff graph; `backward` yields gradients for every
parameter including the retina scalars behind the foveation math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import foveation as fov
from .core import (FFMW_MAGIC, TASKS, ActionGrid, FeaturePyramid, Fixation,
                   read_tensor_container, write_tensor_container)


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_h: int = 320
    image_w: int = 512
    ffm_channels: int = 128
    pyramid_channels: tuple = (3, 3, 3, 3, 3)
    trunk_blocks: int = 3          # each block halves the spatial dims
    head_hidden: int = 64
    term_hidden: int = 128
    tasks: tuple = TASKS
    n_object_classes: int = 80
    pixels_per_degree: float = 4.57
    alpha_init: float = 2.5
    sigma_init: float = 0.3
    max_scanpath_length: int = 10  # normalizes the termination time feature
    precision: str = "standard"    # "standard" (f32) or "high" (f64)

    def __post_init__(self):
        down = 2 * 2 ** self.trunk_blocks
        if self.image_h % down or self.image_w % down:
            raise ValueError(f"image dims must be divisible by {down}")

    @property
    def base_dims(self) -> tuple[int, int]:
        return self.image_h // 2, self.image_w // 2

    @property
    def out_dims(self) -> tuple[int, int]:
        return (self.base_dims[0] // 2 ** self.trunk_blocks,
                self.base_dims[1] // 2 ** self.trunk_blocks)

    @property
    def n_actions(self) -> int:
        return self.out_dims[0] * self.out_dims[1]

    @property
    def grid(self) -> ActionGrid:
        rows, cols = self.out_dims
        return ActionGrid(rows=rows, cols=cols,
                          image_h=self.image_h, image_w=self.image_w)

    @property
    def dtype(self):
        return np.float64 if self.precision == "high" else np.float32

    def task_index(self, task: str) -> int:
        try:
            return self.tasks.index(task)
        except ValueError:
            raise KeyError(f"unknown task '{task}'; valid tasks: {list(self.tasks)}")


def softplus_inverse(y: float) -> float:
    return float(np.log(np.expm1(y)))


def init_model(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Create the parameter store; deterministic given the seed.

    Conv and linear weights use fan-in-scaled uniform init; the retina scalars
    are set so that softplus recovers the configured alpha and sigma.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}

    def conv(name, cout, cin, k):
        bound = 1.0 / math.sqrt(cin * k * k)
        params[f"{name}_w"] = rng.uniform(-bound, bound, (cout, cin, k, k)).astype(np.float32)
        params[f"{name}_b"] = rng.uniform(-bound, bound, cout).astype(np.float32)

    def linear(name, cin, cout):
        bound = 1.0 / math.sqrt(cin)
        params[f"{name}_w"] = rng.uniform(-bound, bound, (cin, cout)).astype(np.float32)
        params[f"{name}_b"] = rng.uniform(-bound, bound, cout).astype(np.float32)

    f = config.ffm_channels
    for i, cin in enumerate(config.pyramid_channels, start=1):
        conv(f"proj{i}", f, cin, 1)
    for k in range(1, config.trunk_blocks + 1):
        conv(f"trunk{k}_conv1", f, f, 3)
        params[f"trunk{k}_ln1_g"] = np.ones(f, dtype=np.float32)
        params[f"trunk{k}_ln1_b"] = np.zeros(f, dtype=np.float32)
        conv(f"trunk{k}_conv2", f, f, 3)
        params[f"trunk{k}_ln2_g"] = np.ones(f, dtype=np.float32)
        params[f"trunk{k}_ln2_b"] = np.zeros(f, dtype=np.float32)
    conv("fix_head_conv1", config.head_hidden, f, 3)
    conv("fix_head_conv2", len(config.tasks), config.head_hidden, 3)
    conv("det_head_conv1", config.head_hidden, f, 3)
    conv("det_head_conv2", config.n_object_classes, config.head_hidden, 3)
    linear("term_fc1", config.n_actions + 1, config.term_hidden)
    linear("term_fc2", config.term_hidden, 1)
    params["retina_alpha_raw"] = np.array(softplus_inverse(config.alpha_init), dtype=np.float32)
    params["retina_sigma_raw"] = np.array(softplus_inverse(config.sigma_init), dtype=np.float32)
    return params


def n_parameters(params: dict[str, np.ndarray]) -> int:
    return int(sum(p.size for p in params.values()))


@dataclass
class ModelOutput:
    attention_maps: np.ndarray      # (tasks, rows, cols)
    center_maps: np.ndarray         # (classes, rows, cols), sigmoid
    q_values: np.ndarray            # (rows * cols,), active task's map flattened
    termination_prob: Optional[float] = None


class CompGraph:
    """Recorded forward pass of a batch; consumed by exactly one backward."""

    def __init__(self, config: ModelConfig, pvars: dict[str, ad.Var],
                 attention: ad.Var, centers: ad.Var, q_vars: list[ad.Var]):
        self.config = config
        self.pvars = pvars
        self.attention = attention     # (batch, tasks, rows, cols)
        self.centers = centers         # (batch, classes, rows, cols)
        self.q_vars = q_vars           # per item, (n_actions,)
        self.term_vars: list = []      # filled by termination_forward
        self._consumed = False

    def _consume(self):
        if self._consumed:
            raise ad.GraphConsumedError("backward already ran on this graph")
        self._consumed = True

    def gradients(self) -> dict[str, np.ndarray]:
        return {name: (v.grad if v.grad is not None else np.zeros_like(v.data))
                for name, v in self.pvars.items()}

    def backward_from(self, loss: ad.Var) -> dict[str, np.ndarray]:
        """Run the reverse pass from a scalar loss built on this graph's vars."""
        self._consume()
        loss.backward()
        return self.gradients()


def _upsampled_levels(pyramid: FeaturePyramid, base_dims: tuple[int, int], dtype):
    """Raw pyramid levels resized to the base grid; cached on the pyramid.

    The 1x1 projection commutes exactly with bilinear resizing (both are
    linear and the resize preserves constants), so upsampling first lets the
    constant part live outside the autodiff graph.
    """
    key = (tuple(base_dims), np.dtype(dtype).name)
    cache = getattr(pyramid, "_upsampled", None)
    if cache is None or cache[0] != key:
        h2, w2 = base_dims
        ups = [np.ascontiguousarray(
                   ad.bilinear_resize(np.asarray(lvl, dtype=dtype), h2, w2)
                   .transpose(1, 2, 0))          # NHWC for the compute path
               for lvl in pyramid.levels]
        pyramid._upsampled = (key, ups)
    return pyramid._upsampled[1]


def _blend_batch(levels: list[ad.Var], weights: list) -> ad.Var:
    """Fused M = sum_i W_i (.) P_i over a batch sharing one image.

    `levels` hold (H, W, channels) vars; `weights` hold (batch, H, W, 1)
    vars or constant arrays.
    """
    from . import _kernels as K

    n = next(np.asarray(ad._val(w)).shape[0] for w in weights)
    h, w_, c = levels[0].shape
    k = len(levels)
    lv = [ad._val(l) for l in levels]
    wv = [ad._val(w) for w in weights]
    parents = tuple(p for p in (*levels, *weights) if isinstance(p, ad.Var))

    if K.HAVE_NUMBA and n * h * w_ * c >= 1 << 18:
        lstack = np.stack([l.reshape(h * w_, c) for l in lv])
        wstack = np.stack([w.reshape(-1, h * w_) for w in wv])
        out = ad.Var(K.blend_forward(lstack, wstack).reshape(n, h, w_, c),
                     parents=parents)

        def backward(g):
            need_l = np.array([isinstance(l, ad.Var) for l in levels])
            need_w = np.array([isinstance(w, ad.Var) for w in weights])
            dlev, dwei = K.blend_backward(
                np.ascontiguousarray(g.reshape(n, h * w_, c)),
                lstack, wstack, need_l, need_w)
            for i in range(k):
                if need_l[i]:
                    levels[i]._accum(dlev[i].reshape(h, w_, c), owned=True)
                if need_w[i]:
                    weights[i]._accum(dwei[i].reshape(n, h, w_, 1), owned=True)

        out._backward = backward
        return out

    out_data = np.zeros((n, h, w_, c), dtype=lv[0].dtype)
    for li, wi in zip(lv, wv):
        out_data += li * wi
    out = ad.Var(out_data, parents=parents)

    def backward(g):
        for lvl, li, wgt, wi in zip(levels, lv, weights, wv):
            if isinstance(lvl, ad.Var):
                lvl._accum((g * wi).sum(axis=0), owned=True)
            if isinstance(wgt, ad.Var):
                wgt._accum((g * li).sum(axis=-1, keepdims=True), owned=True)

    out._backward = backward
    return out


def _scaled_fixations(fixations, config: ModelConfig):
    h2, w2 = config.base_dims
    sy, sx = h2 / config.image_h, w2 / config.image_w
    return [Fixation(f[0] * sx, f[1] * sy) for f in fixations]


def state_distance_map(fixations: Sequence[Fixation], config: ModelConfig) -> np.ndarray:
    """Nearest-fixation distance field on the base grid (cacheable per state)."""
    return fov.min_distance_map(_scaled_fixations(fixations, config), config.base_dims)


def forward_batch(params: dict[str, np.ndarray], items: list, config: ModelConfig,
                  ) -> tuple[list[ModelOutput], CompGraph]:
    """Run the network on a batch of (pyramid, fixations-or-distance-map, task).

    Items sharing a FeaturePyramid object share its projection subgraph, so
    expert batches over few images stay cheap.  Each item is a tuple
    ``(pyramid, fixations, task)`` where ``fixations`` may alternatively be a
    precomputed distance map from `state_distance_map`.
    """
    dtype = config.dtype
    pvars = {name: ad.Var(arr.astype(dtype)) for name, arr in params.items()}
    f = config.ffm_channels
    h2, w2 = config.base_dims

    alpha = ad.softplus(pvars["retina_alpha_raw"])
    sigma = ad.softplus(pvars["retina_sigma_raw"])

    # Group items by pyramid identity.
    groups: dict[int, dict] = {}
    order = []
    for idx, (pyr, fx, task) in enumerate(items):
        if pyr.channel_counts != tuple(config.pyramid_channels):
            raise ValueError(f"pyramid channels {pyr.channel_counts} do not match "
                             f"config {tuple(config.pyramid_channels)}")
        g = groups.setdefault(id(pyr), {"pyr": pyr, "members": []})
        g["members"].append(idx)
        order.append(idx)

    task_indices = [config.task_index(task) for _, _, task in items]

    # Per-pyramid projection on the (cached) upsampled levels (NHWC inside).
    blended_parts = []
    member_order = []
    for g in groups.values():
        pyr: FeaturePyramid = g["pyr"]
        raw_ups = _upsampled_levels(pyr, (h2, w2), dtype)
        ups = []
        for i, level in enumerate(raw_ups, start=1):
            p = ad.conv2d_nhwc(level[None], pvars[f"proj{i}_w"], pvars[f"proj{i}_b"])
            ups.append(ad.reshape(p, (h2, w2, f)))

        # Resolution and weight maps for every member state at once.
        dmins = []
        for m in g["members"]:
            fx = items[m][1]
            dmin = fx if isinstance(fx, np.ndarray) else state_distance_map(fx, config)
            dmins.append(dmin.astype(dtype))
        dmin_stack = np.stack(dmins)                      # (n, h2, w2)
        wmaps = fov.weight_maps_from_distance(dmin_stack, alpha, sigma,
                                              config.pixels_per_degree)
        wmaps = [ad.reshape(w, (len(dmins), h2, w2, 1)) if isinstance(w, ad.Var)
                 else w.reshape(len(dmins), h2, w2, 1)
                 for w in wmaps]
        used = [(lvl, w) for lvl, w in zip(ups, wmaps)
                if isinstance(w, ad.Var) or w.any()]
        blended_parts.append(_blend_batch([u for u, _ in used], [w for _, w in used]))
        member_order.extend(g["members"])

    m = ad.concat(blended_parts, axis=0) if len(blended_parts) > 1 else blended_parts[0]

    # Shared trunk: three conv blocks, each halving the spatial dims.
    x = m
    for k in range(1, config.trunk_blocks + 1):
        x = ad.conv2d_nhwc(x, pvars[f"trunk{k}_conv1_w"], pvars[f"trunk{k}_conv1_b"],
                           stride=1, pad=1)
        x = ad.relu(ad.layernorm_last(x, pvars[f"trunk{k}_ln1_g"],
                                      pvars[f"trunk{k}_ln1_b"]))
        x = ad.conv2d_nhwc(x, pvars[f"trunk{k}_conv2_w"], pvars[f"trunk{k}_conv2_b"],
                           stride=2, pad=1)
        x = ad.relu(ad.layernorm_last(x, pvars[f"trunk{k}_ln2_g"],
                                      pvars[f"trunk{k}_ln2_b"]))

    fix = ad.conv2d_nhwc(x, pvars["fix_head_conv1_w"], pvars["fix_head_conv1_b"],
                         stride=1, pad=1)
    fix = ad.conv2d_nhwc(ad.relu(fix), pvars["fix_head_conv2_w"],
                         pvars["fix_head_conv2_b"], stride=1, pad=1)
    det = ad.conv2d_nhwc(x, pvars["det_head_conv1_w"], pvars["det_head_conv1_b"],
                         stride=1, pad=1)
    det = ad.conv2d_nhwc(ad.relu(det), pvars["det_head_conv2_w"],
                         pvars["det_head_conv2_b"], stride=1, pad=1)
    det = ad.clip(ad.sigmoid(det), 1e-4, 1.0 - 1e-4)

    # Undo the grouping permutation.
    n_items = len(items)
    q_vars: list[Optional[ad.Var]] = [None] * n_items
    outputs: list[Optional[ModelOutput]] = [None] * n_items
    for slot, item_idx in enumerate(member_order):
        t = task_indices[item_idx]
        q = ad.reshape(fix[slot, :, :, t], (config.n_actions,))
        q_vars[item_idx] = q
        outputs[item_idx] = ModelOutput(
            attention_maps=np.asarray(fix.data[slot], dtype=np.float64)
            .transpose(2, 0, 1),
            center_maps=np.asarray(det.data[slot], dtype=np.float64)
            .transpose(2, 0, 1),
            q_values=np.asarray(q.data, dtype=np.float64),
        )

    graph = CompGraph(config, pvars, attention=fix, centers=det, q_vars=q_vars)
    graph._slot_of_item = {item: slot for slot, item in enumerate(member_order)}
    return outputs, graph


def forward(params: dict[str, np.ndarray], pyramid: FeaturePyramid,
            fixations: Sequence[Fixation], task: str, config: ModelConfig,
            ) -> tuple[ModelOutput, CompGraph]:
    """Single-state forward pass; see `forward_batch`."""
    outs, graph = forward_batch(params, [(pyramid, list(fixations), task)], config)
    return outs[0], graph


def termination_forward(params_or_graph, q_values, n_prev_fixations: int,
                        config: ModelConfig):
    """Probability that the search stops at this state.

    Input is the Q-vector concatenated with the fixation count scaled by the
    maximum scanpath length.  Accepts a plain parameter dict with a numpy
    Q-vector (inference) or a CompGraph with one of its recorded Q vars
    (training), in which case the result joins the graph.
    """
    if n_prev_fixations < 1:
        raise ValueError("n_prev_fixations must be >= 1")
    t = n_prev_fixations / config.max_scanpath_length
    if isinstance(params_or_graph, CompGraph):
        graph = params_or_graph
        pv = graph.pvars
        q = q_values
        x = ad.reshape(ad.concat([q, np.array([t], dtype=q.dtype)]), (1, -1))
        h = ad.relu(ad.matmul(x, pv["term_fc1_w"]) + pv["term_fc1_b"])
        out = ad.sigmoid(ad.matmul(h, pv["term_fc2_w"]) + pv["term_fc2_b"])
        prob = ad.reshape(out, ())
        graph.term_vars.append(prob)
        return prob
    params = params_or_graph
    x = np.concatenate([np.asarray(q_values, dtype=np.float64), [t]])
    h = np.maximum(x @ params["term_fc1_w"] + params["term_fc1_b"], 0.0)
    z = float(h @ params["term_fc2_w"] + params["term_fc2_b"])
    return 1.0 / (1.0 + math.exp(-z))


def termination_forward_batch(graph: CompGraph, q_vars: list, n_prev_list,
                              config: ModelConfig) -> ad.Var:
    """Batched termination head over recorded Q vars; returns a (batch,) Var."""
    pv = graph.pvars
    dtype = q_vars[0].dtype
    t = (np.asarray(n_prev_list, dtype=dtype).reshape(-1, 1)
         / config.max_scanpath_length)
    qmat = ad.concat([ad.reshape(q, (1, -1)) for q in q_vars], axis=0)
    x = ad.concat([qmat, t], axis=1)
    h = ad.relu(ad.matmul(x, pv["term_fc1_w"]) + pv["term_fc1_b"])
    out = ad.sigmoid(ad.matmul(h, pv["term_fc2_w"]) + pv["term_fc2_b"])
    probs = ad.reshape(out, (-1,))
    graph.term_vars.append(probs)
    return probs


def backward(graph: CompGraph, output_gradients: dict) -> dict[str, np.ndarray]:
    """Reverse pass seeded with gradients on the recorded outputs.

    `output_gradients` may hold "attention_maps", "center_maps" (arrays shaped
    like the batch outputs) and/or "termination_prob" (list of scalars, one per
    recorded termination query).  Returns gradients named like the params.
    """
    graph._consume()
    seeds = []
    if "attention_maps" in output_gradients:
        g = np.asarray(output_gradients["attention_maps"], dtype=graph.attention.dtype)
        g = g.reshape((-1,) + g.shape[-3:]).transpose(0, 2, 3, 1)
        seeds.append((graph.attention, g.reshape(graph.attention.shape)))
    if "center_maps" in output_gradients:
        g = np.asarray(output_gradients["center_maps"], dtype=graph.centers.dtype)
        g = g.reshape((-1,) + g.shape[-3:]).transpose(0, 2, 3, 1)
        seeds.append((graph.centers, g.reshape(graph.centers.shape)))
    if "termination_prob" in output_gradients:
        for tv, g in zip(graph.term_vars, output_gradients["termination_prob"]):
            seeds.append((tv, np.asarray(g, dtype=tv.dtype).reshape(tv.shape)))
    if not seeds:
        raise ValueError("no output gradients given")
    # Tie the seeds into one scalar root so a single traversal covers them all.
    total = None
    for var, g in seeds:
        term = ad.vsum(var * g)
        total = term if total is None else total + term
    total.backward()
    return graph.gradients()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, lr: float = 1e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, p in params.items():
        g = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        m = state.m.get(name, 0.0)
        v = state.v.get(name, 0.0)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - beta1 ** t)
        vhat = v / (1 - beta2 ** t)
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: dict[str, np.ndarray], step: int = 0):
    write_tensor_container(path, params, magic=FFMW_MAGIC, step=step)


def load_checkpoint(path, reference: dict[str, np.ndarray]) -> tuple[dict[str, np.ndarray], int]:
    """Load an FFMW checkpoint, validating names and shapes against `reference`."""
    tensors, step = read_tensor_container(path, magic=FFMW_MAGIC)
    loaded = {}
    for name, ref in reference.items():
        if name not in tensors:
            raise CheckpointError(f"checkpoint missing tensor '{name}'")
        arr = tensors[name].reshape(tensors[name].shape)
        if arr.shape != ref.shape:
            raise CheckpointError(f"tensor '{name}' has shape {arr.shape}, "
                                  f"expected {ref.shape}")
        loaded[name] = arr.astype(np.float32)
    return loaded, step


def describe(config: ModelConfig, params: dict[str, np.ndarray]) -> dict:
    """JSON-ready architecture summary."""
    return {
        "ffm_channels": config.ffm_channels,
        "pyramid_channels": list(config.pyramid_channels),
        "base_dims": list(config.base_dims),
        "output_dims": list(config.out_dims),
        "n_actions": config.n_actions,
        "tasks": list(config.tasks),
        "n_object_classes": config.n_object_classes,
        "n_parameters": n_parameters(params),
        "parameter_shapes": {k: list(v.shape) for k, v in params.items()},
    }
