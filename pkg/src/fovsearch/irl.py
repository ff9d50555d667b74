"""Inverse-RL training: soft Q-learning objective over expert occupancy.

The Q-function is trained to maximize expert advantage Q(s,a) - gamma*V(s')
under the soft value V(s) = log sum_a exp Q(s,a), with the initial-state value
term keeping the objective invariant to constant Q shifts.  The recovered
reward is r(s,a) = Q(s,a) - gamma*V(s'), and the policy is a temperature
softmax of the Q-row.  Auxiliary supervision: a CenterNet-style focal loss on
the object-center head and a frequency-weighted BCE on the termination head.
"""

from __future__ import annotations

import copy
import csv
import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .core import ActionGrid, Fixation, SearchTrial, fixation_to_action
from .env import PyramidProvider, center_fixation


class NumericError(RuntimeError):
    """Training produced a non-finite value; message names the tensor."""


@dataclass
class TrainConfig:
    gamma: float = 0.8
    tau: float = 0.01
    omega: float = 0.1              # detection-loss weight
    kappa: float = 2.0              # focal-loss exponents
    lam: float = 4.0
    lr: float = 1e-4
    lr_decay_at: int = 0            # iteration after which lr is scaled (0: never)
    lr_decay_factor: float = 0.3
    buffer_capacity: int = 8000
    target_ema: float = 0.01
    target_period: int = 4          # apply the EMA once every N iterations
    batch_size: int = 64
    iterations: int = 1000
    term_weight: float = 1.0
    use_initial_state_term: bool = True
    value_mode: str = "initial"     # "initial": (1-gamma) E[V(s0)] counterweight
                                    # "expert": E over expert states of V(s) - gamma V'(s')
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.gamma < 1):
            raise ValueError("gamma must lie in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.omega < 0:
            raise ValueError("omega must be nonnegative")


# ---------------------------------------------------------------------------
# Soft value / policy / reward
# ---------------------------------------------------------------------------

def soft_value(q_row) -> float:
    """V = log sum_a exp Q(s,a), max-shifted for stability."""
    q = np.asarray(q_row, dtype=np.float64)
    m = q.max()
    return float(m + np.log(np.exp(q - m).sum()))


def policy_dist(q_row, tau: float = 0.01) -> np.ndarray:
    """Temperature softmax over the Q-row."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    q = np.asarray(q_row, dtype=np.float64) / tau
    q -= q.max()
    e = np.exp(q)
    return e / e.sum()


@dataclass(frozen=True)
class Transition:
    image_id: str
    task: str
    state: tuple            # fixation prefix (tuple of Fixation)
    action: int
    next_state: tuple
    is_initial: bool
    is_terminal: bool


def expert_transitions(trial: SearchTrial, grid: ActionGrid,
                       center: Fixation) -> list[Transition]:
    """Embed an expert scanpath into the discretized MDP.

    The initial fixation is replaced by the protocol's center start, and every
    subsequent fixation is snapped to its action cell center so expert states
    coincide with the states the dynamics can reach.
    """
    fixes = trial.scanpath.fixations
    snapped = [center]
    actions = []
    for f in fixes[1:]:
        a = fixation_to_action(f, grid)
        actions.append(a)
        from .core import action_to_fixation
        snapped.append(action_to_fixation(a, grid))

    out = []
    for t, a in enumerate(actions):
        out.append(Transition(
            image_id=trial.image_id,
            task=trial.task,
            state=tuple(snapped[: t + 1]),
            action=a,
            next_state=tuple(snapped[: t + 2]),
            is_initial=(t == 0),
            is_terminal=(t == len(actions) - 1 and trial.scanpath.terminated),
        ))
    return out


def iq_loss(expert_batch: Sequence[Transition], initial_states: Sequence,
            q_net: Callable, target_q_net: Callable, gamma: float):
    """The inverse-soft-Q objective on an expert batch.

    `q_net(state)` must return the Q-row for a state as an autodiff Var (or
    array); `target_q_net(state)` returns a plain array.  Terminal transitions
    contribute no successor value.  Returns a scalar Var.
    """
    if len(expert_batch) == 0:
        raise ValueError("empty expert batch")
    terms = []
    for tr in expert_batch:
        q = q_net(tr.state)
        q_sa = q[tr.action] if isinstance(q, ad.Var) else ad.Var(np.asarray(q))[tr.action]
        if tr.is_terminal or gamma == 0:
            terms.append(q_sa)
        else:
            v_next = soft_value(np.asarray(target_q_net(tr.next_state)))
            terms.append(q_sa - gamma * v_next)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    loss = -(total * (1.0 / len(terms)))

    if initial_states is not None and len(initial_states) > 0:
        v0s = []
        for s0 in initial_states:
            q0 = q_net(s0)
            q0 = q0 if isinstance(q0, ad.Var) else ad.Var(np.asarray(q0))
            v0s.append(ad.logsumexp(q0, axis=-1))
        v0 = v0s[0]
        for v in v0s[1:]:
            v0 = v0 + v
        loss = loss + (1.0 - gamma) * (v0 * (1.0 / len(v0s)))
    return loss


def recover_reward(transition: Transition, q_net: Callable, target_q_net: Callable,
                   gamma: float) -> float:
    """r(s,a) = Q(s,a) - gamma * V_target(s'); terminal states have no successor."""
    q = np.asarray(q_net(transition.state), dtype=np.float64)
    r = float(q[transition.action])
    if not transition.is_terminal:
        r -= gamma * soft_value(np.asarray(target_q_net(transition.next_state)))
    return r


# ---------------------------------------------------------------------------
# Auxiliary losses
# ---------------------------------------------------------------------------

def render_gt_heatmaps(objects: Sequence[tuple], dims: tuple[int, int],
                       n_classes: int = 80, cell_size: float = 16.0,
                       ) -> tuple[np.ndarray, int]:
    """Object-center heatmaps with size-dependent Gaussian spread.

    `objects` holds (category_index in 1..n_classes, (x, y, w, h) pixel boxes).
    Each center cell is set to one; the surroundings fall off with a sigma of
    max(1, r/3) cells where r scales with the smaller box side.  Cells touched
    by several same-category objects keep the maximum.
    """
    rows, cols = dims
    maps = np.zeros((n_classes, rows, cols), dtype=np.float64)
    rr, cc = np.indices((rows, cols))
    n = 0
    for cat, (x, y, w, h) in objects:
        if not (1 <= cat <= n_classes):
            raise ValueError(f"category index {cat} outside [1, {n_classes}]")
        r0 = min(int((y + h / 2.0) // cell_size), rows - 1)
        c0 = min(int((x + w / 2.0) // cell_size), cols - 1)
        radius = min(w, h) / (3.0 * cell_size)
        sigma = max(1.0, radius / 3.0)
        g = np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2.0 * sigma ** 2))
        g[r0, c0] = 1.0
        maps[cat - 1] = np.maximum(maps[cat - 1], g)
        n += 1
    return maps, n


def focal_loss(pred, gt: np.ndarray, n_centers: int, kappa: float = 2.0,
               lam: float = 4.0):
    """Pixel-wise focal loss against rendered center heatmaps.

    Positions where the ground truth equals one use the focal positive term;
    all others are weighted down by (1-Y)^lam.  Normalized by the number of
    object centers (at least one).  Accepts a Var or an array for `pred`.
    """
    gt = np.asarray(gt, dtype=float)
    pos = (gt == 1.0).astype(gt.dtype)
    neg = 1.0 - pos
    is_var = isinstance(pred, ad.Var)
    log_ = ad.log if is_var else np.log
    one_minus = (1.0 - pred)
    pos_term = pos * (one_minus ** kappa) * log_(pred * pos + neg)
    neg_term = (neg * (1.0 - gt) ** lam) * (pred ** kappa) * log_(1.0 - pred * neg)
    total = ad.vsum(pos_term + neg_term) if is_var else np.sum(pos_term + neg_term)
    return -(total * (1.0 / max(n_centers, 1)))


def termination_class_weights(labels: Sequence[int]) -> tuple[float, float]:
    """Inverse-frequency weights (continue, stop), normalized to mean one."""
    labels = np.asarray(labels)
    n = len(labels)
    n_stop = int(labels.sum())
    n_cont = n - n_stop
    if n_stop == 0 or n_cont == 0:
        return 1.0, 1.0
    return n / (2.0 * n_cont), n / (2.0 * n_stop)


def termination_loss(probs, labels: Sequence[int],
                     class_weights: tuple[float, float] = (1.0, 1.0)):
    """Weighted binary cross entropy on stop probabilities.

    `probs` may be a list of Vars (training) or an array (evaluation).
    """
    w_cont, w_stop = class_weights
    eps = 1e-7
    if isinstance(probs, ad.Var) or (len(probs) and isinstance(probs[0], ad.Var)):
        if not isinstance(probs, ad.Var):
            probs = ad.concat([ad.reshape(p, (1,)) for p in probs])
        y = np.asarray(labels, dtype=probs.dtype)
        w = np.where(y == 1, w_stop, w_cont).astype(probs.dtype)
        p = ad.clip(probs, eps, 1.0 - eps)
        nll = -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p))
        return ad.vmean(w * nll)
    p = np.clip(np.asarray(probs, dtype=np.float64), eps, 1 - eps)
    y = np.asarray(labels, dtype=np.float64)
    w = np.where(y == 1, w_stop, w_cont)
    return float(np.mean(w * -(y * np.log(p) + (1 - y) * np.log(1 - p))))


def focal_loss_batch(pred: ad.Var, gt_stack: np.ndarray, coefs: np.ndarray,
                     kappa: float = 2.0, lam: float = 4.0):
    """Vectorized focal loss over a batch of center-map predictions.

    `coefs` holds a per-item 1/max(N,1) factor (zero to skip an item); the
    result is the mean per-item focal loss over the nonzero entries.
    """
    gt = np.asarray(gt_stack, dtype=pred.dtype)
    n_used = int(np.count_nonzero(coefs))
    if n_used == 0:
        return ad.Var(np.zeros((), dtype=pred.dtype))
    c = (np.asarray(coefs, dtype=pred.dtype) / n_used).reshape(-1, 1, 1, 1)
    pos = (gt == 1.0).astype(pred.dtype)
    neg = 1.0 - pos
    pos_term = (pos * c) * ((1.0 - pred) ** kappa) * ad.log(pred * pos + neg)
    neg_term = ((neg * (1.0 - gt) ** lam) * c) * (pred ** kappa) * ad.log(1.0 - pred * neg)
    return -ad.vsum(pos_term + neg_term)


def combined_loss(l_irl, l_det, omega: float = 0.1):
    """Total objective: IRL term plus omega-weighted detection term."""
    if omega == 0:
        return l_irl
    return l_irl + omega * l_det


class ReplayBuffer:
    """FIFO ring buffer of expert transitions."""

    def __init__(self, capacity: int = 8000):
        self.capacity = capacity
        self._items: deque = deque(maxlen=capacity)

    def push(self, item):
        self._items.append(item)

    def extend(self, items):
        for it in items:
            self.push(it)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def sample(self, rng: np.random.Generator, batch_size: int) -> list:
        n = len(self._items)
        if n == 0:
            raise ValueError("cannot sample from an empty buffer")
        k = min(batch_size, n)
        idx = rng.choice(n, size=k, replace=False)
        return [self._items[i] for i in idx]


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "L_irl", "L_det", "L_term", "total", "alpha", "sigma")


def _check_finite(value: float, name: str):
    if not math.isfinite(value):
        raise NumericError(f"non-finite value in {name}")


@dataclass
class Trainer:
    """Owns the parameter stores, buffer and per-state caches for training."""

    model_config: mdl.ModelConfig
    config: TrainConfig
    pyramids: PyramidProvider
    objects: Optional[dict] = None   # image_id -> [(category, bbox)]
    params: dict = None
    seed_params: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = mdl.init_model(self.model_config, seed=self.seed_params)
        self.target_params = copy.deepcopy(self.params)
        self.buffer = ReplayBuffer(self.config.buffer_capacity)
        self.adam = mdl.AdamState()
        self.rng = np.random.default_rng(self.config.seed)
        self._dmin_cache: dict = {}
        self._target_v_cache: dict = {}
        self._target_version = 0
        self._gt_heatmaps: dict = {}
        self._term_weights = (1.0, 1.0)
        self.log_rows: list[dict] = []

    # -- data -----------------------------------------------------------

    def add_trials(self, trials: Sequence[SearchTrial]):
        center = center_fixation(self.model_config)
        grid = self.model_config.grid
        labels = []
        for trial in trials:
            ts = expert_transitions(trial, grid, center)
            self.buffer.extend(ts)
            labels.extend(int(t.is_terminal) for t in ts)
        if labels:
            self._term_weights = termination_class_weights(
                [int(t.is_terminal) for t in self.buffer])

    def _dmin(self, state: tuple) -> np.ndarray:
        key = tuple((round(f[0], 3), round(f[1], 3)) for f in state)
        if key not in self._dmin_cache:
            self._dmin_cache[key] = mdl.state_distance_map(list(state), self.model_config)
        return self._dmin_cache[key]

    def _heatmaps(self, image_id: str):
        if self.objects is None or image_id not in self.objects:
            return None
        if image_id not in self._gt_heatmaps:
            cell = self.model_config.grid.cell_h
            self._gt_heatmaps[image_id] = render_gt_heatmaps(
                self.objects[image_id], self.model_config.out_dims,
                self.model_config.n_object_classes, cell_size=cell,
            )
        return self._gt_heatmaps[image_id]

    # -- inner loop -------------------------------------------------------

    def _state_key(self, image_id, task, state):
        return (image_id, task, tuple((round(f[0], 3), round(f[1], 3)) for f in state))

    def _target_v(self, image_id, task, state) -> float:
        key = (self._target_version, self._state_key(image_id, task, state))
        if key not in self._target_v_cache:
            pyr = self.pyramids.get(image_id)
            outs, _ = mdl.forward_batch(
                self.target_params, [(pyr, self._dmin(state), task)], self.model_config)
            self._target_v_cache[key] = soft_value(outs[0].q_values)
        return self._target_v_cache[key]

    def train_step(self, step_idx: int) -> dict:
        cfg = self.config
        batch = self.buffer.sample(self.rng, cfg.batch_size)

        # Unique forward set: transition states, their successors, and the
        # initial states of the batch's trials.
        keys: dict = {}
        items = []

        def register(image_id, task, state):
            key = self._state_key(image_id, task, state)
            if key not in keys:
                keys[key] = len(items)
                items.append((self.pyramids.get(image_id), self._dmin(state), task))
            return key

        s_keys, n_keys, init_keys = [], [], set()
        for tr in batch:
            s_keys.append(register(tr.image_id, tr.task, tr.state))
            n_keys.append(register(tr.image_id, tr.task, tr.next_state))
            init_keys.add(register(tr.image_id, tr.task, tr.state[:1]))

        outs, graph = mdl.forward_batch(self.params, items, self.model_config)
        q_of = {key: graph.q_vars[i] for key, i in keys.items()}

        # IRL term; successor values come from the (cached) target network.
        terms = []
        for tr, sk in zip(batch, s_keys):
            q_sa = q_of[sk][tr.action]
            if cfg.value_mode == "expert":
                # Telescoped value matching over the expert occupancy: the
                # target-network successor values cancel exactly, leaving the
                # drift-free soft advantage Q(s,a) - V(s).
                terms.append(q_sa - ad.logsumexp(q_of[sk], axis=-1))
            elif tr.is_terminal:
                terms.append(q_sa)
            else:
                v_next = self._target_v(tr.image_id, tr.task, tr.next_state)
                terms.append(q_sa - cfg.gamma * v_next)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        l_irl = -(total * (1.0 / len(terms)))
        if cfg.value_mode == "initial" and cfg.use_initial_state_term:
            v0s = [ad.logsumexp(q_of[k], axis=-1) for k in sorted(init_keys)]
            v0 = v0s[0]
            for v in v0s[1:]:
                v0 = v0 + v
            l_irl = l_irl + (1.0 - cfg.gamma) * (v0 * (1.0 / len(v0s)))

        # Detection term over the batch's distinct states with annotations.
        l_det = ad.Var(np.zeros((), dtype=graph.attention.dtype))
        if cfg.omega > 0 and self.objects:
            gt_stack = np.zeros(graph.centers.shape)  # (b, rows, cols, classes)
            coefs = np.zeros(graph.centers.shape[0])
            for key, i in keys.items():
                hm = self._heatmaps(key[0])
                if hm is None:
                    continue
                slot = graph._slot_of_item[i]
                gt_stack[slot] = hm[0].transpose(1, 2, 0)
                coefs[slot] = 1.0 / max(hm[1], 1)
            if coefs.any():
                l_det = focal_loss_batch(graph.centers, gt_stack, coefs,
                                         cfg.kappa, cfg.lam)

        # Termination term on successor states (one new fixation just made).
        probs = mdl.termination_forward_batch(
            graph, [q_of[nk] for nk in n_keys],
            [len(tr.next_state) for tr in batch], self.model_config)
        labels = [int(tr.is_terminal) for tr in batch]
        l_term = termination_loss(probs, labels, self._term_weights)

        loss = combined_loss(l_irl, l_det, cfg.omega) + cfg.term_weight * l_term

        row = {
            "step": step_idx,
            "L_irl": float(l_irl.data),
            "L_det": float(l_det.data),
            "L_term": float(l_term.data),
            "total": float(loss.data),
            "alpha": float(np.logaddexp(self.params["retina_alpha_raw"], 0.0)),
            "sigma": float(np.logaddexp(self.params["retina_sigma_raw"], 0.0)),
        }
        for name in ("L_irl", "L_det", "L_term", "total"):
            _check_finite(row[name], name)

        grads = graph.backward_from(loss)
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for tensor '{name}'")
        lr = cfg.lr
        if cfg.lr_decay_at and step_idx >= cfg.lr_decay_at:
            lr *= cfg.lr_decay_factor
        mdl.adam_step(self.params, grads, self.adam, lr=lr)

        if (step_idx + 1) % cfg.target_period == 0:
            for name in self.params:
                self.target_params[name] = (
                    cfg.target_ema * self.params[name]
                    + (1.0 - cfg.target_ema) * self.target_params[name]
                ).astype(np.float32)
            self._target_version += 1
            self._target_v_cache.clear()

        self.log_rows.append(row)
        return row

    def run(self, progress: Optional[Callable] = None):
        for i in range(self.config.iterations):
            row = self.train_step(i)
            if progress is not None:
                progress(row)
        return self.params

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
            writer.writeheader()
            writer.writerows(self.log_rows)


def train(trials: Sequence[SearchTrial], pyramids: PyramidProvider,
          model_config: mdl.ModelConfig, config: TrainConfig,
          objects: Optional[dict] = None, checkpoint_path=None, log_path=None,
          progress: Optional[Callable] = None) -> dict:
    """Train a fixation policy on expert trials; returns the parameter store."""
    train_trials = [t for t in trials if t.split == "train"]
    if not train_trials:
        raise ValueError("no trials in the train split")
    trainer = Trainer(model_config, config, pyramids, objects=objects,
                      seed_params=config.seed)
    trainer.add_trials(train_trials)
    trainer.run(progress)
    if checkpoint_path is not None:
        mdl.save_checkpoint(checkpoint_path, trainer.params,
                            step=config.iterations)
    if log_path is not None:
        trainer.write_log(log_path)
    return trainer.params
