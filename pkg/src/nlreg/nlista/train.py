"""Layer-wise progressive training with Adam.

Stage s trains layers 1..s on the loss mean_b ||x^(s) - x*||^2 (the output of
layer s); the newly added layer starts from the previous layer's learned
values. Once the stage index exceeds ``frozen_prefix_after``, that many front
layers are frozen. Within a stage the learning rate walks down ``lr_schedule``
whenever the validation loss (evaluated every ``eval_every`` steps on a fixed
set) fails to improve for ``patience`` training steps; parameters roll back to
the best validation snapshot at each drop and at stage end. Divergence (a
non-finite training loss) likewise restores the snapshot and drops the rate.

Everything is seeded: batches come from per-(stage, step) Philox streams, so
training is bit-reproducible for a fixed configuration.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .. import datagen
from ..core import NonlinearScalarFunction
from ..funcs import get_function
from .model import NlistaModel, backward, forward_batch, new_layer


@dataclass
class TrainConfig:
    """Progressive-training settings."""

    batch_size: int = 64
    lr_schedule: tuple = (1e-3, 1e-4, 2e-5)
    patience: int = 4000           # training steps without val improvement
    frozen_prefix_after: int = 11  # freeze layers 1..11 in later stages
    max_steps_per_stage: int = 20000
    val_size: int = 1000
    seed: int = 0
    eval_every: int = 100
    # theta starts at 0: any positive start can exceed every pre-threshold
    # activation at realistic scales (the gamma clip makes layer-1 updates
    # unit-norm), which zeroes the output and kills all gradients
    init_theta: float = 0.0
    init_beta: Optional[float] = None   # None -> 1 / derivative_sup^2
    differentiate_gamma: bool = False

    def __post_init__(self):
        if self.batch_size < 1 or self.val_size < 1:
            raise ValueError("batch_size and val_size must be positive")
        lrs = tuple(self.lr_schedule)
        if not lrs or any(b >= a for a, b in zip(lrs, lrs[1:])):
            raise ValueError("lr_schedule must be nonempty and strictly decreasing")
        if self.patience < 1 or self.max_steps_per_stage < 1 or self.eval_every < 1:
            raise ValueError("patience/max_steps_per_stage/eval_every must be positive")


@dataclass
class AdamState:
    """First/second moment estimates per layer (W, beta, theta) plus step count."""

    t: int = 0
    mW: list = field(default_factory=list)
    vW: list = field(default_factory=list)
    mb: list = field(default_factory=list)
    vb: list = field(default_factory=list)
    mt: list = field(default_factory=list)
    vt: list = field(default_factory=list)

    @classmethod
    def for_layers(cls, layers) -> "AdamState":
        st = cls()
        for lay in layers:
            st.mW.append(np.zeros_like(lay.W))
            st.vW.append(np.zeros_like(lay.W))
            st.mb.append(0.0)
            st.vb.append(0.0)
            st.mt.append(0.0)
            st.vt.append(0.0)
        return st


def adam_step(layers, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update in place; theta clamps to >= 0.

    A grads entry of None (or an all-zero frozen entry) leaves that layer's
    parameters untouched; frozen layers should pass None so their moments stay
    pristine.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, (lay, g) in enumerate(zip(layers, grads)):
        if g is None:
            continue
        state.mW[i] = beta1 * state.mW[i] + (1 - beta1) * g.W
        state.vW[i] = beta2 * state.vW[i] + (1 - beta2) * (g.W * g.W)
        lay.W -= lr * (state.mW[i] / bc1) / (np.sqrt(state.vW[i] / bc2) + eps)
        state.mb[i] = beta1 * state.mb[i] + (1 - beta1) * g.beta
        state.vb[i] = beta2 * state.vb[i] + (1 - beta2) * g.beta ** 2
        lay.beta -= lr * (state.mb[i] / bc1) / (np.sqrt(state.vb[i] / bc2) + eps)
        state.mt[i] = beta1 * state.mt[i] + (1 - beta1) * g.theta
        state.vt[i] = beta2 * state.vt[i] + (1 - beta2) * g.theta ** 2
        lay.theta -= lr * (state.mt[i] / bc1) / (np.sqrt(state.vt[i] / bc2) + eps)
        lay.theta = max(lay.theta, 0.0)


def _make_batch(data_config, f_data, A, count, *key):
    Xs = datagen.generate_signal_block(data_config, count, *key)
    clean = f_data.value(A @ Xs)
    Y = clean + datagen.generate_noise_block(data_config, clean, *key)
    return Xs, Y


def _val_loss(model, Y, Xs, stage, chunk=256) -> float:
    total = 0.0
    B = Y.shape[1]
    for lo in range(0, B, chunk):
        out, _ = forward_batch(model, Y[:, lo:lo + chunk], n_layers=stage)
        diff = out - Xs[:, lo:lo + chunk]
        total += float(np.sum(diff * diff))
    return total / B


def train_progressive(data_config: datagen.GenerationConfig,
                      f_data: NonlinearScalarFunction,
                      config: TrainConfig,
                      model: Optional[NlistaModel] = None,
                      n_layers: int = 16,
                      update_f_id: Optional[str] = None,
                      stage_callback: Optional[Callable] = None) -> NlistaModel:
    """Train (or resume) an unrolled model of ``n_layers`` layers.

    ``update_f_id`` overrides the nonlinearity inside the update (the
    linear-LISTA baseline passes "identity" while the data keep f_data).
    Resuming continues stage-by-stage from ``model.T + 1``.
    """
    if model is None:
        A = datagen.generate_dictionary(data_config)
        model = NlistaModel(layers=[], f_id=update_f_id or f_data.id, A=A)
    else:
        if model.T >= n_layers:
            return model
    f_update = get_function(model.f_id)
    init_beta = config.init_beta
    if init_beta is None:
        init_beta = 1.0 / f_update.derivative_sup ** 2

    val_key = (datagen.STREAM_VAL, 0)
    val_Xs, val_Y = _make_batch(data_config, f_data, model.A, config.val_size, *val_key)

    global_step = model.train_log[-1][0] if model.train_log else 0
    for stage in range(model.T + 1, n_layers + 1):
        new_layer(model, init_beta, config.init_theta)
        frozen = config.frozen_prefix_after if stage > config.frozen_prefix_after else 0
        state = AdamState.for_layers(model.layers)
        lr_idx = 0
        best_val = _val_loss(model, val_Y, val_Xs, stage)
        best_snap = model.snapshot(stage)
        since_improve = 0
        steps = 0
        t_start = time.perf_counter()
        while steps < config.max_steps_per_stage and lr_idx < len(config.lr_schedule):
            steps += 1
            global_step += 1
            lr = config.lr_schedule[lr_idx]
            Xs, Y = _make_batch(data_config, f_data, model.A, config.batch_size,
                                datagen.STREAM_TRAIN, stage, steps)
            out, tape = forward_batch(model, Y, record=True, n_layers=stage)
            diff = out - Xs
            train_loss = float(np.mean(np.sum(diff * diff, axis=0)))
            if not np.isfinite(train_loss):
                model.restore(best_snap)
                state = AdamState.for_layers(model.layers)
                lr_idx += 1
                since_improve = 0
                continue
            grads = backward(model, tape, (2.0 / Y.shape[1]) * diff,
                             frozen_prefix=frozen,
                             differentiate_gamma=config.differentiate_gamma)
            for i in range(frozen):
                grads[i] = None
            adam_step(model.layers[:stage], grads, state, lr)
            if steps % config.eval_every == 0:
                vloss = _val_loss(model, val_Y, val_Xs, stage)
                model.train_log.append((global_step, stage, lr, vloss))
                if vloss < best_val:
                    best_val = vloss
                    best_snap = model.snapshot(stage)
                    since_improve = 0
                else:
                    since_improve += config.eval_every
                    if since_improve >= config.patience:
                        model.restore(best_snap)
                        state = AdamState.for_layers(model.layers)
                        lr_idx += 1
                        since_improve = 0
        model.restore(best_snap)
        if stage_callback is not None:
            stage_callback(model, stage, best_val, steps,
                           time.perf_counter() - t_start)
    return model
