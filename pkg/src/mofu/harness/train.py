"""AdamW with cosine-restart learning rate, deterministic training state and the SPSL train step."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from mofu import autograd as ag
from mofu.dit import (CheckpointError, DiTConfig, Params, condition_batch, decode_checkpoint,
                      denoise_tokens, encode_checkpoint)
from mofu.harness.model import TrainSample
from mofu.losses import (LossReport, flow_match_target, permutation_loss, scale_loss, spsl_total,
                         sq_err, SCALE_EPS)
from mofu.numerics import NonFiniteError

T_MARGIN = 1e-3  # raw training times are drawn from [T_MARGIN, 1 - T_MARGIN]


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    restart_period: int = 200
    batch_size: int = 4
    steps: int = 500
    checkpoint_every: int = 100


@dataclass(frozen=True)
class LossConfig:
    cutoff_ratio: float = 0.25
    band_weights: tuple[float, float] = (1.0, 1.0)
    w_scale: float = 1.0
    w_perm: float = 1.0
    n_perms: int = 0  # 0 -> min(3, N! - 1)
    eps: float = SCALE_EPS
    time_shift: float = 5.0  # warps uniform t towards the noise end; 1.0 is plain uniform


def shift_time(u: np.ndarray, shift: float) -> np.ndarray:
    """Monotone warp of (0, 1) towards the noise end: s*u / (1 + (s - 1)*u)."""
    return shift * u / (1.0 + (shift - 1.0) * u)


def cosine_restart_lr(step: int, base_lr: float, period: int) -> float:
    """base * (1 + cos(pi * (s mod S) / S)) / 2."""
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * (step % period) / period))


def adamw_update(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
                 lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One decoupled-weight-decay Adam step; ``t`` is the 1-based step count."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new = param * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return new, m, v


@dataclass
class TrainState:
    params: Params
    m: Params
    v: Params
    step: int
    base_lr: float
    seed: int

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray], base_lr: float, seed: int) -> "TrainState":
        p = {k: np.array(a, dtype=np.float64) for k, a in params.items()}
        return cls(p, {k: np.zeros_like(a) for k, a in p.items()},
                   {k: np.zeros_like(a) for k, a in p.items()}, 0, float(base_lr), int(seed))

    def to_bytes(self, extra_meta: Mapping | None = None) -> bytes:
        meta = {"kind": "train_state", "step": self.step, "base_lr": self.base_lr, "seed": self.seed}
        if extra_meta:
            meta.update(extra_meta)
        tensors = {}
        for prefix, group in (("param", self.params), ("adam_m", self.m), ("adam_v", self.v)):
            for k, a in group.items():
                tensors[f"{prefix}/{k}"] = a
        return encode_checkpoint(meta, tensors)

    @classmethod
    def from_bytes(cls, buf: bytes) -> tuple["TrainState", dict]:
        meta, tensors = decode_checkpoint(buf)
        if meta.get("kind") != "train_state":
            raise CheckpointError("checkpoint does not hold a training state")
        groups: dict[str, Params] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for name, arr in tensors.items():
            prefix, _, key = name.partition("/")
            if prefix not in groups:
                raise CheckpointError(f"unexpected tensor {name!r}")
            groups[prefix][key] = arr
        state = cls(groups["param"], groups["adam_m"], groups["adam_v"],
                    int(meta["step"]), float(meta["base_lr"]), int(meta["seed"]))
        return state, meta


class NonFiniteLossError(FloatingPointError):
    pass


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def spsl_forward(model_cfg: DiTConfig, loss_cfg: LossConfig, params, batch: Sequence[TrainSample],
                 rng: np.random.Generator):
    """Returns (l_spsl, l_scale, l_perm, mse_mean) as autograd values for one batch."""
    bsz = len(batch)
    t = shift_time(rng.uniform(T_MARGIN, 1.0 - T_MARGIN, size=bsz), loss_cfg.time_shift)
    x0 = np.stack([s.x0 for s in batch])
    noise = rng.standard_normal(x0.shape)
    x_t, target = flow_match_target(x0, noise, t)
    tokens, feats = condition_batch(model_cfg, params, [s.refs for s in batch], "fourier",
                                    loss_cfg.cutoff_ratio, loss_cfg.band_weights)
    e = np.stack([s.prompt_emb for s in batch])
    pred = denoise_tokens(model_cfg, params, x_t, t, tokens, e)
    err = sq_err(pred, target)
    l_scale = scale_loss(err, np.stack([s.weight_map for s in batch]), loss_cfg.eps)
    l_perm = None
    for f in feats:
        term = permutation_loss(f, loss_cfg.n_perms or None, loss_cfg.cutoff_ratio, rng, loss_cfg.band_weights)
        l_perm = term if l_perm is None else l_perm + term
    l_perm = l_perm * (1.0 / bsz)
    total = spsl_total(l_scale, l_perm, loss_cfg.w_scale, loss_cfg.w_perm)
    return total, l_scale, l_perm, float(err.data.mean())


def train_step(state: TrainState, batch: Sequence[TrainSample], model_cfg: DiTConfig,
               loss_cfg: LossConfig = LossConfig(), optim: OptimConfig = OptimConfig()) -> tuple[TrainState, LossReport]:
    """Forward, backward and one AdamW update. The input state is never modified."""
    if not batch:
        raise ValueError("train_step: empty batch")
    rng = step_rng(state.seed, state.step, 1)
    leaves = {k: ag.Var(a, requires_grad=True) for k, a in state.params.items()}
    try:
        total, l_scale, l_perm, mse = spsl_forward(model_cfg, loss_cfg, leaves, batch, rng)
    except NonFiniteError as exc:
        raise NonFiniteLossError(f"non-finite value in the forward pass at step {state.step}: {exc}") from exc
    report = LossReport(float(l_scale.data), float(l_perm.data), float(total.data), mse, state.step)
    if not all(math.isfinite(x) for x in (report.l_scale, report.l_perm, report.l_spsl)):
        raise NonFiniteLossError(f"non-finite loss at step {state.step}: {report.to_dict()}")
    total.backward()
    lr = cosine_restart_lr(state.step, state.base_lr, optim.restart_period)
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, leaf in leaves.items():
        g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        new_p[k], new_m[k], new_v[k] = adamw_update(state.params[k], g, state.m[k], state.v[k], t, lr,
                                                   optim.beta1, optim.beta2, optim.eps, optim.weight_decay)
    for k, a in new_p.items():
        if not np.all(np.isfinite(a)):
            raise NonFiniteLossError(f"non-finite parameter {k} after step {state.step}")
    return TrainState(new_p, new_m, new_v, t, state.base_lr, state.seed), report


def batch_indices(seed: int, step: int, n_items: int, batch_size: int) -> np.ndarray:
    rng = step_rng(seed, step, 0)
    return rng.choice(n_items, size=min(batch_size, n_items), replace=False)


@dataclass
class CurveRow:
    step: int
    lr: float
    l_scale: float
    l_perm: float
    l_spsl: float


def train(state: TrainState, samples: Sequence[TrainSample], model_cfg: DiTConfig, loss_cfg: LossConfig,
          optim: OptimConfig, until: int | None = None, on_step=None) -> tuple[TrainState, list[CurveRow]]:
    """Run from ``state.step`` up to ``until`` (default ``optim.steps``)."""
    until = optim.steps if until is None else until
    rows: list[CurveRow] = []
    while state.step < until:
        idx = batch_indices(state.seed, state.step, len(samples), optim.batch_size)
        lr = cosine_restart_lr(state.step, state.base_lr, optim.restart_period)
        state, rep = train_step(state, [samples[i] for i in idx], model_cfg, loss_cfg, optim)
        rows.append(CurveRow(rep.step, lr, rep.l_scale, rep.l_perm, rep.l_spsl))
        if on_step is not None:
            on_step(state, rows[-1])
    return state, rows


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    out = np.empty(v.size)
    for i in range(v.size):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out
