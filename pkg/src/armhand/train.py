"""Objective functions, optimizer and the adversarial training loop.

The generator minimizes L1 + gamma*smooth + beta*FK plus lambda times the
non-saturating GAN term; the discriminator then takes its own step on the
same batch. Each loss toggle removes its term entirely (no zero-weighted
residue), so the L1-only configuration is literally the L1 tensor.

Determinism contract: given a seed, batch order, parameter trajectories and
the logged loss curve are bit-for-bit reproducible, and a state saved at an
epoch boundary resumes the exact continuation of an uninterrupted run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tt
from .model import (
    ModelConfig,
    ModelParams,
    build_discriminator,
    build_generator,
    discriminate,
    generator_forward,
    load_checkpoint,
    save_checkpoint,
)
from .kinematics import Skeleton, forward_kinematics
from .tensor import ContractError, ShapeError, Tensor

_GAN_LOG_FLOOR = 1e-7

PROFILES = {
    "desk": {"batch_size": 32, "epochs": 60, "lr_decay_epochs": 10},
    "paper": {"batch_size": 128, "epochs": 300, "lr_decay_epochs": 50},
}


class TrainDivergedError(RuntimeError):
    """A non-finite loss aborted training; diagnostics were dumped."""


@dataclass
class TrainConfig:
    """Optimization settings; defaults follow the desk profile."""

    profile: str = "desk"
    batch_size: int = 32
    lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_epochs: int = 10
    weight_decay: float = 5e-4
    beta1: float = 0.95          # first-moment decay, the quoted "momentum"
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 60
    lambda_gan: float = 0.05
    beta_fk: float = 1.0
    gamma_smooth: float = 1.0
    seed: int = 0
    smooth_loss: bool = True
    fk_loss: bool = True
    gan_loss: bool = True
    input_mode: str = "ah2ah"    # ah2ah | h2h
    checkpoint_every: int = 0    # epochs between checkpoints; 0 = final only

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.lambda_gan, self.beta_fk, self.gamma_smooth) < 0.0:
            raise ValueError("loss weights must be >= 0")
        if self.input_mode not in ("ah2ah", "h2h"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")

    @classmethod
    def from_profile(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PROFILES:
            raise ValueError(f"unknown profile {name!r} (have {sorted(PROFILES)})")
        merged = {"profile": name, **PROFILES[name], **overrides}
        return cls(**merged)


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Step decay: lr * factor^(epoch // decay_epochs)."""
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_epochs)


# -- objective functions ---------------------------------------------------------


def _as_constant(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(x)


def loss_l1(pred: Tensor, target) -> Tensor:
    """Mean absolute difference over all elements."""
    target = _as_constant(target)
    if pred.shape != target.shape:
        raise ShapeError(f"loss_l1: shapes {pred.shape} and {target.shape} differ")
    return tt.absolute(pred - target).mean()


def loss_smooth(pred: Tensor) -> Tensor:
    """Mean absolute inter-frame difference; frames on axis -3."""
    f = pred.shape[-3]
    if f < 2:
        raise ContractError(f"loss_smooth needs >= 2 frames, got {f}")
    lead = pred[..., 1:, :, :]
    lag = pred[..., :-1, :, :]
    return tt.absolute(lead - lag).mean()


def loss_fk(pred_rotations: Tensor, target_positions, skeleton: Skeleton,
            joint_subset=None) -> Tensor:
    """Mean Euclidean joint-position distance after FK, in meters."""
    target = _as_constant(target_positions)
    pos = forward_kinematics(skeleton, pred_rotations)
    if pos.shape != target.shape:
        raise ShapeError(
            f"loss_fk: FK output {pos.shape} does not match targets {target.shape} "
            "(skeleton mismatch?)")
    if joint_subset is not None:
        idx = np.asarray(joint_subset)
        pos = pos[..., idx, :]
        target = Tensor(target.data[..., idx, :])
    d = pos - target
    return tt.sqrt((d * d).sum(axis=-1)).mean()


def loss_gan_step(real, fake: Tensor, disc: ModelParams):
    """Non-saturating GAN pair: (generator term, discriminator term).

    disc_loss = -mean log D(real) - mean log(1 - D(fake.detach()));
    gen_loss  = -mean log D(fake). Log arguments are clamped at 1e-7.
    Gradients from disc_loss cannot reach the generator (fake is detached).
    """
    d_real = discriminate(_as_constant(real), disc)
    d_fake_frozen = discriminate(fake.detach(), disc)
    disc_loss = (-(tt.log(tt.clamp_min(d_real, _GAN_LOG_FLOOR)).mean())
                 - tt.log(tt.clamp_min(1.0 - d_fake_frozen, _GAN_LOG_FLOOR)).mean())
    d_fake = discriminate(fake, disc)
    gen_loss = -(tt.log(tt.clamp_min(d_fake, _GAN_LOG_FLOOR)).mean())
    return gen_loss, disc_loss


def generator_objective(pred: Tensor, rotations, positions, skeleton: Skeleton,
                        config: TrainConfig, disc: ModelParams | None = None,
                        joint_subset=None):
    """Assemble the enabled loss terms; returns (total, components dict).

    Components are python floats; the total only sums enabled terms, so with
    everything off it is exactly the L1 tensor.
    """
    if joint_subset is not None:
        idx = np.asarray(joint_subset)
        pred_sup = pred[..., idx, :]
        rot_target = np.asarray(rotations)[..., idx, :]
    else:
        pred_sup = pred
        rot_target = rotations
    total = loss_l1(pred_sup, rot_target)
    parts = {"l1": total.item()}
    if config.smooth_loss:
        sm = loss_smooth(pred_sup)
        parts["smooth"] = sm.item()
        total = total + config.gamma_smooth * sm
    if config.fk_loss:
        fk = loss_fk(pred, positions, skeleton, joint_subset=joint_subset)
        parts["fk"] = fk.item()
        total = total + config.beta_fk * fk
    gan_pair = None
    if config.gan_loss:
        if disc is None:
            raise ContractError("GAN loss enabled but no discriminator provided")
        gen_gan, disc_loss = loss_gan_step(rotations, pred, disc)
        parts["gen_gan"] = gen_gan.item()
        parts["disc"] = disc_loss.item()
        total = total + config.lambda_gan * gen_gan
        gan_pair = (gen_gan, disc_loss)
    parts["total"] = total.item()
    return total, parts, gan_pair


# -- optimizer ----------------------------------------------------------------------


def _decayed(name: str, t: Tensor) -> bool:
    """Decoupled weight decay applies to matrices/kernels only, never to
    biases, norm gains, positional embeddings or the regression token."""
    return t.data.ndim >= 2 and not name.endswith(".pos")


class Adam:
    """Adaptive-moment optimizer with decoupled weight decay."""

    def __init__(self, params: ModelParams, config: TrainConfig):
        self.params = params
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params}
        self.v = {n: np.zeros_like(p.data) for n, p in params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            new = p.data - lr * update
            if self.weight_decay > 0.0 and _decayed(name, p):
                new = new - lr * self.weight_decay * p.data
            p.data = new

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for n in self.m:
            out[f"{prefix}.m.{n}"] = self.m[n]
            out[f"{prefix}.v.{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str, t: int):
        self.t = t
        for n in self.m:
            self.m[n] = np.array(arrays[f"{prefix}.m.{n}"])
            self.v[n] = np.array(arrays[f"{prefix}.v.{n}"])


# -- training state -------------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    gen: ModelParams
    disc: ModelParams
    gen_opt: Adam
    disc_opt: Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)
    _perm: np.ndarray | None = None
    _cursor: int = 0


def init_train_state(model_config: ModelConfig, config: TrainConfig) -> TrainState:
    gen = build_generator(model_config)
    disc = build_discriminator(model_config)
    return TrainState(
        gen=gen, disc=disc,
        gen_opt=Adam(gen, config), disc_opt=Adam(disc, config),
        rng=np.random.default_rng(np.random.SeedSequence([config.seed, 0x7A11])))


def save_train_state(path, state: TrainState, config: TrainConfig) -> None:
    """Epoch-boundary snapshot: parameters, moments, rng and counters."""
    if state._perm is not None:
        raise ContractError(
            "training state can only be saved at an epoch boundary "
            "(a mid-epoch snapshot would lose the batch order)")
    arrays: dict[str, np.ndarray] = {}
    for n, p in state.gen:
        arrays[f"gen.{n}"] = p.data
    for n, p in state.disc:
        arrays[f"disc.{n}"] = p.data
    arrays.update(state.gen_opt.state_arrays("opt_gen"))
    arrays.update(state.disc_opt.state_arrays("opt_disc"))
    meta = {
        "kind": "train_state",
        "epoch": state.epoch,
        "step": state.step,
        "t_gen": state.gen_opt.t,
        "t_disc": state.disc_opt.t,
        "rng_state": state.rng.bit_generator.state,
        "train_config": asdict(config),
    }
    save_checkpoint(path, state.gen.config, arrays, meta)


def load_train_state(path):
    """Inverse of save_train_state -> (TrainState, TrainConfig)."""
    model_config, arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "train_state":
        raise ValueError(f"{path} is not a training-state checkpoint")
    config = TrainConfig(**meta["train_config"])
    state = init_train_state(model_config, config)
    state.gen.load_state_arrays(
        {n[len("gen."):]: a for n, a in arrays.items() if n.startswith("gen.")})
    state.disc.load_state_arrays(
        {n[len("disc."):]: a for n, a in arrays.items() if n.startswith("disc.")})
    state.gen_opt.load_state_arrays(arrays, "opt_gen", meta["t_gen"])
    state.disc_opt.load_state_arrays(arrays, "opt_disc", meta["t_disc"])
    state.rng = np.random.default_rng()
    state.rng.bit_generator.state = meta["rng_state"]
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    return state, config


# -- batching -------------------------------------------------------------------------


def _stack_batch(windows, indices, input_mode: str):
    feats = np.stack([windows[i].features for i in indices])
    rots = np.stack([windows[i].rotations for i in indices])
    poss = np.stack([windows[i].positions for i in indices])
    if input_mode == "h2h":
        feats = feats.copy()
        feats[:, :, :4, :] = 0.0  # blank the arm direction tokens
    return feats, rots, poss


def _dump_diagnostics(out_dir, state: TrainState, parts: dict, indices) -> str:
    doc = {
        "step": state.step,
        "epoch": state.epoch,
        "loss_components": parts,
        "batch_indices": np.asarray(indices).tolist(),
        "grad_norms": {n: (float(np.linalg.norm(p.grad)) if p.grad is not None else None)
                       for n, p in state.gen},
    }
    if out_dir is None:
        return json.dumps(doc)
    path = Path(out_dir) / f"diverged_step_{state.step}.json"
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def train(model_config: ModelConfig, config: TrainConfig, windows,
          skeleton: Skeleton, out_dir=None, state: TrainState | None = None,
          max_steps: int | None = None, log_fn=None) -> TrainState:
    """Run (or continue) training over preprocessed windows.

    Per step: generator update on the enabled objective, then discriminator
    update on the same batch (GAN enabled only). Passing the returned state
    back in continues the run exactly, including mid-epoch.
    """
    if not windows:
        raise ValueError("no training windows supplied")
    if state is None:
        state = init_train_state(model_config, config)
    supervise = (skeleton.hand_joint_indices if config.input_mode == "h2h" else None)
    log_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.jsonl", "a", encoding="utf-8")
    try:
        n = len(windows)
        batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
        while state.epoch < config.epochs:
            if max_steps is not None and state.step >= max_steps:
                break
            lr = lr_schedule(config, state.epoch)
            if state._perm is None:
                state._perm = state.rng.permutation(n)
                state._cursor = 0
            while state._cursor < batches_per_epoch:
                if max_steps is not None and state.step >= max_steps:
                    break
                lo = state._cursor * config.batch_size
                indices = state._perm[lo:lo + config.batch_size]
                feats, rots, poss = _stack_batch(windows, indices, config.input_mode)

                state.gen.zero_grad()
                state.disc.zero_grad()
                pred = generator_forward(feats, state.gen)
                total, parts, gan_pair = generator_objective(
                    pred, rots, poss, skeleton, config,
                    disc=state.disc, joint_subset=supervise)
                if not np.isfinite(parts["total"]):
                    where = _dump_diagnostics(out_dir, state, parts, indices)
                    raise TrainDivergedError(
                        f"non-finite loss at step {state.step}; diagnostics: {where}")
                total.backward()
                state.gen_opt.step(lr)

                if gan_pair is not None:
                    state.disc.zero_grad()
                    _, disc_loss = loss_gan_step(rots, pred.detach(), state.disc)
                    disc_loss.backward()
                    state.disc_opt.step(lr)
                    parts["disc"] = disc_loss.item()

                record = {"step": state.step, "epoch": state.epoch, "lr": lr, **parts}
                state.history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                if log_fn is not None:
                    log_fn(record)
                state.step += 1
                state._cursor += 1
            if state._cursor >= batches_per_epoch:
                state.epoch += 1
                state._perm = None
                state._cursor = 0
                if out_dir is not None and config.checkpoint_every > 0 \
                        and state.epoch % config.checkpoint_every == 0 \
                        and state.epoch < config.epochs:
                    save_train_state(out_dir / f"state_epoch_{state.epoch:04d}.ckpt",
                                     state, config)
        if out_dir is not None and state.epoch >= config.epochs:
            save_train_state(out_dir / "state_final.ckpt", state, config)
    finally:
        if log_file is not None:
            log_file.close()
    return state
