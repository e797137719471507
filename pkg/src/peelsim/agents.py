"""Peeling agents: scripted baselines and recurrent Q-learners.

The learned agents share one observation pipeline (frame/pose normalization
plus optional ablation masks), one tactile encoder, and one double-Q update.
They differ in how often they re-decide: the reactive net maps a single
observation to Q-values, the single-step net re-evaluates after every action,
and the multi-step net keeps repeating its last action while the hook field
feels weak, folding the whole repeat block into one decision.

Two forward implementations exist side by side: a taped one (nn.Tensor) used
inside gradient updates, and a plain-numpy mirror used for rollouts and for
target values, where gradients would only cost memory.  Both round to float32
at the same op boundaries, so they agree bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import nn
from .env import (ACTION_AXES, FRAMES_PER_STEP, OBS_SIZE, POSE_SIZE, Action,
                  BoundaryView, PeelEnv)
from .geometry import MeshConfig, sample_params
from .nn import Tensor
from .physics import PhysicsConfig

N_ACTIONS = 6
H_ENC = 64          # tactile encoder LSTM width
Z_SIZE = 150        # encoded decision input
H_Q = 128           # Q-network width
FRAME_DIM = 6

VARIANTS = ("reactive", "single", "multi")
MASKS = ("none", "pose", "force")


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

@dataclass
class EncoderNet:
    """Frames -> LSTM -> (final hidden ++ pose) -> two linears -> z."""
    lstm: nn.LstmParams
    lin1: nn.LinearParams
    lin2: nn.LinearParams

    def tensors(self):
        return self.lstm.tensors() + self.lin1.tensors() + self.lin2.tensors()


@dataclass
class QNet:
    """z -> linear/LN/ReLU x2 -> decision LSTM -> linear head -> Q[6]."""
    lin1: nn.LinearParams
    ln1: nn.LayerNormParams
    lin2: nn.LinearParams
    ln2: nn.LayerNormParams
    lstm: nn.LstmParams
    head: nn.LinearParams

    def tensors(self):
        return (self.lin1.tensors() + self.ln1.tensors() + self.lin2.tensors()
                + self.ln2.tensors() + self.lstm.tensors() + self.head.tensors())


@dataclass
class ReactiveNet:
    """Whole observation -> linear/LN/ReLU x2 -> linear head.  No memory."""
    lin1: nn.LinearParams
    ln1: nn.LayerNormParams
    lin2: nn.LinearParams
    ln2: nn.LayerNormParams
    head: nn.LinearParams

    def tensors(self):
        return (self.lin1.tensors() + self.ln1.tensors() + self.lin2.tensors()
                + self.ln2.tensors() + self.head.tensors())


def init_encoder(rng: np.random.Generator, frame_dim: int = FRAME_DIM,
                 h_enc: int = H_ENC, z_size: int = Z_SIZE,
                 width: int = H_Q) -> EncoderNet:
    return EncoderNet(
        lstm=nn.init_lstm(frame_dim, h_enc, rng),
        lin1=nn.init_linear(width, h_enc + POSE_SIZE, rng),
        lin2=nn.init_linear(z_size, width, rng),
    )


def init_qnet(rng: np.random.Generator, z_size: int = Z_SIZE,
              width: int = H_Q, n_actions: int = N_ACTIONS) -> QNet:
    return QNet(
        lin1=nn.init_linear(width, z_size, rng),
        ln1=nn.init_layernorm(width),
        lin2=nn.init_linear(width, width, rng),
        ln2=nn.init_layernorm(width),
        lstm=nn.init_lstm(width, width, rng),
        head=nn.init_linear(n_actions, width, rng),
    )


def init_reactive(rng: np.random.Generator, obs_size: int = OBS_SIZE,
                  width: int = H_Q, n_actions: int = N_ACTIONS) -> ReactiveNet:
    return ReactiveNet(
        lin1=nn.init_linear(width, obs_size, rng),
        ln1=nn.init_layernorm(width),
        lin2=nn.init_linear(width, width, rng),
        ln2=nn.init_layernorm(width),
        head=nn.init_linear(n_actions, width, rng),
    )


_LSTM_FIELDS = ("wx_i", "wh_i", "b_i", "wx_f", "wh_f", "b_f",
                "wx_g", "wh_g", "b_g", "wx_o", "wh_o", "b_o")


def named_tensors(prefix: str, params) -> list:
    """Stable (name, Tensor) pairs for checkpointing; order is load order."""
    if isinstance(params, nn.LstmParams):
        return [(f"{prefix}.{f}", getattr(params, f)) for f in _LSTM_FIELDS]
    if isinstance(params, nn.LinearParams):
        return [(f"{prefix}.weight", params.weight), (f"{prefix}.bias", params.bias)]
    if isinstance(params, nn.LayerNormParams):
        return [(f"{prefix}.gain", params.gain), (f"{prefix}.shift", params.shift)]
    out = []
    for fld in dataclasses.fields(params):
        out.extend(named_tensors(f"{prefix}.{fld.name}", getattr(params, fld.name)))
    return out


# ---------------------------------------------------------------------------
# Observation pipeline
# ---------------------------------------------------------------------------

def split_observation(obs: np.ndarray):
    """186-value observation -> (pose [6], frames [30, 6])."""
    obs = np.asarray(obs)
    if obs.shape != (OBS_SIZE,):
        raise ValueError(f"observation shape {obs.shape}")
    return obs[:POSE_SIZE].copy(), obs[POSE_SIZE:].reshape(FRAMES_PER_STEP, 6).copy()


def prep_frames(frames: np.ndarray, cfg: PhysicsConfig, mesh: MeshConfig,
                mask: str = "none") -> np.ndarray:
    """Normalize raw force/torque frames to O(1); force mask zeroes them."""
    frames = np.asarray(frames, dtype=np.float32)
    if mask == "force":
        return np.zeros_like(frames)
    out = frames.copy()
    out[..., :3] /= cfg.break_threshold
    out[..., 3:] /= cfg.break_threshold * mesh.strip_width
    return out


def prep_pose(pose: np.ndarray, mesh: MeshConfig, mask: str = "none") -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float32)
    if mask == "pose":
        return np.zeros_like(pose)
    out = pose.copy()
    out[:3] /= mesh.strip_length
    out[3:] /= np.pi
    return out


# ---------------------------------------------------------------------------
# Taped forward passes (used in gradient updates)
# ---------------------------------------------------------------------------

def encode_batch(enc: EncoderNet, frames_tb: np.ndarray, pose_b: np.ndarray) -> Tensor:
    """Encode a batch of equal-length frame sequences.

    frames_tb is [T, B, 6] already normalized, pose_b is [B, 6]; returns the
    z Tensor [B, Z_SIZE].
    """
    T, B, _ = frames_tb.shape
    h = Tensor(np.zeros((B, enc.lstm.hidden_size)))
    c = Tensor(np.zeros((B, enc.lstm.hidden_size)))
    h, c = nn.lstm_sequence(enc.lstm, [Tensor(frames_tb[t]) for t in range(T)], h, c)
    x = nn.relu(nn.linear_forward(enc.lin1, nn.concat(h, Tensor(pose_b))))
    return nn.linear_forward(enc.lin2, x)


def encode_tactile(enc: EncoderNet, frames: np.ndarray, pose: np.ndarray) -> Tensor:
    """Encode one decision input: frames [n, 6] (n >= 1) and pose [6]."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] != 6:
        raise ValueError(f"frames shape {frames.shape}")
    return encode_batch(enc, frames[:, None, :], np.asarray(pose, dtype=np.float32)[None, :])


def qnet_step(qn: QNet, z: Tensor, hidden=None):
    """One decision through the Q-network; returns (q [B, 6], new hidden)."""
    B = z.data.shape[0]
    if hidden is None:
        hidden = (Tensor(np.zeros((B, qn.lstm.hidden_size))),
                  Tensor(np.zeros((B, qn.lstm.hidden_size))))
    x = nn.relu(nn.layernorm(nn.linear_forward(qn.lin1, z), qn.ln1.gain, qn.ln1.shift))
    x = nn.relu(nn.layernorm(nn.linear_forward(qn.lin2, x), qn.ln2.gain, qn.ln2.shift))
    h, c = nn.lstm_step(qn.lstm, x, hidden[0], hidden[1])
    return nn.linear_forward(qn.head, h), (h, c)


def reactive_forward(rn: ReactiveNet, obs: Tensor) -> Tensor:
    x = nn.relu(nn.layernorm(nn.linear_forward(rn.lin1, obs), rn.ln1.gain, rn.ln1.shift))
    x = nn.relu(nn.layernorm(nn.linear_forward(rn.lin2, x), rn.ln2.gain, rn.ln2.shift))
    return nn.linear_forward(rn.head, x)


# ---------------------------------------------------------------------------
# Plain-numpy mirrors (rollouts and target values; no tape)
# ---------------------------------------------------------------------------
# Same float64-inside / float32-at-boundary discipline as the taped ops, so a
# mirror output matches the Tensor output exactly (tested).

def _f32(x):
    return np.asarray(x, dtype=np.float32)


def _linear_np(p: nn.LinearParams, x):
    return _f32(x @ p.weight.data.T + p.bias.data)


def _layernorm_np(ln: nn.LayerNormParams, x):
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(x64.var(axis=1, keepdims=True) + nn.LAYERNORM_EPS)
    return _f32((x64 - mu) * inv * ln.gain.data + ln.shift.data)


def _lstm_step_np(p: nn.LstmParams, x, h, c):
    def gate(wx, wh, b):
        return _f32(x @ wx.data.T + h @ wh.data.T + b.data)

    i = _f32(1.0 / (1.0 + np.exp(-gate(p.wx_i, p.wh_i, p.b_i).astype(np.float64))))
    f = _f32(1.0 / (1.0 + np.exp(-gate(p.wx_f, p.wh_f, p.b_f).astype(np.float64))))
    g = _f32(np.tanh(gate(p.wx_g, p.wh_g, p.b_g)))
    o = _f32(1.0 / (1.0 + np.exp(-gate(p.wx_o, p.wh_o, p.b_o).astype(np.float64))))
    c2 = _f32(_f32(f * c) + _f32(i * g))
    h2 = _f32(o * _f32(np.tanh(c2)))
    return h2, c2


def encode_np(enc: EncoderNet, frames_tb: np.ndarray, pose_b: np.ndarray) -> np.ndarray:
    T, B, _ = frames_tb.shape
    h = np.zeros((B, enc.lstm.hidden_size), dtype=np.float32)
    c = np.zeros_like(h)
    for t in range(T):
        h, c = _lstm_step_np(enc.lstm, _f32(frames_tb[t]), h, c)
    x = np.maximum(_linear_np(enc.lin1, np.concatenate([h, _f32(pose_b)], axis=1)), 0)
    return _linear_np(enc.lin2, x)


def qnet_step_np(qn: QNet, z: np.ndarray, h: np.ndarray, c: np.ndarray):
    x = np.maximum(_layernorm_np(qn.ln1, _linear_np(qn.lin1, z)), 0)
    x = np.maximum(_layernorm_np(qn.ln2, _linear_np(qn.lin2, x)), 0)
    h2, c2 = _lstm_step_np(qn.lstm, x, h, c)
    return _linear_np(qn.head, h2), h2, c2


def reactive_np(rn: ReactiveNet, obs: np.ndarray) -> np.ndarray:
    x = np.maximum(_layernorm_np(rn.ln1, _linear_np(rn.lin1, obs)), 0)
    x = np.maximum(_layernorm_np(rn.ln2, _linear_np(rn.lin2, x)), 0)
    return _linear_np(rn.head, x)


# ---------------------------------------------------------------------------
# Scripted baselines
# ---------------------------------------------------------------------------

def geom_greedy_policy(view: BoundaryView) -> Action:
    """Pull along the bisector of surface normal and peel tangent.

    Snaps the ideal direction to the closest of the six action axes by dot
    product; ties resolve to the lowest action index (Up first).
    """
    d = np.asarray(view.surface_normal, dtype=float) \
        + np.asarray(view.peel_tangent, dtype=float)
    norm = np.linalg.norm(d)
    if norm < 1e-9:
        d = np.asarray(view.surface_normal, dtype=float)
        norm = np.linalg.norm(d)
        if norm < 1e-9:
            return Action.UP
    return Action(int(np.argmax(ACTION_AXES @ (d / norm))))


def open_loop_policy(rng: np.random.Generator) -> np.ndarray:
    """Unit pull direction drawn uniformly from the upper hemisphere."""
    while True:
        v = rng.normal(size=3)
        norm = np.linalg.norm(v)
        if norm > 1e-12:
            break
    v = v / norm
    v[2] = abs(v[2])
    return v


# ---------------------------------------------------------------------------
# Replay
# ---------------------------------------------------------------------------

@dataclass
class DecisionRecord:
    """One decision block: what the agent saw, did, and saw next.

    frames holds every tactile frame gathered since the previous decision
    (30 per underlying step, so between 30 and 30*tau rows).  reward sums the
    per-step rewards of the block and steps counts them, which sets the
    discount exponent of the bootstrap.  next_frames/next_pose are the input
    of the following decision (shared arrays, not copies).
    """
    frames: np.ndarray
    pose: np.ndarray
    action: int
    reward: float
    steps: int
    done: bool
    next_frames: np.ndarray
    next_pose: np.ndarray


class ReplayBuffer:
    """Ring buffer of complete episodes (lists of DecisionRecords)."""

    def __init__(self, capacity: int = 500):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.episodes = deque(maxlen=capacity)

    def add_episode(self, records: list):
        if not records:
            raise ValueError("empty episode")
        self.episodes.append(list(records))

    def __len__(self):
        return len(self.episodes)


def sample_segments(buffer: ReplayBuffer, batch_size: int, seg_len: int,
                    rng: np.random.Generator) -> list:
    """Sample batch_size windows of up to seg_len consecutive records.

    Each window comes from a single episode and is truncated only when the
    episode itself is shorter than seg_len.  Recurrent state is meant to start
    from zero at the window head.
    """
    if len(buffer) == 0:
        raise ValueError("cannot sample from an empty replay buffer")
    windows = []
    for _ in range(batch_size):
        ep = buffer.episodes[int(rng.integers(len(buffer.episodes)))]
        if len(ep) <= seg_len:
            windows.append(ep)
        else:
            start = int(rng.integers(len(ep) - seg_len + 1))
            windows.append(ep[start:start + seg_len])
    return windows


# ---------------------------------------------------------------------------
# Training configuration and decision rules
# ---------------------------------------------------------------------------

@dataclass
class TrainerConfig:
    episodes: int = 1500
    gamma: float = 0.99
    lr: float = 2e-5
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_episodes: int | None = None   # default: first third of episodes
    tau: int = 8                            # max steps per decision block
    f_weak: float | None = None             # default: 0.2 * break threshold
    seg_len: int = 8
    batch_size: int = 16
    target_sync: int = 200                  # gradient steps between syncs
    warmup_episodes: int = 20
    grad_clip: float = 10.0
    update_every: int = 1                   # env steps per gradient step
    buffer_capacity: int = 500

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma outside (0, 1): {self.gamma}")
        if self.tau < 1:
            raise ValueError(f"tau must be >= 1, got {self.tau}")
        if self.f_weak is not None and self.f_weak < 0.0:
            raise ValueError(f"f_weak must be >= 0, got {self.f_weak}")
        for name in ("episodes", "seg_len", "batch_size", "target_sync",
                     "update_every", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def resolved_f_weak(self, cfg: PhysicsConfig) -> float:
        return 0.2 * cfg.break_threshold if self.f_weak is None else self.f_weak

    def resolved_decay(self) -> int:
        if self.eps_decay_episodes is not None:
            return self.eps_decay_episodes
        return max(1, self.episodes // 3)


class GateDecision(Enum):
    REPEAT = "Repeat"
    REEVALUATE = "Reevaluate"


def multistep_gate(last_frames: np.ndarray, repeats_so_far: int,
                   f_weak: float, tau: int) -> GateDecision:
    """Repeat the running action only while the felt force stays weak.

    last_frames are the raw frames of the most recent step; the gate compares
    the largest per-frame force magnitude against f_weak.  repeats_so_far
    counts executions of the current action, so tau bounds the block length.
    """
    if repeats_so_far >= tau:
        return GateDecision.REEVALUATE
    peak = float(np.max(np.linalg.norm(np.asarray(last_frames)[:, :3], axis=1)))
    return GateDecision.REPEAT if peak < f_weak else GateDecision.REEVALUATE


def double_q_target(reward: float, done: bool, gamma: float,
                    q_online_next: np.ndarray, q_target_next: np.ndarray) -> float:
    """Double-Q bootstrap: online net picks the action, target net prices it.

    gamma is the effective discount for the transition (already exponentiated
    when the record spans several steps).  Ties in the online argmax resolve
    to the lowest action index.
    """
    if done:
        return float(reward)
    a = int(np.argmax(np.asarray(q_online_next)))
    return float(reward) + gamma * float(np.asarray(q_target_next)[a])


def select_action(qn: QNet, z: np.ndarray, hidden, epsilon: float,
                  rng: np.random.Generator):
    """Epsilon-greedy over one Q-step; the hidden state advances either way."""
    B = z.shape[0] if z.ndim == 2 else 1
    z = z.reshape(B, -1)
    if hidden is None:
        hidden = (np.zeros((B, qn.lstm.hidden_size), dtype=np.float32),
                  np.zeros((B, qn.lstm.hidden_size), dtype=np.float32))
    q, h, c = qnet_step_np(qn, z, hidden[0], hidden[1])
    if rng.random() < epsilon:
        action = int(rng.integers(N_ACTIONS))
    else:
        action = int(np.argmax(q[0]))
    return action, (h, c)


def epsilon_schedule(episode: int, cfg: TrainerConfig) -> float:
    decay = cfg.resolved_decay()
    if episode >= decay:
        return cfg.eps_end
    frac = episode / decay
    return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------

def run_episode(env: PeelEnv, params, nets: dict, cfg: TrainerConfig,
                epsilon: float, rng: np.random.Generator, *, variant: str,
                mask: str = "none", scene_seed: int = 0):
    """Play one episode; returns (records, return, steps, outcome).

    variant picks the decision loop: "reactive" and "single" re-decide every
    step; "multi" holds an action for up to cfg.tau steps while the gate
    reports weak contact.  Records store raw (unnormalized) frames.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    tau = cfg.tau if variant == "multi" else 1
    f_weak = cfg.resolved_f_weak(env.cfg)
    obs = env.reset(params, seed=scene_seed)
    pose, frames = split_observation(obs)
    hidden = None
    records = []
    ep_return = 0.0
    while not env.done:
        if variant == "reactive":
            obs_n = np.concatenate([prep_pose(pose, env.mesh, mask),
                                    prep_frames(frames, env.cfg, env.mesh, mask).ravel()])
            q = reactive_np(nets["reactive"], obs_n[None, :])
            if rng.random() < epsilon:
                action = int(rng.integers(N_ACTIONS))
            else:
                action = int(np.argmax(q[0]))
        else:
            z = encode_np(nets["encoder"],
                          prep_frames(frames, env.cfg, env.mesh, mask)[:, None, :],
                          prep_pose(pose, env.mesh, mask)[None, :])
            action, hidden = select_action(nets["qnet"], z, hidden, epsilon, rng)

        block_frames = []
        block_reward = 0.0
        block_steps = 0
        while True:
            res = env.execute_action(action)
            block_steps += 1
            block_reward += res.reward
            next_pose, step_frames = split_observation(res.observation)
            block_frames.append(step_frames)
            if res.done:
                break
            # A force-masked agent is blind in the gate too.
            gate_frames = np.zeros_like(step_frames) if mask == "force" \
                else step_frames
            if multistep_gate(gate_frames, block_steps, f_weak, tau) \
                    is GateDecision.REEVALUATE:
                break
        next_frames = np.concatenate(block_frames, axis=0)
        records.append(DecisionRecord(frames, pose, action, block_reward,
                                      block_steps, res.done, next_frames, next_pose))
        ep_return += block_reward
        frames, pose = next_frames, next_pose
    return records, ep_return, env.steps, env.outcome


# ---------------------------------------------------------------------------
# Batched double-Q updates
# ---------------------------------------------------------------------------

def _encode_items_np(enc: EncoderNet, items, cfg, mesh, mask) -> np.ndarray:
    """Encode (frames, pose) pairs of mixed lengths; returns [N, Z_SIZE]."""
    out = np.zeros((len(items), Z_SIZE), dtype=np.float32)
    by_len = {}
    for i, (fr, po) in enumerate(items):
        by_len.setdefault(fr.shape[0], []).append(i)
    for T, idxs in by_len.items():
        fr = np.stack([prep_frames(items[i][0], cfg, mesh, mask) for i in idxs], axis=1)
        po = np.stack([prep_pose(items[i][1], mesh, mask) for i in idxs])
        out[idxs] = encode_np(enc, fr, po)
    return out


def _encode_items_taped(enc: EncoderNet, items, cfg, mesh, mask) -> Tensor:
    """Taped twin of _encode_items_np; same bucketing, same row order."""
    by_len = {}
    for i, (fr, po) in enumerate(items):
        by_len.setdefault(fr.shape[0], []).append(i)
    chunks, order = [], []
    for T, idxs in by_len.items():
        fr = np.stack([prep_frames(items[i][0], cfg, mesh, mask) for i in idxs], axis=1)
        po = np.stack([prep_pose(items[i][1], mesh, mask) for i in idxs])
        chunks.append(encode_batch(enc, fr, po))
        order.extend(idxs)
    stacked = chunks[0] if len(chunks) == 1 else nn.vstack(chunks)
    inverse = np.argsort(np.asarray(order))
    return nn.take_rows(stacked, inverse)


@dataclass
class _OnlineParams:
    """Online nets, their flattened tensor list, and the optimizer state."""
    nets: dict
    tensors: list = field(default_factory=list)
    opt: nn.OptState | None = None

    @staticmethod
    def create(nets: dict, lr: float) -> "_OnlineParams":
        tensors = []
        for key in sorted(nets):
            tensors.extend(nets[key].tensors())
        return _OnlineParams(nets=nets, tensors=tensors,
                             opt=nn.OptState.for_params(tensors, lr=lr))

    def apply_gradients(self, clip: float):
        grads = [t.grad for t in self.tensors]
        grads, _ = nn.clip_global_norm(grads, clip)
        new_data, self.opt = nn.rmsprop_update(
            [t.data for t in self.tensors], grads, self.opt)
        for t, d in zip(self.tensors, new_data):
            t.data = d


def _clone_nets(nets: dict) -> dict:
    return {key: _rebuild_with_copies(net) for key, net in nets.items()}


def _rebuild_with_copies(net):
    """Deep copy of a net: every Tensor re-wrapped so nothing aliases."""
    kwargs = {}
    for fld in dataclasses.fields(net):
        sub = getattr(net, fld.name)
        if isinstance(sub, (nn.LinearParams, nn.LstmParams, nn.LayerNormParams)):
            sub_kwargs = {}
            for f2 in dataclasses.fields(sub):
                v = getattr(sub, f2.name)
                sub_kwargs[f2.name] = Tensor(v.data.copy()) if isinstance(v, Tensor) else v
            kwargs[fld.name] = type(sub)(**sub_kwargs)
        else:
            kwargs[fld.name] = sub
    return type(net)(**kwargs)


def sync_target(online: dict, target: dict) -> None:
    for key in online:
        for (_, src), (_, dst) in zip(named_tensors(key, online[key]),
                                      named_tensors(key, target[key])):
            dst.data = src.data.copy()


def _update_recurrent(online: _OnlineParams, target: dict, windows,
                      cfg: TrainerConfig, phys: PhysicsConfig,
                      mesh: MeshConfig, mask: str) -> float:
    """One double-Q gradient step over sampled decision windows.

    The online input stream runs on the tape; bootstrap values run on the
    numpy mirrors with hidden state zeroed at each window head (the stored
    hidden is not replayed).  Windows shorter than the longest one are padded
    with row 0 and masked out of the loss.
    """
    B = len(windows)
    L = max(len(w) for w in windows)
    flat, row_of = [], {}
    for wi, w in enumerate(windows):
        for t, rec in enumerate(w):
            row_of[(wi, t)] = len(flat)
            flat.append(rec)
    n = len(flat)

    enc_on, qn_on = online.nets["encoder"], online.nets["qnet"]
    z_in = _encode_items_taped(enc_on, [(r.frames, r.pose) for r in flat],
                               phys, mesh, mask)
    next_items = [(r.next_frames, r.next_pose) for r in flat]
    zn_on = _encode_items_np(enc_on, next_items, phys, mesh, mask)
    zn_tg = _encode_items_np(target["encoder"], next_items, phys, mesh, mask)

    # Bootstrap streams (no gradients), batched across windows per timestep.
    y = np.zeros(n, dtype=np.float64)
    h_on = np.zeros((B, qn_on.lstm.hidden_size), dtype=np.float32)
    c_on, h_tg, c_tg = h_on.copy(), h_on.copy(), h_on.copy()
    for t in range(L):
        idx = np.array([row_of.get((wi, t), 0) for wi in range(B)])
        q_on, h_on, c_on = qnet_step_np(qn_on, zn_on[idx], h_on, c_on)
        q_tg, h_tg, c_tg = qnet_step_np(target["qnet"], zn_tg[idx], h_tg, c_tg)
        for wi in range(B):
            if t < len(windows[wi]):
                rec = windows[wi][t]
                y[row_of[(wi, t)]] = double_q_target(
                    rec.reward, rec.done, cfg.gamma ** rec.steps,
                    q_on[wi], q_tg[wi])

    # Online stream on the tape, masked squared error over real slots.
    nn.zero_grads(online.tensors)
    hidden = None
    total = None
    for t in range(L):
        idx = np.array([row_of.get((wi, t), 0) for wi in range(B)])
        live = np.array([1.0 if t < len(windows[wi]) else 0.0
                         for wi in range(B)], dtype=np.float32)
        acts = np.array([windows[wi][t].action if t < len(windows[wi]) else 0
                         for wi in range(B)])
        q_t, hidden = qnet_step(qn_on, nn.take_rows(z_in, idx), hidden)
        picked = nn.take_columns(q_t, acts)
        targets = np.array([y[row_of.get((wi, t), 0)] for wi in range(B)],
                           dtype=np.float32)
        diff = nn.add(picked, nn.constant(-targets))
        term = nn.sum_all(nn.mul(nn.mul(diff, diff), nn.constant(live)))
        total = term if total is None else nn.add(total, term)
    loss = nn.mul(total, nn.constant(np.float32(1.0 / n)))
    nn.backward(loss)
    online.apply_gradients(cfg.grad_clip)
    return float(loss.data)


def _update_reactive(online: _OnlineParams, target: dict, windows,
                     cfg: TrainerConfig, phys: PhysicsConfig,
                     mesh: MeshConfig, mask: str) -> float:
    """Double-Q step for the memoryless net: records train independently."""
    recs = [r for w in windows for r in w]
    rn = online.nets["reactive"]

    def flat_obs(frames, pose):
        return np.concatenate([prep_pose(pose, mesh, mask),
                               prep_frames(frames[-FRAMES_PER_STEP:], phys, mesh,
                                           mask).ravel()])

    obs = np.stack([flat_obs(r.frames, r.pose) for r in recs])
    nxt = np.stack([flat_obs(r.next_frames, r.next_pose) for r in recs])
    q_on_next = reactive_np(rn, nxt)
    q_tg_next = reactive_np(target["reactive"], nxt)
    y = np.array([double_q_target(r.reward, r.done, cfg.gamma ** r.steps,
                                  q_on_next[i], q_tg_next[i])
                  for i, r in enumerate(recs)], dtype=np.float32)

    nn.zero_grads(online.tensors)
    q = reactive_forward(rn, Tensor(obs))
    picked = nn.take_columns(q, np.array([r.action for r in recs]))
    loss = nn.mse_loss(picked, y)
    nn.backward(loss)
    online.apply_gradients(cfg.grad_clip)
    return float(loss.data)


# ---------------------------------------------------------------------------
# Training driver
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    variant: str
    mask: str
    nets: dict
    log: list
    grad_steps: int
    failed_updates: int


def build_nets(variant: str, rng: np.random.Generator) -> dict:
    if variant == "reactive":
        return {"reactive": init_reactive(rng)}
    return {"encoder": init_encoder(rng), "qnet": init_qnet(rng)}


def train(variant: str, cfg: TrainerConfig, *, mesh: MeshConfig | None = None,
          phys: PhysicsConfig | None = None, seed: int = 0, mask: str = "none",
          test_case: str = "T3", log_path=None, ckpt_path=None,
          progress=None) -> TrainResult:
    """Train one agent variant; same seed gives an identical log.

    Episodes draw fresh scenarios from test_case.  Gradient steps start once
    warmup_episodes episodes are stored and run at one step per update_every
    env steps, in a burst after each episode (replay holds only complete
    episodes, so mid-episode updates would see the same data).  A numerics
    failure inside one update is logged and skipped; training continues.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if mask not in MASKS:
        raise ValueError(f"unknown mask {mask!r}")
    mesh = mesh if mesh is not None else MeshConfig()
    phys = phys if phys is not None else PhysicsConfig()
    env = PeelEnv(mesh, phys)
    rng = np.random.default_rng(seed)
    nets = build_nets(variant, rng)
    online = _OnlineParams.create(nets, lr=cfg.lr)
    target = _clone_nets(nets)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    update = _update_reactive if variant == "reactive" else _update_recurrent

    log = []
    grad_steps = 0
    failed = 0
    pending = 0
    fh = open(log_path, "w") if log_path else None
    try:
        for ep in range(cfg.episodes):
            epsilon = epsilon_schedule(ep, cfg)
            scene_seed = int(rng.integers(2 ** 31 - 1))
            params = sample_params(test_case, scene_seed)
            records, ep_return, steps, outcome = run_episode(
                env, params, nets, cfg, epsilon, rng, variant=variant,
                mask=mask, scene_seed=scene_seed)
            buffer.add_episode(records)

            losses = []
            if len(buffer) >= cfg.warmup_episodes:
                pending += steps
                n_updates, pending = divmod(pending, cfg.update_every)
                for _ in range(n_updates):
                    windows = sample_segments(buffer, cfg.batch_size,
                                              cfg.seg_len, rng)
                    try:
                        losses.append(update(online, target, windows, cfg,
                                             phys, mesh, mask))
                    except FloatingPointError:
                        failed += 1
                        print(f"episode {ep}: update diverged, skipped",
                              file=sys.stderr)
                        continue
                    grad_steps += 1
                    if grad_steps % cfg.target_sync == 0:
                        sync_target(nets, target)

            entry = {
                "episode": ep,
                "return": float(ep_return),
                "steps": int(steps),
                "outcome": outcome.value,
                "epsilon": round(float(epsilon), 6),
                "mean_loss": float(np.mean(losses)) if losses else None,
            }
            log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()
            if progress:
                progress(entry)
    finally:
        if fh:
            fh.close()

    if ckpt_path:
        save_agent(ckpt_path, variant, nets,
                   {"mask": mask, "seed": seed, "episodes": cfg.episodes,
                    "test_case": test_case})
    return TrainResult(variant=variant, mask=mask, nets=nets, log=log,
                       grad_steps=grad_steps, failed_updates=failed)


# ---------------------------------------------------------------------------
# Agent checkpoints
# ---------------------------------------------------------------------------

def save_agent(path, variant: str, nets: dict, meta: dict | None = None) -> None:
    header = {"kind": "peel-agent", "variant": variant}
    if meta:
        header.update(meta)
    pairs = []
    for key in sorted(nets):
        pairs.extend((name, t.data) for name, t in named_tensors(key, nets[key]))
    nn.save_checkpoint(path, header, pairs)


def load_agent(path):
    """Returns (variant, nets, header); shape mismatches raise ValueError."""
    header, arrays = nn.load_checkpoint(path)
    variant = header.get("variant")
    if header.get("kind") != "peel-agent" or variant not in VARIANTS:
        raise ValueError(f"not an agent checkpoint: {path}")
    rng = np.random.default_rng(0)
    nets = build_nets(variant, rng)
    for key in sorted(nets):
        for name, t in named_tensors(key, nets[key]):
            if name not in arrays:
                raise ValueError(f"checkpoint missing tensor {name}")
            if tuple(arrays[name].shape) != tuple(t.data.shape):
                raise ValueError(
                    f"checkpoint tensor {name} has shape "
                    f"{arrays[name].shape}, expected {t.data.shape}")
            t.data = arrays[name].copy()
    extra = set(arrays) - {name for key in sorted(nets)
                           for name, _ in named_tensors(key, nets[key])}
    if extra:
        raise ValueError(f"checkpoint has unexpected tensors: {sorted(extra)[:3]}")
    return variant, nets, header
