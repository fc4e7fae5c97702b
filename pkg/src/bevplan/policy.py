"""Learnable planner: compact CNN backbone, branched spatial attention,
recurrent control decoder through the kinematic layer.

The network is torch; the task losses and their gradients come from the
framework-free numpy core through a custom autograd bridge, so training
optimizes exactly the quantities the oracle suite validates. The kinematic
layer inside the decoder is the same step update in torch ops (elementary
arithmetic, so autograd differentiates it exactly); its equality with the
numpy rollout is unit-tested.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import losses as losses_mod
from .core import Control, GridSpec, Trajectory, VehicleGeometry, VehicleState
from .scene import CHANNEL_NAMES, ChannelStack, TaskMasks

PARAMS_MAGIC = b"BEVPOL01"
PARAMS_VERSION = 1

ATTENTION_MODES = ("none", "branch", "raw", "inline")


class PolicyError(RuntimeError):
    pass


class NonFiniteActivation(PolicyError):
    """Forward produced NaN/inf; training aborts the offending batch."""


@dataclass(frozen=True)
class PolicyConfig:
    in_channels: int = len(CHANNEL_NAMES)
    grid: GridSpec = GridSpec()
    n_steps: int = 10
    dt: float = 0.2
    wheelbase: float = 2.8
    steer_max: float = 0.52
    accel_max: float = 4.0
    backbone_channels: tuple = (16, 24, 32, 48, 64)
    attention_tap: int = 1  # backbone stage whose features feed attention
    attention_mode: str = "branch"  # none | branch | raw | inline
    attention_channels: int = 24
    encode_dim: int = 64
    state_embed_dim: int = 32
    hidden_dim: int = 128

    def __post_init__(self):
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.attention_mode!r}")
        if not 0 <= self.attention_tap < len(self.backbone_channels) - 1:
            raise ValueError("attention tap must index an intermediate stage")


@dataclass
class PolicyParams:
    """Architecture config + weights + format version, torch-free payload."""

    config: PolicyConfig
    arrays: dict  # name -> np.ndarray (float32)
    version: int = PARAMS_VERSION


@dataclass
class PolicyOutput:
    controls: tuple
    states: Trajectory  # ego frame; states[0] == (0, 0, 0, v0)
    attention_map: np.ndarray  # (h, w) in [0, 1]


class _DilatedAttention(nn.Module):
    """Parallel dilated 3x3 convs -> 1-channel logits -> sigmoid weighting."""

    def __init__(self, cin: int, mid: int):
        super().__init__()
        self.branches = nn.ModuleList([
            nn.Conv2d(cin, mid, 3, padding=d, dilation=d) for d in (1, 2, 4)])
        self.head = nn.Conv2d(mid, 1, 1)

    def forward(self, x):
        h = sum(F.relu(b(x)) for b in self.branches)
        return torch.sigmoid(self.head(h))


class _Encoder(nn.Module):
    """3x3 conv + average-pool stack reducing a feature map to a vector."""

    def __init__(self, cin: int, out_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, 32, 3, padding=1)
        self.conv2 = nn.Conv2d(32, 32, 3, padding=1)
        self.fc = nn.Linear(32, out_dim)

    def forward(self, x):
        x = F.avg_pool2d(F.relu(self.conv1(x)), 2)
        x = F.avg_pool2d(F.relu(self.conv2(x)), 2)
        x = x.mean(dim=(2, 3))
        return F.relu(self.fc(x))


class PolicyNet(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.backbone_channels
        blocks = []
        c = cfg.in_channels
        for co in chans:
            blocks.append(nn.Sequential(
                nn.Conv2d(c, co, 3, stride=2, padding=1), nn.ReLU()))
            c = co
        self.blocks = nn.ModuleList(blocks)
        tap_c = chans[cfg.attention_tap]
        if cfg.attention_mode == "raw":
            self.attention = _DilatedAttention(cfg.in_channels, cfg.attention_channels)
            self.encode = _Encoder(cfg.in_channels, cfg.encode_dim)
        elif cfg.attention_mode in ("branch", "inline"):
            self.attention = _DilatedAttention(tap_c, cfg.attention_channels)
            self.encode = _Encoder(tap_c, cfg.encode_dim)
        else:
            self.attention = None
            self.encode = _Encoder(tap_c, cfg.encode_dim)
        self.head_fc = nn.Linear(chans[-1], cfg.hidden_dim)
        self.state_embed = nn.Linear(4, cfg.state_embed_dim)
        self.cell = nn.LSTMCell(cfg.encode_dim + cfg.state_embed_dim, cfg.hidden_dim)
        self.out = nn.Linear(cfg.hidden_dim, 2)
        # fixed Glorot-scale draw (from the construction seed) for the initial
        # cell state; the initial hidden state comes from the backbone
        c0 = torch.randn(cfg.hidden_dim) * math.sqrt(1.0 / cfg.hidden_dim)
        self.register_buffer("c0", c0)

    def forward(self, images: torch.Tensor, v0: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """images (B, C, H, W), v0 (B,) -> (states (B, N+1, 4),
        controls (B, N, 2), attention map (B, h, w))."""
        cfg = self.cfg
        if not torch.isfinite(images).all():
            raise NonFiniteActivation("non-finite input image")
        x = images
        feat_tap = None
        attn_map = None
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == cfg.attention_tap:
                feat_tap = x
                if cfg.attention_mode == "inline":
                    attn_map = self.attention(feat_tap)
                    x = feat_tap * attn_map
                    feat_tap = x
        f_h = x.mean(dim=(2, 3))
        h0 = torch.tanh(self.head_fc(f_h))

        if cfg.attention_mode == "none":
            a_vec = self.encode(feat_tap)
            attn_map = torch.zeros(images.shape[0], 1, 1, 1,
                                   device=images.device)
        elif cfg.attention_mode == "raw":
            attn_map = self.attention(images)
            a_vec = self.encode(images * attn_map)
        elif cfg.attention_mode == "inline":
            a_vec = self.encode(feat_tap)
        else:  # branch
            attn_map = self.attention(feat_tap)
            a_vec = self.encode(feat_tap * attn_map)

        B = images.shape[0]
        zeros = torch.zeros(B, dtype=images.dtype, device=images.device)
        state = torch.stack([zeros, zeros, zeros, v0.to(images.dtype)], dim=1)
        states = [state]
        controls = []
        h = h0
        c = self.c0[None, :].expand(B, -1).contiguous()
        for _ in range(cfg.n_steps):
            s_emb = F.relu(self.state_embed(state))
            h, c = self.cell(torch.cat([a_vec, s_emb], dim=1), (h, c))
            raw = self.out(h)
            steer = cfg.steer_max * torch.tanh(raw[:, 0])
            v = state[:, 3]
            a_lo = torch.maximum(torch.full_like(v, -cfg.accel_max), -v / cfg.dt)
            a_hi = torch.full_like(v, cfg.accel_max)
            accel = a_lo + (a_hi - a_lo) * torch.sigmoid(raw[:, 1])
            controls.append(torch.stack([steer, accel], dim=1))
            state = kinematic_step_torch(state, steer, accel, cfg.dt, cfg.wheelbase)
            states.append(state)
        states_t = torch.stack(states, dim=1)
        controls_t = torch.stack(controls, dim=1)
        if not torch.isfinite(states_t).all():
            raise NonFiniteActivation("non-finite decoder state")
        return states_t, controls_t, attn_map[:, 0]


def kinematic_step_torch(state: torch.Tensor, steer: torch.Tensor,
                         accel: torch.Tensor, dt: float, wheelbase: float
                         ) -> torch.Tensor:
    """The discrete bicycle update in torch ops (batch, 4)."""
    x, y, phi, v = state.unbind(dim=1)
    return torch.stack([
        x + v * torch.cos(phi) * dt,
        y + v * torch.sin(phi) * dt,
        phi + v * torch.tan(steer) / wheelbase * dt,
        v + accel * dt,
    ], dim=1)


def _net_from_params(params: PolicyParams) -> PolicyNet:
    net = PolicyNet(params.config)
    state = {k: torch.from_numpy(v.copy()) for k, v in params.arrays.items()}
    net.load_state_dict(state)
    return net


def _params_from_net(cfg: PolicyConfig, net: PolicyNet) -> PolicyParams:
    arrays = {k: v.detach().cpu().numpy().copy()
              for k, v in net.state_dict().items()}
    return PolicyParams(config=cfg, arrays=arrays)


def init_params(cfg: PolicyConfig, seed: int) -> PolicyParams:
    torch.manual_seed(seed)
    return _params_from_net(cfg, PolicyNet(cfg))


def _cached_net(params: PolicyParams) -> PolicyNet:
    net = getattr(params, "_net", None)
    if net is None:
        net = _net_from_params(params)
        net.eval()
        params._net = net
    return net


def forward(stack: ChannelStack, v0: float, params: PolicyParams) -> PolicyOutput:
    """Deterministic single-frame inference."""
    net = _cached_net(params)
    img = torch.from_numpy(stack.tensor()[None].astype(np.float32))
    with torch.no_grad():
        states_t, controls_t, attn = net(img, torch.tensor([float(v0)]))
    states = [VehicleState.from_array(r) for r in states_t[0].numpy().astype(float)]
    controls = tuple(Control(float(s), float(a)) for s, a in controls_t[0].numpy())
    traj = Trajectory(dt=params.config.dt, states=tuple(states), controls=controls)
    return PolicyOutput(controls=controls, states=traj,
                        attention_map=attn[0].numpy().astype(np.float32))


class _TaskLossBridge(torch.autograd.Function):
    """Numpy task losses (and analytic gradients) inside the torch graph."""

    @staticmethod
    def forward(ctx, states, geom, grid, masks, alpha, truncated, task_weight):
        arr = states.detach().cpu().numpy().astype(np.float64)
        total = 0.0
        grads = np.zeros_like(arr)
        for b in range(arr.shape[0]):
            for mask in (masks[b].obstacle, masks[b].route, masks[b].road,
                         masks[b].signal):
                val, g = losses_mod.task_loss_states(
                    arr[b], geom, grid, VehicleState(0, 0, 0, 0), mask,
                    alpha=alpha, truncated=truncated, dtype=np.float32)
                total += val
                grads[b] += g
        ctx.save_for_backward(torch.from_numpy(
            (task_weight * grads).astype(np.float32)))
        return states.new_tensor(task_weight * total)

    @staticmethod
    def backward(ctx, grad_out):
        (g,) = ctx.saved_tensors
        return grad_out * g, None, None, None, None, None, None


def task_loss_torch(states: torch.Tensor, geom: VehicleGeometry, grid: GridSpec,
                    masks: Sequence[TaskMasks], alpha: float, truncated: bool,
                    task_weight: float) -> torch.Tensor:
    """Batch task loss; states are the decoded waypoints (B, N, 4)."""
    return _TaskLossBridge.apply(states, geom, grid, masks, alpha, truncated,
                                 task_weight)


def imitation_loss_torch(pred: torch.Tensor, truth: torch.Tensor,
                         weights: torch.Tensor, keep: torch.Tensor
                         ) -> torch.Tensor:
    """Batched weighted L2 imitation loss with wrapped heading residual.

    pred/truth are (B, N, 4); keep is the per-sample dropout indicator.
    """
    res = pred - truth
    wrapped = torch.atan2(torch.sin(res[..., 2]), torch.cos(res[..., 2]))
    res = torch.cat([res[..., :2], wrapped[..., None], res[..., 3:]], dim=-1)
    norms = torch.linalg.vector_norm(weights[None, None, :] * res, dim=-1)
    return (keep * norms.sum(dim=1)).sum()


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    val_fraction: float = 0.1
    loss_weights: losses_mod.LossWeights = field(
        default_factory=losses_mod.LossWeights)
    use_task_losses: bool = True
    truncated_raster: bool = False
    raster_alpha: float = 0.5
    ego_geometry: VehicleGeometry = field(default_factory=VehicleGeometry)
    log_every: int = 0  # batches; 0 silences progress printing


@dataclass
class TrainResult:
    params: PolicyParams
    curve: list  # per-epoch dicts: train/val loss components
    best_epoch: int


def _samples_to_tensors(samples, cfg: PolicyConfig):
    imgs = torch.from_numpy(np.stack([s.channels.tensor() for s in samples]))
    v0 = torch.tensor([float(s.v0) for s in samples])
    truth = torch.from_numpy(np.stack([
        s.truth.states_array()[1:].astype(np.float32) for s in samples]))
    masks = [s.masks for s in samples]
    return imgs, v0, truth, masks


def train(dataset: Sequence, policy_cfg: PolicyConfig, cfg: TrainConfig,
          on_epoch: Optional[Callable] = None) -> TrainResult:
    """Adam training with per-sample imitation dropout and task losses.

    The dataset is a sequence of augment.Sample. Deterministic for a fixed
    (dataset order, config, seed). Returns the best-by-validation params.
    """
    if len(dataset) == 0:
        raise PolicyError("empty dataset")
    for s in dataset:
        if len(s.truth.states) != policy_cfg.n_steps + 1:
            raise PolicyError(
                f"label length {len(s.truth.states)} mismatches horizon "
                f"{policy_cfg.n_steps}")
    torch.manual_seed(cfg.seed)
    net = PolicyNet(policy_cfg)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)

    idx = rng.permutation(len(dataset))
    n_val = max(1, int(len(dataset) * cfg.val_fraction)) if len(dataset) > 4 else 0
    val_idx = idx[:n_val]
    train_idx = idx[n_val:] if n_val else idx
    lam = torch.tensor(cfg.loss_weights.imitation_weights, dtype=torch.float32)

    def batch_loss(samples, dropout_draws) -> tuple[torch.Tensor, dict]:
        imgs, v0, truth, masks = _samples_to_tensors(samples, policy_cfg)
        states_t, _, _ = net(imgs, v0)
        decoded = states_t[:, 1:]
        keep = torch.tensor(
            [0.0 if d < cfg.loss_weights.imitation_dropout_p else 1.0
             for d in dropout_draws], dtype=torch.float32)
        imit = imitation_loss_torch(decoded, truth, lam, keep)
        parts = {"imit": float(imit.detach())}
        total = imit
        if cfg.use_task_losses and cfg.loss_weights.task_weight > 0:
            task = task_loss_torch(decoded, cfg.ego_geometry, policy_cfg.grid,
                                   masks, cfg.raster_alpha, cfg.truncated_raster,
                                   cfg.loss_weights.task_weight)
            parts["task"] = float(task.detach())
            total = total + task
        else:
            parts["task"] = 0.0
        return total, parts

    curve = []
    best = (math.inf, 0, _params_from_net(policy_cfg, net))
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        net.train()
        tr_imit = tr_task = 0.0
        nb = 0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            samples = [dataset[i] for i in sel]
            draws = rng.uniform(size=len(samples))
            opt.zero_grad()
            try:
                total, parts = batch_loss(samples, draws)
            except NonFiniteActivation:
                continue  # abort the batch, keep training
            if not torch.isfinite(total):
                raise PolicyError(f"divergence: non-finite loss at epoch {epoch}")
            total.backward()
            opt.step()
            tr_imit += parts["imit"]
            tr_task += parts["task"]
            nb += 1
            if cfg.log_every and nb % cfg.log_every == 0:
                print(f"  epoch {epoch} batch {nb}: imit {parts['imit']:.4f} "
                      f"task {parts['task']:.4f}", flush=True)
        net.eval()
        val_total = 0.0
        if n_val:
            with torch.no_grad():
                for lo in range(0, len(val_idx), cfg.batch_size):
                    samples = [dataset[i] for i in val_idx[lo:lo + cfg.batch_size]]
                    total, _ = batch_loss(samples, [1.0] * len(samples))
                    val_total += float(total)
            val_total /= max(1, len(val_idx))
        else:
            val_total = (tr_imit + tr_task) / max(1, len(train_idx))
        row = {"epoch": epoch,
               "train_imit": tr_imit / max(1, len(train_idx)),
               "train_task": tr_task / max(1, len(train_idx)),
               "val_total": val_total}
        curve.append(row)
        if val_total < best[0]:
            best = (val_total, epoch, _params_from_net(policy_cfg, net))
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(params=best[2], curve=curve, best_epoch=best[1])


def save_params(params: PolicyParams, path) -> None:
    """Versioned binary blob: magic, manifest (config + shapes + sha256 of
    the payload), then raw little-endian float arrays."""
    payload = io.BytesIO()
    entries = []
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name])
        entries.append({"name": name, "dtype": str(arr.dtype),
                        "shape": list(arr.shape), "offset": payload.tell(),
                        "nbytes": arr.nbytes})
        payload.write(arr.tobytes())
    blob = payload.getvalue()
    cfg_dict = asdict(params.config)
    cfg_dict["grid"] = {"width_px": params.config.grid.width_px,
                        "height_px": params.config.grid.height_px,
                        "resolution": params.config.grid.resolution,
                        "anchor_px": list(params.config.grid.anchor_px)}
    manifest = json.dumps({
        "version": params.version,
        "config": cfg_dict,
        "entries": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PARAMS_MAGIC)
        f.write(struct.pack("<I", len(manifest)))
        f.write(manifest)
        f.write(blob)


def load_params(path) -> PolicyParams:
    try:
        with open(path, "rb") as f:
            magic = f.read(len(PARAMS_MAGIC))
            if magic != PARAMS_MAGIC:
                raise PolicyError("not a policy parameter file")
            (mlen,) = struct.unpack("<I", f.read(4))
            manifest = json.loads(f.read(mlen).decode("utf-8"))
            blob = f.read()
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise PolicyError(f"corrupt parameter file: {e}") from e
    if manifest.get("version") != PARAMS_VERSION:
        raise PolicyError(f"unsupported version {manifest.get('version')!r}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise PolicyError("checksum mismatch: corrupt parameter file")
    cfg_dict = dict(manifest["config"])
    g = cfg_dict.pop("grid")
    cfg = PolicyConfig(grid=GridSpec(g["width_px"], g["height_px"],
                                     g["resolution"], tuple(g["anchor_px"])),
                       **{k: tuple(v) if isinstance(v, list) else v
                          for k, v in cfg_dict.items()})
    arrays = {}
    for e in manifest["entries"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise PolicyError("truncated parameter file")
        arrays[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(
            e["shape"]).copy()
    return PolicyParams(config=cfg, arrays=arrays, version=manifest["version"])


def policy_fn(params: PolicyParams) -> Callable:
    """(ChannelStack, v0) -> ego-frame Trajectory closure for the synthesizers."""

    def fn(stack: ChannelStack, v0: float) -> Trajectory:
        return forward(stack, v0, params).states

    return fn
