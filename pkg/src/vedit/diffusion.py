"""Instruction-conditioned video denoiser, training objective and guided sampling.

The denoiser sees the input-video latent and the noisy edited latent stacked
along the channel axis, plus a timestep and an instruction embedding, and
predicts the noise that was added.  Null conditions are all-zero tensors
(zero latent for vision, zero embedding for text) both when conditions are
dropped during training and when guidance branches are evaluated.
"""
from __future__ import annotations

import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numkit as nk
from .augment import EditTriplet
from .dataset import MixedSampler, derive_seed
from .numkit import AdamState, NonFiniteError, Rng, ShapeError, Tensor
from .schedule import NoiseSchedule, ddim_step, default_schedule, q_sample, sampling_timesteps

TEXT_DIM = 32
TIME_DIM = 16
HIDDEN = 64

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_TOKEN = re.compile(r"[^\W_]+")


# ---------------------------------------------------------------------------
# conditioning


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & nk.MASK64
    return h


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def text_bucket(token: str, dim: int = TEXT_DIM) -> int:
    return fnv1a64(token.encode("utf-8")) % dim


def embed_text(instruction: str, dim: int = TEXT_DIM) -> Tensor:
    """L2-normalised bag of FNV-1a-hashed tokens; empty text gives the zero vector."""
    v = np.zeros(dim, dtype=np.float64)
    for tok in tokenize(instruction):
        v[text_bucket(tok, dim)] += 1.0
    n = np.linalg.norm(v)
    if n > 0:
        v /= n
    return Tensor(v.astype(np.float32))


def time_embedding(t: np.ndarray, dim: int = TIME_DIM) -> np.ndarray:
    """Sinusoidal embedding ``[sin(t f_k), cos(t f_k)]`` with ``f_k = 10000^(-k/(dim/2))``."""
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


@dataclass(frozen=True)
class DropoutPolicy:
    p_drop_text: float = 0.10
    p_drop_vision: float = 0.10
    p_drop_both: float = 0.05

    def __post_init__(self):
        ps = (self.p_drop_text, self.p_drop_vision, self.p_drop_both)
        if any(not 0.0 <= p <= 1.0 for p in ps) or sum(ps) > 1.0 + 1e-12:
            raise ValueError(f"dropout probabilities must be in [0, 1] and sum to <= 1, got {ps}")

    def choose(self, u: float) -> str:
        if u < self.p_drop_text:
            return "drop_text"
        if u < self.p_drop_text + self.p_drop_vision:
            return "drop_vision"
        if u < self.p_drop_text + self.p_drop_vision + self.p_drop_both:
            return "drop_both"
        return "keep"


DROP_LABELS = ("drop_text", "drop_vision", "drop_both", "keep")


def _apply_drop(label: str, x_I: Tensor, c_emb: Tensor) -> tuple[Tensor, Tensor]:
    if label in ("drop_vision", "drop_both"):
        x_I = Tensor(np.zeros_like(x_I.data))
    if label in ("drop_text", "drop_both"):
        c_emb = Tensor(np.zeros_like(c_emb.data))
    return x_I, c_emb


def drop_conditions(seed: int, x_I: Tensor, c_emb: Tensor, policy: DropoutPolicy = DropoutPolicy()
                    ) -> tuple[Tensor, Tensor, str]:
    """Null out the text, the vision latent, both, or neither; one uniform draw from ``seed``."""
    label = policy.choose(Rng(seed).random())
    x2, c2 = _apply_drop(label, x_I, c_emb)
    return x2, c2, label


class IdentityCodec:
    """Latent codec that passes pixels through unchanged."""

    name = "identity"

    def encode(self, video) -> Tensor:
        return Tensor(np.asarray(video, dtype=np.float32))

    def decode(self, latent: Tensor) -> np.ndarray:
        return np.array(latent.data, dtype=np.float32)


# ---------------------------------------------------------------------------
# model


class DenoiserModel:
    """Frame-level MLP trunk, frame-mean temporal mixer and an output head.

    Input ``x`` is ``(F, 2C, H, W)`` or ``(B, F, 2C, H, W)`` (vision latent
    channels first, then the noisy latent); output is ``(..., F, C, H, W)``.

    The trunk runs three affine+SiLU layers over each flattened frame joined
    with the time and text embeddings.  The mixer feeds the across-frame mean
    of trunk features through one affine+SiLU layer and adds it back to every
    frame.  Two heads are available:

    * ``pixel`` (default): one hidden SiLU layer shared by all pixels, fed
      with that pixel's input channels plus a projection of its frame's
      features, then an affine map to ``C`` outputs;
    * ``affine``: a single affine map from frame features to ``C*H*W``.
    """

    HEADS = ("pixel", "affine")

    def __init__(self, frame_shape: Sequence[int], hidden: int = HIDDEN, seed: int = 0,
                 text_dim: int = TEXT_DIM, time_dim: int = TIME_DIM, head: str = "pixel",
                 head_hidden: int = HIDDEN, dtype=np.float32):
        self.frame_shape = tuple(int(d) for d in frame_shape)
        if len(self.frame_shape) != 3:
            raise ShapeError(f"frame_shape must be (C, H, W), got {frame_shape}")
        if head not in self.HEADS:
            raise ValueError(f"unknown head {head!r}; choose from {self.HEADS}")
        self.hidden, self.text_dim, self.time_dim = int(hidden), int(text_dim), int(time_dim)
        self.head, self.head_hidden = head, int(head_hidden)
        self.dtype = dtype
        C, H, W = self.frame_shape
        self.latent_dim = C * H * W
        h = self.hidden
        layers = {"trunk0": (2 * self.latent_dim + self.time_dim + self.text_dim, h),
                  "trunk1": (h, h), "trunk2": (h, h), "mixer": (h, h)}
        if head == "affine":
            layers["head"] = (h, self.latent_dim)
        else:
            layers["head.ctx"] = (h, self.head_hidden)
            layers["head.pix"] = (2 * C, self.head_hidden)
            layers["head.out"] = (self.head_hidden, C)
        rng = Rng(seed)
        self.params: dict[str, Tensor] = {}
        for name, (fi, fo) in layers.items():
            w = rng.normal((fi, fo)).astype(np.float64) / math.sqrt(fi)
            self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
            if name != "head.pix":
                self.params[f"{name}.bias"] = Tensor(np.zeros(fo), requires_grad=True, dtype=dtype)

    def config(self) -> dict[str, int]:
        C, H, W = self.frame_shape
        return {"C": C, "H": H, "W": W, "hidden": self.hidden, "text_dim": self.text_dim,
                "time_dim": self.time_dim, "head": self.HEADS.index(self.head), "head_hidden": self.head_hidden}

    @classmethod
    def from_config(cls, cfg: dict[str, int]) -> "DenoiserModel":
        return cls((cfg["C"], cfg["H"], cfg["W"]), hidden=cfg["hidden"], text_dim=cfg["text_dim"],
                   time_dim=cfg["time_dim"], head=cls.HEADS[cfg.get("head", 0)],
                   head_hidden=cfg.get("head_hidden", HIDDEN))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def __call__(self, x: Tensor, t, c_emb: Tensor) -> Tensor:
        return self.forward(x, t, c_emb)

    def forward(self, x: Tensor, t, c_emb: Tensor) -> Tensor:
        single = x.data.ndim == 4
        if single:
            x = nk.reshape(x, (1,) + x.shape)
            c_emb = nk.reshape(c_emb, (1, -1))
        if x.data.ndim != 5:
            raise ShapeError(f"model input must be (F, 2C, H, W) or (B, F, 2C, H, W), got {list(x.shape)}")
        B, F, C2, H, W = x.shape
        C = self.frame_shape[0]
        if (C2, H, W) != (2 * C, self.frame_shape[1], self.frame_shape[2]):
            raise ShapeError(f"model expects frames {(2 * C,) + self.frame_shape[1:]}, got {(C2, H, W)}")
        if c_emb.shape != (B, self.text_dim):
            raise ShapeError(f"text embedding shape {list(c_emb.shape)} != {[B, self.text_dim]}")
        tt = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (B,))
        p = self.params
        rows, P = B * F, H * W

        x_flat = nk.reshape(x, (rows, C2 * P))
        temb = Tensor(np.repeat(time_embedding(tt, self.time_dim), F, axis=0), dtype=self.dtype)
        cemb = nk.reshape(nk.expand(nk.reshape(c_emb, (B, 1, self.text_dim)), 1, F), (rows, self.text_dim))
        h = nk.concat([x_flat, temb, cemb], axis=1)
        for i in range(3):
            h = nk.silu(nk.linear(h, p[f"trunk{i}.weight"], p[f"trunk{i}.bias"]))

        h3 = nk.reshape(h, (B, F, self.hidden))
        pooled = nk.reshape(nk.mean_axis(h3, 1, keepdims=True), (B, self.hidden))
        mix = nk.silu(nk.linear(pooled, p["mixer.weight"], p["mixer.bias"]))
        feats = nk.reshape(h3 + nk.expand(nk.reshape(mix, (B, 1, self.hidden)), 1, F), (rows, self.hidden))

        if self.head == "affine":
            out = nk.linear(feats, p["head.weight"], p["head.bias"])
        else:
            k = self.head_hidden
            ctx = nk.linear(feats, p["head.ctx.weight"], p["head.ctx.bias"])
            ctx = nk.reshape(nk.expand(nk.reshape(ctx, (rows, 1, k)), 1, P), (rows * P, k))
            pix = nk.reshape(nk.transpose(nk.reshape(x, (rows, C2, P)), (0, 2, 1)), (rows * P, C2))
            hp = nk.silu(nk.matmul(pix, p["head.pix.weight"]) + ctx)
            out = nk.linear(hp, p["head.out.weight"], p["head.out.bias"])
            out = nk.transpose(nk.reshape(out, (rows, P, C)), (0, 2, 1))
        shape = (F, C, H, W) if single else (B, F, C, H, W)
        return nk.reshape(out, shape)


# ---------------------------------------------------------------------------
# training


def _stack(ts: Sequence[Tensor]) -> Tensor:
    return Tensor(np.stack([t.data for t in ts]))


def batch_loss(model, triplets: Sequence[EditTriplet], codec, schedule: NoiseSchedule, seed: int,
               policy: DropoutPolicy = DropoutPolicy()) -> tuple[Tensor, dict]:
    """Noise-prediction loss over a batch, all randomness drawn from ``seed``.

    Draw order: per sample ``t`` then dropout uniform, then one normal block
    for the whole batch.
    """
    triplets = list(triplets)
    rng = Rng(seed)
    ts, labels = [], []
    for _ in triplets:
        ts.append(rng.integers(schedule.T))
        labels.append(policy.choose(rng.random()))
    x_I = _stack([codec.encode(tr.video_in) for tr in triplets])
    x_E = _stack([codec.encode(tr.video_out) for tr in triplets])
    if x_I.shape != x_E.shape:
        raise ShapeError("input and edited latents differ in shape")
    eps = Tensor(rng.normal(x_E.shape))
    z_t = Tensor(np.stack([q_sample(Tensor(x_E.data[i]), ts[i], Tensor(eps.data[i]), schedule).data
                           for i in range(len(triplets))]))
    cond_x, cond_c = [], []
    for i, tr in enumerate(triplets):
        xi, ci = _apply_drop(labels[i], Tensor(x_I.data[i]), embed_text(tr.instruction, model.text_dim))
        cond_x.append(xi)
        cond_c.append(ci)
    inp = nk.channel_concat(_stack(cond_x), z_t)
    pred = model(inp, np.array(ts), _stack(cond_c))
    loss = nk.mse(eps, pred)
    return loss, {"t": ts, "labels": labels}


def training_step(model, triplet: EditTriplet, codec, schedule: NoiseSchedule, seed: int,
                  policy: DropoutPolicy = DropoutPolicy()) -> Tensor:
    """Single-triplet loss with gradients accumulated into the model parameters."""
    loss, _ = batch_loss(model, [triplet], codec, schedule, seed, policy)
    nk.backward(loss)
    return loss


@dataclass
class TrainConfig:
    steps: int = 100
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0
    ratio: tuple[int, int] = (5, 1)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def select_batch(step: int, sources: Sequence[Sequence[EditTriplet]], cfg: TrainConfig) -> list[EditTriplet]:
    """Batch for ``step`` depends only on ``(cfg.seed, step)`` so runs can resume exactly."""
    bseed = derive_seed(cfg.seed, 2 * step)
    if len(sources) == 1:
        src = sources[0]
        idx = Rng(bseed).integers(len(src), cfg.batch)
        return [src[int(i)] for i in idx]
    sampler = MixedSampler(sources[0], sources[1], cfg.ratio, bseed)
    return [sampler.draw()[1] for _ in range(cfg.batch)]


def train(model: DenoiserModel, sources: Sequence[Sequence[EditTriplet]], schedule: NoiseSchedule,
          cfg: TrainConfig, codec=None, policy: DropoutPolicy = DropoutPolicy(),
          state: AdamState | None = None, start_step: int = 0,
          on_step: Callable[[int, float], None] | None = None) -> tuple[AdamState, list[float]]:
    """Run steps ``start_step .. cfg.steps-1``; returns the optimizer state and losses."""
    if not 1 <= len(sources) <= 2 or any(len(s) == 0 for s in sources):
        raise ValueError("need one or two non-empty sources")
    codec = codec or IdentityCodec()
    params = model.parameters()
    state = state or AdamState.for_params(params)
    losses = []
    for step in range(start_step, cfg.steps):
        batch = select_batch(step, sources, cfg)
        model.zero_grad()
        loss, _ = batch_loss(model, batch, codec, schedule, derive_seed(cfg.seed, 2 * step + 1), policy)
        nk.backward(loss)
        nk.adam_step(params, None, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
        value = loss.item()
        losses.append(value)
        if on_step is not None:
            on_step(step + 1, value)
    return state, losses


# ---------------------------------------------------------------------------
# guidance and sampling


GUIDANCE_MODES = ("decoupled", "three_branch", "text_only", "vision_only")


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scales; ``lambda_text`` and ``lambda_vision`` weight the two difference terms.

    ``mode`` selects the combination rule:

    * ``decoupled``: ``e(0,0) + lt*(e(x,c) - e(0,c)) + lv*(e(x,c) - e(x,0))``
    * ``three_branch``: ``e(0,0) + lv*(e(x,0) - e(0,0)) + lt*(e(x,c) - e(x,0))``
    * ``text_only``: ``e(x,0) + lt*(e(x,c) - e(x,0))``
    * ``vision_only``: ``e(0,c) + lv*(e(x,c) - e(0,c))``
    """

    lambda_text: float
    lambda_vision: float
    mode: str = "decoupled"

    def __post_init__(self):
        if not (math.isfinite(self.lambda_text) and math.isfinite(self.lambda_vision)):
            raise ValueError("guidance scales must be finite")
        if self.mode not in GUIDANCE_MODES:
            raise ValueError(f"unknown guidance mode {self.mode!r}; choose from {GUIDANCE_MODES}")


def _eps(model, x_I: Tensor, z_t: Tensor, c_emb: Tensor, t: int) -> np.ndarray:
    out = model(nk.channel_concat(x_I, z_t), t, c_emb)
    arr = out.data if isinstance(out, Tensor) else np.asarray(out, dtype=np.float32)
    if arr.shape != z_t.shape:
        raise ShapeError(f"model output {list(arr.shape)} != noisy latent {list(z_t.shape)}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"model produced non-finite noise estimate at t={t}")
    return arr.astype(np.float64)


def cfg_noise(model, z_t: Tensor, x_I: Tensor, c_emb: Tensor, t: int, g: GuidanceConfig) -> Tensor:
    """Guided noise estimate; ``decoupled`` evaluates the model four times."""
    null_x = Tensor(np.zeros_like(x_I.data))
    null_c = Tensor(np.zeros_like(c_emb.data))
    lt, lv = g.lambda_text, g.lambda_vision
    if g.mode == "decoupled":
        e_xc = _eps(model, x_I, z_t, c_emb, t)
        e_0c = _eps(model, null_x, z_t, c_emb, t)
        e_x0 = _eps(model, x_I, z_t, null_c, t)
        e_00 = _eps(model, null_x, z_t, null_c, t)
        out = e_00 + lt * (e_xc - e_0c) + lv * (e_xc - e_x0)
    elif g.mode == "three_branch":
        e_xc = _eps(model, x_I, z_t, c_emb, t)
        e_x0 = _eps(model, x_I, z_t, null_c, t)
        e_00 = _eps(model, null_x, z_t, null_c, t)
        out = e_00 + lv * (e_x0 - e_00) + lt * (e_xc - e_x0)
    elif g.mode == "text_only":
        e_xc = _eps(model, x_I, z_t, c_emb, t)
        e_x0 = _eps(model, x_I, z_t, null_c, t)
        out = e_x0 + lt * (e_xc - e_x0)
    else:
        e_xc = _eps(model, x_I, z_t, c_emb, t)
        e_0c = _eps(model, null_x, z_t, c_emb, t)
        out = e_0c + lv * (e_xc - e_0c)
    return Tensor(out.astype(np.float32))


def clip_noise_estimate(z_t: Tensor, eps_hat: Tensor, t: int, s: NoiseSchedule,
                        lo: float, hi: float) -> Tensor:
    """Noise estimate consistent with the x0 prediction clipped to ``[lo, hi]``."""
    ab = s.alpha_bar[t]
    z = z_t.data.astype(np.float64)
    x0 = (z - np.sqrt(1.0 - ab) * eps_hat.data.astype(np.float64)) / np.sqrt(ab)
    x0 = np.clip(x0, lo, hi)
    return Tensor(((z - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)).astype(np.float32))


def edit_video(model, video_in, instruction: str, codec=None, schedule: NoiseSchedule | None = None,
               n_steps: int = 25, g: GuidanceConfig = GuidanceConfig(1.5, 1.5), seed: int = 0,
               clip_x0: tuple[float, float] | None = None) -> np.ndarray:
    """Deterministic DDIM sampling of the edited video (decoded, not clipped).

    ``clip_x0`` bounds the intermediate clean-latent estimate at every step;
    ``None`` runs the plain DDIM update.
    """
    codec = codec or IdentityCodec()
    schedule = schedule or default_schedule()
    x_I = codec.encode(video_in)
    c_emb = embed_text(instruction, getattr(model, "text_dim", TEXT_DIM))
    z = nk.randn(x_I.shape, seed)
    steps = sampling_timesteps(schedule.T, n_steps)
    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else -1
        eps_hat = cfg_noise(model, z, x_I, c_emb, t, g)
        if clip_x0 is not None:
            eps_hat = clip_noise_estimate(z, eps_hat, t, schedule, *clip_x0)
        z = ddim_step(z, eps_hat, t, t_prev, schedule)
    return codec.decode(z)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"EVDM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_blobs(path: str | Path, blobs: dict[str, np.ndarray]) -> None:
    """``EVDM | u32 version`` then ``u32 name_len | name | u32 ndim | u32 dims | f32 data`` per blob."""
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in blobs.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    Path(path).write_bytes(b"".join(parts))


def load_blobs(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(data):
            (n,) = struct.unpack_from("<I", data, pos)
            name = data[pos + 4:pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (nd,) = struct.unpack_from("<I", data, pos)
            dims = struct.unpack_from(f"<{nd}I", data, pos + 4)
            pos += 4 + 4 * nd
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(data):
                raise CheckpointError(f"{path}: truncated blob {name!r}")
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(dims)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out


def _seed_words(seed: int) -> np.ndarray:
    return np.array([(seed >> (16 * k)) & 0xFFFF for k in range(4)], dtype=np.float32)


def _seed_from_words(w: np.ndarray) -> int:
    return sum(int(v) << (16 * k) for k, v in enumerate(w))


@dataclass
class Checkpoint:
    model: DenoiserModel
    schedule: NoiseSchedule
    state: AdamState | None = None
    step: int = 0
    seed: int = 0


def save_checkpoint(path: str | Path, model: DenoiserModel, schedule: NoiseSchedule,
                    state: AdamState | None = None, step: int = 0, seed: int = 0) -> None:
    blobs: dict[str, np.ndarray] = {f"config.{k}": np.array([v]) for k, v in model.config().items()}
    blobs["schedule.beta"] = schedule.beta
    blobs.update({f"param.{k}": v.data for k, v in model.params.items()})
    if state is not None:
        names = list(model.params)
        blobs["train.step"] = np.array([step])
        blobs["train.seed"] = _seed_words(seed)
        blobs["adam.step_count"] = np.array([state.step_count])
        for name, m, v in zip(names, state.first_moment, state.second_moment):
            blobs[f"adam.m.{name}"] = m
            blobs[f"adam.v.{name}"] = v
    save_blobs(path, blobs)


def load_checkpoint(path: str | Path) -> Checkpoint:
    blobs = load_blobs(path)
    try:
        cfg = {k.split(".", 1)[1]: int(v[0]) for k, v in blobs.items() if k.startswith("config.")}
        model = DenoiserModel.from_config(cfg)
        for name, p in model.params.items():
            arr = blobs[f"param.{name}"]
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: parameter {name} has shape {arr.shape}, expected {p.shape}")
            p.data = arr.copy()
        # betas were stored as f32; keep them as read so reloads are stable
        schedule = NoiseSchedule.from_betas(blobs["schedule.beta"].astype(np.float64))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing blob {exc}") from None
    ck = Checkpoint(model, schedule)
    if "adam.step_count" in blobs:
        names = list(model.params)
        ck.state = AdamState([blobs[f"adam.m.{n}"].copy() for n in names],
                             [blobs[f"adam.v.{n}"].copy() for n in names],
                             int(blobs["adam.step_count"][0]))
        ck.step = int(blobs["train.step"][0])
        ck.seed = _seed_from_words(blobs["train.seed"])
    return ck


def float32_schedule(schedule: NoiseSchedule) -> NoiseSchedule:
    """Schedule whose betas survive a float32 round-trip, as stored in checkpoints."""
    return NoiseSchedule.from_betas(schedule.beta.astype(np.float32).astype(np.float64))
