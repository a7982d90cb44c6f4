"""Miniature diffusion transformer with scale-aware modulation.

Video latents (B, C, T, H, W) become B x L tokens (one per latent voxel).
Reference conditioning arrives as extra tokens concatenated on the sequence
axis. Every block runs two gated residual sublayers (attention, then FFN),
each behind its own modulated LayerNorm whose (gamma, beta, eta) come from
the prompt embedding through a per-block adapter head.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from mofu import autograd as ag
from mofu.conditioning import ModulationParams, encode_reference, sca_forward
from mofu.fusion import DEFAULT_CUTOFF, fuse_var

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class DiTConfig:
    depth: int = 2
    d_model: int = 32
    n_heads: int = 4
    latent_channels: int = 4
    latent_frames: int = 4
    latent_height: int = 4
    latent_width: int = 4
    image_channels: int = 3
    ref_channels: int = 8  # encoder output width d
    ref_size: int = 8  # preprocessed reference extent
    ref_patch: int = 2
    d_emb: int = 16
    max_refs: int = 4
    mlp_ratio: int = 4
    adapter_ratio: int = 4
    shared_adapter: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal timestep embedding")
        if self.ref_size % self.ref_patch:
            raise ValueError("ref_size must be a multiple of ref_patch")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, int) and not isinstance(v, bool) and v < 1:
                raise ValueError(f"{f.name} must be >= 1")

    @property
    def video_tokens(self) -> int:
        return self.latent_frames * self.latent_height * self.latent_width

    @property
    def ref_tokens(self) -> int:
        return (self.ref_size // self.ref_patch) ** 2

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.latent_channels, self.latent_frames, self.latent_height, self.latent_width)


def adapter_keys(cfg: DiTConfig) -> list[str]:
    if cfg.shared_adapter:
        return ["adapter.shared.attn", "adapter.shared.ffn"]
    return [f"adapter.{i}.{s}" for i in range(cfg.depth) for s in ("attn", "ffn")]


def init_params(cfg: DiTConfig, seed: int = 0, zero_init: bool = True) -> Params:
    """Parameters for encoder, embeddings, blocks, adapter heads and output head.

    With ``zero_init`` the adapter output layers and the output projection start
    at zero, so the untrained model predicts zero velocity and every block is
    the identity.
    """
    rng = np.random.default_rng(seed)
    d, c = cfg.d_model, cfg.latent_channels

    def lin(fan_in, *shape):
        return rng.standard_normal(shape) / np.sqrt(fan_in)

    def small(*shape):
        return 0.02 * rng.standard_normal(shape)

    def zeros_or(arr):
        return np.zeros_like(arr) if zero_init else arr

    p: Params = {}
    cin = cfg.image_channels
    p["encoder.weight"] = lin(cin * 9, cfg.ref_channels, cin, 3, 3)
    p["encoder.bias"] = small(cfg.ref_channels)
    ref_dim = cfg.ref_channels * cfg.ref_patch ** 2
    p["embed.video.w"] = lin(c, c, d)
    p["embed.video.b"] = small(d)
    p["embed.ref.w"] = lin(ref_dim, ref_dim, d)
    p["embed.ref.b"] = small(d)
    p["embed.type_video"] = small(d)
    p["embed.type_ref"] = small(d)
    p["embed.pos_video"] = small(cfg.video_tokens, d)
    p["embed.pos_ref"] = small(cfg.ref_tokens, d)
    p["embed.slot"] = small(cfg.max_refs, d)
    p["time.w1"] = lin(d, d, d)
    p["time.b1"] = small(d)
    p["time.w2"] = lin(d, d, d)
    p["time.b2"] = small(d)
    hid = cfg.mlp_ratio * d
    for i in range(cfg.depth):
        b = f"blocks.{i}"
        p[f"{b}.attn.wq"] = lin(d, d, d)
        p[f"{b}.attn.bq"] = small(d)
        p[f"{b}.attn.wk"] = lin(d, d, d)
        p[f"{b}.attn.wv"] = lin(d, d, d)
        p[f"{b}.attn.bv"] = small(d)
        p[f"{b}.attn.wo"] = lin(d, d, d)
        p[f"{b}.attn.bo"] = small(d)
        p[f"{b}.ffn.w1"] = lin(d, d, hid)
        p[f"{b}.ffn.b1"] = small(hid)
        p[f"{b}.ffn.w2"] = lin(hid, hid, d)
        p[f"{b}.ffn.b2"] = small(d)
    ahid = cfg.adapter_ratio * d
    for key in adapter_keys(cfg):
        p[f"{key}.w1"] = lin(cfg.d_emb, cfg.d_emb, ahid)
        p[f"{key}.b1"] = small(ahid)
        p[f"{key}.w2"] = zeros_or(lin(ahid, ahid, 3 * d))
    p["out.ada.w"] = zeros_or(lin(d, d, 2 * d))
    p["out.ada.b"] = np.zeros(2 * d)
    p["out.w"] = zeros_or(lin(d, d, c))
    p["out.b"] = zeros_or(small(c))
    return p


def zero_adapter(params: Mapping[str, np.ndarray]) -> Params:
    """Copy of ``params`` with every adapter output layer set to zero."""
    return {k: (np.zeros_like(v) if k.startswith("adapter.") and k.endswith(".w2") else v.copy())
            for k, v in params.items()}


def as_vars(params: Mapping[str, object], requires_grad: bool = False) -> dict[str, ag.Var]:
    return {k: (v if isinstance(v, ag.Var) else ag.Var(v, requires_grad=requires_grad))
            for k, v in params.items()}


# token views ---------------------------------------------------------------

def patchify(latent):
    """(B, C, T, H, W) -> (B, T*H*W, C)."""
    x = ag.as_var(latent)
    b, c, t, h, w = x.shape
    return x.transpose(0, 2, 3, 4, 1).reshape(b, t * h * w, c)


def unpatchify(tokens, cfg_or_shape) -> ag.Var:
    """(B, L, C) -> (B, C, T, H, W)."""
    x = ag.as_var(tokens)
    c, t, h, w = cfg_or_shape.latent_shape if isinstance(cfg_or_shape, DiTConfig) else cfg_or_shape
    return x.reshape(x.shape[0], t, h, w, c).transpose(0, 4, 1, 2, 3)


def ref_tokens(feature, patch: int) -> ag.Var:
    """(B, d, R, R) -> (B, (R/p)^2, d*p*p)."""
    x = ag.as_var(feature)
    b, d, h, w = x.shape
    x = x.reshape(b, d, h // patch, patch, w // patch, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, (h // patch) * (w // patch), d * patch * patch)


def timestep_embedding(t, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


# sublayers -----------------------------------------------------------------

def _bcast(v: ag.Var) -> ag.Var:
    # (d,) broadcasts as is; (B, d) needs a token axis
    return v.reshape(v.shape[0], 1, v.shape[1]) if v.ndim == 2 else v


def modulate(f, gamma, beta) -> ag.Var:
    """gamma * LayerNorm(f) + beta, with (gamma, beta) broadcast over batch and tokens."""
    f, gamma, beta = ag.as_var(f), ag.as_var(gamma), ag.as_var(beta)
    if gamma.shape[-1] != f.shape[-1] or beta.shape[-1] != f.shape[-1]:
        raise ValueError(f"modulate: width {f.shape[-1]} vs gamma {gamma.shape} / beta {beta.shape}")
    return _bcast(gamma) * ag.layer_norm(f) + _bcast(beta)


def attention(x, p: Mapping[str, ag.Var], prefix: str, n_heads: int, return_probs: bool = False):
    x = ag.as_var(x)
    b, n, d = x.shape
    dh = d // n_heads

    def heads(y):
        return y.reshape(b, n, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(x @ p[f"{prefix}.wq"] + p[f"{prefix}.bq"])
    k = heads(x @ p[f"{prefix}.wk"])
    v = heads(x @ p[f"{prefix}.wv"] + p[f"{prefix}.bv"])
    probs = ag.softmax((q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
    out = (probs @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = out @ p[f"{prefix}.wo"] + p[f"{prefix}.bo"]
    return (out, probs) if return_probs else out


def feed_forward(x, p: Mapping[str, ag.Var], prefix: str) -> ag.Var:
    return ag.gelu(x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]) @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]


def smo_block(f, params: Mapping[str, object], mod, index: int = 0, n_heads: int = 4) -> ag.Var:
    """One block: F + eta * Layer(gamma * LN(F) + beta) for Layer = MHA, then FFN.

    ``mod`` is a single ModulationParams (used by both sublayers) or an
    (attn, ffn) pair.
    """
    p = as_vars(params)
    mod_attn, mod_ffn = (mod, mod) if isinstance(mod, ModulationParams) else mod
    f = ag.as_var(f)
    b = f"blocks.{index}"
    h = modulate(f, mod_attn.gamma, mod_attn.beta)
    f = f + _bcast(mod_attn.eta) * attention(h, p, f"{b}.attn", n_heads)
    h = modulate(f, mod_ffn.gamma, mod_ffn.beta)
    return f + _bcast(mod_ffn.eta) * feed_forward(h, p, f"{b}.ffn")


def block_modulations(cfg: DiTConfig, p: Mapping[str, ag.Var], e) -> list[tuple[ModulationParams, ModulationParams]]:
    mods = []
    for i in range(cfg.depth):
        base = "adapter.shared" if cfg.shared_adapter else f"adapter.{i}"
        pair = tuple(
            sca_forward(e, {k: p[f"{base}.{s}.{k}"] for k in ("w1", "b1", "w2")})
            for s in ("attn", "ffn")
        )
        mods.append(pair)
    return mods


def identity_modulation(d: int) -> ModulationParams:
    return ModulationParams(ag.Var(np.ones(d)), ag.Var(np.zeros(d)), ag.Var(np.zeros(d)))


# conditioners --------------------------------------------------------------

def encode_refs(p: Mapping[str, ag.Var], refs: Sequence) -> list[ag.Var]:
    return [encode_reference(r, p["encoder.weight"], p["encoder.bias"]) for r in refs]


def fourier_ref_tokens(cfg: DiTConfig, p: Mapping[str, ag.Var], fused) -> ag.Var:
    """Tokens for a batch of fused reference maps (B, d, R, R)."""
    tok = ref_tokens(fused, cfg.ref_patch) @ p["embed.ref.w"] + p["embed.ref.b"]
    return tok + p["embed.type_ref"] + p["embed.pos_ref"]


def sequential_ref_tokens(cfg: DiTConfig, p: Mapping[str, ag.Var], features: Sequence) -> ag.Var:
    """Order-sensitive baseline: each reference tokenized separately, tagged by slot, concatenated in input order."""
    if len(features) > cfg.max_refs:
        raise ValueError(f"{len(features)} references exceed max_refs={cfg.max_refs}")
    parts = []
    for i, feat in enumerate(features):
        f = ag.as_var(feat)
        f = f.reshape(1, *f.shape) if f.ndim == 3 else f
        tok = fourier_ref_tokens(cfg, p, f)
        parts.append(tok + p["embed.slot"][i])
    return ag.concat(parts, axis=1)


# denoiser ------------------------------------------------------------------

def _embed_video(cfg: DiTConfig, p, x_t, t) -> tuple[ag.Var, ag.Var]:
    x_t = ag.as_var(x_t)
    if tuple(x_t.shape[1:]) != cfg.latent_shape:
        raise ValueError(f"latent shape {x_t.shape[1:]} does not match config {cfg.latent_shape}")
    bsz = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (bsz,))
    temb = ag.gelu(timestep_embedding(t, cfg.d_model) @ p["time.w1"] + p["time.b1"])
    temb = temb @ p["time.w2"] + p["time.b2"]
    temb = temb.reshape(bsz, 1, cfg.d_model)
    video = patchify(x_t) @ p["embed.video.w"] + p["embed.video.b"]
    video = video + p["embed.type_video"] + p["embed.pos_video"]
    return video, temb


def _head(cfg: DiTConfig, p, tokens: ag.Var, temb: ag.Var) -> ag.Var:
    # final layer modulated by the timestep: LN(h) * (1 + scale(t)) + shift(t)
    d = cfg.d_model
    ada = ag.gelu(temb) @ p["out.ada.w"] + p["out.ada.b"]
    video = ag.layer_norm(tokens[:, :cfg.video_tokens])
    video = video * (ada[..., :d] + 1.0) + ada[..., d:]
    out = video @ p["out.w"] + p["out.b"]
    return unpatchify(out, cfg)


def denoise_tokens(cfg: DiTConfig, params, x_t, t, cond_tokens, e) -> ag.Var:
    """Forward pass given already-built reference tokens (B, L_ref, d) or None."""
    p = as_vars(params)
    video, temb = _embed_video(cfg, p, x_t, t)
    if cond_tokens is None:
        tokens = video + temb
    else:
        cond_tokens = ag.as_var(cond_tokens)
        if cond_tokens.shape[1] > cfg.max_refs * cfg.ref_tokens:
            raise ValueError(f"{cond_tokens.shape[1]} reference tokens exceed the configured capacity")
        tokens = ag.concat([video, cond_tokens], axis=1) + temb
    e = ag.as_var(e.vector if hasattr(e, "vector") else e)
    for i, mod in enumerate(block_modulations(cfg, p, e)):
        tokens = smo_block(tokens, p, mod, i, cfg.n_heads)
    return _head(cfg, p, tokens, temb)


def denoise(cfg: DiTConfig, params, x_t, t, fused, e) -> ag.Var:
    """Velocity prediction for latents x_t (B, C, T, H, W) at time t.

    ``fused`` is the fused reference map, (d, R, R) or batched (B, d, R, R).
    """
    p = as_vars(params)
    fused = ag.as_var(fused.feature if hasattr(fused, "feature") else fused)
    if fused.ndim == 3:
        fused = fused.reshape(1, *fused.shape)
    return denoise_tokens(cfg, p, x_t, t, fourier_ref_tokens(cfg, p, fused), e)


def backbone(cfg: DiTConfig, params, x_t, t) -> ag.Var:
    """The unconditioned network: no reference tokens, blocks at (gamma, beta, eta) = (1, 0, 0)."""
    p = as_vars(params)
    video, temb = _embed_video(cfg, p, x_t, t)
    tokens = video + temb
    ident = identity_modulation(cfg.d_model)
    for i in range(cfg.depth):
        tokens = smo_block(tokens, p, ident, i, cfg.n_heads)
    return _head(cfg, p, tokens, temb)


def condition_batch(cfg: DiTConfig, params, refs_batch: Sequence[Sequence], mode: str = "fourier",
                    cutoff_ratio: float = DEFAULT_CUTOFF,
                    band_weights: tuple[float, float] = (1.0, 1.0),
                    canonical: bool = True) -> tuple[ag.Var, list[list[ag.Var]]]:
    """Encode each sample's references and build reference tokens.

    Returns (tokens, per-sample encoded features).
    """
    p = as_vars(params)
    feats = [encode_refs(p, refs) for refs in refs_batch]
    if mode == "fourier":
        fused = ag.stack([fuse_var(f, cutoff_ratio, band_weights, canonical) for f in feats], axis=0)
        return fourier_ref_tokens(cfg, p, fused), feats
    if mode == "sequential":
        counts = {len(f) for f in feats}
        if len(counts) != 1:
            raise ValueError("sequential conditioning needs the same reference count across the batch")
        parts = [sequential_ref_tokens(cfg, p, f) for f in feats]
        return ag.concat(parts, axis=0), feats
    raise ValueError(f"unknown conditioner {mode!r}")


# checkpoint format ---------------------------------------------------------
#
#   b"MOFU" | u32 version | u32 len | config JSON (utf-8, sorted keys)
#   u32 n_tensors | per tensor: u16 name len | name | u8 ndim | u32 * ndim | f64 LE data

MAGIC = b"MOFU"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def encode_checkpoint(meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        if buf[:4] != MAGIC:
            raise CheckpointError("not a MOFU checkpoint (bad magic)")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 8
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nl].decode("utf-8")
            pos += nl
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) * 8
            if pos + size > len(buf):
                raise CheckpointError(f"truncated tensor {name!r}")
            tensors[name] = np.frombuffer(buf[pos:pos + size], dtype="<f8").reshape(shape).astype(np.float64)
            pos += size
        if pos != len(buf):
            raise CheckpointError("trailing bytes after last tensor")
        return meta, tensors
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc


def save_checkpoint(path: str | Path, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_checkpoint(meta, tensors))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(buf)


def config_to_dict(cfg: DiTConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: Mapping) -> DiTConfig:
    return DiTConfig(**d)
