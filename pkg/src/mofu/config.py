"""Run configuration: TOML sections mirroring the component dataclasses, with
typo-safe loading and MOFU_SECTION__FIELD environment overrides."""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

import tomli

from mofu.dit import DiTConfig
from mofu.harness.synthetic import SceneConfig
from mofu.harness.train import LossConfig, OptimConfig

ENV_PREFIX = "MOFU_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_scenes: int = 64
    provider: str = "hash-unigram"


@dataclass(frozen=True)
class EvalConfig:
    n_scenes: int = 20
    min_subjects: int = 2
    scene_seed: int = 1000
    sample_steps: int = 8
    perm_threshold: float = 0.0
    gradcheck_tol: float = 1e-4
    gradcheck_depth: int = 1
    subjectsim_embed: str = "histogram"
    subjectsim_min: float = -1.0


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: DiTConfig = field(default_factory=DiTConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


SECTIONS: dict[str, type] = {f.name: f.default_factory().__class__ for f in fields(RunConfig) if f.name != "seed"}

DOCS: dict[str, dict[str, str]] = {
    "model": {
        "depth": "number of SMO blocks",
        "d_model": "token width; must be divisible by n_heads",
        "n_heads": "attention heads",
        "latent_channels": "latent C (2x2 space-to-depth of one gray channel gives 4)",
        "latent_frames": "latent T; must equal scene.n_frames",
        "latent_height": "latent H; scene.frame_size / 2",
        "latent_width": "latent W; scene.frame_size / 2",
        "image_channels": "reference image channels",
        "ref_channels": "reference encoder output width",
        "ref_size": "references are cropped and letterboxed to this extent",
        "ref_patch": "patch size turning the fused reference map into tokens",
        "d_emb": "prompt embedding width",
        "max_refs": "capacity of the sequential baseline's slot embedding",
        "mlp_ratio": "FFN hidden width / d_model",
        "adapter_ratio": "adapter hidden width / d_model",
        "shared_adapter": "one adapter head pair for all blocks instead of one per block",
    },
    "loss": {
        "cutoff_ratio": "normalized radius splitting high and low frequency bands",
        "band_weights": "[high, low] band weights; [1, 1] makes fusion a plain sum",
        "w_scale": "weight of the scale term",
        "w_perm": "weight of the permutation term",
        "n_perms": "orders per step for the permutation term; 0 means min(3, N! - 1)",
        "eps": "stabilizer in the weighted-mean denominator",
        "time_shift": "t = s*u / (1 + (s-1)*u) with u uniform; 1.0 is uniform t",
    },
    "optim": {
        "lr": "base learning rate (1e-3 at toy scale; billion-parameter runs use 1e-5)",
        "beta1": "AdamW first-moment decay",
        "beta2": "AdamW second-moment decay",
        "eps": "AdamW denominator stabilizer",
        "weight_decay": "decoupled weight decay",
        "restart_period": "cosine restart period S in steps",
        "batch_size": "scenes per step",
        "steps": "total optimizer steps",
        "checkpoint_every": "write a checkpoint every this many steps (0 disables)",
    },
    "data": {
        "n_scenes": "training scenes generated from the run seed",
        "provider": "prompt embedding provider",
    },
    "scene": {
        "frame_size": "frame height and width in pixels",
        "n_frames": "frames per video",
        "ref_size": "reference canvas extent",
        "min_subjects": "fewest subjects per scene",
        "max_subjects": "most subjects per scene (at most 3)",
        "scales": "allowed subject sides as fractions of the frame height",
        "occupancy": "[low, high] subject side / reference extent",
        "max_drift": "largest per-frame displacement in pixels",
        "background": "background gray level",
        "overlap_threshold": "allowed intersection / smaller subject area",
        "max_retries": "placement attempts before a scene is rejected",
    },
    "eval": {
        "n_scenes": "evaluation scenes",
        "min_subjects": "evaluation scenes carry at least this many subjects",
        "scene_seed": "seed of the evaluation scene set (disjoint from training data)",
        "sample_steps": "Euler steps per generated video",
        "perm_threshold": "perm suite passes when the divergence is at most this",
        "gradcheck_tol": "gradcheck suite passes below this relative error",
        "gradcheck_depth": "blocks in the gradcheck model",
        "subjectsim_embed": "image embedding for SubjectSim: identity or histogram",
        "subjectsim_min": "subjectsim suite passes at or above this score",
    },
}


def _coerce(cls: type, section: str, raw: Mapping[str, Any]) -> Any:
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key {section}.{key}")
    kwargs = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{section}.{key} must be an array")
            value = tuple(float(v) if isinstance(default[0], float) else v for v in value) if default else tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{section}.{key} must be a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{section}.{key} must be an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{section}.{key} must be a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{section}.{key} must be a string")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def from_dict(d: Mapping[str, Any]) -> RunConfig:
    for key in d:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(f"unknown key {key}")
    seed = d.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    parts = {}
    for name, cls in SECTIONS.items():
        raw = d.get(name, {})
        if not isinstance(raw, Mapping):
            raise ConfigError(f"[{name}] must be a table")
        parts[name] = _coerce(cls, name, raw)
    cfg = RunConfig(seed=seed, **parts)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    m, s = cfg.model, cfg.scene
    if (m.latent_frames, m.latent_height * 2, m.latent_width * 2) != (s.n_frames, s.frame_size, s.frame_size):
        raise ConfigError("model latent extents must match scene.n_frames and scene.frame_size / 2")
    if m.latent_channels != 4:
        raise ConfigError("model.latent_channels must be 4 for the gray space-to-depth codec")
    if s.ref_size != m.ref_size:
        raise ConfigError("scene.ref_size must equal model.ref_size")
    if s.max_subjects > m.max_refs:
        raise ConfigError("scene.max_subjects exceeds model.max_refs")
    if cfg.eval.min_subjects < 2 or cfg.eval.min_subjects > s.max_subjects:
        raise ConfigError("eval.min_subjects must lie in 2..scene.max_subjects")
    if not 0.0 < cfg.loss.cutoff_ratio < 1.0:
        raise ConfigError("loss.cutoff_ratio must lie in (0, 1)")
    if cfg.loss.time_shift <= 0:
        raise ConfigError("loss.time_shift must be positive")
    if cfg.optim.batch_size < 1 or cfg.optim.steps < 0 or cfg.optim.restart_period < 1:
        raise ConfigError("optim.batch_size and optim.restart_period must be >= 1, optim.steps >= 0")
    if cfg.data.n_scenes < 1 or cfg.eval.n_scenes < 1:
        raise ConfigError("scene counts must be >= 1")


def _parse_env_value(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, Any]:
    """MOFU_SEED and MOFU_<SECTION>__<FIELD> entries as a nested dict."""
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    for name, text in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest == "seed":
            out["seed"] = _parse_env_value(text)
        elif "__" in rest:
            section, key = rest.split("__", 1)
            out.setdefault(section, {})[key] = _parse_env_value(text)
    return out


def merge(base: Mapping[str, Any], over: Mapping[str, Any]) -> dict[str, Any]:
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in base.items()}
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


@dataclass
class LoadedConfig:
    config: RunConfig
    config_hash: str  # sha256 of the file bytes ("" without a file)
    overrides: dict


def load_config(path: str | Path | None = None, environ: Mapping[str, str] | None = None) -> LoadedConfig:
    raw: dict[str, Any] = {}
    digest = ""
    if path is not None:
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        digest = hashlib.sha256(data).hexdigest()
        try:
            raw = tomli.loads(data.decode("utf-8"))
        except (UnicodeDecodeError, tomli.TOMLDecodeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    over = env_overrides(environ)
    return LoadedConfig(from_dict(merge(raw, over)), digest, over)


def to_dict(cfg: RunConfig) -> dict[str, Any]:
    d = {"seed": cfg.seed}
    for name in SECTIONS:
        d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(getattr(cfg, name)).items()}
    return d


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def reference_toml(cfg: RunConfig | None = None) -> str:
    """Every key with its default value and a one-line description."""
    d = to_dict(cfg or RunConfig())
    lines = ["# mofu run configuration; every key is optional and shown at its default.",
             "# Environment overrides: MOFU_SEED, MOFU_<SECTION>__<KEY> (values parsed as TOML).",
             "", "# master seed for data, initialization and training", f"seed = {d['seed']}"]
    for name in SECTIONS:
        lines += ["", f"[{name}]"]
        for key, value in d[name].items():
            lines.append(f"# {DOCS[name][key]}")
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def with_overrides(cfg: RunConfig, **sections: Mapping[str, Any]) -> RunConfig:
    """Programmatic counterpart of the environment overrides."""
    parts = {name: replace(getattr(cfg, name), **vals) for name, vals in sections.items() if name != "seed"}
    out = replace(cfg, **parts)
    if "seed" in sections:
        out = replace(out, seed=sections["seed"])
    validate(out)
    return out
