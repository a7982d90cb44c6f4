"""Synthetic multi-subject scenes: gray squares drifting over a flat background.

Each subject has a prescribed scale (side as a fraction of frame height) and
a reference image rendered at an independent zoom level, which recreates the
scale-inconsistency setting. Masks come from the same geometry as the pixels,
so they are exact.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from mofu.conditioning import ReferenceImage

PALETTE: tuple[tuple[str, float], ...] = (("dark", 0.0), ("pale", 0.9), ("slate", 0.25))
SIZE_WORDS = {0.25: "quarter", 0.375: "three-eighths", 0.5: "half", 0.625: "five-eighths", 0.75: "three-quarters"}


@dataclass(frozen=True)
class SceneConfig:
    frame_size: int = 8
    n_frames: int = 4
    ref_size: int = 8
    min_subjects: int = 1
    max_subjects: int = 3
    scales: tuple[float, ...] = (0.25, 0.375, 0.5, 0.625, 0.75)
    occupancy: tuple[float, float] = (0.2, 0.9)
    max_drift: int = 1
    background: float = 0.5
    overlap_threshold: float = 0.0  # allowed intersection / smaller area
    max_retries: int = 200

    def __post_init__(self):
        if not 1 <= self.min_subjects <= self.max_subjects <= len(PALETTE):
            raise ValueError(f"subject count range must sit within 1..{len(PALETTE)}")


@dataclass
class Subject:
    name: str
    level: float  # gray level in [0, 1]
    scale: float  # side / frame height
    size: int  # side in pixels
    start: tuple[int, int]  # top-left (y, x) at frame 0
    drift: tuple[int, int]  # (dy, dx) per frame
    occupancy: float  # reference side / reference extent
    ref_side: int

    def box(self, frame: int) -> tuple[int, int, int, int]:
        y = self.start[0] + frame * self.drift[0]
        x = self.start[1] + frame * self.drift[1]
        return y, x, y + self.size, x + self.size


@dataclass
class SyntheticScene:
    scene_id: int
    seed: int
    subjects: list[Subject]
    video: np.ndarray  # (1, T, H, W)
    masks: np.ndarray  # (S, T, H, W)
    references: list[ReferenceImage]
    prompt: str
    background: float = 0.5

    @property
    def scale_ratios(self) -> dict[tuple[int, int], float]:
        s = self.subjects
        return {(i, j): s[i].scale / s[j].scale for i in range(len(s)) for j in range(i + 1, len(s))}


def _overlap(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> int:
    h = min(a[2], b[2]) - max(a[0], b[0])
    w = min(a[3], b[3]) - max(a[1], b[1])
    return max(h, 0) * max(w, 0)


def _place(rng: np.random.Generator, size: int, cfg: SceneConfig) -> tuple[tuple[int, int], tuple[int, int]] | None:
    n, last = cfg.frame_size, cfg.n_frames - 1
    drift = tuple(int(v) for v in rng.integers(-cfg.max_drift, cfg.max_drift + 1, size=2))
    lo = [max(0, -d * last) for d in drift]
    hi = [min(n - size, n - size - d * last) for d in drift]
    if lo[0] > hi[0] or lo[1] > hi[1]:
        return None
    start = (int(rng.integers(lo[0], hi[0] + 1)), int(rng.integers(lo[1], hi[1] + 1)))
    return start, drift


def render_reference(level: float, side: int, ref_size: int, background: float) -> ReferenceImage:
    """Subject square centred on a ``ref_size`` canvas, replicated to three channels."""
    img = np.full((3, ref_size, ref_size), background)
    mask = np.zeros((ref_size, ref_size))
    top = (ref_size - side) // 2
    img[:, top:top + side, top:top + side] = level
    mask[top:top + side, top:top + side] = 1.0
    return ReferenceImage(img, mask)


def render_video(subjects: Sequence[Subject], cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    n, t = cfg.frame_size, cfg.n_frames
    video = np.full((1, t, n, n), cfg.background)
    masks = np.zeros((len(subjects), t, n, n))
    for k, s in enumerate(subjects):
        for f in range(t):
            y0, x0, y1, x1 = s.box(f)
            video[0, f, y0:y1, x0:x1] = s.level
            masks[k, f, y0:y1, x0:x1] = 1.0
    return video, masks


def _ratio_phrase(r: float) -> str:
    if np.isclose(r, 1.0):
        return "as large as"
    if r > 1:
        return f"{r:.2f} times as large as"
    return f"{1 / r:.2f} times smaller than"


def make_prompt(subjects: Sequence[Subject]) -> str:
    parts = [f"a {s.name} square ({s.name}:{SIZE_WORDS.get(s.scale, f'{s.scale:.3f}')})" for s in subjects]
    text = " and ".join(parts)
    rel = [f"the {a.name} square is {_ratio_phrase(a.scale / b.scale)} the {b.name} square"
           for i, a in enumerate(subjects) for b in subjects[i + 1:]]
    return text + ("; " + "; ".join(rel) if rel else "")


def make_scene(scene_id: int, seed: int, cfg: SceneConfig) -> SyntheticScene:
    rng = np.random.default_rng([seed, scene_id])
    n_sub = int(rng.integers(cfg.min_subjects, cfg.max_subjects + 1))
    for _ in range(cfg.max_retries):
        idx = rng.permutation(len(PALETTE))[:n_sub]
        subjects: list[Subject] = []
        for k in idx:
            sub = _draw_subject(rng, int(k), subjects, cfg)
            if sub is None:
                break
            subjects.append(sub)
        if len(subjects) == n_sub:
            break
    else:
        raise RuntimeError(f"scene {scene_id}: could not place {n_sub} subjects after {cfg.max_retries} tries")
    video, masks = render_video(subjects, cfg)
    refs = [render_reference(s.level, s.ref_side, cfg.ref_size, cfg.background) for s in subjects]
    return SyntheticScene(scene_id, seed, subjects, video, masks, refs, make_prompt(subjects), cfg.background)


def _draw_subject(rng: np.random.Generator, k: int, placed: list[Subject], cfg: SceneConfig,
                  tries: int = 20) -> Subject | None:
    for _ in range(tries):
        scale = float(rng.choice(cfg.scales))
        size = max(1, int(round(scale * cfg.frame_size)))
        where = _place(rng, size, cfg)
        if where is None:
            continue
        occ = float(rng.uniform(*cfg.occupancy))
        side = min(cfg.ref_size, max(1, int(round(occ * cfg.ref_size))))
        name, level = PALETTE[k]
        sub = Subject(name, level, scale, size, where[0], where[1], occ, side)
        if _separated([*placed, sub], cfg):
            return sub
    return None


def _separated(subjects: Sequence[Subject], cfg: SceneConfig) -> bool:
    for f in range(cfg.n_frames):
        for i, a in enumerate(subjects):
            for b in subjects[i + 1:]:
                inter = _overlap(a.box(f), b.box(f))
                if inter > cfg.overlap_threshold * min(a.size, b.size) ** 2:
                    return False
    return True


def gen_synthetic(seed: int, n_scenes: int, config: SceneConfig | None = None) -> list[SyntheticScene]:
    """Deterministic dataset; scene i depends only on (seed, i)."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    cfg = config or SceneConfig()
    return [make_scene(i, seed, cfg) for i in range(n_scenes)]


# latent codec: 2x2 space-to-depth of gray frames mapped to [-1, 1] ----------

def video_to_latent(video: np.ndarray) -> np.ndarray:
    """(1, T, H, W) in [0, 1] -> (4, T, H/2, W/2)."""
    _, t, h, w = video.shape
    z = 2.0 * video[0] - 1.0
    z = z.reshape(t, h // 2, 2, w // 2, 2).transpose(2, 4, 0, 1, 3)
    return np.ascontiguousarray(z.reshape(4, t, h // 2, w // 2))


def latent_to_video(latent: np.ndarray) -> np.ndarray:
    _, t, h, w = latent.shape
    z = latent.reshape(2, 2, t, h, w).transpose(2, 3, 0, 4, 1).reshape(t, 2 * h, 2 * w)
    return ((z + 1.0) / 2.0)[None]


# persistence ---------------------------------------------------------------

def _write_gray(path: Path, arr: np.ndarray) -> None:
    from PIL import Image
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def _write_rgb(path: Path, arr: np.ndarray) -> None:
    from PIL import Image
    img = np.round(np.clip(arr.transpose(1, 2, 0), 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img, mode="RGB").save(path)


def save_dataset(scenes: Sequence[SyntheticScene], root: str | Path, config: SceneConfig) -> Path:
    """One directory per scene with frame/mask/reference rasters, plus a manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for sc in scenes:
        d = root / f"scene_{sc.scene_id:04d}"
        d.mkdir(exist_ok=True)
        for f in range(sc.video.shape[1]):
            _write_gray(d / f"frame_{f:03d}.png", sc.video[0, f])
            for k in range(len(sc.subjects)):
                _write_gray(d / f"mask_{k}_{f:03d}.png", sc.masks[k, f])
        for k, ref in enumerate(sc.references):
            _write_rgb(d / f"ref_{k}.png", ref.pixels)
            _write_gray(d / f"ref_{k}.mask.png", ref.subject_mask)
        entries.append({
            "scene_id": sc.scene_id,
            "seed": sc.seed,
            "prompt": sc.prompt,
            "subject_scales": [s.scale for s in sc.subjects],
            "subjects": [asdict(s) for s in sc.subjects],
        })
    manifest = {"config": asdict(config), "scenes": entries}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_dataset(root: str | Path) -> tuple[list[SyntheticScene], SceneConfig]:
    """Rebuild scenes from the manifest geometry (rasters are 8-bit views of it)."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    c = manifest["config"]
    cfg = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()})
    scenes = []
    for e in manifest["scenes"]:
        subs = [Subject(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()}) for s in e["subjects"]]
        video, masks = render_video(subs, cfg)
        refs = [render_reference(s.level, s.ref_side, cfg.ref_size, cfg.background) for s in subs]
        scenes.append(SyntheticScene(e["scene_id"], e["seed"], subs, video, masks, refs, e["prompt"], cfg.background))
    return scenes, cfg
