"""Evaluation protocols on synthetic scenes: permutation sensitivity, geometric scale
consistency and the SubjectSim double mean."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from mofu.harness.sampling import sample
from mofu.harness.synthetic import SyntheticScene, latent_to_video
from mofu.numerics import resize_bilinear

DEFAULT_STEPS = 8


# scale consistency ---------------------------------------------------------

def segment_by_color(frame: np.ndarray, levels: Sequence[float], background: float) -> np.ndarray:
    """Label map: k for pixels nearest ``levels[k]``, -1 for pixels nearest the background.

    Ties go to the background, then to the lower subject index.
    """
    palette = np.array([background, *levels], dtype=np.float64)
    dist = np.abs(np.asarray(frame, dtype=np.float64)[..., None] - palette)
    return np.argmin(dist, axis=-1) - 1


def subject_areas(video: np.ndarray, scene: SyntheticScene) -> np.ndarray:
    """(S, T) pixel counts per subject per frame of a (1, T, H, W) video."""
    levels = [s.level for s in scene.subjects]
    areas = np.zeros((len(levels), video.shape[1]))
    for f in range(video.shape[1]):
        lab = segment_by_color(video[0, f], levels, scene.background)
        for k in range(len(levels)):
            areas[k, f] = np.count_nonzero(lab == k)
    return areas


@dataclass
class SceneScale:
    scene_id: int
    deviation: float
    missing_frames: list[int]  # per subject, frames where it was not detected
    failed: bool


def scale_deviation(video: np.ndarray, scene: SyntheticScene) -> SceneScale:
    """Mean |measured - prescribed| side ratio over subject pairs and frames.

    The measured ratio of subjects i, j in a frame is sqrt(area_i / area_j). When either
    subject is missing from a frame, that frame-pair counts with deviation equal to the
    prescribed ratio (as if the measured ratio were 0). A subject missing from more than
    half of the frames marks the scene as failed.
    """
    areas = subject_areas(video, scene)
    n_sub, n_frames = areas.shape
    missing = [int(np.count_nonzero(areas[k] == 0)) for k in range(n_sub)]
    failed = any(m > n_frames / 2 for m in missing)
    devs = []
    for (i, j), target in sorted(scene.scale_ratios.items()):
        for f in range(n_frames):
            if areas[i, f] == 0 or areas[j, f] == 0:
                devs.append(target)
            else:
                devs.append(abs(np.sqrt(areas[i, f] / areas[j, f]) - target))
    dev = float(np.mean(devs)) if devs else 0.0
    return SceneScale(scene.scene_id, dev, missing, failed)


@dataclass
class ScaleReport:
    deviation: float
    per_scene: list[SceneScale]

    @property
    def failed_scenes(self) -> list[int]:
        return [s.scene_id for s in self.per_scene if s.failed]


def eval_scale_consistency(model, scenes: Sequence[SyntheticScene], seed: int = 0,
                           steps: int = DEFAULT_STEPS) -> ScaleReport:
    """Generate one video per scene (noise seeded by (seed, scene_id)) and average deviations.

    Only multi-subject scenes carry ratios; single-subject scenes are rejected.
    """
    if not scenes:
        raise ValueError("eval_scale_consistency: no scenes")
    per = []
    for sc in sorted(scenes, key=lambda s: s.scene_id):
        if len(sc.subjects) < 2:
            raise ValueError(f"scene {sc.scene_id} has a single subject and no prescribed ratio")
        refs, e = model.inputs(sc)
        lat = sample(model, refs, e, steps, [seed, sc.scene_id])
        per.append(scale_deviation(latent_to_video(lat), sc))
    return ScaleReport(float(np.mean([p.deviation for p in per])), per)


# permutation sensitivity ---------------------------------------------------

def eval_perm_sensitivity(model, scene: SyntheticScene, seed: int = 0, steps: int = DEFAULT_STEPS,
                          max_random: int = 10) -> float:
    """Max-abs divergence between samples generated from every reference order.

    All N! orders when N <= 4, otherwise ``max_random`` seeded random orders plus the
    given one. The sampling noise is the same for every order.
    """
    refs, e = model.inputs(scene)
    n = len(refs)
    if n < 2:
        raise ValueError("permutation sensitivity needs at least 2 references")
    if n <= 4:
        perms = list(itertools.permutations(range(n)))
    else:
        rng = np.random.default_rng([seed, scene.scene_id, 1])
        perms = [tuple(range(n))] + [tuple(int(i) for i in rng.permutation(n)) for _ in range(max_random)]
    outs = [sample(model, [refs[i] for i in p], e, steps, [seed, scene.scene_id]) for p in perms]
    worst = 0.0
    for a, b in itertools.combinations(outs, 2):
        worst = max(worst, float(np.max(np.abs(a - b))))
    return worst


# SubjectSim ----------------------------------------------------------------

def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass
class SubjectSimResult:
    value: float
    flagged_frames: list[int] = field(default_factory=list)


def subject_sim_from_embeddings(frame_candidates: Sequence[np.ndarray],
                                ref_embs: np.ndarray) -> SubjectSimResult:
    """Mean over subjects of the mean over frames of the best candidate cosine.

    ``frame_candidates[t]`` is a (K_t, D) array of candidate embeddings; a frame with
    K_t = 0 contributes 0 for every subject and is flagged.
    """
    refs = np.atleast_2d(np.asarray(ref_embs, dtype=np.float64))
    if refs.shape[0] < 1:
        raise ValueError("subject_sim needs at least one reference subject")
    if len(frame_candidates) == 0:
        raise ValueError("subject_sim needs at least one frame")
    flagged = []
    per_subject = np.zeros(refs.shape[0])
    for t, cands in enumerate(frame_candidates):
        cands = np.asarray(cands, dtype=np.float64).reshape(-1, refs.shape[1])
        if cands.shape[0] == 0:
            flagged.append(t)
            continue
        for i, r in enumerate(refs):
            per_subject[i] += max(_cosine(c, r) for c in cands)
    per_subject /= len(frame_candidates)
    return SubjectSimResult(float(per_subject.mean()), flagged)


ImageEmbedder = Callable[[np.ndarray], np.ndarray]
Segmenter = Callable[[np.ndarray], list]


def identity_embedding(img: np.ndarray, size: int = 8) -> np.ndarray:
    """Resize a (H, W) or (C, H, W) crop to size x size per channel, flattened; channels averaged."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=0)
    return resize_bilinear(img, size, size).ravel()


def histogram_embedding(img: np.ndarray, bins: int = 16, bandwidth: float = 0.05) -> np.ndarray:
    """Soft intensity histogram with Gaussian kernels on [0, 1]; insensitive to crop size."""
    v = np.asarray(img, dtype=np.float64)
    if v.ndim == 3:
        v = v.mean(axis=0)
    centres = (np.arange(bins) + 0.5) / bins
    k = np.exp(-0.5 * ((v.ravel()[:, None] - centres[None]) / bandwidth) ** 2)
    return k.sum(axis=0) / v.size


IMAGE_EMBEDDERS: dict[str, ImageEmbedder] = {"identity": identity_embedding, "histogram": histogram_embedding}


def color_segmenter(levels: Sequence[float], background: float) -> Segmenter:
    """Connected components of each nearest-colour class, returned as bounding-box crops."""
    def seg(frame: np.ndarray) -> list:
        lab = segment_by_color(frame, levels, background)
        crops = []
        for k in range(len(levels)):
            comps, n = ndimage.label(lab == k)
            for sl in ndimage.find_objects(comps):
                if sl is not None:
                    crops.append(frame[sl])
        return crops
    return seg


def sample_frame_indices(n_frames: int, count: int = 10) -> np.ndarray:
    """Evenly spaced frame indices; every frame when there are at most ``count``."""
    if n_frames <= count:
        return np.arange(n_frames)
    return np.unique(np.round(np.linspace(0, n_frames - 1, count)).astype(int))


def subject_sim(gen_frames: np.ndarray, ref_subjects: Sequence[np.ndarray],
                embed: str | ImageEmbedder = "identity", segmenter: Segmenter | None = None,
                n_frames: int = 10) -> SubjectSimResult:
    """SubjectSim over sampled frames of a (T, H, W) video.

    ``ref_subjects`` are subject crops; ``segmenter`` maps a frame to candidate crops and
    defaults to treating the whole frame as one candidate.
    """
    if not ref_subjects:
        raise ValueError("subject_sim needs at least one reference subject")
    f = IMAGE_EMBEDDERS[embed] if isinstance(embed, str) else embed
    segmenter = segmenter or (lambda fr: [fr])
    refs = np.stack([f(r) for r in ref_subjects])
    cands = []
    for t in sample_frame_indices(len(gen_frames), n_frames):
        crops = segmenter(gen_frames[t])
        cands.append(np.stack([f(c) for c in crops]) if crops else np.zeros((0, refs.shape[1])))
    return subject_sim_from_embeddings(cands, refs)


def reference_crops(scene: SyntheticScene) -> list[np.ndarray]:
    """Subject bounding-box crops of each reference, one gray channel."""
    out = []
    for r in scene.references:
        ys, xs = np.nonzero(r.subject_mask)
        out.append(r.pixels.mean(axis=0)[ys.min():ys.max() + 1, xs.min():xs.max() + 1])
    return out


def scene_subject_sim(model, scene: SyntheticScene, seed: int = 0, steps: int = DEFAULT_STEPS,
                      embed: str = "histogram") -> SubjectSimResult:
    refs, e = model.inputs(scene)
    video = latent_to_video(sample(model, refs, e, steps, [seed, scene.scene_id]))[0]
    seg = color_segmenter([s.level for s in scene.subjects], scene.background)
    return subject_sim(video, reference_crops(scene), embed, seg)
