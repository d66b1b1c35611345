"""Image/mask co-augmentation organised as four probabilistic sets.

A plan passes an overall gate first; each set then fires independently with its
own probability and, when it does, applies exactly one of its transforms
(chosen uniformly, then gated by that transform's own probability).

Geometric transforms warp the mask with nearest-neighbour sampling so it stays
binary. Photometric transforms never touch the mask. Every applied transform is
returned with its concrete sampled values so the geometry can be replayed.
"""
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Tuple

import cv2
import numpy as np

from .dataio import SampleRecord
from .errors import ConfigError


@dataclass(frozen=True)
class TransformSpec:
    name: str
    p: float = 1.0
    params: Dict = field(default_factory=dict)


@dataclass(frozen=True)
class SetSpec:
    p: float
    transforms: Tuple[TransformSpec, ...]


def default_sets() -> Tuple[SetSpec, ...]:
    return (
        SetSpec(0.5, (
            TransformSpec("hflip", 0.8),
            TransformSpec("vflip", 0.4),
        )),
        SetSpec(0.9, (
            TransformSpec("scale", 1.0, {"limit": 0.5}),
            TransformSpec("rotate", 1.0, {"limit": 30.0}),
            TransformSpec("shift", 1.0, {"limit": 0.1}),
            TransformSpec("shift_scale_rotate", 1.0, {"shift_limit": 0.1, "scale_limit": 0.5, "rotate_limit": 30.0}),
        )),
        SetSpec(0.2, (
            TransformSpec("perspective", 1.0, {"scale": [0.05, 0.1]}),
            TransformSpec("gaussian_noise", 1.0, {"var_limit": [10.0, 50.0]}),
            TransformSpec("sharpen", 1.0, {"alpha": [0.2, 0.5], "lightness": [0.5, 1.0]}),
            TransformSpec("blur", 1.0, {"limit": 3}),
            TransformSpec("motion_blur", 1.0, {"limit": 3}),
        )),
        SetSpec(0.2, (
            TransformSpec("clahe", 1.0, {"clip_limit": [1.0, 4.0], "tile_grid_size": 8}),
            TransformSpec("brightness_contrast", 1.0, {"limit": 0.2}),
            TransformSpec("gamma", 1.0, {"gamma_limit": [80.0, 120.0]}),
            TransformSpec("hue_saturation", 1.0, {"hue_shift_limit": 20, "sat_shift_limit": 30, "val_shift_limit": 20}),
        )),
    )


@dataclass(frozen=True)
class AugmentationPlan:
    overall_p: float = 0.9
    sets: Tuple[SetSpec, ...] = field(default_factory=default_sets)

    def __post_init__(self):
        probs = [("overall_p", self.overall_p)]
        for i, st in enumerate(self.sets):
            probs.append((f"sets[{i}].p", st.p))
            for t in st.transforms:
                if t.name not in TRANSFORMS:
                    raise ConfigError(f"sets[{i}]: unknown transform {t.name!r}")
                probs.append((f"sets[{i}].{t.name}.p", t.p))
        for name, p in probs:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "AugmentationPlan":
        sets = tuple(
            SetSpec(float(s["p"]), tuple(TransformSpec(t["name"], float(t.get("p", 1.0)), dict(t.get("params", {})))
                                         for t in s["transforms"]))
            for s in data.get("sets", [])
        )
        return cls(float(data.get("overall_p", 0.9)), sets if "sets" in data else default_sets())


@dataclass(frozen=True)
class AppliedTransform:
    name: str
    geometric: bool
    values: Dict


# -- geometric -----------------------------------------------------------------

def _affine_matrix(shape, angle=0.0, scale=1.0, dx=0.0, dy=0.0):
    h, w = shape[:2]
    m = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), angle, scale)
    m[0, 2] += dx * w
    m[1, 2] += dy * h
    return m


def _warp(arr, values, nearest):
    h, w = arr.shape[:2]
    interp = cv2.INTER_NEAREST if nearest else cv2.INTER_LINEAR
    if "matrix" in values:
        m = np.asarray(values["matrix"], dtype=np.float64)
        if m.shape == (3, 3):
            return cv2.warpPerspective(arr, m, (w, h), flags=interp, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        return cv2.warpAffine(arr, m, (w, h), flags=interp, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    raise ConfigError(f"geometric values without a matrix: {values}")


def apply_geometric(arr: np.ndarray, name: str, values: Dict, nearest: bool) -> np.ndarray:
    if name == "hflip":
        return np.ascontiguousarray(arr[:, ::-1])
    if name == "vflip":
        return np.ascontiguousarray(arr[::-1])
    return _warp(arr, values, nearest)


def _sample_hflip(rng, shape, **_):
    return {}


def _sample_affine_factory(kind):
    def sample(rng, shape, limit=None, shift_limit=0.1, scale_limit=0.5, rotate_limit=30.0):
        angle, scale, dx, dy = 0.0, 1.0, 0.0, 0.0
        if kind == "scale":
            scale = 1.0 + rng.uniform(-limit, limit)
        elif kind == "rotate":
            angle = rng.uniform(-limit, limit)
        elif kind == "shift":
            dx, dy = rng.uniform(-limit, limit, size=2)
        else:
            angle = rng.uniform(-rotate_limit, rotate_limit)
            scale = 1.0 + rng.uniform(-scale_limit, scale_limit)
            dx, dy = rng.uniform(-shift_limit, shift_limit, size=2)
        m = _affine_matrix(shape, angle, scale, dx, dy)
        return {"angle": float(angle), "scale": float(scale), "dx": float(dx), "dy": float(dy),
                "matrix": m.tolist()}
    return sample


def _sample_perspective(rng, shape, scale=(0.05, 0.1)):
    h, w = shape[:2]
    sigma = rng.uniform(*scale)
    src = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float32)
    jitter = np.abs(rng.normal(0, sigma, size=(4, 2))) * np.array([w, h])
    # move every corner inward so the warped image stays inside the frame
    dst = src + jitter * np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]])
    m = cv2.getPerspectiveTransform(src, dst.astype(np.float32))
    return {"sigma": float(sigma), "matrix": m.tolist()}


# -- photometric ---------------------------------------------------------------

def _clip_u8(x):
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _sample_noise(rng, shape, var_limit=(10.0, 50.0)):
    return {"var": float(rng.uniform(*var_limit)), "noise_seed": int(rng.integers(2**31))}


def _apply_noise(img, var, noise_seed):
    noise = np.random.default_rng(noise_seed).normal(0.0, np.sqrt(var), size=img.shape)
    return _clip_u8(img.astype(np.float64) + noise)


def _sample_sharpen(rng, shape, alpha=(0.2, 0.5), lightness=(0.5, 1.0)):
    return {"alpha": float(rng.uniform(*alpha)), "lightness": float(rng.uniform(*lightness))}


def _apply_sharpen(img, alpha, lightness):
    identity = np.array([[0, 0, 0], [0, 1, 0], [0, 0, 0]], dtype=np.float32)
    sharp = np.array([[-1, -1, -1], [-1, 8 + lightness, -1], [-1, -1, -1]], dtype=np.float32)
    kernel = (1 - alpha) * identity + alpha * sharp
    return cv2.filter2D(img, -1, kernel)


def _sample_blur(rng, shape, limit=3):
    sizes = list(range(3, max(3, int(limit)) + 1, 2))
    return {"ksize": int(rng.choice(sizes))}


def _apply_blur(img, ksize):
    return cv2.blur(img, (ksize, ksize))


def _sample_motion_blur(rng, shape, limit=3):
    values = _sample_blur(rng, shape, limit)
    values["angle"] = float(rng.uniform(0, 180))
    return values


def _apply_motion_blur(img, ksize, angle):
    kernel = np.zeros((ksize, ksize), dtype=np.float32)
    c = (ksize - 1) / 2.0
    dx, dy = np.cos(np.deg2rad(angle)) * c, np.sin(np.deg2rad(angle)) * c
    p0 = (int(round(c - dx)), int(round(c - dy)))
    p1 = (int(round(c + dx)), int(round(c + dy)))
    cv2.line(kernel, p0, p1, 1.0, thickness=1)
    return cv2.filter2D(img, -1, kernel / kernel.sum())


def _sample_clahe(rng, shape, clip_limit=(1.0, 4.0), tile_grid_size=8):
    return {"clip_limit": float(rng.uniform(*clip_limit)), "tile_grid_size": int(tile_grid_size)}


def _apply_clahe(img, clip_limit, tile_grid_size):
    lab = cv2.cvtColor(img, cv2.COLOR_RGB2LAB)
    clahe = cv2.createCLAHE(clipLimit=clip_limit, tileGridSize=(tile_grid_size, tile_grid_size))
    lab[:, :, 0] = clahe.apply(np.ascontiguousarray(lab[:, :, 0]))
    return cv2.cvtColor(lab, cv2.COLOR_LAB2RGB)


def _sample_bc(rng, shape, limit=0.2):
    return {"contrast": float(1 + rng.uniform(-limit, limit)), "brightness": float(rng.uniform(-limit, limit))}


def _apply_bc(img, contrast, brightness):
    return _clip_u8(img.astype(np.float64) * contrast + brightness * 255.0)


def _sample_gamma(rng, shape, gamma_limit=(80.0, 120.0)):
    return {"gamma": float(rng.uniform(*gamma_limit) / 100.0)}


def _apply_gamma(img, gamma):
    lut = _clip_u8(255.0 * (np.arange(256) / 255.0) ** gamma)
    return lut[img]


def _sample_hsv(rng, shape, hue_shift_limit=20, sat_shift_limit=30, val_shift_limit=20):
    return {
        "hue": float(rng.uniform(-hue_shift_limit, hue_shift_limit)),
        "sat": float(rng.uniform(-sat_shift_limit, sat_shift_limit)),
        "val": float(rng.uniform(-val_shift_limit, val_shift_limit)),
    }


def _apply_hsv(img, hue, sat, val):
    hsv = cv2.cvtColor(img, cv2.COLOR_RGB2HSV).astype(np.float64)
    hsv[..., 0] = np.mod(np.rint(hsv[..., 0] + hue), 180)
    hsv[..., 1] = np.clip(np.rint(hsv[..., 1] + sat), 0, 255)
    hsv[..., 2] = np.clip(np.rint(hsv[..., 2] + val), 0, 255)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)


# name -> (geometric?, sampler, photometric applier or None)
TRANSFORMS: Dict[str, Tuple[bool, Callable, Callable]] = {
    "hflip": (True, _sample_hflip, None),
    "vflip": (True, _sample_hflip, None),
    "scale": (True, _sample_affine_factory("scale"), None),
    "rotate": (True, _sample_affine_factory("rotate"), None),
    "shift": (True, _sample_affine_factory("shift"), None),
    "shift_scale_rotate": (True, _sample_affine_factory("all"), None),
    "perspective": (True, _sample_perspective, None),
    "gaussian_noise": (False, _sample_noise, _apply_noise),
    "sharpen": (False, _sample_sharpen, _apply_sharpen),
    "blur": (False, _sample_blur, _apply_blur),
    "motion_blur": (False, _sample_motion_blur, _apply_motion_blur),
    "clahe": (False, _sample_clahe, _apply_clahe),
    "brightness_contrast": (False, _sample_bc, _apply_bc),
    "gamma": (False, _sample_gamma, _apply_gamma),
    "hue_saturation": (False, _sample_hsv, _apply_hsv),
}


def apply_transform(image, mask, step: AppliedTransform):
    geometric, _, photometric = TRANSFORMS[step.name]
    if geometric:
        return (apply_geometric(image, step.name, step.values, nearest=False),
                apply_geometric(mask, step.name, step.values, nearest=True))
    return photometric(image, **step.values), mask


def plan_steps(plan: AugmentationPlan, shape, seed: int) -> List[AppliedTransform]:
    """Draw the transforms (with concrete values) that ``seed`` selects."""
    rng = np.random.default_rng(seed)
    steps = []
    if rng.random() >= plan.overall_p:
        return steps
    for st in plan.sets:
        if rng.random() >= st.p or not st.transforms:
            continue
        spec = st.transforms[int(rng.integers(len(st.transforms)))]
        if rng.random() >= spec.p:
            continue
        geometric, sampler, _ = TRANSFORMS[spec.name]
        steps.append(AppliedTransform(spec.name, geometric, sampler(rng, shape, **spec.params)))
    return steps


def augment_with_log(s: SampleRecord, plan: AugmentationPlan, seed: int) -> Tuple[SampleRecord, List[AppliedTransform]]:
    steps = plan_steps(plan, s.image.shape, seed)
    image, mask = s.image, s.mask
    for step in steps:
        image, mask = apply_transform(image, mask, step)
    return SampleRecord(s.id, np.ascontiguousarray(image), np.ascontiguousarray(mask)), steps


def augment(s: SampleRecord, plan: AugmentationPlan, seed: int) -> SampleRecord:
    return augment_with_log(s, plan, seed)[0]


def replay_geometric(mask: np.ndarray, steps: List[AppliedTransform]) -> np.ndarray:
    """Re-apply only the geometric part of a recorded augmentation to a mask."""
    for step in steps:
        if step.geometric:
            mask = apply_geometric(mask, step.name, step.values, nearest=True)
    return mask
