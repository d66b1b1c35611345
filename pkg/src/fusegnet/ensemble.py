"""Single-model and k-fold ensemble inference, binarization and PNG output."""
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np
import torch
from PIL import Image

from .dataio import standardize
from .errors import ConfigError, ShapeError
from .network import FUSegNet, NetworkConfig
from .trainer import CheckpointRecord, load_checkpoint

THRESHOLD = 0.5


def inference_config(cfg: NetworkConfig) -> NetworkConfig:
    # input_size and pretrained do not affect the weights of a trained model
    return replace(cfg, pretrained=False, weights_path=None, input_size=32)


@dataclass
class EnsembleBundle:
    checkpoints: List[CheckpointRecord]
    net_cfg: NetworkConfig

    def __post_init__(self):
        if not self.checkpoints:
            raise ConfigError("an ensemble needs at least one checkpoint")
        ref = inference_config(self.net_cfg)
        for i, ck in enumerate(self.checkpoints):
            if inference_config(ck.net_cfg) != ref:
                raise ConfigError(f"checkpoint {i} network configuration differs from the ensemble's")

    @classmethod
    def from_checkpoints(cls, checkpoints: Sequence[CheckpointRecord]) -> "EnsembleBundle":
        if not checkpoints:
            raise ConfigError("an ensemble needs at least one checkpoint")
        return cls(list(checkpoints), checkpoints[0].net_cfg)

    @classmethod
    def load(cls, paths: Sequence) -> "EnsembleBundle":
        return cls.from_checkpoints([load_checkpoint(p) for p in paths])

    def models(self) -> List[FUSegNet]:
        return [ck.build_model() for ck in self.checkpoints]


def predict(model: FUSegNet, image: np.ndarray) -> np.ndarray:
    """Probability map (H, W) float32 for a raw uint8 (H, W, 3) image."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {image.shape}")
    h, w = image.shape[:2]
    if h % 32 or w % 32:
        raise ShapeError(f"image size {h}x{w} is not divisible by 32; resize before prediction")
    model.eval()
    x = torch.from_numpy(standardize(image, model.mean, model.std)).permute(2, 0, 1)[None]
    with torch.no_grad():
        return model(x)[0, 0].numpy()


def ensemble_predict(bundle: Union[EnsembleBundle, Sequence[FUSegNet]], image: np.ndarray) -> np.ndarray:
    """Pixelwise mean of the members' probability maps (float64)."""
    models = bundle.models() if isinstance(bundle, EnsembleBundle) else list(bundle)
    if not models:
        raise ConfigError("an ensemble needs at least one model")
    maps = [predict(m, image) for m in models]
    shapes = {m.shape for m in maps}
    if len(shapes) != 1:
        raise ShapeError(f"ensemble members produced inconsistent shapes: {sorted(shapes)}")
    return np.mean(np.stack(maps).astype(np.float64), axis=0)


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(np.uint8)


def write_mask_png(mask: np.ndarray, path) -> Path:
    path = Path(path)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)
    return path


def write_probability_png(prob: np.ndarray, path) -> Path:
    """16-bit PNG scaled by 65535."""
    path = Path(path)
    scaled = np.round(np.clip(prob, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(path)
    return path


def read_probability_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0
