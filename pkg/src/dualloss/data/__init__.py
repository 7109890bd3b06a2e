from .augment import AugmentConfig, augment, denormalize, eval_transform, normalize, resize_bilinear
from .dataset import DatasetSplit, Sample, SPLITS
from .features import read_features, read_header, write_features
from .images import decode_ppm, encode_ppm, load_image_folder
from .synth import SynthConfig, synth_dataset

__all__ = [
    "AugmentConfig", "augment", "denormalize", "eval_transform", "normalize", "resize_bilinear",
    "DatasetSplit", "Sample", "SPLITS", "read_features", "read_header", "write_features",
    "decode_ppm", "encode_ppm", "load_image_folder", "SynthConfig", "synth_dataset",
]
