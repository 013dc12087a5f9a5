from .dataset import (MAX_DEPTH, SPLITS, AugmentPolicy, DepthSample, ManifestEntry, augment,
                      downsample_pair, flip_sample, load_sample, load_split, parse_manifest,
                      save_sample, scale_sample, to_batch, write_manifest)
from .formats import FormatError
from .synth import synth_generate, synth_intrinsics

__all__ = [
    "MAX_DEPTH", "SPLITS", "AugmentPolicy", "DepthSample", "ManifestEntry", "augment",
    "downsample_pair", "flip_sample", "load_sample", "load_split", "parse_manifest", "save_sample",
    "scale_sample", "to_batch", "write_manifest", "FormatError", "synth_generate",
    "synth_intrinsics",
]
