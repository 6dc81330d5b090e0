from glpnet.data.dataset import (DataError, DatasetManifest, RgbdSample, load_arrays, load_manifest,
                                 load_sample, synth_generate, synth_arrays, write_dataset)
from glpnet.data.glt import FormatError, load_bundle, load_tensor, save_bundle, save_tensor
from glpnet.data.netpbm import read_pnm, write_pgm, write_pgm_heatmap, write_ppm
from glpnet.data.synth import SynthConfig, generate_arrays

__all__ = [
    "DataError", "DatasetManifest", "FormatError", "RgbdSample", "SynthConfig", "generate_arrays",
    "load_arrays", "load_bundle", "load_manifest", "load_sample", "load_tensor", "read_pnm",
    "save_bundle", "save_tensor", "synth_arrays", "synth_generate", "write_dataset", "write_pgm", "write_pgm_heatmap",
    "write_ppm",
]
