"""Super-resolution by latent inversion through a learned degradation model."""

from .degrader import (DegraderDiscriminator, DegraderGenerator, DegraderTrainConfig, LossWeights,
                       degrade, train_degrader)
from .hrgen import (GrowthSchedule, ProgressiveDiscriminator, ProgressiveGenerator,
                    ProgressiveTrainConfig, gen_forward, grow, train_progressive)
from .imagedata import Dataset, batch_iter, denormalize, load_manifest, normalize, synth_dataset
from .metrics import heatmap_metric, solution_diversity, synth_heatmaps
from .naminvert import InversionOptions, InversionResult, invert, invert_multi, super_resolve
from .percept import build_extractor, perceptual_distance

__version__ = "0.1.0"
