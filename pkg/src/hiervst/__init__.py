"""Hierarchical variational voice style transfer at desk scale."""
from .audio import (FeatureBundle, PitchTrack, Waveform, extract_f0, linear_spectrogram, load_and_resample,
                    mel_spectrogram, read_wav, save_wav)
from .config import HierVSTConfig
from .errors import (AudioReadError, BackendError, CheckpointError, ConfigError, HierVSTError, NumericalError,
                     ValidationError)
from .model import HierVST
from .perturbation import perturb
from .pipeline import ConversionRequest, Converter, Manifest, build_manifest, convert, evaluate
from .trainer import Trainer, fine_tune_one_shot, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
