"""Score-based diffusion for singing-voice separation on compressed, band-split spectrograms."""

__version__ = "0.1.0"

from .diffusion import NoiseSchedule, karras_schedule, euler_sampler, heun_sampler
from .dsp import StereoWaveform, decode, encode, read_wav, write_wav
from .metrics import csdr_dataset, csdr_track, eval_run, sdr
from .model import PAPER_CONFIG, TINY_CONFIG, ModelConfig, SpectrogramUNet, build
from .separate import SeparationParams, separate_track
from .train import TrainConfig, load_checkpoint, save_checkpoint

__all__ = [
    "ModelConfig",
    "NoiseSchedule",
    "PAPER_CONFIG",
    "SeparationParams",
    "SpectrogramUNet",
    "StereoWaveform",
    "TINY_CONFIG",
    "TrainConfig",
    "build",
    "csdr_dataset",
    "csdr_track",
    "decode",
    "encode",
    "euler_sampler",
    "eval_run",
    "heun_sampler",
    "karras_schedule",
    "load_checkpoint",
    "read_wav",
    "save_checkpoint",
    "sdr",
    "separate_track",
    "write_wav",
]
