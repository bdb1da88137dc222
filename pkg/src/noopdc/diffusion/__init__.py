from .denoiser import Denoiser, denoise_predict, timestep_embedding
from .schedule import NoiseSchedule, forward_diffuse, make_schedule
from .training import DenoiserTrainConfig, train_denoiser

__all__ = [
    "Denoiser",
    "DenoiserTrainConfig",
    "NoiseSchedule",
    "denoise_predict",
    "forward_diffuse",
    "make_schedule",
    "timestep_embedding",
    "train_denoiser",
]
