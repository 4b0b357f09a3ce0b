"""Dense feature learning from unlabeled masks via balanced clustering onto learnable class prompts."""
from ._kernels import BACKEND as KERNEL_BACKEND
from .config import GeneratorSpec, RunConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["GeneratorSpec", "KERNEL_BACKEND", "RunConfig", "TrainConfig", "__version__"]
