"""Score-distillation engine for generating and editing textured 3D head models."""

import torch as _torch

# Runs must be bit-reproducible (seeded executions and checkpoint resume are
# compared parameter-exactly); parallel scatter-add kernels are the one source
# of run-to-run float noise.
_torch.use_deterministic_algorithms(True)

__version__ = "0.1.0"
