from .checkpoint import CheckpointError, load_branch, save_branch
from .model import (BranchCache, BranchWeights, ModelConfig, branch_forward_cache, euler_sample,
                    forward_interpolate, init_branch, initial_noise, patch_ref_attention, patchify,
                    super_resolve, unpatchify, velocity_forward)
