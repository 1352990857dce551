"""Neural video representation with online structural reparameterization.

A video is overfit by a coordinate-to-frame decoder whose multi-branch
conv blocks are fused into single 3x3 convolutions on the autodiff tape
during training and structurally fused after it, then compressed by
pruning, quantization, and entropy coding.
"""

from .tensor import ConvWeight, Tape, Tensor, backward, conv2d, gelu, linear, pixel_shuffle
from .blocks import (
    BlockConfig,
    BranchSpec,
    ERB_FLAGS,
    TABLE3_ROWS,
    block_forward_explicit,
    branch_forward,
    erb_config,
    make_table3_config,
)
from .fusion import (
    FusedConv,
    fuse_asymmetric,
    fuse_block,
    fuse_branch,
    fuse_post_pointwise,
    fuse_sequential_pair,
    pad_to_3x3,
)
from .layers import Mode, RepLayer, online_forward, step_time_probe, structural_fuse
from .model import (
    Model,
    ModelConfig,
    count_params_and_flops,
    desk_config,
    load_checkpoint,
    model_forward,
    positional_encode,
    save_checkpoint,
    structural_fuse_model,
)
from .training import (
    Budget,
    TrainConfig,
    adam_step,
    cosine_lr,
    evaluate,
    loss,
    ms_ssim,
    psnr,
    ssim,
    train,
)
from .compression import (
    CompressedModel,
    bpp,
    compress_model,
    decompress_model,
    dequantize,
    entropy_decode,
    entropy_encode,
    finetune_after_prune,
    prune,
    quantize,
    rd_sweep,
)
from .video import Video, read_frames, synth_video, write_frame, write_frames

__version__ = "0.1.0"
