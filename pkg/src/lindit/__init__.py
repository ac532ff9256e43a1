"""Linear diffusion-transformer core: ReLU linear attention, Mix-FFN blocks,
flow-matching training, a multistep flow sampler and W8A8 quantization."""

__version__ = "0.1.0"
