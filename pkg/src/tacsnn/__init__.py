"""Spiking convolutional networks with temporally aggregated convolutions.

Submodules:
    tensor    arrays with reverse-mode gradients, conv2d, pooling, batchnorm
    neuron    leaky integrate-and-fire dynamics and surrogate derivatives
    temporal  per-step, collapsed, preserved, skipping, filtered and gated layer operators
    sparsity  statistics of skipping zeros on SIMD hardware
    encoding  rate coding, AEDAT 3.1 and IDX parsing, synthetic motion data
    train     models, Adam, training loop
"""
from .neuron import LIFParams, LIFState, SurrogateSpec, lif_step
from .temporal import SpikeTrain, TemporalOpConfig
from .tensor import ConvSpec, Tensor

__version__ = "0.1.0"

__all__ = ["ConvSpec", "LIFParams", "LIFState", "SpikeTrain", "SurrogateSpec", "TemporalOpConfig", "Tensor",
           "lif_step"]
