"""protoseg: semi-supervised volumetric segmentation with a multi-prototype classifier.

Pure-numpy training engine: synthetic volume generation, a small 3D conv
encoder with hand-written backward passes, mean-teacher self-training with
momentum-updated class prototypes, and surface-distance evaluation metrics.
Hot conv kernels are numba-jitted with a numpy fallback (PROTOSEG_BACKEND=numpy).
"""

__version__ = "0.1.0"
