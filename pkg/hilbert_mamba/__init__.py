'''Hilbert-curve Mamba blocks for multimodal volume segmentation and
prompt-fused lesion classification, on a small numpy autodiff kernel'''

__version__ = '0.1.0'
