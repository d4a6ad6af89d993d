"""Token-reduction CLIP training at desk scale.

Masked low-resolution pretraining, masked and progressive-resolution
finetuning, zero-shot evaluation and an analytical compute/cost model,
all on a small numpy autodiff engine.
"""

__version__ = "0.1.0"
