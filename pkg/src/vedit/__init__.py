"""Instruction-guided video editing at desk scale.

Modules: ``numkit`` (arrays, autodiff, RNG, Adam), ``schedule`` (noise
schedules, DDIM), ``augment`` (pseudo-video synthesis), ``dataset`` (shards,
seeding, mixing), ``diffusion`` (denoiser, guidance, sampling, checkpoints),
``cappipe`` (captioning/instruction/editor services), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
