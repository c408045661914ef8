"""Criticality-aware adversarial training for small vision transformers.

Submodules: ``autodiff`` (tape-based gradients), ``vit`` (model and
checkpoints), ``attacks``, ``criticality``, ``peft`` (allocation plans,
LoRA and adapters), ``train``, ``data``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
