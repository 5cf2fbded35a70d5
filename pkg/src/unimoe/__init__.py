"""Desk-scale sparse mixture-of-experts multimodal language model.

Modality connectors, top-k token routing with LoRA-adapted experts, the
three-stage progressive training pipeline, deterministic parallel-execution
simulation, and routing analytics.
"""

__version__ = "0.1.0"
