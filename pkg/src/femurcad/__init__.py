"""Femur-fracture CAD pipeline.

Subpackages cover the tensor/autodiff substrate, the Vision Transformer
classifier with attention rollout, the training engine, evaluation
metrics, deep embedded clustering, the data pipeline with its synthetic
dataset generator, the hierarchical cascade baseline, and the CLI/HTTP
service for inference and reader studies.
"""

__version__ = "0.1.0"
