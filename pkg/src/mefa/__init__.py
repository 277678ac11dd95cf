"""mefa: desk-scale text-to-image person retrieval lab.

Dual toy encoders over synthetic person/caption data, trained with a
triple-pathway objective (intra-modal hard-negative reasoning, cross-modal
refinement, discriminative clue correction) plus a base global alignment,
optimized with LAMB under a linear warmup schedule, and evaluated with
Rank-K / mAP retrieval metrics. The package is wrapped by a FastAPI
service (``mefa.service``) and a thin-client CLI (``mefa.cli``).
"""

__version__ = "0.1.0"
