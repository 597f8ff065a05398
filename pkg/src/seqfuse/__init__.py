"""seqfuse: multi-sequence fusion segmentation studies on synthetic MR phantoms.

Submodules
----------
phantom     synthetic multi-sequence volume generation and dataset I/O
preprocess  per-slice equalization, resizing, 2.5D sample construction, sampling
seqdrop     sequence-level dropout and missing-sequence reweighting
fusenet     segmentation networks parameterized by integration level / weight sharing
trainer     optimization loop with validation-driven checkpointing
detect      lesion detection / segmentation metrics (PR, mAP, sensitivity, DICE)
saliency    input-gradient instrumentation during training
cli         experiment orchestration commands
"""

__version__ = "0.1.0"

CANONICAL_SEQUENCES = ("BRAVO-post", "CUBE-pre", "CUBE-post", "FLAIR")
