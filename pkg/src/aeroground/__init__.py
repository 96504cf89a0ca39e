"""Text-guided object grounding for overhead imagery.

A pipeline engine that enhances hazy rasters, asks an image-editing model
to highlight the queried object with red boxes, decodes those highlights
into box cues, refines them with adaptively routed segmenters, and scores
predictions with an mIoU/Acc@t harness. All learned models live behind a
small HTTP+JSON protocol; a deterministic mock server makes the whole
pipeline testable without GPUs.
"""

__version__ = "0.1.0"
