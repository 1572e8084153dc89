"""Procedural analog of the caption / grounding / segmentation / inpainting data pipeline."""
from .backends import (BackendRequest, BackendResponse, PipelineBackends, caption_scene, parse_caption,
                       procedural_backends)
from .pipeline import (DatagenConfig, GarmentRef, TryonSample, build_dataset, leakage_filter, load_dataset,
                       ncc, read_manifest, synthesize_reference, verify_dataset)
from .render import Body, Garment, ProceduralScene, Texture, render_scene

__all__ = [
    "BackendRequest", "BackendResponse", "PipelineBackends", "caption_scene", "parse_caption",
    "procedural_backends", "DatagenConfig", "GarmentRef", "TryonSample", "build_dataset",
    "leakage_filter", "load_dataset", "ncc", "read_manifest", "synthesize_reference", "verify_dataset",
    "Body", "Garment", "ProceduralScene", "Texture", "render_scene",
]
