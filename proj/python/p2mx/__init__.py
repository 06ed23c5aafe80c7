"""Python access to the p2mx mesh refinement core."""

from ._p2mx import (
    P2mxError,
    chamfer_distance,
    ellipsoid,
    evaluate,
    f_score,
    icosahedron,
    load_obj,
    sample_surface,
    save_obj,
    synth,
    train,
)

__all__ = [
    "P2mxError",
    "chamfer_distance",
    "ellipsoid",
    "evaluate",
    "f_score",
    "icosahedron",
    "load_obj",
    "sample_surface",
    "save_obj",
    "synth",
    "train",
]
