"""Mesh registration with sliced-Wasserstein gradient flows and AdamFlow."""

from .discrepancy import ObjectiveConfig
from .flow import FlowConfig, ParticleState
from .geometry import TriMesh, load_mesh, make_synthetic, save_mesh
from .registration import (
    AffineRegistration,
    AffineTransform,
    NonRigidRegistration,
    RegistrationConfig,
    register_affine,
    register_nonrigid,
)

__version__ = "0.1.0"

__all__ = [
    "AffineRegistration",
    "AffineTransform",
    "FlowConfig",
    "NonRigidRegistration",
    "ObjectiveConfig",
    "ParticleState",
    "RegistrationConfig",
    "TriMesh",
    "load_mesh",
    "make_synthetic",
    "register_affine",
    "register_nonrigid",
    "save_mesh",
]
