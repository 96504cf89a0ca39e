"""Sidecar configuration: role assignments and serving limits."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .wire import ALL_ROLES

DEVICE_ENV = "AEROGROUND_SIDECAR_DEVICE"

DEFAULT_MODELS = {
    "editor": "saliency-window-v1",
    "segmenter_small": "grabcut-otsu-v1",
    "segmenter_large": "grabcut-otsu-v1",
    "rewriter": "instruction-strip-v1",
}


@dataclass(frozen=True)
class RoleAssignment:
    model: str
    device: str = "cpu"


@dataclass(frozen=True)
class SidecarConfig:
    roles: dict[str, RoleAssignment] = field(default_factory=dict)
    max_concurrent_per_role: int = 2
    max_image_pixels: int = 4096 * 4096
    # decoding parameters pinned for reproducibility; echoed in /v1/health
    decoding: dict = field(default_factory=lambda: {
        "seed": 0, "diffusion_steps": 20, "guidance_scale": 4.0,
        "lm_sampling": "greedy",
    })

    def __post_init__(self) -> None:
        for role in self.roles:
            if role not in ALL_ROLES:
                raise ValueError(f"unknown role {role!r}")
        if self.max_concurrent_per_role < 1:
            raise ValueError("max_concurrent_per_role must be >= 1")
        if self.max_image_pixels < 1:
            raise ValueError("max_image_pixels must be >= 1")


def default_config() -> SidecarConfig:
    device = os.environ.get(DEVICE_ENV, "cpu")
    return SidecarConfig(roles={
        role: RoleAssignment(model=model, device=device)
        for role, model in DEFAULT_MODELS.items()
    })


def load_config(path: str | Path) -> SidecarConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    device_override = os.environ.get(DEVICE_ENV)
    roles = {}
    for role, spec in data.get("roles", {}).items():
        roles[role] = RoleAssignment(
            model=spec["model"],
            device=device_override or spec.get("device", "cpu"),
        )
    defaults = SidecarConfig()
    return SidecarConfig(
        roles=roles,
        max_concurrent_per_role=data.get("max_concurrent_per_role",
                                         defaults.max_concurrent_per_role),
        max_image_pixels=data.get("max_image_pixels", defaults.max_image_pixels),
        decoding={**defaults.decoding, **data.get("decoding", {})},
    )
