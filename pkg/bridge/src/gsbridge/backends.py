"""Editor backends.

A backend turns one request view into one edited PNG at the given output
path. The identity stub copies bytes verbatim — it exists so protocol
conformance can be tested without any model assets or GPU. The diffusion
backend wraps an image-conditioned pipeline with edge-map conditioning and
is loaded lazily; everything it actually ran with ends up in
``effective_params`` for the response metadata.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass

from .protocol import JobRequest, ViewJob, view_output_path


@dataclass
class BridgeConfig:
    job_root: str = "."
    backend: str = "identity"          # identity | diffusion
    model_id: str = "stabilityai/stable-diffusion-xl-base-1.0"
    controlnet_id: str = "diffusers/controlnet-canny-sdxl-1.0"
    style_adapter_id: str = "h94/IP-Adapter"
    conditioning_scale: float = 0.8    # edge-map strength
    image_guidance: float = 0.6        # style-image weight
    text_guidance: float = 7.5
    num_steps: int = 30
    device: str = "cpu"
    max_resolution: int = 1024
    poll_interval_s: float = 0.5

    def __post_init__(self):
        for name in ("conditioning_scale", "image_guidance", "text_guidance"):
            value = getattr(self, name)
            if not (value == value and abs(value) != float("inf")):
                raise ValueError(f"{name} must be finite")


class IdentityBackend:
    """Returns each input unchanged, byte for byte."""

    name = "identity-stub"

    def __init__(self, config: BridgeConfig | None = None):
        self.config = config or BridgeConfig()

    def prepare(self, request: JobRequest) -> dict:
        return {"backend": self.name}

    def edit_view(self, request: JobRequest, view: ViewJob) -> None:
        shutil.copyfile(view.render_path, view_output_path(request, view.view_id))


class DiffusionBackend:
    """Edge-conditioned, style-image-guided diffusion editing.

    Imports its ML stack lazily so the bridge package works (and self-tests)
    on machines without torch/diffusers installed.
    """

    name = "diffusion-bridge"

    def __init__(self, config: BridgeConfig):
        self.config = config
        self._pipeline = None

    def _load(self):
        if self._pipeline is not None:
            return
        try:
            import torch
            from diffusers import (
                AutoPipelineForImage2Image,
                ControlNetModel,
            )
        except ImportError as exc:
            raise RuntimeError(
                "diffusion backend needs the optional ML stack: "
                "pip install 'gsbridge[diffusion]'"
            ) from exc
        controlnet = ControlNetModel.from_pretrained(self.config.controlnet_id)
        self._pipeline = AutoPipelineForImage2Image.from_pretrained(
            self.config.model_id, controlnet=controlnet,
        ).to(self.config.device)
        try:
            self._pipeline.load_ip_adapter(
                self.config.style_adapter_id, subfolder="sdxl_models",
                weight_name="ip-adapter_sdxl.bin",
            )
            self._pipeline.set_ip_adapter_scale(self.config.image_guidance)
        except (ValueError, OSError):
            # style adapter is optional; prompt+edges still steer the edit
            pass
        self._torch = torch

    def prepare(self, request: JobRequest) -> dict:
        self._load()
        merged = {
            "backend": self.name,
            "model_id": self.config.model_id,
            "controlnet_id": self.config.controlnet_id,
            "conditioning_scale": self.config.conditioning_scale,
            "image_guidance": self.config.image_guidance,
            "text_guidance": self.config.text_guidance,
            "num_steps": self.config.num_steps,
            "device": self.config.device,
            "noise_seed": request.noise_seed,
        }
        # per-job overrides travel in meta.json's editor_params
        merged.update(request.editor_params)
        self._effective = merged
        return merged

    def edit_view(self, request: JobRequest, view: ViewJob) -> None:
        from PIL import Image

        params = self._effective
        render = Image.open(view.render_path).convert("RGB")
        edges = Image.open(view.edge_path).convert("L")
        style = Image.open(request.style_path).convert("RGB")

        scale = min(1.0, self.config.max_resolution / max(render.size))
        if scale < 1.0:
            size = (round(render.width * scale), round(render.height * scale))
            render = render.resize(size)
            edges = edges.resize(size)

        generator = self._torch.Generator(device=self.config.device)
        generator.manual_seed(int(request.noise_seed))
        result = self._pipeline(
            prompt=request.prompt,
            image=render,
            control_image=edges.convert("RGB"),
            ip_adapter_image=style,
            controlnet_conditioning_scale=float(params["conditioning_scale"]),
            guidance_scale=float(params["text_guidance"]),
            num_inference_steps=int(params["num_steps"]),
            generator=generator,
        ).images[0]
        if result.size != (view.width, view.height):
            result = result.resize((view.width, view.height))
        result.save(view_output_path(request, view.view_id))


def make_backend(config: BridgeConfig):
    if config.backend == "identity":
        return IdentityBackend(config)
    if config.backend == "diffusion":
        return DiffusionBackend(config)
    raise ValueError(f"unknown backend {config.backend!r}")
