"""HTTP front end for the inference-shaped operations.

Only transforms are exposed (retarget, enlarge, the classical baselines)
plus health and model metadata; dataset generation and training stay on
the command line where long-running filesystem jobs belong.  Images
travel as base64-encoded PNG strings inside JSON bodies.
"""

from __future__ import annotations

import base64
import io
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field
from PIL import Image as PILImage

from . import __version__, baselines, nets, shift
from .dataset import load_png, u8_to_unit, unit_to_u8
from .errors import ConfigurationError, ShiftwarpError
from .tensor import Node


def encode_image(image: np.ndarray) -> str:
    buf = io.BytesIO()
    PILImage.fromarray(image, "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_image(data: str) -> np.ndarray:
    try:
        raw = base64.b64decode(data, validate=True)
    except (ValueError, TypeError) as exc:
        raise HTTPException(422, f"image is not valid base64: {exc}")
    return load_png(io.BytesIO(raw))


class RetargetRequest(BaseModel):
    image: str = Field(description="base64 PNG")
    width: int | None = None
    ratio: float | None = None
    lam: float = 0.2
    include_attention: bool = False


class EnlargeRequest(BaseModel):
    image: str
    factor: float = Field(gt=0.0)
    gamma: float = 1.0
    lam: float = 0.2


class BaselineRequest(BaseModel):
    image: str
    method: str
    width: int


class ImageResponse(BaseModel):
    image: str
    width: int
    height: int
    attention: str | None = None


class ModelInfo(BaseModel):
    layers: list[dict]
    parameters: int
    frozen: list[str]


def _target_width(req: RetargetRequest, source_width: int) -> int:
    if (req.width is None) == (req.ratio is None):
        raise HTTPException(422, "provide exactly one of width or ratio")
    if req.width is not None:
        return req.width
    return max(1, round(req.ratio * source_width))


def load_or_fail(checkpoint) -> nets.Model:
    if not Path(checkpoint).exists():
        raise ConfigurationError(f"checkpoint {checkpoint} does not exist")
    return nets.load_checkpoint(checkpoint)


def create_app(checkpoint: str | None = None,
               model: nets.Model | None = None) -> FastAPI:
    if checkpoint is not None:
        model = load_or_fail(checkpoint)
    app = FastAPI(title="shiftwarp", version=__version__)

    @app.exception_handler(ShiftwarpError)
    async def _domain_error(_, exc: ShiftwarpError):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=400,
                            content={"detail": f"{type(exc).__name__}: {exc}"})

    def require_model() -> nets.Model:
        if model is None:
            raise HTTPException(409, "no checkpoint is loaded")
        return model

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__,
                "model_loaded": model is not None}

    @app.get("/model", response_model=ModelInfo)
    def model_info():
        m = require_model()
        count = sum(int(np.prod(node.value.shape))
                    for grp in m.params.values() for node in grp.values())
        layers = [{"id": lay.id, "kind": lay.kind, "cin": lay.cin,
                   "cout": lay.cout, "act": lay.act} for lay in m.layers]
        return ModelInfo(layers=layers, parameters=count,
                         frozen=sorted(m.frozen))

    @app.post("/retarget", response_model=ImageResponse)
    def retarget(req: RetargetRequest):
        m = require_model()
        image = decode_image(req.image)
        h, w = image.shape[:2]
        spec = shift.RetargetSpec(h, w, _target_width(req, w), req.lam)
        result = shift.retarget_width(Node(u8_to_unit(image)), m, spec)
        out = unit_to_u8(result.output.value)
        attention = None
        if req.include_attention:
            buf = io.BytesIO()
            shift.save_attention_png(result.resized, buf)
            attention = base64.b64encode(buf.getvalue()).decode("ascii")
        return ImageResponse(image=encode_image(out), width=out.shape[1],
                             height=out.shape[0], attention=attention)

    @app.post("/enlarge", response_model=ImageResponse)
    def enlarge(req: EnlargeRequest):
        m = require_model()
        image = decode_image(req.image)
        h, w = image.shape[:2]
        spec = shift.RetargetSpec(h, w, max(1, round(req.factor * w)),
                                  req.lam, req.gamma)
        widened = shift.enlarge(Node(u8_to_unit(image)), m, spec)
        out = unit_to_u8(widened)
        return ImageResponse(image=encode_image(out), width=out.shape[1],
                             height=out.shape[0])

    @app.post("/baseline", response_model=ImageResponse)
    def baseline(req: BaselineRequest):
        fn = baselines.METHODS.get(req.method)
        if fn is None:
            raise HTTPException(
                422, f"unknown method {req.method!r}; "
                     f"choose from {sorted(baselines.METHODS)}")
        out = fn(decode_image(req.image), req.width)
        return ImageResponse(image=encode_image(out), width=out.shape[1],
                             height=out.shape[0])

    return app
