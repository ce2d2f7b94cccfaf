"""HTTP inference surface.

Thin FastAPI wrapper over the library: channel generation, classical solves,
model registration, and power allocation with a registered model. State is an
in-memory model registry; persistence stays with the checkpoint files.
"""

from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import __version__, metrics, model, netgen, wmmse
from .netgen import ProblemConfig


class ChannelRequest(BaseModel):
    m: int = Field(ge=1, le=512)
    topology_seed: int = 0
    fading_seed: int = 0


class ChannelResponse(BaseModel):
    m: int
    gains: list[list[float]]
    topology_seed: int
    fading_seed: int


class SolveRequest(BaseModel):
    gains: list[list[float]]
    noise_std: float = Field(gt=0)
    p_max: float = Field(default=1.0, gt=0)
    max_iter: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-6, gt=0)
    utility: str = "sum_rate"
    weights: Optional[list[float]] = None


class SolveResponse(BaseModel):
    p: list[float]
    iterations: int
    converged: bool
    sum_utility: float


class RegisterRequest(BaseModel):
    name: str = Field(min_length=1, max_length=80)
    checkpoint: dict


class ModelInfo(BaseModel):
    name: str
    variant: str
    K: int
    F: int
    F_in: int


class AllocateRequest(BaseModel):
    model_name: str
    gains: list[list[float]]
    noise_std: float = Field(gt=0)
    p_max: float = Field(default=1.0, gt=0)
    features: Optional[list[list[float]]] = None
    utility: str = "sum_rate"
    weights: Optional[list[float]] = None


class AllocateResponse(BaseModel):
    p: list[float]
    rates: list[float]
    sum_utility: float


def _as_gains(rows: list[list[float]]) -> np.ndarray:
    g = np.asarray(rows, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
        raise HTTPException(status_code=400, detail="gains must be a square matrix")
    if not np.all(np.isfinite(g)) or np.any(g < 0) or np.any(np.diag(g) <= 0):
        raise HTTPException(status_code=400, detail="gains must be finite, nonnegative, with positive diagonal")
    return g


def _kind(name: str, weights) -> metrics.UtilityKind:
    try:
        return metrics.utility_from_name(name, weights)
    except (ValueError, metrics.EvaluationError) as e:
        raise HTTPException(status_code=400, detail=str(e))


def create_app(checkpoints: Optional[dict] = None) -> FastAPI:
    """App factory; checkpoints maps model names to checkpoint file paths."""
    app = FastAPI(title="uwmmse", version=__version__)
    registry: dict[str, model.ModelParams] = {}
    for name, path in (checkpoints or {}).items():
        params, _ = model.load_checkpoint(path)
        registry[name] = params

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__, "models": len(registry)}

    @app.post("/channel", response_model=ChannelResponse)
    def channel(req: ChannelRequest):
        try:
            state = netgen.sample_channel(req.m, req.topology_seed, req.fading_seed)
        except netgen.DegenerateGeometryError as e:
            raise HTTPException(status_code=400, detail=str(e))
        return ChannelResponse(m=req.m, gains=state.gains.tolist(),
                               topology_seed=req.topology_seed, fading_seed=req.fading_seed)

    @app.post("/solve", response_model=SolveResponse)
    def solve(req: SolveRequest):
        g = _as_gains(req.gains)
        kind = _kind(req.utility, req.weights)
        if not kind.solver_ok:
            raise HTTPException(status_code=400, detail=f"utility {kind.name!r} cannot drive the solver")
        opts = wmmse.SolveOptions(noise_std=req.noise_std, p_max=req.p_max,
                                  max_iter=req.max_iter, tol=req.tol, utility=kind)
        try:
            res = wmmse.solve(g, opts)
            c = metrics.rates(res.p, g, req.noise_std)
            total = metrics.sum_utility(c, kind)
        except (ArithmeticError, metrics.EvaluationError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        return SolveResponse(p=res.p.tolist(), iterations=res.iterations,
                             converged=res.converged, sum_utility=total)

    @app.post("/models", response_model=ModelInfo, status_code=201)
    def register(req: RegisterRequest):
        try:
            params, _ = model.params_from_checkpoint_doc(req.checkpoint)
        except (KeyError, ValueError, TypeError) as e:
            raise HTTPException(status_code=400, detail=f"bad checkpoint document: {e}")
        registry[req.name] = params
        return ModelInfo(name=req.name, variant=params.psi_variant,
                         K=params.K, F=params.F, F_in=params.F_in)

    @app.get("/models", response_model=list[ModelInfo])
    def list_models():
        return [ModelInfo(name=n, variant=p.psi_variant, K=p.K, F=p.F, F_in=p.F_in)
                for n, p in sorted(registry.items())]

    @app.post("/allocate", response_model=AllocateResponse)
    def allocate(req: AllocateRequest):
        params = registry.get(req.model_name)
        if params is None:
            raise HTTPException(status_code=404, detail=f"no model named {req.model_name!r}")
        g = _as_gains(req.gains)
        kind = _kind(req.utility, req.weights)
        q = None
        if req.features is not None:
            q = np.asarray(req.features, dtype=float)
            if q.shape != (g.shape[0], params.F_in):
                raise HTTPException(status_code=400,
                                    detail=f"features must be shape ({g.shape[0]}, {params.F_in})")
        update_kind = kind if kind.solver_ok else metrics.sum_rate()
        cfg = ProblemConfig(noise_std=req.noise_std, p_max=req.p_max, utility=update_kind)
        try:
            p, _ = model.forward(g, q, params, cfg)
            c = metrics.rates(p, g, req.noise_std)
            total = metrics.sum_utility(c, kind)
        except (metrics.EvaluationError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        return AllocateResponse(p=p.tolist(), rates=c.tolist(), sum_utility=total)

    return app
