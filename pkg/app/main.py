"""FastAPI wrapper exposing the simulator: spectral summaries, experiment runs and metrics."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Literal

from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from prometheus_client import CONTENT_TYPE_LATEST, generate_latest

from .errors import DeledaError
from .models import ExperimentConfig, ExperimentSummary, SpectralResponse, TopologyConfig
from .services.experiments import run_experiment, topology_spectrum


logger = logging.getLogger(__name__)


@dataclass
class AppResources:
    output_dir: str | None


allow_origins = [o.strip() for o in os.getenv("CORS_ALLOW_ORIGINS", "*").split(",") if o.strip()]
def configure_cors(app: FastAPI) -> None:
    app.add_middleware(
        CORSMiddleware,
        allow_origins=allow_origins,
        allow_credentials=True,
        allow_methods=["*"],
        allow_headers=["*"],
    )


def build_app_resources() -> AppResources:
    return AppResources(output_dir=os.getenv("DELEDA_OUTPUT_DIR"))


def to_http_error(exc: DeledaError) -> HTTPException:
    return HTTPException(status_code=422, detail=f"{exc.category}: {exc}")


def register_routes(app: FastAPI, resources: AppResources) -> None:
    @app.get("/")
    def get_index() -> dict:
        return {
            "service": app.title,
            "version": app.version,
            "endpoints": ["/spectral", "/experiments", "/metrics", "/docs"],
        }

    @app.get("/spectral", response_model=SpectralResponse)
    def get_spectral(
        topology: Literal["complete", "watts_strogatz"] = "complete",
        n: int = Query(50, ge=2),
        k: int = Query(4, ge=2),
        p: float = Query(0.3, ge=0.0, le=1.0),
        seed: int = Query(0, ge=0),
    ) -> SpectralResponse:
        try:
            config = TopologyConfig(kind=topology, k=k, p=p)
            return topology_spectrum(config, n, seed)
        except DeledaError as exc:
            raise to_http_error(exc) from exc
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/experiments", response_model=ExperimentSummary, status_code=201)
    def post_experiment(config: ExperimentConfig) -> ExperimentSummary:
        if resources.output_dir:
            config = config.model_copy(update={"output_dir": resources.output_dir})
        try:
            return run_experiment(config)
        except DeledaError as exc:
            raise to_http_error(exc) from exc
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    @app.get("/metrics")
    def get_metrics() -> Response:
        return Response(generate_latest(), media_type=CONTENT_TYPE_LATEST)


def create_app() -> FastAPI:
    """Application factory to allow testability."""

    app = FastAPI(
        title="Decentralized LDA Simulator API",
        version="0.1.0",
        description="Spectral analysis of gossip topologies and decentralized LDA experiment runs.",
    )

    configure_cors(app)
    resources = build_app_resources()
    register_routes(app, resources)
    logger.info("simulator API ready (output dir override: %s)", resources.output_dir or "none")

    return app
