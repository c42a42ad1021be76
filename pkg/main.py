import logging
import sys
from contextlib import asynccontextmanager
from typing import Any, Dict, Union

from fastapi import FastAPI, Request, status
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, RedirectResponse

from config.settings import settings
from htclab import harness
from htclab.cc import SUPPORTED_ALGOS
from htclab.cli import configure_logging
from htclab.errors import ConfigError, SimulationFault
from htclab.models import (
    CompareRequest, ComparisonTable, Proto, ResultSet, RunRequest, ScenarioConfig, SweepRequest,
)
from htclab.netgraph import ScenarioKind
from htclab.scenario import parse_scenario, scenario_from_mapping

# Configure logging
configure_logging()
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    logger.info(f"{settings.APP_NAME} {settings.APP_VERSION} starting ({settings.ENVIRONMENT})")
    yield
    logger.info("Shutdown complete")

# Create FastAPI app
app = FastAPI(
    title=settings.APP_NAME,
    description=settings.APP_DESCRIPTION,
    version=settings.APP_VERSION,
    lifespan=lifespan,
    docs_url="/docs" if settings.is_development else None,
    redoc_url="/redoc" if settings.is_development else None
)

# CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=settings.CORS_METHODS,
    allow_headers=settings.CORS_HEADERS,
)


def load_config(config: Union[str, Dict[str, Any]]) -> ScenarioConfig:
    if isinstance(config, str):
        return parse_scenario(config, source="request")
    return scenario_from_mapping(config)

# ========================
# SERVICE ENDPOINTS
# ========================

@app.get("/")
async def root():
    return RedirectResponse(url="/docs")

@app.get("/health")
async def health_check():
    return {
        "status": "healthy",
        "service": settings.APP_NAME,
        "version": settings.APP_VERSION
    }

@app.get(f"{settings.API_V1_STR}/info")
async def api_info():
    return {
        "api_version": "v1",
        "service": settings.APP_NAME,
        "endpoints": {
            "runs": f"POST {settings.API_V1_STR}/runs",
            "sweeps": f"POST {settings.API_V1_STR}/sweeps",
            "compare": f"POST {settings.API_V1_STR}/compare",
        },
        "protocols": [p.value for p in Proto],
        "congestion_control": [a.value for a in SUPPORTED_ALGOS],
        "scenarios": [k.value for k in ScenarioKind],
    }

# ========================
# SIMULATION ENDPOINTS
# ========================

# Plain `def` handlers: runs are CPU bound and go to the threadpool.
@app.post(f"{settings.API_V1_STR}/runs", response_model=ResultSet)
def create_run(request: RunRequest):
    """Run one scenario and return its result rows"""
    config = load_config(request.config)
    return harness.run(config, request.out, request.seed, request.scale)

@app.post(f"{settings.API_V1_STR}/sweeps", response_model=ResultSet)
def create_sweep(request: SweepRequest):
    """Run every point of a scenario's sweep section"""
    config = load_config(request.config)
    return harness.sweep(config, request.out, request.seed, request.scale, request.jobs)

@app.post(f"{settings.API_V1_STR}/compare", response_model=ComparisonTable)
def create_comparison(request: CompareRequest):
    configs = [load_config(c) for c in request.configs]
    return harness.compare(configs, request.out, request.seed, request.scale)

# ========================
# ERROR HANDLERS
# ========================

@app.exception_handler(ConfigError)
async def config_error_handler(request: Request, exc: ConfigError):
    logger.error(f"Invalid configuration: {exc}")
    return JSONResponse(
        status_code=status.HTTP_422_UNPROCESSABLE_ENTITY,
        content={"detail": str(exc), "field": exc.field},
    )

@app.exception_handler(SimulationFault)
async def simulation_fault_handler(request: Request, exc: SimulationFault):
    logger.error(f"Simulation fault: {exc}")
    return JSONResponse(
        status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
        content={"detail": str(exc)},
    )

# ========================
# MAIN ENTRY POINT
# ========================

if __name__ == "__main__":
    from htclab.cli import main

    sys.exit(main())
