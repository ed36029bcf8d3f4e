from fastapi import FastAPI, HTTPException, BackgroundTasks, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field
from typing import List, Dict, Optional
import logging

from app.core.config import settings, configure_logging
from app.core.errors import SchedulingError, CapacityError, UnknownNameError, ExperimentCancelled
from app.services import dp, experiments
from app.services.fluid import build_fluid, solve_fluid, extract_pstar, fluid_report
from app.services.job_registry import job_registry
from app.services.model import Instance, InstanceDocument, canonical, validate
from app.services.policies import policy_from_name
from app.services.sim import MultiDayConfig, simulate_multiday, simulate_single_day

from fastapi.middleware.cors import CORSMiddleware

configure_logging()
logger = logging.getLogger(__name__)

app = FastAPI(title=settings.PROJECT_NAME, openapi_url=f"{settings.API_V1_STR}/openapi.json")

# Set all CORS enabled origins
app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    logger.warning(f"Validation Error: {exc.errors()}")
    return JSONResponse(
        status_code=422,
        content={"detail": exc.errors(), "body": exc.body},
    )

@app.exception_handler(SchedulingError)
async def scheduling_exception_handler(request: Request, exc: SchedulingError):
    if isinstance(exc, CapacityError):
        status_code = 413
    elif isinstance(exc, UnknownNameError):
        status_code = 404
    else:
        status_code = 422
    return JSONResponse(status_code=status_code, content=exc.to_dict())

# --- Pydantic Models ---

class SolveRequest(BaseModel):
    instance: InstanceDocument
    model: str = "nonseq"
    exhaustive: bool = False
    include_actions: bool = False

class FluidRequest(BaseModel):
    instance: InstanceDocument
    scale: int = Field(1, ge=1)

class SimulateRequest(BaseModel):
    instance: InstanceDocument
    policy: str = "offering-all"
    days: int = Field(settings.DEFAULT_REPLICATIONS, ge=1)
    seed: int = settings.DEFAULT_SEED
    keep_counts: bool = False

class PolicyMapRequest(BaseModel):
    instance: InstanceDocument
    model: str = "nonseq"
    fix: Dict[str, int]
    axes: List[str]

class MultiDayRequest(BaseModel):
    template: InstanceDocument
    policy: str = "offering-all"
    demand: str = "det"
    D: int = Field(1, ge=1)
    seed: int = settings.DEFAULT_SEED
    days: int = settings.MULTIDAY_TOTAL_DAYS
    warmup: int = settings.MULTIDAY_WARMUP

class TableRequest(BaseModel):
    mode: Optional[str] = None
    horizons: Optional[List[int]] = None
    days: Optional[int] = None
    seed: Optional[int] = None
    instances: Optional[int] = None

# --- Helpers ---

def run_table_job(job_id: str, spec: experiments.ExperimentSpec):
    """Background worker: runs one experiment table and records progress in the registry."""
    try:
        rows = experiments.run_table(
            spec,
            progress=lambda done, total: job_registry.update_progress(job_id, done, total),
            should_stop=lambda: job_registry.is_cancelled(job_id),
        )
        job_registry.complete_job(job_id, rows)
        logger.info(f"Table job {job_id} ({spec.name}) completed with {len(rows)} rows")
    except ExperimentCancelled:
        job_registry.mark_cancelled(job_id)
        logger.info(f"Table job {job_id} ({spec.name}) cancelled")
    except Exception as e:
        logger.exception(f"Table job {job_id} ({spec.name}) failed")
        job_registry.fail_job(job_id, str(e))

# --- Endpoints ---

@app.post(f"{settings.API_V1_STR}/instances/validate")
def validate_instance(doc: InstanceDocument):
    """Reports every violated instance invariant."""
    instance = Instance(omega=doc.omega, lam=doc.lambda_, horizon=doc.horizon, capacity=doc.capacity)
    errors = validate(instance)
    return {"status": "success", "data": {"ok": not errors, "errors": errors}}

@app.get(f"{settings.API_V1_STR}/instances/canonical/{{name}}")
def get_canonical(name: str):
    """Choice matrix of a named instance family (N, W, M, M_PLUS_1)."""
    return {"status": "success", "data": {"name": name, "omega": canonical(name).tolist()}}

@app.post(f"{settings.API_V1_STR}/solve")
def solve(request: SolveRequest):
    """Backward induction for the non-sequential, sequential or full-information model."""
    instance = Instance.from_document(request.instance)
    table = dp.solve_model(instance, request.model, request.exhaustive, store_actions=request.include_actions)
    doc = dp.value_table_to_json(table)
    doc["value"] = table.initial_value
    return {"status": "success", "data": doc}

@app.post(f"{settings.API_V1_STR}/fluid")
def fluid(request: FluidRequest):
    """Solves the fluid LP and returns Z with the time-averaged static policy."""
    instance = Instance.from_document(request.instance)
    solution = solve_fluid(build_fluid(instance, request.scale))
    return {"status": "success", "data": fluid_report(solution, extract_pstar(solution))}

@app.post(f"{settings.API_V1_STR}/simulate")
def simulate(request: SimulateRequest):
    """Monte Carlo fill count of a named policy."""
    instance = Instance.from_document(request.instance)
    policy = policy_from_name(request.policy, instance)
    report = simulate_single_day(instance, policy, request.days, request.seed, keep_counts=request.keep_counts)
    return {"status": "success", "data": report.to_dict(keep_counts=request.keep_counts)}

@app.post(f"{settings.API_V1_STR}/policy-map")
def policy_map(request: PolicyMapRequest):
    """Optimal action over a 2-D slice of the state space."""
    instance = Instance.from_document(request.instance)
    rows = experiments.emit_policy_map(instance, request.model, request.fix, request.axes)
    return {"status": "success", "data": rows}

@app.post(f"{settings.API_V1_STR}/multiday")
def multiday(request: MultiDayRequest):
    """Rolling-horizon simulation with a single-day template."""
    template = Instance.from_document(request.template)
    config = MultiDayConfig(
        template=template,
        acceptable_days=request.D,
        demand_mode=request.demand,
        total_days=request.days,
        warmup=request.warmup,
        seed=request.seed,
    )
    report = simulate_multiday(config, request.policy)
    return {"status": "success", "data": report.to_dict()}

@app.post(f"{settings.API_V1_STR}/tables/{{name}}")
def start_table(name: str, background_tasks: BackgroundTasks, request: Optional[TableRequest] = None):
    """Starts an experiment table in the background and returns its job id."""
    request = request or TableRequest()
    spec = experiments.table_spec(
        name,
        mode=request.mode,
        horizons=request.horizons,
        days=request.days,
        seed=request.seed,
        instances=request.instances,
    )
    job_id = job_registry.start_job(name, experiments.expected_rows(spec))
    background_tasks.add_task(run_table_job, job_id, spec)
    return {"status": "success", "data": {"job_id": job_id, "table": name}}

@app.get(f"{settings.API_V1_STR}/tables/jobs")
def list_table_jobs():
    """Returns all experiment jobs."""
    return {"status": "success", "data": job_registry.list_jobs()}

@app.get(f"{settings.API_V1_STR}/tables/status/{{job_id}}")
def get_table_status(job_id: str):
    """Status, progress and (when completed) rows of an experiment job."""
    status = job_registry.get_status(job_id)
    if not status:
        raise HTTPException(status_code=404, detail="Job not found.")
    return {"status": "success", "data": status}

@app.post(f"{settings.API_V1_STR}/tables/cancel/{{job_id}}")
def cancel_table(job_id: str):
    """Cancels a running experiment job between scenarios."""
    success = job_registry.cancel_job(job_id)
    if not success:
        raise HTTPException(status_code=404, detail="Active job not found.")
    return {"status": "success", "message": f"Cancellation requested for job '{job_id}'."}

@app.get("/")
def health_check():
    return {"status": f"{settings.PROJECT_NAME} is Online", "version": "1.0.0"}
