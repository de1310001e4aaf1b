"""Pydantic contracts for experiment configuration, evaluation reports and HTTP payloads."""

from __future__ import annotations

from typing import Dict, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class TopologyConfig(BaseModel):
    """Communication graph between the agents."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["complete", "watts_strogatz"] = "complete"
    k: int = Field(4, ge=2, description="Ring-lattice degree before rewiring (Watts-Strogatz only)")
    p: float = Field(0.3, ge=0.0, le=1.0, description="Rewiring probability (Watts-Strogatz only)")

    @field_validator("k")
    @classmethod
    def validate_even_degree(cls, value: int) -> int:
        if value % 2:
            raise ValueError("k must be even")
        return value

    def label(self) -> str:
        if self.kind == "complete":
            return "complete"
        return f"watts_strogatz_k{self.k}_p{self.p:g}"


class ScheduleConfig(BaseModel):
    """Step sizes: rho_t = (t + t0)^-kappa, or a constant rho."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["power", "constant"] = "power"
    t0: float = Field(10.0, ge=0.0)
    kappa: float = Field(0.6, gt=0.5, le=1.0)
    rho: float = Field(0.0, ge=0.0, le=1.0, description="Step size of the constant kind")


class EStepConfig(BaseModel):
    """How the expectation of the sufficient statistics is computed."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    n_sweeps: int = Field(50, ge=1)
    burn_in: int = Field(25, ge=0)
    exact: bool = Field(False, description="Enumerate all topic assignments instead of Gibbs sampling")

    @model_validator(mode="after")
    def validate_burn_in(self) -> "EStepConfig":
        if self.n_sweeps <= self.burn_in:
            raise ValueError("n_sweeps must be greater than burn_in")
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_test_docs: int = Field(200, ge=1)
    particles: int = Field(20, ge=1)
    cadence: int = Field(10, ge=1, description="Iterations between two evaluation rows")
    node_sample: int = Field(5, ge=1, description="Nodes whose held-out perplexity is averaged")


class BatchConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    local_size: int | None = Field(None, ge=1, description="Documents per local update; none uses the full shard")
    centralized_size: int = Field(20, ge=1)


class ExperimentConfig(BaseModel):
    """Everything needed to reproduce one run, together with the code version."""

    model_config = ConfigDict(extra="forbid")

    n_nodes: int = Field(50, ge=2)
    docs_per_node: int = Field(20, ge=1)
    vocab_size: int = Field(100, ge=1)
    n_topics: int = Field(5, ge=1)
    mean_doc_length: float = Field(10.0, gt=0.0)
    mode: Literal["sync", "async", "centralized"] = "sync"
    iterations: int = Field(200, ge=0)
    beta_concentration: float = Field(0.1, gt=0.0, description="Dirichlet concentration of the true topics")
    alpha: float | None = Field(None, gt=0.0, description="Symmetric document prior; none means 1/K")
    smoothing: float = Field(1e-8, ge=0.0)
    master_seed: int = Field(0, ge=0)
    output_dir: str = "runs"
    topology: TopologyConfig = Field(default_factory=TopologyConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    estep: EStepConfig = Field(default_factory=EStepConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    batch: BatchConfig = Field(default_factory=BatchConfig)

    @model_validator(mode="after")
    def validate_generators(self) -> "ExperimentConfig":
        if self.topology.kind == "watts_strogatz" and self.n_nodes <= self.topology.k:
            raise ValueError("watts_strogatz topology requires n_nodes > k")
        if self.batch.centralized_size > self.n_nodes * self.docs_per_node:
            raise ValueError("batch.centralized_size exceeds the corpus size")
        if self.batch.local_size is not None and self.batch.local_size > self.docs_per_node:
            raise ValueError("batch.local_size exceeds docs_per_node")
        return self

    @property
    def prior_value(self) -> float:
        return self.alpha if self.alpha is not None else 1.0 / self.n_topics

    @property
    def graph_label(self) -> str:
        return "central" if self.mode == "centralized" else self.topology.label()

    @property
    def run_name(self) -> str:
        return f"{self.mode}_{self.graph_label}_seed{self.master_seed}"


class EvalReport(BaseModel):
    """Held-out quality of one topic matrix against the generating parameters."""

    lp: float = Field(..., description="Average held-out log-perplexity")
    lp_star: float = Field(..., description="Same average under the generating parameters")
    rel_error: float
    lp_abs_gap: float
    beta_distance: float = Field(..., ge=0.0)


class SpectralResponse(BaseModel):
    topology: str
    n: int
    n_edges: int
    lambda2: float
    gap: float


class ExperimentSummary(BaseModel):
    """Outcome of one experiment run."""

    run_name: str
    mode: str
    graph: str
    seed: int
    iterations: int
    csv_path: str
    checkpoint_path: str
    report: EvalReport
    final_row: Dict[str, float | int | str]
