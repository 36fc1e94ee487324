"""Run configuration shared by the CLI and the task pipelines."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

from .activations import ActivationSpec, Kind, Task, default_spec, init_activation

TaskName = Literal["fit", "sr", "denoise", "occupancy", "analyze-ntk", "analyze-stft", "analyze-basis"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class ActivationConfig(_Strict):
    kind: Kind = Kind.RC_GAUSS
    # None means "task default": T=1, sigma=2, zeta=1 (fitting) or 0 (restoration)
    T: float | None = None
    sigma: float | None = None
    zeta: float | None = None
    beta: float = 0.05
    omega0: float | None = None

    def spec(self, task: Task = Task.FITTING) -> ActivationSpec:
        if self.kind in (Kind.RC_GAUSS, Kind.RAISED_COSINE, Kind.SINC):
            base = init_activation(task, kind=self.kind)
        else:
            base = default_spec(self.kind)
        overrides = {k: v for k, v in dict(T=self.T, sigma=self.sigma, zeta=self.zeta,
                                           beta=self.beta, omega0=self.omega0).items() if v is not None}
        return ActivationSpec(**{**base.__dict__, **overrides})


class WegeConfig(_Strict):
    enabled: bool = False
    filter: Literal["guided", "bilateral", "none"] = "guided"
    r: int = 4
    reg: float = 1e-3
    norm_eps: float = 1e-8
    spatial_sigma: float = 2.0
    range_sigma: float = 0.1
    energy: Literal["literal", "abs"] = "literal"
    dump: bool = False


class NoiseConfig(_Strict):
    poisson_level: float = 30.0
    gaussian_sigma: float = 2.0
    seed: int | None = None


class NtkConfig(_Strict):
    n_inputs: int = 128
    n_neurons: int = 1024
    n_seeds: int = 32


class StftConfig(_Strict):
    row: int | None = None
    window: int = 256
    hop: int = 64


class BasisConfig(_Strict):
    domain_halfwidth: float = 64.0
    samples: int = 16384


class RunConfig(_Strict):
    schema_version: int = Field(1, alias="schema")
    task: TaskName = "fit"
    activation: ActivationConfig = Field(default_factory=ActivationConfig)
    # extra activations for the analyze-* commands (one output per entry)
    compare: list[Kind] = Field(default_factory=list)
    iterations: int = 2000
    lr: float = 5e-4
    seed: int = 0
    hidden_layers: int = 4
    hidden_width: int = 256
    pe_bands: int = 5
    dtype: Literal["float64", "float32"] = "float64"
    # None: full batch for images, 16384 sampled voxels per step for occupancy
    batch_size: int | None = None
    checkpoints: list[int] = Field(default_factory=list)
    loss: Literal["mse", "bce"] = "mse"
    wege: WegeConfig = Field(default_factory=WegeConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    ntk: NtkConfig = Field(default_factory=NtkConfig)
    stft: StftConfig = Field(default_factory=StftConfig)
    basis: BasisConfig = Field(default_factory=BasisConfig)
    scale: float = 4.0
    image: str | None = None
    grid: str | None = None
    model: str | None = None
    out_dir: str = "runs/default"

    def echo(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        return cls.model_validate(json.loads(path.read_text()))
