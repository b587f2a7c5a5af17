"""Benchmark run configuration with a plain-text key=value file form.

Precedence when assembling a run: command-line overrides > config file >
defaults. The file form round-trips losslessly (floats written with repr).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


@dataclass
class RunConfig:
    # world / benchmark
    seed: int = 7
    extent: float = 160.0
    buildings: int = 18
    patch_m: float = 32.0
    stride_m: float = 16.0
    gallery_px: int = 256
    scenes: int = 20
    nv: int = 50
    orbit_radius: float = 16.0
    altitude: float = 16.0
    drone_px: int = 128
    max_sparse: int = 0          # <= 0: keep every covisible point
    # refinement loop
    iters: int = 2
    alpha_interp: float = 0.8
    lambda_s: float = 0.5
    lambda_m: float = 100.0
    k: int = 10
    nm: int = 50
    d_max: float = -1.0          # <= 0: auto (0.75 x footprint diagonal)
    theta_max: float = 30.0
    ransac_tol: float = 8.0
    plane_tol: float = 0.15
    res: int = 256
    temperature: float = 0.002  # consistency-product softmax sharpness
    fusion_mode: str = "both"    # both | self | cross
    mode: str = "pipeline"       # pipeline | single | average
    # I/O and execution
    features: str = "desk"       # desk | file:PATH
    out: str = "out"
    workers: int = 1
    keep_going: bool = False
    dump_trajectories: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> "RunConfig":
        if self.extent <= 0 or self.patch_m <= 0 or self.stride_m <= 0:
            raise ValueError("extent, patch_m and stride_m must be positive")
        if not (0.0 <= self.alpha_interp <= 1.0):
            raise ValueError("alpha_interp must be in [0, 1]")
        if not (0.0 <= self.lambda_s <= 1.0):
            raise ValueError("lambda_s must be in [0, 1]")
        if self.lambda_m < 0:
            raise ValueError("lambda_m must be >= 0")
        if self.k < 1 or self.nv < 1 or self.scenes < 1 or self.iters < 0:
            raise ValueError("k, nv, scenes must be >= 1 and iters >= 0")
        if self.fusion_mode not in ("both", "self", "cross"):
            raise ValueError(f"unknown fusion_mode '{self.fusion_mode}'")
        if self.mode not in ("pipeline", "single", "average"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.features != "desk" and not self.features.startswith("file:"):
            raise ValueError("features must be 'desk' or 'file:PATH'")
        return self

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            for fld in dataclasses.fields(self):
                f.write(f"{fld.name} = {getattr(self, fld.name)!r}\n")

    @staticmethod
    def from_file(path) -> "RunConfig":
        types = {f.name: f.type for f in dataclasses.fields(RunConfig)}
        values = {}
        with open(path) as fh:
            for ln, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{ln}: expected 'key = value'")
                key, _, val = line.partition("=")
                key, val = key.strip(), val.strip()
                if key not in types:
                    raise ValueError(f"{path}:{ln}: unknown key '{key}'")
                values[key] = _parse_value(types[key], val)
        return RunConfig(**values).validate()


def _parse_value(typename: str, text: str):
    text = text.strip()
    if text and text[0] in "'\"" and text[-1] == text[0]:
        text = text[1:-1]
    if typename == "bool":
        return text.lower() in ("1", "true", "yes", "on")
    if typename == "int":
        return int(text)
    if typename == "float":
        return float(text)
    return text
