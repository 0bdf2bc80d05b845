"""Training configuration: every knob the method leaves open, JSON round-trip
included so runs are reproducible from a config file."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .losses import SubbandWeights

__all__ = ["Stage", "DensifyConfig", "TrainConfig", "default_stage_schedule"]

LOSS_TERMS = ("l1", "ssim", "gdwt", "pdwt")


@dataclass(frozen=True)
class Stage:
    """Schedule entry: from `start` onward, only `terms` contribute; an
    optional subband-weight override retargets the global DWT term."""

    start: int
    terms: tuple[str, ...]
    subband_weights: SubbandWeights | None = None

    def __post_init__(self):
        unknown = set(self.terms) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")
        object.__setattr__(self, "terms", tuple(self.terms))


@dataclass(frozen=True)
class ResolvedStage:
    terms: tuple[str, ...]
    subband_weights: SubbandWeights


@dataclass(frozen=True)
class DensifyConfig:
    interval: int = 100
    grad_threshold: float = 1e-4
    residual_percentile: float = 0.10
    max_gaussians: int = 50_000
    prune_opacity: float = 5e-3
    prune_scale: float = 1.0
    split_threshold: float = 0.05   # world scale below which splats clone
    start_fraction: float = 0.15    # warm-up before the first densify
    stop_fraction: float = 0.5      # freeze the topology for late polishing

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("densify interval must be >= 1")
        if not 0.0 < self.residual_percentile <= 1.0:
            raise ValueError("residual_percentile must be in (0, 1]")


def default_stage_schedule(iterations: int,
                           base: SubbandWeights) -> tuple[Stage, ...]:
    """Coarse-to-fine default: LL-only global supervision, then the full
    subband weights, then the patch term at 30% / 60% of the run."""
    s2 = max(1, int(0.3 * iterations))
    s3 = max(s2 + 1, int(0.6 * iterations))
    return (
        Stage(0, ("l1", "ssim", "gdwt"),
              SubbandWeights(base.w_ll, 0.0, 0.0, 0.0)),
        Stage(s2, ("l1", "ssim", "gdwt")),
        Stage(s3, ("l1", "ssim", "gdwt", "pdwt")),
    )


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 3000
    seed: int = 0

    # learning rates per parameter group; position decays exponentially
    lr_position: float = 1.6e-4
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 0.05
    lr_color: float = 2.5e-3

    # composite loss
    alpha: float = 0.5
    beta: float = 0.3
    ssim_weight: float = 0.2
    subband_weights: SubbandWeights = field(default_factory=SubbandWeights)
    dwt_levels: int = 2
    stage_schedule: tuple[Stage, ...] | None = None

    # patch-wise supervision
    patch_size: int = 16
    percentile: float = 0.2
    patch_refresh_interval: int = 50

    # multispectral branch
    multispectral: bool = False
    lambda_nir: float = 1.0

    densify: DensifyConfig = field(default_factory=DensifyConfig)

    background: float = 0.0
    init_scale: float = 0.1        # fallback splat scale without neighbors
    fallback_points: int = 500     # random init size when no points given

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if min(self.alpha, self.beta, self.lambda_nir) < 0:
            raise ValueError("alpha, beta and lambda_nir must be >= 0")
        if not 0.0 < self.percentile < 1.0:
            raise ValueError("percentile must be in (0, 1)")
        if self.dwt_levels not in (1, 2):
            raise ValueError("dwt_levels must be 1 or 2")
        if self.patch_size < 2 or self.patch_size % 2:
            raise ValueError("patch_size must be even and >= 2")
        schedule = self.stage_schedule
        if schedule is None:
            schedule = default_stage_schedule(self.iterations, self.subband_weights)
        schedule = tuple(schedule)
        starts = [st.start for st in schedule]
        if not schedule or starts[0] != 0:
            raise ValueError("stage schedule must start at iteration 0")
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ValueError("stage starts must be strictly increasing")
        object.__setattr__(self, "stage_schedule", schedule)

    def stage_at(self, iteration: int) -> ResolvedStage:
        current = self.stage_schedule[0]
        for st in self.stage_schedule:
            if st.start <= iteration:
                current = st
            else:
                break
        weights = current.subband_weights or self.subband_weights
        return ResolvedStage(terms=current.terms, subband_weights=weights)

    def position_lr_at(self, iteration: int) -> float:
        if self.iterations <= 1 or self.lr_position == 0:
            return self.lr_position
        frac = iteration / max(1, self.iterations - 1)
        ratio = self.lr_position_final / self.lr_position
        return self.lr_position * ratio**frac

    # ------------------------------------------------------------- JSON I/O

    def to_json_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "seed": self.seed,
            "lr_position": self.lr_position,
            "lr_position_final": self.lr_position_final,
            "lr_scale": self.lr_scale,
            "lr_rotation": self.lr_rotation,
            "lr_opacity": self.lr_opacity,
            "lr_color": self.lr_color,
            "alpha": self.alpha,
            "beta": self.beta,
            "ssim_weight": self.ssim_weight,
            "subband_weights": self.subband_weights.as_dict(),
            "dwt_levels": self.dwt_levels,
            "stage_schedule": [
                {"start": st.start, "terms": list(st.terms),
                 "subband_weights": (st.subband_weights.as_dict()
                                     if st.subband_weights else None)}
                for st in self.stage_schedule
            ],
            "patch_size": self.patch_size,
            "percentile": self.percentile,
            "patch_refresh_interval": self.patch_refresh_interval,
            "multispectral": self.multispectral,
            "lambda_nir": self.lambda_nir,
            "densify": {
                "interval": self.densify.interval,
                "grad_threshold": self.densify.grad_threshold,
                "residual_percentile": self.densify.residual_percentile,
                "max_gaussians": self.densify.max_gaussians,
                "prune_opacity": self.densify.prune_opacity,
                "prune_scale": self.densify.prune_scale,
                "split_threshold": self.densify.split_threshold,
                "start_fraction": self.densify.start_fraction,
                "stop_fraction": self.densify.stop_fraction,
            },
            "background": self.background,
            "init_scale": self.init_scale,
            "fallback_points": self.fallback_points,
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)

        def band_weights(d):
            return SubbandWeights(w_ll=d["ll"], w_lh=d["lh"],
                                  w_hl=d["hl"], w_hh=d["hh"])

        if "subband_weights" in data:
            data["subband_weights"] = band_weights(data["subband_weights"])
        if data.get("stage_schedule") is not None:
            data["stage_schedule"] = tuple(
                Stage(start=st["start"], terms=tuple(st["terms"]),
                      subband_weights=(band_weights(st["subband_weights"])
                                       if st.get("subband_weights") else None))
                for st in data["stage_schedule"])
        if "densify" in data:
            data["densify"] = DensifyConfig(**data["densify"])
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def with_overrides(self, **kwargs) -> "TrainConfig":
        if "iterations" in kwargs and "stage_schedule" not in kwargs \
                and self.stage_schedule == default_stage_schedule(
                    self.iterations, self.subband_weights):
            kwargs.setdefault("stage_schedule", None)
        return replace(self, **kwargs)
