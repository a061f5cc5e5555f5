"""Experiment configuration: a nested YAML schema with validation.

Units are SI except angles, which are given in degrees (``*_deg`` keys and
the gyroscope bias σ in deg/s).  ``default_config_text`` emits the complete
default document, which doubles as the published schema.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import yaml

from .camera import CameraExtrinsics, CameraIntrinsics, CameraParams, CameraTemporal, ExtrinsicKind
from .estimator import FilterConfig, Priors, WindowConfig, validate_compatibility
from .imu import GRAVITY, ImuModel, ImuNoise, ImuParams
from .manifold import Rotation
from .sim import R_CB_NOMINAL, TrajectorySpec


class ConfigError(ValueError):
    pass


@dataclass
class TrajectorySection:
    kind: str = "torus"
    duration: float = 60.0
    speed: float | None = None
    radius: float = 4.0
    amplitude: float = 1.0
    windings: int | None = None
    tilt_deg: float | None = None      # 10 for wave, 40 for torus
    standstill_start: float | None = None
    standstill_duration: float = 0.0


@dataclass
class SceneSection:
    density: int = 150                 # landmarks per wall
    half_extent: float = 7.0
    wall_height: float = 5.0
    frame_rate: float = 10.0
    pixel_sigma: float = 1.0
    detection: list | None = field(default_factory=lambda: [0.85, 0.1])   # [p_keep, p_new]


@dataclass
class ImuNoiseSection:
    sigma_g: float = 1.2e-3
    sigma_a: float = 8e-3
    sigma_bg: float = 2e-5
    sigma_ba: float = 5.5e-5
    rate: float = 100.0
    enabled: bool = True


@dataclass
class ImuTrueSection:
    b_g_deg: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    b_a: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    T_g: list = field(default_factory=lambda: np.eye(3).tolist())
    T_s: list = field(default_factory=lambda: np.zeros((3, 3)).tolist())
    T_a: list = field(default_factory=lambda: np.eye(3).tolist())


@dataclass
class ImuSection:
    model: str = "generic"
    noise: ImuNoiseSection = field(default_factory=ImuNoiseSection)
    true: ImuTrueSection = field(default_factory=ImuTrueSection)


@dataclass
class ExtrinsicsSection:
    kind: str = "main_camera_centric"
    rotation: list = field(default_factory=lambda: R_CB_NOMINAL.tolist())
    translation: list = field(default_factory=lambda: [0.0, 0.0, 0.0])


@dataclass
class CameraSection:
    intrinsics: dict = field(default_factory=lambda: {
        "fx": 350.0, "fy": 360.0, "cx": 378.0, "cy": 238.0,
        "k1": 0.0, "k2": 0.0, "p1": 0.0, "p2": 0.0, "width": 752, "height": 480})
    extrinsics: ExtrinsicsSection = field(default_factory=ExtrinsicsSection)
    t_d: float = 0.5
    t_r: float = 0.02


@dataclass
class InitSection:
    """σ of the initial estimate; parameters are drawn from ``N(true, σ²)``."""

    position: float = 1e-4
    orientation_deg: list = field(default_factory=lambda: [0.01, 0.01, 0.01])
    velocity: float = 0.05
    b_g_deg: float = 0.29
    b_a: float = 0.02
    T_g: float = 0.005
    T_s: float = 0.001
    T_a: float = 0.005
    ext_translation: float = 0.02
    ext_rotation_deg: float = 0.0
    focal: float = 5.0
    principal: float = 5.0
    distortion: list = field(default_factory=lambda: [0.05, 0.01, 0.001, 0.001])
    t_d: float = 0.005
    t_r: float = 0.005


@dataclass
class FilterSection:
    n_kf: int = 7
    n_tf: int = 5
    X: int = 3
    fej: bool = True
    lock: list = field(default_factory=list)
    pixel_sigma: float = 1.0
    gate: bool = True
    keyframe_overlap: float = 0.6
    keyframe_ratio: float = 0.2
    gravity: float = GRAVITY


@dataclass
class ExperimentConfig:
    trajectory: TrajectorySection = field(default_factory=TrajectorySection)
    scene: SceneSection = field(default_factory=SceneSection)
    imu: ImuSection = field(default_factory=ImuSection)
    cameras: list = field(default_factory=lambda: [CameraSection()])
    init: InitSection = field(default_factory=InitSection)
    filter: FilterSection = field(default_factory=FilterSection)
    runs: int = 10
    seed: int = 0
    out: str = "out"

    # -- builders -----------------------------------------------------------
    def trajectory_spec(self) -> TrajectorySpec:
        t = self.trajectory
        return TrajectorySpec(t.kind, duration=t.duration, speed=t.speed, radius=t.radius,
                              amplitude=t.amplitude, windings=t.windings, tilt_deg=t.tilt_deg,
                              standstill_start=t.standstill_start,
                              standstill_duration=t.standstill_duration)

    def imu_noise(self) -> ImuNoise | None:
        n = self.imu.noise
        if not n.enabled:
            return None
        return ImuNoise(n.sigma_g, n.sigma_a, n.sigma_bg, n.sigma_ba, n.rate)

    def filter_noise(self) -> ImuNoise:
        n = self.imu.noise
        return ImuNoise(n.sigma_g, n.sigma_a, n.sigma_bg, n.sigma_ba, n.rate)

    def true_imu(self) -> ImuParams:
        t = self.imu.true
        return ImuParams(np.deg2rad(np.asarray(t.b_g_deg, float)), np.asarray(t.b_a, float),
                         np.asarray(t.T_g, float), np.asarray(t.T_s, float),
                         np.asarray(t.T_a, float), model=self.imu.model)

    def true_cameras(self) -> list[CameraParams]:
        out = []
        for c in self.cameras:
            ext = CameraExtrinsics(c.extrinsics.kind,
                                   Rotation.from_matrix(np.asarray(c.extrinsics.rotation, float)),
                                   np.asarray(c.extrinsics.translation, float))
            out.append(CameraParams(CameraIntrinsics(**c.intrinsics), ext,
                                    CameraTemporal(c.t_d, c.t_r)))
        return out

    def priors(self) -> Priors:
        i = self.init
        return Priors(position=i.position, orientation=tuple(np.deg2rad(i.orientation_deg)),
                      velocity=i.velocity, b_g=float(np.deg2rad(i.b_g_deg)), b_a=i.b_a,
                      T_g=i.T_g, T_s=i.T_s, T_a=i.T_a, ext_translation=i.ext_translation,
                      ext_rotation=float(np.deg2rad(i.ext_rotation_deg)), focal=i.focal,
                      principal=i.principal, distortion=tuple(i.distortion), t_d=i.t_d, t_r=i.t_r)

    def filter_config(self) -> FilterConfig:
        f = self.filter
        return FilterConfig(window=WindowConfig(f.n_kf, f.n_tf, f.X), noise=self.filter_noise(),
                            use_fej=f.fej, pixel_sigma=f.pixel_sigma, gate=f.gate,
                            gravity=f.gravity, keyframe_overlap=f.keyframe_overlap,
                            keyframe_ratio=f.keyframe_ratio, locked=tuple(f.lock))

    def validate(self) -> "ExperimentConfig":
        if self.runs < 1:
            raise ConfigError("runs must be at least 1")
        if not self.cameras:
            raise ConfigError("at least one camera is required")
        try:
            self.trajectory_spec()
            self.imu_noise()
            self.filter_config()
            imu = self.true_imu()
            imu.check()
            validate_compatibility(imu, self.true_cameras())
            self.priors()
            ImuModel(self.imu.model)
            for c in self.cameras:
                ExtrinsicKind(c.extrinsics.kind)
        except ConfigError:
            raise
        except (ValueError, TypeError, np.linalg.LinAlgError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.scene.detection is not None and len(self.scene.detection) != 2:
            raise ConfigError("scene.detection must be [p_keep, p_new] or null")
        if len(self.init.distortion) != 4 or len(self.init.orientation_deg) != 3:
            raise ConfigError("init.distortion needs 4 values and init.orientation_deg 3")
        return self


# --------------------------------------------------------------------------
# (de)serialization

def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        elif name == "cameras" and cls is ExperimentConfig:
            if not isinstance(value, list):
                raise ConfigError("cameras must be a list")
            kwargs[name] = [_build(CameraSection, v, f"cameras[{k}]") for k, v in enumerate(value)]
        elif name == "intrinsics" and cls is CameraSection:
            merged = dict(default)
            extra = set(value) - set(default)
            if extra:
                raise ConfigError(f"unknown key(s) in {sub}: {sorted(extra)}")
            merged.update(value)
            kwargs[name] = merged
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict | None) -> ExperimentConfig:
    return _build(ExperimentConfig, data or {}, "").validate()


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(data)


def to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def default_config_text() -> str:
    return yaml.safe_dump(to_dict(ExperimentConfig()), sort_keys=False, default_flow_style=None)
