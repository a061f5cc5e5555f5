"""Conversion of TUM-VI style calibration to the estimator's conventions.

The TUM-VI IMU model maps raw readings to the sensor frame ``St`` as
``omega_St = M_g omega_m - b_g_t`` (likewise for the accelerometer).  The
estimator uses the camera-centric body frame with ``R_BC0`` fixed to
:data:`R_SN_C`, so ``T_g`` and ``T_a`` also absorb the IMU-to-body rotation.
"""
from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np
import yaml

from .camera import CameraExtrinsics, ExtrinsicKind
from .imu import ConditioningError, ImuModel, ImuParams
from .manifold import Rotation

# orientation of the camera frame in the nominal IMU frame
R_SN_C = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, -1.0, 0.0]])

KEYS = {"Mg": (3, 3), "Ma": (3, 3), "bg_t": (3,), "ba_t": (3,),
        "R_St_C0": (3, 3), "t_St_C0": (3,), "R_St_C1": (3, 3), "t_St_C1": (3,)}


@dataclass
class TumViCalib:
    M_g: np.ndarray
    M_a: np.ndarray
    b_g_t: np.ndarray
    b_a_t: np.ndarray
    R_St_C0: np.ndarray
    t_St_C0: np.ndarray
    R_St_C1: np.ndarray | None = None
    t_St_C1: np.ndarray | None = None

    def __post_init__(self):
        for name in ("M_g", "M_a"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.shape != (3, 3) or np.linalg.cond(M) >= 1e10:
                raise ConditioningError(f"{name} is singular or badly conditioned")
            setattr(self, name, M)


@dataclass
class KsfCalib:
    imu: ImuParams
    cam0: CameraExtrinsics          # camera-centric main camera
    cam1: CameraExtrinsics | None   # full pose T_BC1


def convert_tumvi(calib: TumViCalib, R_SnC=R_SN_C) -> KsfCalib:
    """Estimator-side IMU parameters and camera extrinsics."""
    Mg_inv = np.linalg.inv(calib.M_g)
    Ma_inv = np.linalg.inv(calib.M_a)
    R0 = np.asarray(calib.R_St_C0, dtype=float)
    t0 = np.asarray(calib.t_St_C0, dtype=float)
    imu = ImuParams(b_g=Mg_inv @ calib.b_g_t, b_a=Ma_inv @ calib.b_a_t,
                    T_g=Mg_inv @ R0 @ R_SnC.T, T_s=np.zeros((3, 3)),
                    T_a=Ma_inv @ R0 @ R_SnC.T, model=ImuModel.GENERIC)
    cam0 = CameraExtrinsics(ExtrinsicKind.MAIN_CAMERA_CENTRIC,
                            Rotation.from_matrix(R_SnC.T), -R0.T @ t0)
    cam1 = None
    if calib.R_St_C1 is not None:
        R_BSt = R_SnC @ R0.T
        cam1 = CameraExtrinsics(ExtrinsicKind.FULL_POSE,
                                Rotation.from_matrix(R_BSt @ np.asarray(calib.R_St_C1, float)),
                                R_BSt @ np.asarray(calib.t_St_C1, float))
    return KsfCalib(imu, cam0, cam1)


def read_calib_file(path) -> TumViCalib:
    """Parse ``key: v1 v2 ...`` lines; matrices are row-major, ``#`` starts a comment."""
    values = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, rest = line.partition(":")
            if not sep:
                key, sep, rest = line.partition("=")
            key = key.strip()
            if not sep or key not in KEYS:
                raise ValueError(f"line {n}: expected one of {sorted(KEYS)} followed by ':'")
            nums = [float(x) for x in re.split(r"[,\s\[\]]+", rest) if x]
            shape = KEYS[key]
            if len(nums) != int(np.prod(shape)):
                raise ValueError(f"line {n}: {key} needs {int(np.prod(shape))} numbers")
            values[key] = np.array(nums).reshape(shape)
    missing = [k for k in ("Mg", "Ma", "bg_t", "ba_t", "R_St_C0", "t_St_C0") if k not in values]
    if missing:
        raise ValueError(f"missing keys: {missing}")
    return TumViCalib(values["Mg"], values["Ma"], values["bg_t"], values["ba_t"],
                      values["R_St_C0"], values["t_St_C0"],
                      values.get("R_St_C1"), values.get("t_St_C1"))


def write_calib_file(path, calib: TumViCalib) -> None:
    fields = [("Mg", calib.M_g), ("Ma", calib.M_a), ("bg_t", calib.b_g_t),
              ("ba_t", calib.b_a_t), ("R_St_C0", calib.R_St_C0), ("t_St_C0", calib.t_St_C0)]
    if calib.R_St_C1 is not None:
        fields += [("R_St_C1", calib.R_St_C1), ("t_St_C1", calib.t_St_C1)]
    with open(path, "w") as fh:
        for k, v in fields:
            fh.write(f"{k}: " + " ".join(f"{x:.17g}" for x in np.ravel(v)) + "\n")


def config_fragment(out: KsfCalib) -> dict:
    """Config-schema fragment (``imu.true`` and ``cameras``) for the converted values."""
    frag = {
        "imu": {"model": "generic", "true": {
            "b_g_deg": np.degrees(out.imu.b_g).tolist(), "b_a": out.imu.b_a.tolist(),
            "T_g": out.imu.T_g.tolist(), "T_s": out.imu.T_s.tolist(),
            "T_a": out.imu.T_a.tolist()}},
        "cameras": [{"extrinsics": {"kind": out.cam0.kind.value,
                                    "rotation": out.cam0.rotation.matrix().tolist(),
                                    "translation": out.cam0.translation.tolist()}}],
    }
    if out.cam1 is not None:
        frag["cameras"].append({"extrinsics": {"kind": out.cam1.kind.value,
                                               "rotation": out.cam1.rotation.matrix().tolist(),
                                               "translation": out.cam1.translation.tolist()}})
    return frag


def dump_fragment(out: KsfCalib) -> str:
    return yaml.safe_dump(config_fragment(out), sort_keys=False)
