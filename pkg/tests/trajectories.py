"""Synthetic trajectory pairs shared by the metric and acceptance tests."""
import numpy as np

from ksf.manifold import Rotation, exp_matrix
from ksf.sim import write_tum


def wavy_path(n=2001, length=40.0, seed=0):
    """Stamps, positions and attitudes of a smooth path with varying heading."""
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 40.0, n)
    s = t / t[-1]
    p = np.column_stack([length * s, 2.0 * np.sin(2 * np.pi * s * rng.uniform(0.5, 1.5)),
                         0.5 * np.sin(6 * np.pi * s)])
    yaw = np.arctan2(np.gradient(p[:, 1]), np.gradient(p[:, 0]))
    R = np.array([exp_matrix(np.array([0.1 * np.sin(3 * x), 0.05, y])) for x, y in zip(s, yaw)])
    return t, p, R


def straight_path(n=2001, length=40.0):
    t = np.linspace(0.0, 40.0, n)
    p = np.column_stack([np.linspace(0.0, length, n), np.zeros(n), np.ones(n)])
    R = np.repeat(np.eye(3)[None], n, axis=0)
    return t, p, R


def rigidly_moved(p, R, yaw_deg=30.0, shift=(1.0, 2.0, 3.0)):
    Rz = exp_matrix(np.array([0.0, 0.0, np.radians(yaw_deg)]))
    return p @ Rz.T + np.asarray(shift), np.einsum("ij,njk->nik", Rz, R)


def lateral_drift(p, fraction=0.005):
    """Estimate drifting sideways by ``fraction`` of the distance travelled."""
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
    return p + np.column_stack([np.zeros(len(p)), fraction * dist, np.zeros(len(p))])


def yaw_drift(p, R, deg_per_m):
    dist = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(p, axis=0), axis=1))])
    Rz = np.array([exp_matrix(np.array([0.0, 0.0, np.radians(deg_per_m * d)])) for d in dist])
    return Rz @ R


def save(path, t, p, R):
    write_tum(path, t, p, [Rotation.from_matrix(r) for r in R])
    return path
