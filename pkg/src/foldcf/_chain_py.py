"""Pure-Python chain-growth kernel (reference and fallback for _chain_ext).

The chain starts at the origin heading along +x. Residue i >= 1 turns the
running frame by twist phi_i about its z axis, then bend theta_i about the
new y axis, and steps one unit along the frame's x axis:

    F_i = F_{i-1} Rz(phi_i) Ry(theta_i),   x_i = x_{i-1} + F_i e_x

The angles of residue 0 are unused.
"""
import numpy as np


def chain_forward(angles):
    """angles: 2 x l (bend, twist). Returns (coords 3 x l, frames l x 3 x 3)."""
    angles = np.asarray(angles, dtype=np.float64)
    n = angles.shape[1]
    frames = np.empty((n, 3, 3))
    coords = np.zeros((3, n))
    F = np.eye(3)
    frames[0] = F
    for i in range(1, n):
        ct, st = np.cos(angles[0, i]), np.sin(angles[0, i])
        cp, sp = np.cos(angles[1, i]), np.sin(angles[1, i])
        rz = np.array([[cp, -sp, 0.0], [sp, cp, 0.0], [0.0, 0.0, 1.0]])
        ry = np.array([[ct, 0.0, st], [0.0, 1.0, 0.0], [-st, 0.0, ct]])
        F = F @ rz @ ry
        frames[i] = F
        coords[:, i] = coords[:, i - 1] + F[:, 0]
    return coords, frames


def chain_backward(frames, grad_coords):
    """Cotangent of the angles given the cotangent of the coordinates.

    Bond j feeds every coordinate from j on, so its cotangent is the suffix
    sum c_j of grad_coords. Turning residue k rotates bonds j >= k about a
    world axis a, giving d/dk = a . sum_{j>=k} (b_j x c_j); the bend axis is
    F_k e_y and the twist axis is F_{k-1} e_z.
    """
    g = np.asarray(grad_coords, dtype=np.float64)
    n = g.shape[1]
    out = np.zeros((2, n))
    c = np.zeros(3)
    torque = np.zeros(3)
    for k in range(n - 1, 0, -1):
        c = c + g[:, k]
        b = frames[k][:, 0]
        torque = torque + np.cross(b, c)
        out[0, k] = frames[k][:, 1] @ torque
        out[1, k] = frames[k - 1][:, 2] @ torque
    return out
