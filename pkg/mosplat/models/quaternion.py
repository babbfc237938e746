"""
Quaternion helpers. Quaternions are stored (w, x, y, z).
"""
import torch
import torch.nn.functional as F


def normalize(q: torch.Tensor) -> torch.Tensor:
    return F.normalize(q, dim=-1)


def identity(n: int, dtype=torch.float64) -> torch.Tensor:
    q = torch.zeros(n, 4, dtype=dtype)
    q[:, 0] = 1.0
    return q


def multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a ⊗ b (broadcasting over leading dims)."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def conjugate(q: torch.Tensor) -> torch.Tensor:
    return q * torch.tensor([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices (..., 3, 3) of (renormalized) quaternions."""
    q = normalize(q)
    w, x, y, z = q.unbind(-1)
    rows = torch.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], dim=-1)
    return rows.reshape(q.shape[:-1] + (3, 3))


def from_matrix(R: torch.Tensor) -> torch.Tensor:
    """Quaternion (w >= 0) of a single 3x3 rotation matrix."""
    m = R.detach()
    trace = float(m[0, 0] + m[1, 1] + m[2, 2])
    if trace > 0:
        s = (trace + 1.0) ** 0.5 * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = (1.0 + m[0, 0] - m[1, 1] - m[2, 2]) ** 0.5 * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = (1.0 + m[1, 1] - m[0, 0] - m[2, 2]) ** 0.5 * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = (1.0 + m[2, 2] - m[0, 0] - m[1, 1]) ** 0.5 * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    quat = normalize(torch.tensor([float(v) for v in q], dtype=R.dtype))
    return quat if quat[0] >= 0 else -quat


def from_axis_angle(axis, angle: float, dtype=torch.float64) -> torch.Tensor:
    axis = torch.as_tensor(axis, dtype=dtype)
    axis = axis / torch.linalg.norm(axis)
    half = torch.as_tensor(angle / 2.0, dtype=dtype)
    return torch.cat([torch.cos(half).reshape(1), torch.sin(half) * axis])


def geodesic_distance(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """
    Rotation angle between quaternions a and b (sign-invariant).

    Uses atan2 on the relative quaternion so the gradient stays finite at
    zero distance.
    """
    rel = multiply(conjugate(a), b)
    vec = torch.sqrt((rel[..., 1:] ** 2).sum(-1) + eps * eps)
    return 2.0 * torch.atan2(vec, rel[..., 0].abs())
