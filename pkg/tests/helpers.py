"""Small analytic fields shared by the tests."""

import torch


class ConstantField:
    """Homogeneous medium of density ``sigma`` and color ``rgb``."""

    n_levels = 1

    def __init__(self, sigma: float, rgb=(0.2, 0.4, 0.6)):
        self.sigma = sigma
        self.rgb = rgb

    def levels(self, points, t):
        s = torch.full(points.shape[:-1], self.sigma, dtype=points.dtype)
        c = torch.tensor(self.rgb, dtype=points.dtype).expand(points.shape)
        return [(c, s)]

    def density(self, points, t):
        return self.levels(points, t)[0][1]


class SlabField:
    """Density ``sigma`` where x > x0, zero elsewhere."""

    n_levels = 1

    def __init__(self, x0: float, sigma: float, rgb=(0.9, 0.1, 0.3)):
        self.x0, self.sigma, self.rgb = x0, sigma, rgb

    def levels(self, points, t):
        s = torch.where(points[..., 0] > self.x0, self.sigma, 0.0).to(points.dtype)
        c = torch.tensor(self.rgb, dtype=points.dtype).expand(points.shape)
        return [(c, s)]


def ray_through_center(dtype=torch.float64):
    o = torch.tensor([[-3.0, 0.0, 0.0]], dtype=dtype)
    d = torch.tensor([[1.0, 0.0, 0.0]], dtype=dtype)
    return o, d
