import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq

from distill_lab.prior import NoiseSchedule


def t_for_alpha_bar(target, schedule=NoiseSchedule()):
    """Invert the schedule by integrating beta numerically and root finding."""
    def log_ab(t):
        return -quad(lambda s: schedule.beta_min + s * (schedule.beta_max - schedule.beta_min), 0, t)[0]
    return brentq(lambda t: log_ab(t) - np.log(target), 0.0, 1.0, xtol=1e-15)


def numeric_grad(grid, loss, h=1e-6):
    out = []
    for arr in (grid.raw_density, grid.raw_color):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss(grid)
            flat[i] = old - h
            lm = loss(grid)
            flat[i] = old
            out.append((lp - lm) / (2 * h))
    return np.array(out)
