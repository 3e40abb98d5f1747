"""Shared test helpers."""

import numpy as np


def unit_square(m=64):
    '''Square sampled mid-edge (no corner samples, corners stay C0 kinks).'''
    t = np.linspace(0.0, 1.0, m, endpoint=False) + 0.5 / m
    bottom = np.column_stack([t, np.zeros(m)])
    right = np.column_stack([np.ones(m), t])
    top = np.column_stack([1.0 - t, np.ones(m)])
    left = np.column_stack([np.zeros(m), 1.0 - t])
    return np.vstack([bottom, right, top, left])
