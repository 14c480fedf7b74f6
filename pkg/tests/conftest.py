"""Shared builders for structured random problems used across test modules."""

import numpy as np
import pytest

from jtr.layout import JointLayout
from jtr.info_array import SquareRootInfo, XAssembly, YAssembly


def upper_tri(rng, n, diag_floor=0.4):
    """Random upper-triangular block with a comfortably positive diagonal."""
    m = np.triu(rng.normal(size=(n, n)))
    d = np.abs(np.diag(m)) + diag_floor
    np.fill_diagonal(m, d)
    return m


def structured_info(rng, n_tracks, k, nx=4, na=3) -> SquareRootInfo:
    """Random belief with block-diagonal track blocks and coupled registration."""
    lay = JointLayout(tuple(range(n_tracks)), k, nx=nx, na=na)
    r = np.zeros((lay.dim, lay.dim))
    for b in range(n_tracks):
        blk = lay.track_block(b)
        r[blk, blk] = upper_tri(rng, nx)
        if lay.reg_dim:
            r[blk, lay.reg_slice()] = 0.3 * rng.normal(size=(nx, lay.reg_dim))
    if lay.reg_dim:
        r[lay.reg_slice(), lay.reg_slice()] = upper_tri(rng, lay.reg_dim)
    z = rng.normal(size=lay.dim)
    return SquareRootInfo(r, z, lay)


def random_x_assembly(rng, prior, rows_per_track=3) -> XAssembly:
    """Whitened-looking random measurement rows, each owned by one track."""
    lay = prior.layout
    rows = []
    blocks = []
    for b in range(lay.n_tracks):
        for _ in range(rows_per_track):
            if rng.random() < 0.2:
                continue
            rows.append(b)
    m = len(rows)
    cx = np.zeros((m, lay.track_dim))
    ca = rng.normal(size=(m, lay.reg_dim)) if lay.reg_dim else np.zeros((m, 0))
    rhs = rng.normal(size=m)
    for i, b in enumerate(rows):
        blk = lay.track_block(b)
        cx[i, blk] = rng.normal(size=lay.nx)
    return XAssembly(prior.copy(), cx, ca, rhs)


def random_y_assembly(rng, posterior) -> YAssembly:
    """Random propagation stack sharing the posterior's registration rows."""
    lay = posterior.layout
    nx = lay.nx
    reg = lay.reg_slice()
    rw, rx_gd, rx_d, zw = [], [], [], []
    for b in range(lay.n_tracks):
        rw.append(upper_tri(rng, nx))
        rx_gd.append(rng.normal(size=(nx, nx)))
        rx_d.append(rng.normal(size=(nx, nx)) + 2.0 * np.eye(nx))
        zw.append(rng.normal(size=nx) * 0.1)
    return YAssembly(
        layout=lay,
        rw=rw, rx_gd=rx_gd, rx_d=rx_d, zw=zw,
        rxa=posterior.r[:lay.track_dim, reg].copy(),
        ra=posterior.r[reg, reg].copy(),
        zx=posterior.z[:lay.track_dim].copy(),
        za=posterior.z[reg].copy(),
    )


def normalize_row_signs(mat):
    """Flip rows so diagonal entries are nonnegative (orthogonal, sign gauge)."""
    mat = np.asarray(mat, dtype=float).copy()
    k = min(mat.shape)
    for i in range(k):
        if mat[i, i] < 0:
            mat[i] = -mat[i]
    return mat


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
