"""Ground-truth generators: elliptic solvers (Schrodinger and divergence
form), slab/2D radiative-transfer integral-equation solvers, parameter
and source samplers, and the exponential integral E1.

Conventions: elliptic problems live on the periodic unit box with
spacing h = 1/n and nodes x_j = j h.  Transfer problems live on a padded
box [-x0, 1+x0] sampled at cell centers with h = 1/interior; the
scattering field and the source vanish on the padding cells.

The slab kernel uses the positive convention 0.5*E1(tau*|x-y|); see the
README for the sign discussion.  Matrix entries whose optical path is
identically zero (both points on the same padding side) are set to zero:
they are always multiplied by a vanishing eta or f, so any finite value
leaves the solution unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConditioningError, ConfigError, DataError, DomainError

EULER_GAMMA = 0.5772156649015328606065

#: unknown-count threshold below which 2D solves take the direct path
DIRECT_SOLVE_LIMIT = 48 * 48


# -- exponential integral --------------------------------------------------------

def expint_e1(z):
    """E1(z) = int_z^inf e^-t / t dt for z > 0, to ~1e-13 relative.

    Power series for z <= 1, modified-Lentz continued fraction above.
    Accepts scalars or arrays.
    """
    arr = np.asarray(z, dtype=float)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr).astype(float)
    if np.any(arr <= 0.0):
        raise DomainError("E1 requires strictly positive argument")
    out = np.empty_like(arr)

    small = arr <= 1.0
    if small.any():
        zs = arr[small]
        acc = -EULER_GAMMA - np.log(zs)
        term = np.ones_like(zs)
        for k in range(1, 60):
            term = term * zs / k
            contrib = term / k if k % 2 else -term / k
            acc = acc + contrib
            if np.max(np.abs(contrib)) < 1e-18:
                break
        out[small] = acc

    big = ~small
    if big.any():
        zb = arr[big]
        b = zb + 1.0
        c = np.full_like(zb, 1e300)
        d = 1.0 / b
        h = d.copy()
        for i in range(1, 400):
            a = -float(i * i)
            b = b + 2.0
            d = 1.0 / (a * d + b)
            c = b + a / c
            delta = c * d
            h = h * delta
            if np.max(np.abs(delta - 1.0)) < 1e-16:
                break
        out[big] = h * np.exp(-zb)

    return float(out[0]) if scalar else out


# -- trigonometric interpolation ---------------------------------------------------

def _interp_axis(values: np.ndarray, n_fine: int, axis: int) -> np.ndarray:
    m = values.shape[axis]
    if n_fine % m:
        raise ConfigError(f"fine size {n_fine} not a multiple of coarse {m}")
    if n_fine == m:
        return np.asarray(values, dtype=float)
    spec = np.fft.fft(values, axis=axis)
    shape = list(values.shape)
    shape[axis] = n_fine
    pad = np.zeros(shape, dtype=complex)
    half = m // 2
    lo = [slice(None)] * values.ndim
    lo[axis] = slice(0, half)
    pad[tuple(lo)] = np.take(spec, range(half), axis=axis)
    if m % 2 == 0:
        nyq = np.take(spec, [half], axis=axis)  # split symmetrically
        hi = [slice(None)] * values.ndim
        hi[axis] = slice(half, half + 1)
        pad[tuple(hi)] = 0.5 * nyq
        hi[axis] = slice(n_fine - half, n_fine - half + 1)
        pad[tuple(hi)] = 0.5 * nyq
        tail = m - half - 1
    else:
        tail = m - half
    if tail:
        src = [slice(None)] * values.ndim
        src[axis] = slice(m - tail, m)
        dst = [slice(None)] * values.ndim
        dst[axis] = slice(n_fine - tail, n_fine)
        pad[tuple(dst)] = spec[tuple(src)]
    fine = np.fft.ifft(pad, axis=axis).real
    return fine * (n_fine / m)


def fourier_interpolate(values: np.ndarray, n_fine: int) -> np.ndarray:
    """Trigonometric interpolation of periodic samples to a finer grid
    (exact on resolved Fourier modes); 1D and 2D."""
    out = _interp_axis(values, n_fine, 0)
    if out.ndim == 2:
        out = _interp_axis(out, n_fine, 1)
    return out


# -- problem description ---------------------------------------------------------

@dataclass(frozen=True)
class ProblemSpec:
    """Everything needed to sample (eta, f) pairs and solve for u."""

    kind: str                   # schrodinger | divergence | rte
    dim: int = 1
    n: int = 64
    eta_coarse: int = 8
    eta_scale: float = 10.0
    eta_shift: float = 0.0
    eta_max: float | None = None     # rte: rescale eta to this maximum
    interior: int | None = None      # rte: points inside the unit box
    f_coarse: int | None = None      # rte 1d: coarse uniform source
    path_samples: int = 16           # rte path quadrature intervals
    resample_limit: int = 20         # rte spectral-radius retries

    def validate(self) -> "ProblemSpec":
        if self.kind not in ("schrodinger", "divergence", "rte"):
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        if self.dim not in (1, 2):
            raise ConfigError("dim must be 1 or 2")
        if self.eta_coarse > self.n:
            raise ConfigError("coarse grid exceeds fine grid")
        if self.kind == "rte":
            if self.interior is None or not 0 < self.interior <= self.n:
                raise ConfigError("rte needs 0 < interior <= n")
            if (self.n - self.interior) % 2:
                raise ConfigError("rte padding must be symmetric")
        return self

    # grid geometry ----------------------------------------------------------

    @property
    def h(self) -> float:
        if self.kind == "rte":
            return 1.0 / self.interior
        return 1.0 / self.n

    def coords(self) -> np.ndarray:
        """1D coordinate axis (elliptic nodes or transfer cell centers)."""
        if self.kind == "rte":
            pad = (self.n - self.interior) // 2
            return (np.arange(self.n) - pad + 0.5) * self.h
        return np.arange(self.n) * self.h

    def _pad_mask(self) -> np.ndarray:
        x = self.coords()
        outside = (x < 0.0) | (x > 1.0)
        if self.dim == 1:
            return outside
        return outside[:, None] | outside[None, :]

    # sampling ------------------------------------------------------------------

    def sample_eta(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        shape = (self.eta_coarse,) if self.dim == 1 \
            else (self.eta_coarse, self.eta_coarse)
        z = rng.standard_normal(shape)
        fine = fourier_interpolate(z, self.n)
        eta = self.eta_scale * np.exp(fine) + self.eta_shift
        if self.kind == "rte":
            eta = np.where(self._pad_mask(), 0.0, eta)
            top = eta.max()
            if top > 0 and self.eta_max:
                eta = eta * (self.eta_max / top)
        return eta

    def sample_f(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        shape = (self.n,) if self.dim == 1 else (self.n, self.n)
        if self.kind == "rte":
            if self.dim == 1 and self.f_coarse:
                f = fourier_interpolate(rng.uniform(size=self.f_coarse),
                                        self.n)
                f = np.maximum(f, 0.0)
            else:
                f = rng.uniform(size=shape)
            return np.where(self._pad_mask(), 0.0, f)
        f = rng.standard_normal(shape)
        if self.kind == "divergence":
            f = f - f.mean()
        return f

    # solving ----------------------------------------------------------------------

    def operator(self, eta: np.ndarray):
        if self.kind == "schrodinger":
            return schrodinger_matrix(eta, self.h)
        if self.kind == "divergence":
            return divergence_matrix(eta, self.h)
        raise ConfigError("rte has no sparse operator; use the kernel")

    def kernel(self, eta: np.ndarray, m: int | None = None) -> np.ndarray:
        if self.kind != "rte":
            raise ConfigError("kernel is defined for transfer problems only")
        if self.dim == 1:
            return rte_kernel_1d(eta, self, m or self.path_samples)
        return rte_kernel_2d(eta, self, m or self.path_samples)

    def solve(self, eta: np.ndarray, f: np.ndarray) -> np.ndarray:
        return self.solve_batch(eta, f[None])[0]

    def solve_batch(self, eta: np.ndarray, fs: np.ndarray) -> np.ndarray:
        """Solve for a batch of sources sharing one eta (one factorization)."""
        if self.kind == "schrodinger":
            return _solve_sparse_batch(schrodinger_matrix(eta, self.h), fs)
        if self.kind == "divergence":
            return _solve_divergence_batch(eta, fs, self.h)
        return _rte_solve_batch(self.kernel(eta), eta, fs)

    def residual(self, eta: np.ndarray, f: np.ndarray,
                 u: np.ndarray) -> float:
        """Relative residual of one sample under this problem's operator."""
        if self.kind == "rte":
            kern = self.kernel(eta)
            rhs = kern @ f.reshape(-1)
            lhs = u.reshape(-1) - kern @ (eta.reshape(-1) * u.reshape(-1))
            return float(np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs))
        op = self.operator(eta)
        fv = f.reshape(-1)
        if self.kind == "divergence":
            fv = fv - fv.mean()
        r = op @ u.reshape(-1) - fv
        return float(np.linalg.norm(r) / np.linalg.norm(fv))

    def reference_matrix(self, eta: np.ndarray) -> np.ndarray:
        """Dense solution operator at eta (column solves)."""
        nn = eta.size
        if self.kind == "rte":
            kern = self.kernel(eta)
            a = np.eye(nn) - kern * eta.reshape(-1)[None, :]
            return sla.solve(a, kern)
        if self.kind == "schrodinger":
            return _solve_sparse_batch(
                schrodinger_matrix(eta, self.h),
                np.eye(nn)).T
        # divergence: pseudo-inverse through the zero-mean projection
        basis = np.eye(nn) - 1.0 / nn
        return _solve_divergence_batch(eta, basis, self.h).T


# -- elliptic operators ---------------------------------------------------------------

def _periodic_laplacian(n: int) -> sp.spmatrix:
    main = -2.0 * np.ones(n)
    off = np.ones(n - 1)
    lap = sp.diags([off, main, off], [-1, 0, 1], format="lil")
    lap[0, n - 1] += 1.0
    lap[n - 1, 0] += 1.0
    return lap.tocsr()


def schrodinger_matrix(eta: np.ndarray, h: float) -> sp.spmatrix:
    """(-Laplace_h + diag(eta)) with the periodic 3-point/5-point stencil."""
    if np.any(eta <= 0):
        raise DomainError("schrodinger form needs eta > 0")
    if eta.ndim == 1:
        lap = _periodic_laplacian(eta.shape[0])
        return (-lap / h ** 2 + sp.diags(eta)).tocsr()
    n = eta.shape[0]
    lap1 = _periodic_laplacian(n)
    eye = sp.identity(n, format="csr")
    lap2 = sp.kron(lap1, eye) + sp.kron(eye, lap1)
    return (-lap2 / h ** 2 + sp.diags(eta.reshape(-1))).tocsr()


def divergence_matrix(eta: np.ndarray, h: float) -> sp.spmatrix:
    """Conservative -div(eta grad .) with arithmetic-mean face coefficients."""
    if np.any(eta <= 0):
        raise DomainError("divergence form needs eta > 0")
    if eta.ndim == 1:
        n = eta.shape[0]
        e_half = 0.5 * (eta + np.roll(eta, -1))     # eta_{j+1/2}
        e_prev = np.roll(e_half, 1)                  # eta_{j-1/2}
        j = np.arange(n)
        rows = np.concatenate([j, j, j])
        cols = np.concatenate([j, (j + 1) % n, (j - 1) % n])
        vals = np.concatenate([(e_half + e_prev), -e_half, -e_prev]) / h ** 2
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    n = eta.shape[0]
    nn = n * n
    ex = 0.5 * (eta + np.roll(eta, -1, axis=0))    # face (i+1/2, j)
    ey = 0.5 * (eta + np.roll(eta, -1, axis=1))    # face (i, j+1/2)
    ex_p = np.roll(ex, 1, axis=0)
    ey_p = np.roll(ey, 1, axis=1)
    idx = np.arange(nn).reshape(n, n)
    rows = np.concatenate([idx.reshape(-1)] * 5)
    cols = np.concatenate([idx.reshape(-1),
                           np.roll(idx, -1, axis=0).reshape(-1),
                           np.roll(idx, 1, axis=0).reshape(-1),
                           np.roll(idx, -1, axis=1).reshape(-1),
                           np.roll(idx, 1, axis=1).reshape(-1)])
    vals = np.concatenate([(ex + ex_p + ey + ey_p).reshape(-1),
                           -ex.reshape(-1), -ex_p.reshape(-1),
                           -ey.reshape(-1), -ey_p.reshape(-1)]) / h ** 2
    return sp.csr_matrix((vals, (rows, cols)), shape=(nn, nn))


def _solve_sparse_batch(op: sp.spmatrix, fs: np.ndarray) -> np.ndarray:
    nn = op.shape[0]
    flat = np.asarray(fs, dtype=float).reshape(fs.shape[0], nn)
    if nn <= DIRECT_SOLVE_LIMIT:
        out = spla.splu(op.tocsc()).solve(flat.T).T
    else:
        out = np.empty_like(flat)
        ilu = spla.spilu(op.tocsc(), drop_tol=1e-5)
        prec = spla.LinearOperator(op.shape, ilu.solve)
        for i, b in enumerate(flat):
            x, info = spla.cg(op, b, rtol=1e-11, atol=0.0, M=prec,
                              maxiter=20_000)
            if info != 0:
                raise ConditioningError(f"cg failed to converge (info={info})")
            out[i] = x
    return out.reshape(fs.shape)


def solve_schrodinger(eta: np.ndarray, f: np.ndarray,
                      h: float | None = None) -> np.ndarray:
    h = h if h is not None else 1.0 / eta.shape[0]
    return _solve_sparse_batch(schrodinger_matrix(eta, h), f[None])[0]


def _solve_divergence_batch(eta: np.ndarray, fs: np.ndarray,
                            h: float) -> np.ndarray:
    op = divergence_matrix(eta, h)
    nn = op.shape[0]
    flat = np.asarray(fs, dtype=float).reshape(fs.shape[0], nn)
    means = np.abs(flat.mean(axis=1))
    scale = np.linalg.norm(flat, axis=1) / np.sqrt(nn)
    if np.any(means > 1e-8 * np.maximum(scale, 1e-300)):
        raise DataError("divergence-form source must have zero mean")
    flat = flat - flat.mean(axis=1, keepdims=True)
    one = np.ones((nn, 1))
    kkt = sp.bmat([[op, one], [one.T, None]], format="csc")
    lu = spla.splu(kkt)
    rhs = np.concatenate([flat, np.zeros((fs.shape[0], 1))], axis=1)
    sol = lu.solve(rhs.T).T
    return sol[:, :nn].reshape(fs.shape)


def solve_divergence(eta: np.ndarray, f: np.ndarray, h: float | None = None,
                     project: bool = False) -> np.ndarray:
    """Zero-mean solve of the conservative form; `project` opts in to
    removing a nonzero source mean instead of rejecting it."""
    h = h if h is not None else 1.0 / eta.shape[0]
    if project:
        f = f - f.mean()
    return _solve_divergence_batch(eta, f[None], h)[0]


# -- radiative transfer: 1D slab ------------------------------------------------------

def _trap_weights(m: int) -> np.ndarray:
    w = np.full(m + 1, 1.0 / m)
    w[0] = w[-1] = 0.5 / m
    return w


def _interp_eta_1d(eta: np.ndarray, y: np.ndarray, h: float,
                   x_first: float) -> np.ndarray:
    n = eta.shape[0]
    c = (y - x_first) / h
    i0 = np.clip(np.floor(c).astype(int), 0, n - 2)
    frac = np.clip(c - i0, 0.0, 1.0)
    return eta[i0] * (1.0 - frac) + eta[i0 + 1] * frac


def _path_average_1d(eta, x, h, m):
    """tau_bar[i, j]: trapezoid average of interpolated eta on [x_j, x_i]."""
    s = np.linspace(0.0, 1.0, m + 1)
    y = x[:, None, None] - s[None, None, :] * (x[:, None, None]
                                               - x[None, :, None])
    return _interp_eta_1d(eta, y, h, x[0]) @ _trap_weights(m)


def _cell_tau_1d(eta, xi, y, h, x_first, m):
    s = np.linspace(0.0, 1.0, m + 1)
    pts = xi[:, None, None] - s * (xi[:, None, None] - y[..., None])
    return _interp_eta_1d(eta, pts, h, x_first) @ _trap_weights(m)


def _clean_tau(tau: np.ndarray, eta_max: float) -> np.ndarray:
    """Snap float-dust path averages to an exact zero.

    Paths confined to one padding side integrate an identically zero
    field; rounding in the sample positions can leak ~1e-16 of the first
    interior value, which E1 would blow up into a large finite number.
    Genuine interior paths are many orders of magnitude above the cut.
    """
    tau[tau < 1e-12 * eta_max] = 0.0
    return tau


def _half_e1(t: np.ndarray) -> np.ndarray:
    """0.5*E1 elementwise; zero where the optical argument vanishes."""
    out = np.zeros_like(t)
    pos = t > 0.0
    if pos.any():
        out[pos] = 0.5 * expint_e1(t[pos])
    return out


def rte_kernel_1d(eta: np.ndarray, spec: ProblemSpec,
                  m: int | None = None) -> np.ndarray:
    """Nystrom matrix of the slab kernel 0.5*E1(|x-y| * path-average eta).

    Off-diagonal entries use the midpoint rule (weight h); entries with
    |i-j| <= 1 integrate the log-singular kernel over the source cell
    with Gauss-Legendre refinement (sqrt substitution at the center).
    """
    if np.any(eta < 0):
        raise DomainError("scattering coefficient must be nonnegative")
    if eta.max() == 0.0:
        raise DomainError("eta identically zero: slab kernel is singular")
    m = m or spec.path_samples
    n = eta.shape[0]
    h = spec.h
    x = spec.coords()
    top = float(eta.max())
    tau = _clean_tau(_path_average_1d(eta, x, h, m), top)
    dist = np.abs(x[:, None] - x[None, :])
    kern = h * _half_e1(dist * tau)

    g64, w64 = np.polynomial.legendre.leggauss(64)
    g64 = 0.5 * (g64 + 1.0)
    w64 = 0.5 * w64
    idx = np.arange(n)
    for dlt in (-1, 1):  # adjacent cell: smooth integrand, plain GL
        j = idx + dlt
        keep = (j >= 0) & (j < n)
        i_k, j_k = idx[keep], j[keep]
        y = x[j_k][:, None] + (g64[None, :] - 0.5) * h
        t = _clean_tau(_cell_tau_1d(eta, x[i_k], y, h, x[0], m), top)
        vals = _half_e1(np.abs(x[i_k][:, None] - y) * t)
        kern[i_k, j_k] = h * (vals @ w64)
    # self cell: split at the log singularity, sqrt substitution per half
    # (two 32-node panels)
    nodes, wts = np.polynomial.legendre.leggauss(32)
    nodes = 0.5 * (nodes + 1.0)
    wts = 0.5 * wts
    y_half = nodes ** 2 * (0.5 * h)
    w_half = wts * (2.0 * nodes) * (0.5 * h)
    diag = np.zeros(n)
    for sign in (-1.0, 1.0):
        y = x[:, None] + sign * y_half[None, :]
        t = _clean_tau(_cell_tau_1d(eta, x, y, h, x[0], m), top)
        diag += _half_e1(y_half[None, :] * t) @ w_half
    kern[idx, idx] = diag
    return kern


def spectral_radius(mat: np.ndarray) -> float:
    """Dominant-eigenvalue magnitude; dense solve below the direct-solve
    limit, power iteration above (the scattering matrix is positive, so
    the Perron root dominates and the iteration is reliable)."""
    n = mat.shape[0]
    if n <= DIRECT_SOLVE_LIMIT:
        return float(np.max(np.abs(np.linalg.eigvals(mat))))
    rng = np.random.default_rng(0)
    v = np.abs(rng.standard_normal(n)) + 1e-3
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(500):
        w = mat @ v
        lam_new = float(np.linalg.norm(w))
        if lam_new == 0.0:
            return 0.0
        v = w / lam_new
        if abs(lam_new - lam) <= 1e-10 * lam_new:
            return lam_new
        lam = lam_new
    return lam


def _rte_solve_batch(kern: np.ndarray, eta: np.ndarray,
                     fs: np.ndarray) -> np.ndarray:
    nn = kern.shape[0]
    keta = kern * eta.reshape(-1)[None, :]
    rho = spectral_radius(keta)
    if rho >= 1.0 - 1e-6:
        raise ConditioningError(
            f"transfer system near singular (rho={rho:.8f})")
    flat = np.asarray(fs, dtype=float).reshape(fs.shape[0], nn)
    rhs = kern @ flat.T
    if nn <= DIRECT_SOLVE_LIMIT:
        u = sla.solve(np.eye(nn) - keta, rhs).T
    else:
        op = spla.LinearOperator((nn, nn),
                                 matvec=lambda x: x - keta @ x)
        u = np.empty_like(flat)
        for i in range(rhs.shape[1]):
            x, info = spla.gmres(op, rhs[:, i], rtol=1e-12, atol=0.0,
                                 maxiter=2000)
            if info != 0:
                raise ConditioningError(
                    f"gmres failed to converge (info={info})")
            u[i] = x
    return u.reshape(fs.shape)


def rte_solve_1d(eta: np.ndarray, f: np.ndarray, spec: ProblemSpec,
                 m: int | None = None) -> np.ndarray:
    return _rte_solve_batch(rte_kernel_1d(eta, spec, m), eta, f[None])[0]


# -- radiative transfer: 2D ------------------------------------------------------------

def _interp_eta_2d(eta, y1, y2, h, x_first):
    n = eta.shape[0]
    c1 = (y1 - x_first) / h
    c2 = (y2 - x_first) / h
    i1 = np.clip(np.floor(c1).astype(int), 0, n - 2)
    i2 = np.clip(np.floor(c2).astype(int), 0, n - 2)
    f1 = np.clip(c1 - i1, 0.0, 1.0)
    f2 = np.clip(c2 - i2, 0.0, 1.0)
    return (eta[i1, i2] * (1 - f1) * (1 - f2)
            + eta[i1 + 1, i2] * f1 * (1 - f2)
            + eta[i1, i2 + 1] * (1 - f1) * f2
            + eta[i1 + 1, i2 + 1] * f1 * f2)


def _kernel_2d_value(r: np.ndarray, tau: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    pos = r > 0.0
    out[pos] = np.exp(-r[pos] * tau[pos]) / (4.0 * np.pi * r[pos])
    return out


def rte_kernel_2d(eta: np.ndarray, spec: ProblemSpec, m: int | None = None,
                  near_quad: int = 8) -> np.ndarray:
    """Nystrom matrix of exp(-|x-y| tau_bar)/(4 pi |x-y|) on cell centers.

    tau_bar averages bilinearly interpolated eta along the segment.
    Cell-adjacent entries use tensor Gauss-Legendre over the source cell;
    the self cell uses per-octant polar quadrature (1/r cancels the
    Jacobian).  `near_quad` sets the Gauss order of those refinements.
    """
    if np.any(eta < 0):
        raise DomainError("scattering coefficient must be nonnegative")
    m = m or spec.path_samples
    n = eta.shape[0]
    nn = n * n
    h = spec.h
    ax = spec.coords()
    p1 = np.repeat(ax, n)
    p2 = np.tile(ax, n)
    s = np.linspace(0.0, 1.0, m + 1)
    w_path = _trap_weights(m)

    kern = np.empty((nn, nn))
    chunk = max(1, 4_000_000 // (nn * (m + 1)))
    for lo in range(0, nn, chunk):
        hi = min(lo + chunk, nn)
        y1 = p1[lo:hi, None, None] - s[None, None, :] * (
            p1[lo:hi, None, None] - p1[None, :, None])
        y2 = p2[lo:hi, None, None] - s[None, None, :] * (
            p2[lo:hi, None, None] - p2[None, :, None])
        tau = _interp_eta_2d(eta, y1, y2, h, ax[0]) @ w_path
        r = np.hypot(p1[lo:hi, None] - p1[None, :],
                     p2[lo:hi, None] - p2[None, :])
        kern[lo:hi] = h * h * _kernel_2d_value(r, tau)

    _refine_near_2d(kern, eta, spec, m, near_quad)
    return kern


def _refine_near_2d(kern, eta, spec, m, order):
    n = eta.shape[0]
    h = spec.h
    ax = spec.coords()
    w_path = _trap_weights(m)
    s = np.linspace(0.0, 1.0, m + 1)

    def tau_of(xi1, xi2, y1, y2):
        q1 = xi1[..., None] - s * (xi1[..., None] - y1[..., None])
        q2 = xi2[..., None] - s * (xi2[..., None] - y2[..., None])
        return _interp_eta_2d(eta, q1, q2, h, ax[0]) @ w_path

    g_nodes, g_wts = np.polynomial.legendre.leggauss(order)
    g_nodes = 0.5 * g_nodes  # cell offsets in units of h
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    flat_i = (ii * n + jj).reshape(-1)

    for d1 in (-1, 0, 1):  # cell-adjacent, excluding self
        for d2 in (-1, 0, 1):
            if d1 == 0 and d2 == 0:
                continue
            src1 = ii + d1
            src2 = jj + d2
            keep = ((src1 >= 0) & (src1 < n) & (src2 >= 0)
                    & (src2 < n)).reshape(-1)
            if not keep.any():
                continue
            rows = flat_i[keep]
            cols = (np.clip(src1, 0, n - 1) * n
                    + np.clip(src2, 0, n - 1)).reshape(-1)[keep]
            xi1, xi2 = ax[rows // n], ax[rows % n]
            yc1, yc2 = ax[cols // n], ax[cols % n]
            acc = np.zeros(rows.shape[0])
            for a, wa in zip(g_nodes, g_wts):
                for b, wb in zip(g_nodes, g_wts):
                    y1 = yc1 + a * h
                    y2 = yc2 + b * h
                    r = np.hypot(xi1 - y1, xi2 - y2)
                    acc += (wa * wb * 0.25) * h * h * _kernel_2d_value(
                        r, tau_of(xi1, xi2, y1, y2))
            kern[rows, cols] = acc

    # self cell in polar coordinates; one panel per octant so the ray
    # length R(theta) stays smooth inside each theta panel
    t_nodes, t_wts = np.polynomial.legendre.leggauss(order)
    r_nodes, r_wts = np.polynomial.legendre.leggauss(order)
    xi1, xi2 = ax[flat_i // n], ax[flat_i % n]
    acc = np.zeros(flat_i.shape[0])
    for q in range(8):
        theta = (q + 0.5 * (t_nodes + 1.0)) * (np.pi / 4.0)
        w_t = t_wts * (np.pi / 8.0)
        for th, wt in zip(theta, w_t):
            rmax = 0.5 * h / max(abs(np.cos(th)), abs(np.sin(th)))
            rr = 0.5 * (r_nodes + 1.0) * rmax
            wr = r_wts * (0.5 * rmax)
            for r_val, w_r in zip(rr, wr):
                y1 = xi1 + r_val * np.cos(th)
                y2 = xi2 + r_val * np.sin(th)
                acc += wt * w_r * np.exp(
                    -r_val * tau_of(xi1, xi2, y1, y2)) / (4.0 * np.pi)
    kern[flat_i, flat_i] = acc


def rte_solve_2d(eta: np.ndarray, f: np.ndarray, spec: ProblemSpec,
                 m: int | None = None) -> np.ndarray:
    return _rte_solve_batch(rte_kernel_2d(eta, spec, m), eta, f[None])[0]


# -- sample generation with retry ------------------------------------------------

def generate_sample(spec: ProblemSpec, eta_seed: int, f_seeds):
    """(eta, F, U, meta): one parameter draw and its solved sources.

    Transfer problems re-draw eta (bumping the seed by one) when the
    scattering system gets too close to singular; the retry count lands
    in the metadata.
    """
    spec = spec.validate()
    retries = 0
    seed = eta_seed
    while True:
        eta = spec.sample_eta(seed)
        fs = np.stack([spec.sample_f(s) for s in f_seeds])
        try:
            us = spec.solve_batch(eta, fs)
            break
        except ConditioningError:
            retries += 1
            if retries > spec.resample_limit:
                raise DataError(f"eta resampling limit hit at seed {eta_seed}")
            seed = seed + 1
    meta = {"eta_seed": int(seed), "retries": retries,
            "f_seeds": [int(s) for s in f_seeds]}
    return eta, fs, us, meta
