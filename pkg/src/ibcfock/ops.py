"""Matrix-free operators on the truncated Fock space.

All kernel sums follow three rules that together make the finite-volume
algebra exact:

* a source index shifted off the box is dropped, so creation stays the
  exact discrete adjoint of annihilation under the weighted inner
  product;
* every operator is the composition or kernel form of the same index
  pairing, so identities like  boundary_map = -g * L^(-1) o creation
  hold to machine precision;
* kernels that correspond to a composition through the (n+1)-boson
  sector vanish on the top truncated sector, so the contact term agrees
  exactly with  g * annihilation o boundary_map  on the whole truncated
  space.

With E_grid the grid counterterm, this yields the finite-cutoff identity

    hamiltonian(grid-consistent, L) = cutoff_hamiltonian(L) + E_grid * Id

exactly, for any common cutoff L including the full grid.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import quad
from .grid import FockSpace, FockVector

__all__ = [
    "Connectivity",
    "DiagonalMode",
    "SingularInverse",
    "DimensionCap",
    "OperatorHandle",
    "free_multiplier",
    "number_multiplier",
    "apply_annihilation",
    "apply_creation",
    "annihilation",
    "creation",
    "apply_boundary_map",
    "apply_boundary_map_adjoint",
    "boundary_map",
    "counterterm_grid",
    "ContactDiagonalCache",
    "contact_diagonal",
    "contact_offdiagonal",
    "contact_term",
    "cutoff_hamiltonian",
    "hamiltonian",
    "assemble_dense",
    "dense_to_csv",
    "dense_to_npy",
    "operator_metadata",
]

DENSE_CAP = 20_000


class Connectivity(Enum):
    DIAGONAL = "diagonal"       # sector n -> n
    LOWER = "lower"             # sector n -> n-1
    RAISE = "raise"             # sector n -> n+1
    TRIDIAGONAL = "tridiagonal"


class DiagonalMode(Enum):
    GRID_CONSISTENT = "grid"
    CONTINUUM = "continuum"


class SingularInverse(ValueError):
    """Negative power of the free multiplier on a sector with a zero value."""


class DimensionCap(RuntimeError):
    """Dense assembly request beyond the configured dimension cap."""


@dataclass
class OperatorHandle:
    """A linear map on FockVectors with declared sector connectivity."""

    apply: callable
    connectivity: Connectivity
    selfadjoint_claim: bool
    model: object
    space: FockSpace
    cutoff: float | None
    name: str
    _adjoint: callable | None = None

    @property
    def grid(self):
        return self.space.grid

    def adjoint_apply(self, psi):
        if self.selfadjoint_claim:
            return self.apply(psi)
        if self._adjoint is None:
            raise NotImplementedError(f"no adjoint registered for {self.name}")
        return self._adjoint(psi)


def _sector_is_zero(arr):
    return not np.any(arr)


# --------------------------------------------------------------------------
# diagonal multipliers
# --------------------------------------------------------------------------

def free_multiplier(model, space, power):
    """Multiplication by (P^2 + sum_j omega(k_j))^power on every sector.

    For power < 0 the value P^2 + Omega is inverted; it is bounded below
    by one on every sector with a boson, and by the smallest P^2 on the
    zero-boson sector.  A sector containing an exactly zero value makes
    the inverse meaningless and raises SingularInverse.
    """
    factors = []
    for n in range(space.n_max + 1):
        vals = space.free_values(model, n)
        if power < 0 and np.any(vals == 0.0):
            raise SingularInverse(
                f"free value 0 in sector n={n}; negative power {power} undefined"
            )
        factors.append(vals**power)

    def apply(psi):
        out = FockVector.zero(space)
        for n in range(space.n_max + 1):
            out.sectors[n] = factors[n] * psi.sectors[n]
        return out

    return OperatorHandle(apply, Connectivity.DIAGONAL, True, model, space, None,
                          f"free_multiplier^{power}")


def number_multiplier(space, power):
    """Multiplication by n^power on sector n, with 0^0 = 1."""
    if power < 0 and space.n_max >= 0:
        raise SingularInverse("negative powers of the number operator hit n = 0")
    scale = [float(n) ** power if (n or power) else 1.0 for n in range(space.n_max + 1)]

    def apply(psi):
        out = FockVector.zero(space)
        for n in range(space.n_max + 1):
            out.sectors[n] = scale[n] * psi.sectors[n]
        return out

    return OperatorHandle(apply, Connectivity.DIAGONAL, True, None, space, None,
                          f"number_multiplier^{power}")


# --------------------------------------------------------------------------
# annihilation / creation
# --------------------------------------------------------------------------

def _cutoff_nodes(space, cutoff):
    return np.nonzero(space.grid.cutoff_mask(cutoff))[0]


def apply_annihilation(model, space, cutoff, psi):
    """One boson absorbed by a source.

    Sector n of the output receives

        sqrt(n+1) * sum_i sum_{|k|<cutoff} h^d vhat(k)
                      * psi^(n+1)(P - e_i t(k), K union {k}),

    where t(k) is the transfer displacement of node k; shifted source
    tuples that leave the box are dropped.
    """
    grd = space.grid
    vhat = grd.tables(model)[0]
    nodes = _cutoff_nodes(space, cutoff)
    hd = grd.h**grd.d
    out = FockVector.zero(space)
    for n_out in range(space.n_max):
        n_in = n_out + 1
        sec_in = psi.sectors[n_in]
        if _sector_is_zero(sec_in):
            continue
        pref = np.sqrt(n_out + 1.0) * hd
        acc = out.sectors[n_out]
        for k in nodes:
            tgt, _ = space.insert_map(n_out, k)
            for i in range(space.M):
                smap = space.source_shift(i, k, -1)
                valid = np.nonzero(smap >= 0)[0]
                if valid.size == 0:
                    continue
                acc[valid, :] += (pref * vhat[k]) * sec_in[smap[valid][:, None], tgt[None, :]]
    return out


def apply_creation(model, space, cutoff, psi):
    """Exact discrete adjoint of apply_annihilation.

    Built by transposing the index pairing of the annihilation sum, not
    by independent quadrature; the adjoint identity holds to rounding.
    """
    grd = space.grid
    vhat = grd.tables(model)[0]
    nodes = _cutoff_nodes(space, cutoff)
    out = FockVector.zero(space)
    for n_in in range(space.n_max):
        n_out = n_in + 1
        sec_in = psi.sectors[n_in]
        if _sector_is_zero(sec_in):
            continue
        pref = 1.0 / np.sqrt(n_in + 1.0)
        acc = out.sectors[n_out]
        for k in nodes:
            tgt, cnt = space.insert_map(n_in, k)
            coef = pref * vhat[k] * cnt
            for i in range(space.M):
                smap = space.source_shift(i, k, +1)
                valid = np.nonzero(smap >= 0)[0]
                if valid.size == 0:
                    continue
                acc[valid[:, None], tgt[None, :]] += coef[None, :] * sec_in[smap[valid], :]
    return out


def annihilation(model, space, cutoff=None):
    return OperatorHandle(
        lambda psi: apply_annihilation(model, space, cutoff, psi),
        Connectivity.LOWER, False, model, space, cutoff, "annihilation",
        _adjoint=lambda psi: apply_creation(model, space, cutoff, psi),
    )


def creation(model, space, cutoff=None):
    return OperatorHandle(
        lambda psi: apply_creation(model, space, cutoff, psi),
        Connectivity.RAISE, False, model, space, cutoff, "creation",
        _adjoint=lambda psi: apply_annihilation(model, space, cutoff, psi),
    )


def _invert_free_on_bosonic(model, space, psi, drop_vacuum=True):
    """Apply (P^2 + Omega)^(-1) on the sectors with at least one boson.

    The free value is >= 1 there.  The zero-boson sector is zeroed; the
    callers only ever need the inverse on raise-type images, which have
    no zero-boson component.
    """
    out = FockVector.zero(space)
    for n in range(1, space.n_max + 1):
        out.sectors[n] = psi.sectors[n] / space.free_values(model, n)
    if not drop_vacuum and space.n_max >= 0:
        out.sectors[0] = psi.sectors[0] / space.free_values(model, 0)
    return out


def apply_boundary_map(model, space, cutoff, psi):
    """The singular-part map: -g * (free inverse) o creation.

    Raises boson number by one; the output has no zero-boson component.
    """
    created = apply_creation(model, space, cutoff, psi)
    assert _sector_is_zero(created.sectors[0])
    return -model.g * _invert_free_on_bosonic(model, space, created)


def apply_boundary_map_adjoint(model, space, cutoff, psi):
    """Adjoint of the singular-part map: -g * annihilation o (free inverse)."""
    return -model.g * apply_annihilation(
        model, space, cutoff, _invert_free_on_bosonic(model, space, psi)
    )


def boundary_map(model, space, cutoff=None):
    return OperatorHandle(
        lambda psi: apply_boundary_map(model, space, cutoff, psi),
        Connectivity.RAISE, False, model, space, cutoff, "boundary_map",
        _adjoint=lambda psi: apply_boundary_map_adjoint(model, space, cutoff, psi),
    )


# --------------------------------------------------------------------------
# counterterm and contact term
# --------------------------------------------------------------------------

def counterterm_grid(model, space, cutoff=None):
    """Grid counterterm: g^2 M sum_{|k|<cutoff} h^d vhat(k)^2/(k^2+omega(k)).

    Uses the same node set as the operator kernels, so the finite-cutoff
    identity with the cutoff Hamiltonian is exact.
    """
    grd = space.grid
    vhat, om = grd.tables(model)
    mask = grd.cutoff_mask(cutoff)
    hd = grd.h**grd.d
    val = (vhat[mask] ** 2 / (grd.norms[mask] ** 2 + om[mask])).sum() * hd
    return model.g**2 * model.M * val


class ContactDiagonalCache:
    """Memoized regularized diagonal kernel I(|p|, env) on a bucket grid.

    Buckets are squares of side `bucket` (default: grid spacing / 4);
    values at bucket corners are computed once by quadrature and stored;
    queries are answered by bilinear interpolation between the four
    surrounding corners.  Insertion is locked for concurrent use;
    last-writer-wins is harmless because corner values are deterministic.
    """

    def __init__(self, model, bucket, tol=1e-8):
        if not model.is_renormalisable:
            raise ValueError("continuum diagonal kernel needs a renormalisable model")
        self.model = model
        self.bucket = float(bucket)
        self.tol = tol
        self._store = {}
        self._lock = threading.Lock()

    def corner_value(self, ip, ie):
        """Kernel value at a bucket corner (exact, memoized)."""
        key = (int(ip), int(ie))
        with self._lock:
            cached = self._store.get(key)
        if cached is not None:
            return cached
        val = quad.regularized_subtracted_integral(
            self.model, key[0] * self.bucket, key[1] * self.bucket, self.tol
        )
        with self._lock:
            self._store[key] = val
        return val

    def get_many(self, p_norms, envs):
        """Vectorized bilinear lookup; arrays of equal shape."""
        p = np.asarray(p_norms, dtype=float) / self.bucket
        e = np.asarray(envs, dtype=float) / self.bucket
        ip0 = np.floor(p).astype(int)
        ie0 = np.floor(e).astype(int)
        fp = p - ip0
        fe = e - ie0
        out = np.zeros_like(p)
        for dp, de, w in (
            (0, 0, (1 - fp) * (1 - fe)),
            (1, 0, fp * (1 - fe)),
            (0, 1, (1 - fp) * fe),
            (1, 1, fp * fe),
        ):
            keys = np.stack([ip0 + dp, ie0 + de], axis=-1).reshape(-1, 2)
            vals = np.array([self.corner_value(a, b) for a, b in keys]).reshape(p.shape)
            out += w * vals
        return out

    def __len__(self):
        return len(self._store)


def contact_diagonal(model, space, mode=DiagonalMode.GRID_CONSISTENT,
                     cutoff=None, cache=None):
    """Diagonal part of the contact term.

    Grid-consistent mode multiplies sector n (below the truncation top) by

        -g^2 sum_l sum_{|k|<cutoff} h^d vhat(k)^2 / L(P - e_l t(k), K u {k})

    and adds the grid counterterm on every sector, so that the sum equals
    the regularized difference of grid sums at finite cutoff.  Continuum
    mode multiplies by -g^2 sum_l I(|p_l|, rest energy), the cutoff-free
    regularized kernel, evaluated through a ContactDiagonalCache.
    """
    grd = space.grid
    factors = []
    if mode is DiagonalMode.GRID_CONSISTENT:
        vhat, om = grd.tables(model)
        nodes = _cutoff_nodes(space, cutoff)
        hd = grd.h**grd.d
        e_grid = counterterm_grid(model, space, cutoff)
        omega_sums = space.omega_sums(model)
        for n in range(space.n_max + 1):
            base = np.zeros((space.n_source_tuples, space.msets[n].shape[0]))
            if n < space.n_max:
                for k in nodes:
                    wk = hd * vhat[k] ** 2
                    for ell in range(space.M):
                        smap = space.source_shift(ell, k, -1)
                        valid = np.nonzero(smap >= 0)[0]
                        if valid.size == 0:
                            continue
                        denom = (space.psq[smap[valid]][:, None]
                                 + omega_sums[n][None, :] + om[k])
                        base[valid, :] += wk / denom
            factors.append(-model.g**2 * base + e_grid)
    else:
        if not model.is_renormalisable:
            raise ValueError("continuum mode needs a renormalisable model")
        if cache is None:
            cache = ContactDiagonalCache(model, bucket=grd.h / 4.0)
        omega_sums = space.omega_sums(model)
        p_norm = grd.norms[space.src_tuples]            # (S, M)
        for n in range(space.n_max + 1):
            base = np.zeros((space.n_source_tuples, space.msets[n].shape[0]))
            if n < space.n_max:
                for ell in range(space.M):
                    env = (space.psq - p_norm[:, ell] ** 2)[:, None] + omega_sums[n][None, :]
                    pl = np.broadcast_to(p_norm[:, ell][:, None], env.shape)
                    base += cache.get_many(pl, env)
            factors.append(-model.g**2 * base)

    def apply(psi):
        out = FockVector.zero(space)
        for n in range(space.n_max + 1):
            out.sectors[n] = factors[n] * psi.sectors[n]
        return out

    return OperatorHandle(apply, Connectivity.DIAGONAL, True, model, space, cutoff,
                          f"contact_diagonal[{mode.value}]")


def apply_contact_offdiagonal(model, space, cutoff, psi):
    """Off-diagonal part of the contact term (boson-number preserving).

    Sums the source-exchange kernels (i != l, distinct sources trade the
    integrated boson) and the boson-exchange kernels (the integrated
    boson replaces an existing one), as grid sums with weight h^d and the
    cutoff applied to every form-factor argument.  Kernels vanish on the
    top truncated sector, matching the composition through sector n+1.
    """
    grd = space.grid
    vhat, om = grd.tables(model)
    nodes = _cutoff_nodes(space, cutoff)
    hd = grd.h**grd.d
    g2 = model.g**2
    omega_sums = space.omega_sums(model)
    out = FockVector.zero(space)

    for n in range(space.n_max):        # kernels vanish on n = n_max
        sec = psi.sectors[n]
        if _sector_is_zero(sec):
            continue
        acc = out.sectors[n]

        # source-exchange kernels: i != l, argument P + (e_i - e_l) t(k)
        if space.M >= 2:
            for ell in range(space.M):
                for i in range(space.M):
                    if i == ell:
                        continue
                    for k in nodes:
                        s1 = space.source_shift(ell, k, -1)
                        s2 = space.source_shift(i, k, +1)
                        comp = np.where(s1 >= 0, s2[np.maximum(s1, 0)], -1)
                        valid = np.nonzero((s1 >= 0) & (comp >= 0))[0]
                        if valid.size == 0:
                            continue
                        denom = (space.psq[s1[valid]][:, None]
                                 + omega_sums[n][None, :] + om[k])
                        acc[valid, :] += (-g2 * hd * vhat[k] ** 2 / denom) * sec[comp[valid], :]

        # boson-exchange kernels: existing boson w out, integrated boson k in
        if n >= 1:
            for ell in range(space.M):
                for i in range(space.M):
                    for w in nodes:
                        tw, cw = space.insert_map(n - 1, w)
                        for k in nodes:
                            tk, _ = space.insert_map(n - 1, k)
                            s1 = space.source_shift(ell, k, -1)
                            s2 = space.source_shift(i, w, +1)
                            comp = np.where(s1 >= 0, s2[np.maximum(s1, 0)], -1)
                            valid = np.nonzero((s1 >= 0) & (comp >= 0))[0]
                            if valid.size == 0:
                                continue
                            denom = (space.psq[s1[valid]][:, None]
                                     + omega_sums[n - 1][None, :] + om[w] + om[k])
                            block = sec[comp[valid][:, None], tk[None, :]]
                            acc[valid[:, None], tw[None, :]] += (
                                (-g2 * hd * vhat[k] * vhat[w] * cw[None, :]) * block / denom
                            )
    return out


def contact_offdiagonal(model, space, cutoff=None):
    return OperatorHandle(
        lambda psi: apply_contact_offdiagonal(model, space, cutoff, psi),
        Connectivity.DIAGONAL, True, model, space, cutoff, "contact_offdiagonal",
    )


def contact_term(model, space, mode=DiagonalMode.GRID_CONSISTENT,
                 cutoff=None, cache=None):
    """The full contact term.

    Form-perturbation models use g * annihilation o boundary_map directly;
    renormalizable models use the diagonal + off-diagonal kernel split.
    """
    if not model.is_renormalisable:
        def apply(psi):
            return model.g * apply_annihilation(
                model, space, cutoff, apply_boundary_map(model, space, cutoff, psi)
            )
        return OperatorHandle(apply, Connectivity.DIAGONAL, True, model, space,
                              cutoff, "contact_term[composed]")
    diag = contact_diagonal(model, space, mode, cutoff, cache)
    offd = contact_offdiagonal(model, space, cutoff)

    def apply(psi):
        return diag.apply(psi) + offd.apply(psi)

    return OperatorHandle(apply, Connectivity.DIAGONAL, True, model, space, cutoff,
                          f"contact_term[{mode.value}]")


# --------------------------------------------------------------------------
# Hamiltonians
# --------------------------------------------------------------------------

def cutoff_hamiltonian(model, space, cutoff=None):
    """L + g (annihilation + creation) with the cutoff form factor."""
    free = free_multiplier(model, space, 1.0)

    def apply(psi):
        out = free.apply(psi)
        a = apply_annihilation(model, space, cutoff, psi)
        c = apply_creation(model, space, cutoff, psi)
        for n in range(space.n_max + 1):
            out.sectors[n] += model.g * (a.sectors[n] + c.sectors[n])
        return out

    return OperatorHandle(apply, Connectivity.TRIDIAGONAL, True, model, space,
                          cutoff, "cutoff_hamiltonian")


def hamiltonian(model, space, mode=DiagonalMode.GRID_CONSISTENT,
                cutoff=None, cache=None):
    """The interior-boundary-condition Hamiltonian on the truncated space:

        H = (1 - B)^adj L (1 - B) + T,

    with B the boundary map and T the contact term.  The adjoint is the
    exact discrete adjoint, so hermiticity is structural.
    """
    free = free_multiplier(model, space, 1.0)
    contact = contact_term(model, space, mode, cutoff, cache)

    def apply(psi):
        u = psi - apply_boundary_map(model, space, cutoff, psi)
        w = free.apply(u)
        out = w - apply_boundary_map_adjoint(model, space, cutoff, w)
        return out + contact.apply(psi)

    return OperatorHandle(apply, Connectivity.TRIDIAGONAL, True, model, space,
                          cutoff, f"hamiltonian[{mode.value}]")


# --------------------------------------------------------------------------
# dense assembly and export
# --------------------------------------------------------------------------

def assemble_dense(handle, cap=DENSE_CAP):
    """Column-by-column dense matrix in the orthonormalized basis.

    Basis vector j is the coefficient unit vector rescaled by the inverse
    square-root weight, so the operator adjoint is the conjugate
    transpose of the returned matrix.
    """
    space = handle.space
    dim = space.total_dim
    if dim > cap:
        raise DimensionCap(f"dense dimension {dim} exceeds cap {cap}")
    mat = np.zeros((dim, dim), dtype=complex)
    flat = np.zeros(dim, dtype=complex)
    for j in range(dim):
        flat[j] = 1.0
        basis = FockVector.unflatten(space, flat)
        mat[:, j] = handle.apply(basis).flatten()
        flat[j] = 0.0
    return mat


def dense_to_csv(mat, path):
    """CSV export: real block then imaginary block, separated by a comment."""
    with open(path, "w") as fh:
        fh.write("# complex matrix: real block, then imaginary block\n")
        np.savetxt(fh, mat.real, delimiter=",", fmt="%.11e")
        fh.write("# imaginary part\n")
        np.savetxt(fh, mat.imag, delimiter=",", fmt="%.11e")


def dense_to_npy(mat, path):
    """Binary export in the numpy .npy container (versioned, documented)."""
    np.save(path, mat)


def operator_metadata(handle):
    """JSON-ready description of an operator handle."""
    meta = {
        "name": handle.name,
        "connectivity": handle.connectivity.value,
        "selfadjoint": handle.selfadjoint_claim,
        "cutoff": handle.cutoff if handle.cutoff is not None else "full_grid",
        "space": {
            "M": handle.space.M,
            "n_max": handle.space.n_max,
            "nodes": handle.space.grid.n_nodes,
            "dim": handle.space.total_dim,
        },
    }
    if handle.model is not None:
        meta["model"] = handle.model.describe()
    return json.dumps(meta, sort_keys=True)
