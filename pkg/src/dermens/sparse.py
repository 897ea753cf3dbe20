"""Sparse coding: patch extraction, lasso by coordinate descent, online
dictionary learning and mean-absolute pooling."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, ValidationError
from .imaging import ImageTensor, resize_bilinear

DEFAULT_LAMBDA = 0.15
DEFAULT_ITERATIONS = 1000
DEFAULT_BATCH = 256
DEFAULT_ATOMS = 1024
PATCH_SIDE = 8
ENCODE_SIZE = 128

_MAGIC = b"DDIC"
_HEADER = struct.Struct("<4sIII4sI")  # magic, version, atom_dim, n_atoms, colorspace, patch_side
_VERSION = 1


@dataclass
class Dictionary:
    """Atoms are the columns of an ``(atom_dim, n_atoms)`` matrix."""

    atoms: np.ndarray
    colorspace: str = "RGB"
    patch_side: int = PATCH_SIDE

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ContractError("dictionary atoms must be a 2-D matrix")
        if self.colorspace not in ("RGB", "GRAY"):
            raise ContractError(f"dictionary colorspace must be RGB or GRAY, got {self.colorspace}")

    @property
    def atom_dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[1]

    def to_bytes(self) -> bytes:
        header = _HEADER.pack(
            _MAGIC, _VERSION, self.atom_dim, self.n_atoms,
            self.colorspace.encode("ascii").ljust(4, b" "), self.patch_side,
        )
        body = np.asfortranarray(self.atoms).astype("<f8").tobytes(order="F")
        return header + body

    @classmethod
    def from_bytes(cls, data: bytes) -> Dictionary:
        if len(data) < _HEADER.size:
            raise ValidationError("dictionary file truncated in header")
        magic, version, atom_dim, n_atoms, cs, side = _HEADER.unpack_from(data)
        if magic != _MAGIC or version != _VERSION:
            raise ValidationError("not a dictionary file (bad magic or version)")
        expected = atom_dim * n_atoms * 8
        body = data[_HEADER.size :]
        if len(body) != expected:
            raise ValidationError(f"dictionary body has {len(body)} bytes, expected {expected}")
        atoms = np.frombuffer(body, dtype="<f8").reshape((atom_dim, n_atoms), order="F")
        return cls(atoms.astype(np.float64), cs.decode("ascii").strip(), side)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> Dictionary:
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


@dataclass(frozen=True)
class SparseCode:
    indices: np.ndarray
    coefficients: np.ndarray

    @classmethod
    def from_dense(cls, alpha: np.ndarray) -> SparseCode:
        idx = np.flatnonzero(alpha)
        return cls(idx, alpha[idx].copy())

    def dense(self, n_atoms: int) -> np.ndarray:
        out = np.zeros(n_atoms)
        out[self.indices] = self.coefficients
        return out


def extract_patches(img: ImageTensor, side: int = PATCH_SIDE, stride: int = PATCH_SIDE) -> np.ndarray:
    """Mean-removed patches, one per row, flattened channel-major."""
    if side > min(img.width, img.height):
        raise ContractError(f"patch side {side} exceeds image {img.width}x{img.height}")
    if stride < 1:
        raise ContractError("stride must be positive")
    win = sliding_window_view(img.values, (side, side), axis=(0, 1))[::stride, ::stride]
    # win: (ny, nx, C, side, side)
    patches = win.reshape(-1, img.channels * side * side)
    # shifting by the first entry first keeps constant patches exactly zero
    patches = patches - patches[:, :1]
    return patches - patches.mean(axis=1, keepdims=True)


def _soft(z, lam):
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def optimality_residual(X: np.ndarray, D: np.ndarray, alpha: np.ndarray, lam: float) -> np.ndarray:
    """Per-row worst violation of the lasso subgradient conditions."""
    corr = (X - alpha @ D.T) @ D
    active = alpha != 0
    viol = np.where(active, np.abs(corr - lam * np.sign(alpha)), np.maximum(np.abs(corr) - lam, 0.0))
    return viol.max(axis=1) if viol.size else np.zeros(X.shape[0])


def _violation(c, a, lam):
    active = a != 0
    return np.where(active, np.abs(c - lam * np.sign(a)), np.abs(c) - lam)


def _active_set_step(a: np.ndarray, c: np.ndarray, G: np.ndarray, lam: float) -> None:
    """One exact descent step on the current support with its signs held fixed.

    Moves ``a`` toward the minimizer of the reduced quadratic, stopping at the
    first coefficient that would change sign (which is then zeroed). On a
    singular support with no minimizer it slides along a null direction that
    lowers the l1 term instead. ``c`` holds ``D^T (x - D a)`` and is updated.
    """
    S = np.flatnonzero(a)
    if S.size == 0:
        return
    s = np.sign(a[S])
    GS = G[np.ix_(S, S)]
    rhs = c[S] + GS @ a[S] - lam * s  # D_S^T x - lam s
    target, *_ = np.linalg.lstsq(GS, rhs, rcond=None)
    scale = max(1.0, float(np.abs(rhs).max()))
    if np.abs(GS @ target - rhs).max() <= 1e-10 * scale:
        step = target - a[S]
        limit = 1.0
    else:
        _, _, vt = np.linalg.svd(GS)
        v = vt[-1]
        step = -np.sign(s @ v) * v
        limit = np.inf
    shrinking = step * s < 0
    t, hit = limit, -1
    if shrinking.any():
        ratios = -a[S][shrinking] / step[shrinking]
        i = int(np.argmin(ratios))
        if ratios[i] < t:
            t, hit = float(ratios[i]), int(np.flatnonzero(shrinking)[i])
    if not np.isfinite(t):
        return
    new = a[S] + t * step
    if hit >= 0:
        new[hit] = 0.0
    delta = new - a[S]
    a[S] = new
    c -= G[:, S] @ delta


def lasso_batch(
    X: np.ndarray,
    D: np.ndarray,
    lam: float = DEFAULT_LAMBDA,
    tol: float = 1e-6,
    max_sweeps: int = 1000,
    gram: np.ndarray | None = None,
) -> np.ndarray:
    """Solve ``min 0.5*||x - D a||^2 + lam*||a||_1`` for every row of ``X``.

    Cyclic coordinate descent over atoms, vectorized across rows. Rows that
    still violate the subgradient conditions after a sweep also take an exact
    step on their active set, which rescues coherent dictionaries where plain
    coordinate descent crawls. Stops once every row is within ``tol``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != D.shape[0]:
        raise ContractError(f"signal dim {X.shape[1]} != atom dim {D.shape[0]}")
    if lam <= 0:
        raise ContractError("lambda must be positive")
    G = D.T @ D if gram is None else gram
    diag = np.diag(G)
    corr = X @ D
    n, k = corr.shape
    alpha = np.zeros((n, k))
    # rows whose correlations never exceed lambda have the all-zero solution
    rows = np.flatnonzero(np.abs(corr).max(axis=1, initial=0.0) > lam)
    if rows.size == 0:
        return alpha
    a = alpha[rows]
    cr = corr[rows].copy()  # cr = D^T (x - D a)
    for _ in range(max_sweeps):
        for j in range(k):
            g = diag[j]
            if g <= 0:
                continue
            z = cr[:, j] + g * a[:, j]
            new = _soft(z, lam) / g
            delta = new - a[:, j]
            changed = np.flatnonzero(delta)
            if changed.size:
                a[changed, j] = new[changed]
                cr[changed] -= np.outer(delta[changed], G[j])
        # refresh correlations to shed accumulated drift
        cr = corr[rows] - a @ G
        bad = np.flatnonzero(_violation(cr, a, lam).max(axis=1) > tol)
        if bad.size == 0:
            break
        for r in bad:
            _active_set_step(a[r], cr[r], G, lam)
        cr = corr[rows] - a @ G
        if _violation(cr, a, lam).max() <= tol:
            break
    alpha[rows] = a
    return alpha


def lasso_encode(x: np.ndarray, D: Dictionary | np.ndarray, lam: float = DEFAULT_LAMBDA,
                 tol: float = 1e-6) -> SparseCode:
    atoms = D.atoms if isinstance(D, Dictionary) else np.asarray(D, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ContractError("lasso_encode takes a single vector")
    return SparseCode.from_dense(lasso_batch(x[None, :], atoms, lam, tol)[0])


def lasso_objective(x, D, alpha, lam) -> float:
    r = x - D @ alpha
    return 0.5 * float(r @ r) + lam * float(np.abs(alpha).sum())


def _unit_rows(P: np.ndarray, rng) -> np.ndarray:
    norms = np.linalg.norm(P, axis=1, keepdims=True)
    tiny = norms[:, 0] < 1e-12
    if tiny.any():
        P = P.copy()
        P[tiny] = rng.standard_normal((int(tiny.sum()), P.shape[1]))
        norms[tiny] = np.linalg.norm(P[tiny], axis=1, keepdims=True)
    return P / norms


@dataclass
class _Stats:
    A: np.ndarray
    B: np.ndarray
    energy: float = 0.0
    l1: float = 0.0
    t: int = 0

    def surrogate(self, D: np.ndarray) -> float:
        quad = 0.5 * float(np.sum((D.T @ D) * self.A)) - float(np.sum(D * self.B))
        return (quad + self.energy + self.l1) / self.t


def learn_dictionary(
    patches: np.ndarray,
    n_atoms: int = DEFAULT_ATOMS,
    lam: float = DEFAULT_LAMBDA,
    iterations: int = DEFAULT_ITERATIONS,
    seed: int = 0,
    batch_size: int = DEFAULT_BATCH,
    colorspace: str = "RGB",
    patch_side: int = PATCH_SIDE,
    trace: list | None = None,
) -> Dictionary:
    """Online dictionary learning with mini-batches.

    Each iteration encodes a random mini-batch against the current atoms,
    folds the codes into the running sufficient statistics, then performs
    one block-coordinate pass over the atoms on the resulting quadratic
    surrogate with projection onto the unit ball.

    If ``trace`` is a list, one ``(before, after)`` pair of surrogate values
    around each dictionary update is appended to it.
    """
    X = np.asarray(patches, dtype=np.float64)
    if X.ndim != 2:
        raise ContractError("patches must be a 2-D array, one patch per row")
    if X.shape[0] < n_atoms:
        raise ContractError(f"need at least {n_atoms} patches, got {X.shape[0]}")
    if iterations < 1:
        raise ContractError("iterations must be >= 1")

    rng = np.random.default_rng(seed)
    d = X.shape[1]
    init = X[rng.choice(X.shape[0], size=n_atoms, replace=False)]
    D = _unit_rows(init, rng).T.copy()
    stats = _Stats(np.zeros((n_atoms, n_atoms)), np.zeros((d, n_atoms)))
    bs = min(batch_size, X.shape[0])

    for _ in range(iterations):
        batch = X[rng.integers(0, X.shape[0], size=bs)]
        alpha = lasso_batch(batch, D, lam)
        stats.t += 1
        stats.A += alpha.T @ alpha / bs
        stats.B += batch.T @ alpha / bs
        stats.energy += 0.5 * float(np.sum(batch * batch)) / bs
        stats.l1 += lam * float(np.abs(alpha).sum()) / bs

        before = stats.surrogate(D) if trace is not None else None
        _update_atoms(D, stats.A, stats.B)
        if trace is not None:
            trace.append((before, stats.surrogate(D)))

        _replace_degenerate(D, stats, batch, alpha, rng)

    return Dictionary(D, colorspace, patch_side)


def _replace_degenerate(D, stats, batch, alpha, rng, max_coherence=0.99):
    """Re-seed unused or duplicated atoms with badly reconstructed signals.

    A replaced atom's sufficient statistics are cleared so the next update
    does not drag it back to where it was.
    """
    diag = np.diag(stats.A)
    bad = set(np.flatnonzero(diag <= 1e-12 * max(diag.sum(), 1e-300)).tolist())
    coh = np.abs(D.T @ D)
    np.fill_diagonal(coh, 0.0)
    for i, j in zip(*np.nonzero(np.triu(coh > max_coherence))):
        if i not in bad and j not in bad:
            bad.add(int(j) if diag[j] <= diag[i] else int(i))
    if not bad:
        return
    bad = sorted(bad)
    resid = batch - alpha @ D.T
    order = np.argsort(-np.einsum("ij,ij->i", resid, resid), kind="stable")
    fresh = _unit_rows(batch[order[: len(bad)]], rng)
    for atom, vec in zip(bad, fresh):
        D[:, atom] = vec
        stats.A[atom, :] = 0.0
        stats.A[:, atom] = 0.0
        stats.B[:, atom] = 0.0


def _update_atoms(D: np.ndarray, A: np.ndarray, B: np.ndarray) -> None:
    for j in range(D.shape[1]):
        ajj = A[j, j]
        if ajj <= 1e-15:
            continue
        u = D[:, j] + (B[:, j] - D @ A[:, j]) / ajj
        D[:, j] = u / max(1.0, float(np.linalg.norm(u)))


def encode_image(img: ImageTensor, D: Dictionary, lam: float = DEFAULT_LAMBDA,
                 size: int = ENCODE_SIZE) -> np.ndarray:
    """Mean absolute sparse code over the non-overlapping patches of the image."""
    if img.colorspace != D.colorspace:
        raise ContractError(f"image colorspace {img.colorspace} does not match dictionary {D.colorspace}")
    side = D.patch_side
    if img.channels * side * side != D.atom_dim:
        raise ContractError("dictionary atom size does not match patch size")
    resized = resize_bilinear(img, size, size)
    patches = extract_patches(resized, side, side)
    gram = D.atoms.T @ D.atoms
    codes = lasso_batch(patches, D.atoms, lam, gram=gram)
    return np.abs(codes).mean(axis=0)
