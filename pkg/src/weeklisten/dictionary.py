"""Sparse dictionary learning over stacked weekly signals.

Learns K multichannel atoms D and per-user sparse codes by alternating
minimization of

    sum_c ||S_c - D_c G||_F^2 + lam * ||G||_1

where the channel sum equals the Frobenius norm of the channel-major stacked
matrices, so everything below runs on plain ``(dim, K)`` dictionaries and
``(n, dim)`` signal rows (``dim`` is 672 in production, anything in tests).

Sparse coding is cyclic coordinate descent with closed-form soft-threshold
updates, vectorized across users; the dictionary half-step is block coordinate
descent over atoms with unit-L2-ball projection.  Both half-steps never
increase the objective, which the learner records after every half-step.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import storage
from .errors import DictionaryError
from .signals import CHANNELS, N_CHANNELS, SLOTS_PER_WEEK, SignalSet

STACKED_DIM = N_CHANNELS * SLOTS_PER_WEEK

#: Factor mapping the coordinate-change tolerance to the KKT certificate tolerance.
KKT_TOL_FACTOR = 10.0


@dataclass(frozen=True)
class LearnConfig:
    """Knobs for :func:`learn`; defaults follow the pipeline defaults."""

    n_atoms: int = 32
    lam: float = 1.0
    outer_iters: int = 100
    lasso_tol: float = 1e-8
    lasso_max_sweeps: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.n_atoms < 1:
            raise DictionaryError(f"n_atoms must be >= 1, got {self.n_atoms}")
        if self.lam < 0:
            raise DictionaryError(f"lam must be >= 0, got {self.lam}")
        if self.lasso_tol <= 0 or self.lasso_max_sweeps <= 0:
            raise DictionaryError("lasso_tol and lasso_max_sweeps must be positive")


@dataclass(frozen=True)
class Dictionary:
    """K atoms as columns of the stacked ``(dim, K)`` matrix.

    For production signals ``dim == 672`` and :attr:`atoms` exposes the
    ``(K, 4, 168)`` channel view.  Every column has L2 norm at most 1.
    """

    stacked: np.ndarray
    lam: float | None = None
    seed: int | None = None

    @property
    def n_atoms(self) -> int:
        return self.stacked.shape[1]

    @property
    def dim(self) -> int:
        return self.stacked.shape[0]

    @property
    def atoms(self) -> np.ndarray:
        if self.dim != STACKED_DIM:
            raise DictionaryError(f"channel view needs dim {STACKED_DIM}, this dictionary has {self.dim}")
        return self.stacked.T.reshape(self.n_atoms, N_CHANNELS, SLOTS_PER_WEEK)


@dataclass(frozen=True)
class Embedding:
    """One user's sparse code over the atoms."""

    user_id: str
    code: np.ndarray


@dataclass(frozen=True)
class LearnResult:
    dictionary: Dictionary
    codes: np.ndarray                 # (n_rows, K), aligned with the training rows
    objective_trace: tuple[float, ...]  # objective after every half-step


def _stacked(dictionary) -> np.ndarray:
    mat = dictionary.stacked if isinstance(dictionary, Dictionary) else np.asarray(dictionary, dtype=np.float64)
    if mat.ndim != 2:
        raise DictionaryError(f"dictionary must be 2-D (dim, K), got shape {mat.shape}")
    return mat


def objective(signals: np.ndarray, dictionary, codes: np.ndarray, lam: float) -> float:
    """``||S - D @ G||_F^2 + lam * ||G||_1`` on stacked matrices."""
    X = np.asarray(signals, dtype=np.float64)
    D = _stacked(dictionary)
    C = np.asarray(codes, dtype=np.float64)
    if X.ndim != 2 or C.shape != (X.shape[0], D.shape[1]):
        raise DictionaryError(f"shape mismatch: signals {X.shape}, dictionary {D.shape}, codes {C.shape}")
    residual = X - C @ D.T
    return float(np.sum(residual * residual) + lam * np.sum(np.abs(C)))


def kkt_violation(signal: np.ndarray, dictionary, code: np.ndarray, lam: float) -> float:
    """Worst subgradient-optimality violation of a lasso code.

    The smooth-term gradient is ``g = -2 D^T (s - D c)``; optimality needs
    ``|g_k| <= lam`` where ``c_k == 0`` and ``g_k == -lam * sign(c_k)``
    elsewhere.  Returns the largest excess over those conditions.
    """
    D = _stacked(dictionary)
    s = np.asarray(signal, dtype=np.float64)
    c = np.asarray(code, dtype=np.float64)
    g = -2.0 * D.T @ (s - D @ c)
    at_zero = c == 0.0
    viol_zero = np.maximum(np.abs(g[at_zero]) - lam, 0.0)
    viol_active = np.abs(g[~at_zero] + lam * np.sign(c[~at_zero]))
    worst = 0.0
    if viol_zero.size:
        worst = max(worst, float(viol_zero.max()))
    if viol_active.size:
        worst = max(worst, float(viol_active.max()))
    return worst


def _kkt_from_half_gradient(g: np.ndarray, C: np.ndarray, lam: float) -> np.ndarray:
    """Per-column KKT violation given ``g = D^T S - (D^T D) C`` (so grad = -2g)."""
    grad = -2.0 * g
    viol = np.abs(grad + lam * np.sign(C))
    np.copyto(viol, np.maximum(np.abs(grad) - lam, 0.0), where=C == 0.0)
    return viol.max(axis=0) if viol.size else np.zeros(g.shape[1])


def sparse_code_batch(signals: np.ndarray, dictionary, lam: float,
                      tol: float = 1e-8, max_sweeps: int = 1000,
                      warm_codes: np.ndarray | None = None) -> np.ndarray:
    """Cyclic coordinate-descent lasso codes for every signal row.

    Runs in covariance form: with ``G = D^T D`` and ``H = D^T S`` precomputed,
    a coordinate update touches K-vectors instead of dim-vectors.  Each user's
    problem is independent; they are swept together for speed and a user drops
    out once its sweep-to-sweep coordinate change is below ``tol`` and its KKT
    violation is within ``KKT_TOL_FACTOR * tol``.
    """
    X = np.asarray(signals, dtype=np.float64)
    if X.ndim != 2:
        raise DictionaryError(f"signals must be 2-D (n, dim), got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DictionaryError("non-finite values in signals")
    D = _stacked(dictionary)
    n, dim = X.shape
    if D.shape[0] != dim:
        raise DictionaryError(f"dictionary dim {D.shape[0]} does not match signals dim {dim}")
    K = D.shape[1]

    C = np.zeros((K, n)) if warm_codes is None else \
        np.ascontiguousarray(warm_codes.T, dtype=np.float64).copy()
    G = D.T @ D                               # (K, K)
    atom_sq = np.diagonal(G).copy()           # ||d_j||^2
    g = D.T @ X.T - G @ C                     # half-gradient: d_j . residual per user
    threshold = lam / 2.0

    active = np.arange(n)
    for _ in range(max_sweeps):
        if active.size == 0:
            break
        max_delta = np.zeros(active.size)
        for j in range(K):
            if atom_sq[j] == 0.0:
                continue  # degenerate atom: code stays as-is, gradient is zero
            c_j = C[j, active]
            rho = g[j] + atom_sq[j] * c_j
            new = np.sign(rho) * np.maximum(np.abs(rho) - threshold, 0.0) / atom_sq[j]
            delta = new - c_j
            changed = delta != 0.0
            if np.any(changed):
                g -= np.outer(G[:, j], delta * changed)
                C[j, active[changed]] = new[changed]
            np.maximum(max_delta, np.abs(delta), out=max_delta)

        settled = max_delta < tol
        if np.any(settled):
            # Promote settled users only once their KKT certificate holds.
            viol = _kkt_from_half_gradient(g[:, settled], C[:, active[settled]], lam)
            done = settled.copy()
            done[settled] = viol <= KKT_TOL_FACTOR * tol
            if np.any(done):
                keep = ~done
                active = active[keep]
                g = np.ascontiguousarray(g[:, keep])

    return C.T.copy()


def sparse_code(signal: np.ndarray, dictionary, lam: float,
                tol: float = 1e-8, max_sweeps: int = 1000) -> np.ndarray:
    """Lasso code of a single signal; see :func:`sparse_code_batch`."""
    s = np.asarray(signal, dtype=np.float64)
    if s.ndim != 1:
        raise DictionaryError(f"signal must be 1-D, got shape {s.shape}")
    return sparse_code_batch(s[None, :], dictionary, lam, tol, max_sweeps)[0]


def update_dictionary(signals: np.ndarray, dictionary, codes: np.ndarray):
    """One block-coordinate-descent pass over atoms with fixed codes.

    Atoms are refit in index order against the residual and projected onto
    the unit L2 ball; atoms with zero code energy are left unchanged.  The
    reconstruction term never increases.  Returns the same type it was given.
    """
    X = np.asarray(signals, dtype=np.float64)
    D = _stacked(dictionary).copy()
    C = np.asarray(codes, dtype=np.float64)
    if C.shape != (X.shape[0], D.shape[1]):
        raise DictionaryError(f"codes shape {C.shape} does not match signals {X.shape} x atoms {D.shape[1]}")

    A = C.T @ C                  # (K, K) code Gram
    B = X.T @ C                  # (dim, K)
    for j in range(D.shape[1]):
        if A[j, j] <= 0.0:
            continue  # unused atom: no gradient information
        d_j = (B[:, j] - D @ A[:, j] + D[:, j] * A[j, j]) / A[j, j]
        norm = float(np.linalg.norm(d_j))
        if norm > 1.0:
            d_j /= norm
        D[:, j] = d_j

    if isinstance(dictionary, Dictionary):
        return replace(dictionary, stacked=D)
    return D


def learn(signals: np.ndarray, config: LearnConfig) -> LearnResult:
    """Alternating minimization from a seeded row-sample initialization.

    Atoms start as ``n_atoms`` distinct training rows drawn uniformly without
    replacement (PCG64 generator seeded with ``config.seed``), projected onto
    the unit ball.  Sparse coding and dictionary updates then alternate for
    ``outer_iters`` rounds; the objective is recorded after every half-step.
    """
    X = np.asarray(signals, dtype=np.float64)
    if X.ndim != 2:
        raise DictionaryError(f"signals must be 2-D (n, dim), got shape {X.shape}")
    n = X.shape[0]
    if n < config.n_atoms:
        raise DictionaryError(f"need at least {config.n_atoms} training rows, got {n}")

    rng = np.random.default_rng(config.seed)
    chosen = rng.choice(n, size=config.n_atoms, replace=False)
    D = X[chosen].T.astype(np.float64).copy()
    norms = np.linalg.norm(D, axis=0)
    D /= np.maximum(norms, 1.0)

    codes = sparse_code_batch(X, D, config.lam, config.lasso_tol, config.lasso_max_sweeps)
    trace = [objective(X, D, codes, config.lam)]
    for _ in range(config.outer_iters):
        D = update_dictionary(X, D, codes)
        trace.append(objective(X, D, codes, config.lam))
        codes = sparse_code_batch(X, D, config.lam, config.lasso_tol,
                                  config.lasso_max_sweeps, warm_codes=codes)
        trace.append(objective(X, D, codes, config.lam))

    dictionary = Dictionary(stacked=D, lam=config.lam, seed=config.seed)
    return LearnResult(dictionary=dictionary, codes=codes, objective_trace=tuple(trace))


def embed(signal_set: SignalSet, dictionary: Dictionary, lam: float | None = None,
          tol: float = 1e-8, max_sweeps: int = 1000) -> list[Embedding]:
    """Sparse codes of arbitrary users against a fixed dictionary.

    ``lam`` defaults to the value the dictionary was trained with, so held-out
    users are coded under the same sparsity pressure as training users.
    """
    if lam is None:
        lam = dictionary.lam
    if lam is None:
        raise DictionaryError("lam not given and the dictionary records none")
    codes = sparse_code_batch(signal_set.matrix, dictionary, lam, tol, max_sweeps)
    return [Embedding(user_id=u, code=codes[i]) for i, u in enumerate(signal_set.user_ids)]


def embeddings_matrix(embeddings: Sequence[Embedding]) -> tuple[tuple[str, ...], np.ndarray]:
    """Split a list of embeddings into (user ids, (n, K) code matrix)."""
    users = tuple(e.user_id for e in embeddings)
    return users, np.vstack([e.code for e in embeddings])


# ---------------------------------------------------------------------------
# Persistence: documented CSV and flat binary forms, plus the plotting export.
# ---------------------------------------------------------------------------

_BINARY_MAGIC = b"WKLDICT1"


def _shape_fields(dictionary: Dictionary) -> tuple[int, int]:
    """(channels, slots) for the header; generic dims persist as one channel."""
    if dictionary.dim == STACKED_DIM:
        return N_CHANNELS, SLOTS_PER_WEEK
    return 1, dictionary.dim


def save_dictionary_csv(dictionary: Dictionary, path) -> None:
    """CSV form: two header lines (field names, values) then one row per atom.

    Atom rows are channel-major stacked columns written with ``%.17g``
    (lossless float64 round-trip).
    """
    D = dictionary.stacked
    channels, slots = _shape_fields(dictionary)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("n_atoms,channels,slots,lambda,seed\n")
        lam = "" if dictionary.lam is None else repr(float(dictionary.lam))
        seed = "" if dictionary.seed is None else str(dictionary.seed)
        fh.write(f"{dictionary.n_atoms},{channels},{slots},{lam},{seed}\n")
        for j in range(dictionary.n_atoms):
            fh.write(",".join(f"{v:.17g}" for v in D[:, j]) + "\n")


def load_dictionary_csv(path) -> Dictionary:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        values = fh.readline().strip().split(",")
        meta = dict(zip(header, values))
        rows = [np.array(line.split(","), dtype=np.float64) for line in fh if line.strip()]
    n_atoms = int(meta["n_atoms"])
    dim = int(meta["channels"]) * int(meta["slots"])
    D = np.vstack(rows).T
    if D.shape != (dim, n_atoms):
        raise DictionaryError(f"dictionary file {path} has shape {D.shape}, header says ({dim}, {n_atoms})")
    lam = float(meta["lambda"]) if meta.get("lambda") else None
    seed = int(meta["seed"]) if meta.get("seed") else None
    return Dictionary(stacked=D, lam=lam, seed=seed)


def save_dictionary_binary(dictionary: Dictionary, path) -> None:
    """Flat binary form: magic, u32 JSON-header length, header, float64 LE data."""
    import json

    channels, slots = _shape_fields(dictionary)
    header = {"n_atoms": dictionary.n_atoms, "channels": channels, "slots": slots,
              "lambda": dictionary.lam, "seed": dictionary.seed}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    data = np.ascontiguousarray(dictionary.stacked.T, dtype="<f8")  # row per atom
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(np.uint32(len(blob)).tobytes())
        fh.write(blob)
        fh.write(data.tobytes())


def load_dictionary_binary(path) -> Dictionary:
    import json

    with open(path, "rb") as fh:
        magic = fh.read(len(_BINARY_MAGIC))
        if magic != _BINARY_MAGIC:
            raise DictionaryError(f"{path} is not a dictionary binary (bad magic {magic!r})")
        (blob_len,) = np.frombuffer(fh.read(4), dtype=np.uint32)
        meta = json.loads(fh.read(int(blob_len)).decode("utf-8"))
        dim = meta["channels"] * meta["slots"]
        data = np.frombuffer(fh.read(), dtype="<f8").reshape(meta["n_atoms"], dim)
    return Dictionary(stacked=data.T.copy(),
                      lam=meta.get("lambda"), seed=meta.get("seed"))


def export_atoms_csv(dictionary: Dictionary, path) -> None:
    """Plot-ready long format: ``atom,channel,slot,value`` rows."""
    atoms = dictionary.atoms  # validates the channel view
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("atom,channel,slot,value\n")
        for k in range(dictionary.n_atoms):
            for ci, channel in enumerate(CHANNELS):
                for t in range(SLOTS_PER_WEEK):
                    fh.write(f"{k},{channel},{t},{float(atoms[k, ci, t])!r}\n")


def save_codes(user_ids, codes: np.ndarray, index_path, matrix_path, fmt: str = "npy") -> None:
    """Codes persist like signal sets: index file plus (n, K) matrix file."""
    storage.save_index(user_ids, index_path)
    storage.save_matrix(codes, matrix_path, fmt)


def load_codes(index_path, matrix_path) -> tuple[tuple[str, ...], np.ndarray]:
    users = storage.load_index(index_path)
    codes = storage.load_matrix(matrix_path)
    if codes.shape[0] != len(users):
        raise DictionaryError(f"codes rows {codes.shape[0]} do not match index ({len(users)} users)")
    return users, codes
