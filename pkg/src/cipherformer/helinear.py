"""Linear algebra over packed ciphertexts.

Everything in this module keeps its data in the leading slots of hypercolumn
row 0, so the only slot movement ever needed is ``col_rotate`` -- a single
key switch, with no row-crossing masks.  Matrix-vector products use the
diagonal method with the multiply *before* the rotation::

    y = sum_d  rot( v * roll(diag_d, d), d )

Pre-rolling the plaintext diagonal keeps every ciphertext at product depth
one, and because each diagonal zeroes every slot it does not own, cyclic
wraparound never smears garbage into the result, so no input tiling is
required.

Packings
--------
rows            one ciphertext per matrix row, entries in slots 0..cols-1
diag            one ciphertext per generalized diagonal: ct t holds
                M[(s+t) % rows, s] in slot s
colblocks       columns laid out in fixed-size blocks, slot j*block + i
                holds M[i, j]; the layout for batched per-position products
sum_rows_colsT  the split form produced by the masked ciphertext-by-
                ciphertext product: a row-packed part plus a column-packed
                part of the transpose, summed slotwise on decryption

The ciphertext-by-ciphertext product runs in two message flights: the
masking side sends [X - R1], [Y - R2]; the key holder decrypts, multiplies
in the clear, and replies with the product re-encrypted row-wise plus
diagonal repackings of both masked factors; the masking side then finishes
the cross terms homomorphically (plain-by-diagonal products, no rotations)
and adds R1*R2 itself.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ProtocolError
from .pahe import (Ciphertext, Evaluator, KeyMaterial, PaheParams,
                   ct_from_bytes, ct_to_bytes, encode_plain_many)

ROWS = "rows"
DIAG = "diag"
COLBLOCKS = "colblocks"
SUM_ROWS_COLST = "sum_rows_colsT"

_PACKING_IDS = {ROWS: 1, DIAG: 2, COLBLOCKS: 3, SUM_ROWS_COLST: 4}
_PACKING_BY_ID = {v: k for k, v in _PACKING_IDS.items()}


def matmul_mod(a, b, p: int) -> np.ndarray:
    """Exact (A @ B) mod p for uint64 operands (object arithmetic inside)."""
    aa = np.asarray(a, dtype=np.uint64).astype(object)
    bb = np.asarray(b, dtype=np.uint64).astype(object)
    out = (aa @ bb) % p
    return out.astype(np.uint64)


def _entries(m) -> np.ndarray:
    arr = np.asarray(getattr(m, "entries", m), dtype=np.uint64)
    if arr.ndim != 2:
        raise ParameterError(f"expected a 2-d matrix, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PlainMatrix:
    """A matrix held in the clear, entries already reduced mod p."""

    entries: np.ndarray        # (rows, cols) uint64
    scale: int = 0             # fractional bits carried by the entries

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @staticmethod
    def from_signed(arr, p: int, scale: int = 0) -> "PlainMatrix":
        a = np.asarray(arr, dtype=object)
        if a.ndim != 2:
            raise ParameterError(f"expected a 2-d matrix, got shape {a.shape}")
        if np.any(np.abs(a) >= p):
            raise ParameterError("matrix entries exceed the plaintext modulus")
        return PlainMatrix((a % p).astype(np.uint64), scale)


@dataclass
class EncMatrix:
    """An encrypted matrix plus the layout needed to interpret its slots."""

    packing: str
    cts: list
    rows: int
    cols: int
    scale: int = 0
    block: int = 0          # colblocks: slots per column block
    cols_per_ct: int = 0    # colblocks: columns carried by each ciphertext

    def __post_init__(self):
        if self.packing not in _PACKING_IDS:
            raise ParameterError(f"unknown packing {self.packing!r}")


# ----------------------------------------------------------------------------
# layout <-> slot vectors


def _rows_vectors(M: np.ndarray) -> list[np.ndarray]:
    return [M[i] for i in range(M.shape[0])]


def _diag_vectors(M: np.ndarray) -> list[np.ndarray]:
    k, c = M.shape
    s = np.arange(c)
    return [M[(s + t) % k, s] for t in range(k)]


def _colblock_vectors(M: np.ndarray, block: int, cols_per_ct: int,
                      width: int) -> list[np.ndarray]:
    r, c = M.shape
    out = []
    for j0 in range(0, c, cols_per_ct):
        vec = np.zeros(width, dtype=np.uint64)
        for j in range(j0, min(c, j0 + cols_per_ct)):
            off = (j - j0) * block
            vec[off:off + r] = M[:, j]
        out.append(vec)
    return out


def layout_vectors(enc: EncMatrix, M, transpose: bool = False) -> list[np.ndarray]:
    """Slot vectors that place M's entries exactly where `enc` keeps its own.

    Used to add plaintext offsets (masks, folded constants) onto an encrypted
    matrix without caring about its packing.  `transpose` interprets M as the
    transpose of what the ciphertexts hold.
    """
    A = _entries(M)
    if transpose:
        A = A.T.copy()
    if A.shape != (enc.rows, enc.cols):
        raise ParameterError(
            f"offset shape {A.shape} != matrix shape {(enc.rows, enc.cols)}")
    if enc.packing == ROWS:
        return _rows_vectors(A)
    if enc.packing == DIAG:
        return _diag_vectors(A)
    if enc.packing == COLBLOCKS:
        return _colblock_vectors(A, enc.block, enc.cols_per_ct,
                                 enc.block * enc.cols_per_ct)
    raise ParameterError(f"cannot lay out offsets for packing {enc.packing!r}")


# ----------------------------------------------------------------------------
# packing / unpacking


def _check_capacity(params: PaheParams, need: int, what: str) -> None:
    if need > params.row_size:
        raise ParameterError(
            f"{what} needs {need} slots but row capacity is {params.row_size}")


def pack_rows(ev: Evaluator, M, scale: int = 0) -> EncMatrix:
    A = _entries(M)
    _check_capacity(ev.params, A.shape[1], "row packing")
    cts = ev.encrypt_many(_rows_vectors(A))
    return EncMatrix(ROWS, cts, A.shape[0], A.shape[1], scale)


def pack_diagonal(ev: Evaluator, M, scale: int = 0) -> EncMatrix:
    """One ciphertext per generalized diagonal: ct t slot s = M[(s+t)%r, s]."""
    A = _entries(M)
    _check_capacity(ev.params, A.shape[1], "diagonal packing")
    cts = ev.encrypt_many(_diag_vectors(A))
    return EncMatrix(DIAG, cts, A.shape[0], A.shape[1], scale)


def pack_colblocks(ev: Evaluator, M, block: int, scale: int = 0,
                   cols_per_ct: int | None = None) -> EncMatrix:
    A = _entries(M)
    r, c = A.shape
    if block < r:
        raise ParameterError(f"block {block} shorter than column height {r}")
    cap = ev.params.row_size // block
    if cap == 0:
        raise ParameterError(f"block {block} exceeds row capacity")
    cpc = min(c, cap) if cols_per_ct is None else cols_per_ct
    if cpc < 1 or cpc * block > ev.params.row_size:
        raise ParameterError(f"{cpc} columns of block {block} do not fit a row")
    cts = ev.encrypt_many(_colblock_vectors(A, block, cpc, cpc * block))
    return EncMatrix(COLBLOCKS, cts, r, c, scale, block=block, cols_per_ct=cpc)


def decrypt_matrix(keys: KeyMaterial, enc: EncMatrix) -> np.ndarray:
    """Decrypt any packing back to a (rows, cols) uint64 array."""
    p = keys.params.p
    dec = keys.decrypt_many(enc.cts)
    r, c = enc.rows, enc.cols
    if enc.packing == ROWS:
        return dec[:, :c].copy()
    if enc.packing == DIAG:
        M = np.zeros((r, c), dtype=np.uint64)
        s = np.arange(c)
        for t in range(dec.shape[0]):
            M[(s + t) % r, s] = dec[t, :c]
        return M
    if enc.packing == COLBLOCKS:
        M = np.zeros((r, c), dtype=np.uint64)
        for g in range(dec.shape[0]):
            for j in range(g * enc.cols_per_ct, min(c, (g + 1) * enc.cols_per_ct)):
                off = (j - g * enc.cols_per_ct) * enc.block
                M[:, j] = dec[g, off:off + r]
        return M
    if enc.packing == SUM_ROWS_COLST:
        rows_part = dec[:r, :c]
        cols_part = dec[r:r + c, :r]
        return ((rows_part.astype(object) + cols_part.T.astype(object)) % p
                ).astype(np.uint64)
    raise ParameterError(f"unknown packing {enc.packing!r}")


def add_offset(ev: Evaluator, enc: EncMatrix, M, transpose: bool = False) -> EncMatrix:
    """enc + M with M in the clear, laid out to match enc's packing."""
    vecs = layout_vectors(enc, M, transpose)
    cts = ev.add_plain_many(enc.cts, vecs)
    return EncMatrix(enc.packing, cts, enc.rows, enc.cols, enc.scale,
                     block=enc.block, cols_per_ct=enc.cols_per_ct)


# ----------------------------------------------------------------------------
# plain-matrix by encrypted-vector products (diagonal method)


def matvec_rotation_amounts(params: PaheParams, rows: int, cols: int) -> list[int]:
    """Column-rotation key amounts matvec_hybrid(rows x cols) will use."""
    half = params.row_size
    return sorted({d % half for d in range(-(rows - 1), cols)} - {0})


def matvec_hybrid(ev: Evaluator, W, v: Ciphertext) -> Ciphertext:
    """y[s] = sum_j W[s, j] * v[j]; input in slots 0..cols-1, output 0..rows-1.

    One pre-rolled diagonal per distinct shift: rows + cols - 1 scalar
    multiplies and at most rows + cols - 2 rotations, all depth one.
    """
    A = _entries(W)
    par = ev.params
    half = par.row_size
    r, c = A.shape
    _check_capacity(par, r, "matvec output")
    _check_capacity(par, c, "matvec input")
    vecs, shifts = [], []
    for d in range(-(r - 1), c):
        s_lo, s_hi = max(0, -d), min(r, c - d)
        if s_lo >= s_hi:
            continue
        vec = np.zeros(half, dtype=np.uint64)
        s = np.arange(s_lo, s_hi)
        vec[s] = A[s, s + d]
        if not vec.any():
            continue
        vecs.append(np.roll(vec, d))
        shifts.append(d % half)
    acc = None
    for pv, sh in zip(encode_plain_many(par, vecs), shifts):
        term = ev.simd_scmult(v, pv)
        if sh:
            term = ev.col_rotate(term, sh)
        acc = term if acc is None else ev.add_ct(acc, term)
    if acc is None:
        acc = ev.simd_scmult(v, 0)
    ev.counters["matvec"] = ev.counters.get("matvec", 0) + 1
    return acc


def colblock_rotation_amounts(params: PaheParams, in_cols: int, block: int,
                              cols_per_ct: int, in_cols_per_ct: int | None = None
                              ) -> list[int]:
    """Column-rotation key amounts colblock_matmul will use."""
    half = params.row_size
    icc = in_cols if in_cols_per_ct is None else in_cols_per_ct
    nin = min(in_cols, icc)
    return sorted({(d * block) % half
                   for d in range(-(cols_per_ct - 1), nin)} - {0})


def colblock_matmul(ev: Evaluator, X: EncMatrix, W, w_scale: int = 0,
                    cols_per_ct: int | None = None) -> EncMatrix:
    """Y = X @ W for X in colblocks packing; output in colblocks packing.

    Every row of X is processed simultaneously: one diagonal sweep per
    (input ct, output ct) pair, sharing rotation amounts d * block.
    """
    A = _entries(W)
    par = ev.params
    half = par.row_size
    if X.packing != COLBLOCKS:
        raise ParameterError(f"colblock_matmul needs colblocks input, got {X.packing!r}")
    if A.shape[0] != X.cols:
        raise ParameterError(
            f"inner dims disagree: X is {X.rows}x{X.cols}, W is {A.shape[0]}x{A.shape[1]}")
    d_out = A.shape[1]
    B = X.block
    cap = half // B
    C = min(d_out, cap) if cols_per_ct is None else cols_per_ct
    if C < 1 or C * B > half:
        raise ParameterError(f"{C} output columns of block {B} do not fit a row")
    n_groups = -(-d_out // C)
    vecs, plan = [], []
    for og in range(n_groups):
        j0, j1 = og * C, min(d_out, (og + 1) * C)
        for gi, xct in enumerate(X.cts):
            v0 = gi * X.cols_per_ct
            nin = min(X.cols, v0 + X.cols_per_ct) - v0
            for d in range(-(j1 - j0 - 1), nin):
                vec = np.zeros(half, dtype=np.uint64)
                any_entry = False
                for jl in range(j1 - j0):
                    src = jl + d
                    if 0 <= src < nin:
                        w = A[v0 + src, j0 + jl]
                        if w:
                            vec[jl * B:jl * B + X.rows] = w
                            any_entry = True
                if not any_entry:
                    continue
                vecs.append(np.roll(vec, d * B))
                plan.append((og, gi, (d * B) % half))
    encs = encode_plain_many(par, vecs)
    terms = ev.simd_scmult_many([X.cts[gi] for _, gi, _ in plan], encs)
    rot = [i for i, (_, _, sh) in enumerate(plan) if sh]
    for i, term in zip(rot, ev.col_rotate_many([terms[i] for i in rot],
                                               [plan[i][2] for i in rot])):
        terms[i] = term
    accs: list[Ciphertext | None] = [None] * n_groups
    for term, (og, _, _) in zip(terms, plan):
        accs[og] = term if accs[og] is None else ev.add_ct(accs[og], term)
    cts = [acc if acc is not None else ev.simd_scmult(X.cts[0], 0) for acc in accs]
    ev.counters["matvec"] = ev.counters.get("matvec", 0) + 1
    return EncMatrix(COLBLOCKS, cts, X.rows, d_out, X.scale + w_scale,
                     block=B, cols_per_ct=C)


def plain_times_diag(ev: Evaluator, R, D: EncMatrix) -> list[Ciphertext]:
    """Rows of R @ M where M (k x c) is held diagonally packed.

    Row i is assembled as sum_t D_t * pt with pt[s] = R[i, (s+t) % k]: one
    scalar multiply per diagonal, no rotations at all.
    """
    A = _entries(R)
    k, c = D.rows, D.cols
    if A.shape[1] != k:
        raise ParameterError(
            f"inner dims disagree: R is {A.shape[0]}x{A.shape[1]}, packed matrix {k}x{c}")
    s = np.arange(c)
    vecs = [A[i, (s + t) % k] for i in range(A.shape[0]) for t in range(k)]
    encs = encode_plain_many(ev.params, vecs)
    terms = ev.simd_scmult_many(list(D.cts) * A.shape[0], encs)
    out = []
    for i in range(A.shape[0]):
        acc = None
        for t in range(k):
            term = terms[i * k + t]
            acc = term if acc is None else ev.add_ct(acc, term)
        out.append(acc)
    return out


# ----------------------------------------------------------------------------
# ciphertext-by-ciphertext products (two flights, masked)


@dataclass
class CtmmMasked:
    """Flight one: both factors with fresh additive masks folded in."""

    x: EncMatrix
    y: EncMatrix
    transpose_x: bool
    transpose_y: bool


@dataclass
class CtmmReply:
    """Flight two: the clear product re-encrypted, plus diagonal repackings."""

    prod: EncMatrix     # rows packing, (rows x cols)
    x_diag: EncMatrix   # diagonals of (X - R1)^T, k cts of length rows
    y_diag: EncMatrix   # diagonals of (Y - R2), k cts of length cols


@dataclass
class MaskState:
    """Server-side secrets for one product; single use enforced."""

    r1: np.ndarray      # (rows, k)
    r2: np.ndarray      # (k, cols)
    scale: int
    used: bool = False

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.r1.shape[0], self.r1.shape[1], self.r2.shape[1]


def _mult_shape(enc: EncMatrix, transpose: bool) -> tuple[int, int]:
    return (enc.cols, enc.rows) if transpose else (enc.rows, enc.cols)


def ctmm_server_mask(ev: Evaluator, X: EncMatrix, Y: EncMatrix,
                     rng: np.random.Generator, *, transpose_x: bool = False,
                     transpose_y: bool = False) -> tuple[CtmmMasked, MaskState]:
    """Mask both factors of X @ Y with fresh uniform matrices.

    The transpose flags say the multiplication should use the transpose of
    what the ciphertexts hold (the factors stay in whatever layout the
    pipeline produced them in; only the mask is reoriented).
    """
    p = ev.params.p
    r, k = _mult_shape(X, transpose_x)
    k2, c = _mult_shape(Y, transpose_y)
    if k != k2:
        raise ParameterError(f"inner dims disagree: {r}x{k} times {k2}x{c}")
    r1 = rng.integers(0, p, size=(r, k), dtype=np.uint64)
    r2 = rng.integers(0, p, size=(k, c), dtype=np.uint64)
    xm = add_offset(ev, X, (p - r1) % p, transpose=transpose_x)
    ym = add_offset(ev, Y, (p - r2) % p, transpose=transpose_y)
    st = MaskState(r1, r2, X.scale + Y.scale)
    return CtmmMasked(xm, ym, transpose_x, transpose_y), st


def ctmm_client_round(ev: Evaluator, keys: KeyMaterial, msg: CtmmMasked) -> CtmmReply:
    """Decrypt the masked factors, multiply in the clear, re-encrypt.

    Three payloads in one flight: the product (row packing) and diagonal
    repackings of both masked factors, the X side transposed so the other
    party can finish both cross terms without any rotations.
    """
    p = keys.params.p
    xt = decrypt_matrix(keys, msg.x)
    if msg.transpose_x:
        xt = xt.T.copy()
    yt = decrypt_matrix(keys, msg.y)
    if msg.transpose_y:
        yt = yt.T.copy()
    prod = matmul_mod(xt, yt, p)
    sx, sy = msg.x.scale, msg.y.scale
    return CtmmReply(prod=pack_rows(ev, prod, sx + sy),
                     x_diag=pack_diagonal(ev, xt.T.copy(), sx),
                     y_diag=pack_diagonal(ev, yt, sy))


def ctmm_server_finalize(ev: Evaluator, reply: CtmmReply, st: MaskState) -> EncMatrix:
    """Assemble X @ Y = P + R1*(Y-R2) + (X-R1)*R2 + R1*R2.

    The first cross term lands row-packed, the second column-packed (rows of
    the transpose); the caller reads the result as the slotwise sum of the
    two parts.  The running per-row product counter advances by the number
    of output rows.
    """
    if st.used:
        raise ProtocolError("matrix-product mask state used twice")
    st.used = True
    p = ev.params.p
    r, k, c = st.shape
    if reply.prod.rows != r or reply.prod.cols != c:
        raise ProtocolError(
            f"product reply is {reply.prod.rows}x{reply.prod.cols}, expected {r}x{c}")
    if reply.y_diag.rows != k or reply.y_diag.cols != c:
        raise ProtocolError("second-factor repacking has the wrong shape")
    if reply.x_diag.rows != k or reply.x_diag.cols != r:
        raise ProtocolError("first-factor repacking has the wrong shape")
    r1r2 = matmul_mod(st.r1, st.r2, p)
    rows_cross = plain_times_diag(ev, st.r1, reply.y_diag)
    rows_cts = [ev.add_plain(ev.add_ct(reply.prod.cts[i], rows_cross[i]), r1r2[i])
                for i in range(r)]
    cols_cts = plain_times_diag(ev, st.r2.T.copy(), reply.x_diag)
    ev.counters["hybrid_matvec"] = ev.counters.get("hybrid_matvec", 0) + r
    return EncMatrix(SUM_ROWS_COLST, rows_cts + cols_cts, r, c, st.scale)


def count_hybrid_calls(mode: str, seq_len: int, dim: int) -> int:
    """Per-row product invocations one attention block performs.

    The quadratic form runs two products with seq_len output rows each; the
    reordered form runs one dim-row product and one seq_len-row product.
    """
    if mode == "baseline":
        return 2 * seq_len
    if mode in ("opt1", "opt2"):
        return seq_len + dim
    raise ParameterError(f"unknown mode {mode!r}")


# ----------------------------------------------------------------------------
# wire form


def encmatrix_to_bytes(enc: EncMatrix) -> bytes:
    head = struct.pack("<BIIiII", _PACKING_IDS[enc.packing], enc.rows, enc.cols,
                       enc.scale, enc.block, enc.cols_per_ct)
    parts = [head, struct.pack("<I", len(enc.cts))]
    for ct in enc.cts:
        blob = ct_to_bytes(ct)
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def encmatrix_from_bytes(data: bytes, params: PaheParams) -> EncMatrix:
    try:
        pid, rows, cols, scale, block, cpc = struct.unpack_from("<BIIiII", data, 0)
        off = struct.calcsize("<BIIiII")
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        cts = []
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            cts.append(ct_from_bytes(data[off:off + ln], params))
            off += ln
    except struct.error as exc:
        raise ProtocolError(f"truncated matrix payload: {exc}") from None
    if pid not in _PACKING_BY_ID:
        raise ProtocolError(f"unknown packing id {pid}")
    if off != len(data):
        raise ProtocolError("trailing bytes after matrix payload")
    return EncMatrix(_PACKING_BY_ID[pid], cts, rows, cols, scale,
                     block=block, cols_per_ct=cpc)
