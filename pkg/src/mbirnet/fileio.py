"""On-disk formats: 16-bit PGM images, one-column CSV vectors, and the
plain-text sparse-operator format (header `rows cols nnz`, then triples)."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .linops import ImageVector, ShapeError, SparseMatrixOperator

PGM_MAXVAL = 65535


def write_pgm(path, image: ImageVector) -> None:
    """Binary PGM, maxval 65535, row-major big-endian; values clipped to [0, 1]."""
    arr = np.clip(image.as_2d(), 0.0, 1.0)
    quantized = np.round(arr * PGM_MAXVAL).astype(">u2")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5 {w} {h} {PGM_MAXVAL}\n".encode())
        fh.write(quantized.tobytes())


def read_pgm(path) -> ImageVector:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: expected binary PGM (P5)")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != PGM_MAXVAL:
        raise ValueError(f"{path}: expected maxval {PGM_MAXVAL}, got {maxval}")
    data = np.frombuffer(blob, dtype=">u2", count=h * w, offset=pos)
    return ImageVector(data.astype(np.float64) / PGM_MAXVAL, (h, w))


def write_vector_csv(path, vec) -> None:
    """One float per line, printed with enough digits to round-trip exactly."""
    vec = np.ravel(np.asarray(vec, dtype=np.float64))
    with open(path, "w") as fh:
        for v in vec:
            fh.write(f"{v:.17g}\n")


def read_vector_csv(path) -> np.ndarray:
    with open(path) as fh:
        values = [float(line) for line in fh if line.strip()]
    return np.array(values, dtype=np.float64)


def write_operator(path, op) -> None:
    """Sparse/dense matrix as text triples under a `rows cols nnz` header."""
    if isinstance(op, SparseMatrixOperator):
        mat = op.matrix.tocoo()
    elif hasattr(op, "to_sparse"):
        mat = op.to_sparse().tocoo()
    elif hasattr(op, "matrix"):
        mat = sp.coo_matrix(op.matrix)
    else:
        mat = sp.coo_matrix(np.asarray(op))
    with open(path, "w") as fh:
        fh.write(f"{mat.shape[0]} {mat.shape[1]} {mat.nnz}\n")
        for r, c, v in zip(mat.row, mat.col, mat.data):
            fh.write(f"{r} {c} {v:.17g}\n")


def read_operator(path) -> SparseMatrixOperator:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 3:
            raise ValueError(f"{path}: malformed operator header")
        rows, cols, nnz = (int(t) for t in header)
        r = np.empty(nnz, dtype=np.int64)
        c = np.empty(nnz, dtype=np.int64)
        v = np.empty(nnz, dtype=np.float64)
        for i in range(nnz):
            parts = fh.readline().split()
            if len(parts) != 3:
                raise ValueError(f"{path}: truncated triple list at entry {i}")
            r[i], c[i], v[i] = int(parts[0]), int(parts[1]), float(parts[2])
    if nnz and (r.max() >= rows or c.max() >= cols):
        raise ShapeError(f"{path}: triple index outside declared shape")
    return SparseMatrixOperator(sp.coo_matrix((v, (r, c)), shape=(rows, cols)).tocsr())
