"""Factorized neural textures: plane/line factor evaluation, frequency
encodings, MLP and spherical-harmonics color decoders, SH coefficient
fitting, and vertex color baking.

Feature evaluation follows the vector-matrix factorization: three C-channel
plane factors paired with the complementary line factors,

    feat_3C(x) = [M_xy(x,y) * v_z(z),  M_yz(y,z) * v_x(x),  M_zx(z,x) * v_y(y)]

sampled bilinearly/linearly over the unit domain box (sample i of an R-long
axis sits at i/(R-1), endpoints aligned), then projected by a bias-free
basis matrix to F output features.

Frequency encoding convention (fixed here, documented because loaders of
third-party weights must match it): octave k scales by 2^k * pi, sin before
cos within an octave, raw input first, feature octaves before direction
octaves.

SH convention: real spherical harmonics, graphics normalization without the
Condon-Shortley sign.  The nine degree<=2 basis functions evaluated by
sh_basis() are, for unit direction (x, y, z):

    Y00          = 0.2820947917738781
    Y1m1, Y10, Y11   = 0.4886025119029199 * (y, z, x)
    Y2m2, Y2m1, Y21  = 1.0925484305920792 * (xy, yz, xz)
    Y20          = 0.3153915652525200 * (3z^2 - 1)
    Y22          = 0.5462742152960396 * (x^2 - y^2)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import IndexedMesh

__all__ = [
    "VmTexture", "MlpDecoder", "ShDecoder", "eval_features",
    "encode_frequencies", "decode_color", "fit_sh", "bake_vertex_colors",
    "sh_basis", "save_weights", "load_weights", "encoded_width",
]

SH_C0 = 0.2820947917738781
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, 1.0925484305920792, 0.31539156525252005,
         1.0925484305920792, 0.5462742152960396)


@dataclass(frozen=True)
class VmTexture:
    """Vector-matrix factor triplet plus basis projection.

    Matrices are (C, R, R); the two indices follow the name: m_xy[c, ix, iy],
    m_yz[c, iy, iz], m_zx[c, iz, ix].  Vectors are (C, R).  The basis is
    (F, 3C), applied to the concatenation [xy*z, yz*x, zx*y] without bias.
    The domain box maps world coordinates to the unit cube.
    """

    m_xy: np.ndarray
    m_yz: np.ndarray
    m_zx: np.ndarray
    v_x: np.ndarray
    v_y: np.ndarray
    v_z: np.ndarray
    basis: np.ndarray
    box_lo: np.ndarray = field(default_factory=lambda: np.zeros(3))
    box_hi: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        arrays = {}
        for name in ("m_xy", "m_yz", "m_zx", "v_x", "v_y", "v_z", "basis"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"non-finite entries in {name}")
            arrays[name] = a
        c, r, r2 = arrays["m_xy"].shape
        if r != r2:
            raise ValueError("plane factors must be square")
        for name in ("m_yz", "m_zx"):
            if arrays[name].shape != (c, r, r):
                raise ValueError(f"{name} shape {arrays[name].shape} != {(c, r, r)}")
        for name in ("v_x", "v_y", "v_z"):
            if arrays[name].shape != (c, r):
                raise ValueError(f"{name} shape {arrays[name].shape} != {(c, r)}")
        if arrays["basis"].shape[1] != 3 * c:
            raise ValueError(f"basis expects 3C={3 * c} inputs, "
                             f"got {arrays['basis'].shape[1]}")
        for name, a in arrays.items():
            object.__setattr__(self, name, a)
        object.__setattr__(self, "box_lo", np.asarray(self.box_lo, dtype=np.float64))
        object.__setattr__(self, "box_hi", np.asarray(self.box_hi, dtype=np.float64))

    @property
    def channels(self) -> int:
        return self.m_xy.shape[0]

    @property
    def resolution(self) -> int:
        return self.m_xy.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.basis.shape[0]


def _sample_axis(u, r):
    """Linear-sample weights on an R-point axis over [0, 1], endpoints aligned."""
    g = u * (r - 1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, r - 2)
    w = g - i0
    return i0, w


def _sample_plane(m, u, v):
    """Bilinear sample of (C, R, R) factors at per-point coords; returns (N, C)."""
    r = m.shape[1]
    i0, wu = _sample_axis(u, r)
    j0, wv = _sample_axis(v, r)
    val = (m[:, i0, j0] * (1 - wu) * (1 - wv)
           + m[:, i0 + 1, j0] * wu * (1 - wv)
           + m[:, i0, j0 + 1] * (1 - wu) * wv
           + m[:, i0 + 1, j0 + 1] * wu * wv)
    return val.T


def _sample_line(v, u):
    r = v.shape[1]
    i0, w = _sample_axis(u, r)
    return (v[:, i0] * (1 - w) + v[:, i0 + 1] * w).T


def eval_features(tex: VmTexture, x, return_clamped: bool = False):
    """Evaluate the factorized feature field at points x of shape (..., 3).

    Points outside the domain box are clamped onto it; pass
    return_clamped=True to also get the mask of clamped points.
    """
    pts = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    span = tex.box_hi - tex.box_lo
    q = (pts - tex.box_lo) / span
    clamped = np.any((q < 0) | (q > 1), axis=1)
    q = np.clip(q, 0.0, 1.0)
    qx, qy, qz = q[:, 0], q[:, 1], q[:, 2]
    block_xy = _sample_plane(tex.m_xy, qx, qy) * _sample_line(tex.v_z, qz)
    block_yz = _sample_plane(tex.m_yz, qy, qz) * _sample_line(tex.v_x, qx)
    block_zx = _sample_plane(tex.m_zx, qz, qx) * _sample_line(tex.v_y, qy)
    concat = np.concatenate([block_xy, block_yz, block_zx], axis=1)  # (N, 3C)
    feats = concat @ tex.basis.T
    if np.asarray(x).ndim == 1:
        feats = feats[0]
        clamped = bool(clamped[0])
    if return_clamped:
        return feats, clamped
    return feats


def encoded_width(f: int, n_feat_freq: int = 2, n_dir_freq: int = 6) -> int:
    return f * (1 + 2 * n_feat_freq) + 3 * (1 + 2 * n_dir_freq)


def encode_frequencies(features, directions, n_feat_freq: int = 2,
                       n_dir_freq: int = 6):
    """Lift features and viewing directions with sin/cos octaves.

    Output layout: [feat, (sin, cos)(2^k pi feat) for k < n_feat_freq,
    dir, (sin, cos)(2^k pi dir) for k < n_dir_freq].  Non-unit directions
    are normalized.  Width is F(1+2*n_feat_freq) + 3(1+2*n_dir_freq).
    """
    feats = np.atleast_2d(np.asarray(features, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if dirs.shape[1] != 3:
        raise ValueError("directions must be 3-vectors")
    if len(dirs) == 1 and len(feats) > 1:
        dirs = np.broadcast_to(dirs, (len(feats), 3))
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-length viewing direction")
    dirs = dirs / norms

    def lift(block, n_freq):
        parts = [block]
        for k in range(n_freq):
            arg = (2.0**k) * np.pi * block
            parts.append(np.sin(arg))
            parts.append(np.cos(arg))
        return np.concatenate(parts, axis=1)

    out = np.concatenate([lift(feats, n_feat_freq), lift(dirs, n_dir_freq)], axis=1)
    if np.asarray(features).ndim == 1:
        return out[0]
    return out


@dataclass(frozen=True)
class MlpDecoder:
    """High-quality decoder: Linear(in,64) ReLU Linear(64,64) ReLU Linear(64,3),
    sigmoid output.  Weight matrices are (out, in) row-major."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    kind = "hq"

    def __post_init__(self):
        w1 = np.asarray(self.w1, dtype=np.float64)
        if w1.shape[0] != 64:
            raise ValueError(f"first layer must have 64 outputs, got {w1.shape}")
        shapes = {"w1": (64, w1.shape[1]), "b1": (64,), "w2": (64, 64),
                  "b2": (64,), "w3": (3, 64), "b3": (3,)}
        for name, expected in shapes.items():
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.shape != expected:
                raise ValueError(f"{name} shape {a.shape} != {expected}")
            object.__setattr__(self, name, a)

    @property
    def input_width(self) -> int:
        return self.w1.shape[1]

    @classmethod
    def zeros(cls, input_width: int = 99) -> "MlpDecoder":
        return cls(w1=np.zeros((64, input_width)), b1=np.zeros(64),
                   w2=np.zeros((64, 64)), b2=np.zeros(64),
                   w3=np.zeros((3, 64)), b3=np.zeros(3))

    @classmethod
    def from_weights(cls, weights: dict) -> "MlpDecoder":
        return cls(**{k: weights[k] for k in ("w1", "b1", "w2", "b2", "w3", "b3")})


@dataclass(frozen=True)
class ShDecoder:
    """Fast decoder: the 27 inputs are degree-2 SH coefficients, 9 per channel
    in channel-major order [R:9, G:9, B:9]."""

    kind = "fast"
    input_width: int = 27


def sh_basis(directions) -> np.ndarray:
    """The nine real degree<=2 SH basis values for unit directions, (N, 9).

    Order: Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22.
    """
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y, SH_C1 * z, SH_C1 * x,
        SH_C2[0] * x * y, SH_C2[1] * y * z,
        SH_C2[2] * (3 * z**2 - 1), SH_C2[3] * x * z,
        SH_C2[4] * (x**2 - y**2),
    ], axis=1)


def decode_color(dec, inputs, directions=None, clamp: bool = True):
    """Run a decoder on its inputs.

    HQ: inputs are frequency-encoded vectors of the decoder's input width.
    Fast: inputs are 27 SH coefficients per point and `directions` is
    required; set clamp=False to get the raw linear SH expansion.
    """
    arr = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    single = np.asarray(inputs).ndim == 1
    if dec.kind == "hq":
        if arr.shape[1] != dec.input_width:
            raise ValueError(
                f"decoder expects width {dec.input_width}, got {arr.shape[1]}")
        h = np.maximum(arr @ dec.w1.T + dec.b1, 0.0)
        h = np.maximum(h @ dec.w2.T + dec.b2, 0.0)
        logits = h @ dec.w3.T + dec.b3
        rgb = 1.0 / (1.0 + np.exp(-logits))
    elif dec.kind == "fast":
        if arr.shape[1] != 27:
            raise ValueError(f"fast decoder expects 27 coefficients, got {arr.shape[1]}")
        if directions is None:
            raise ValueError("fast decoder needs viewing directions")
        basis = sh_basis(directions)
        if len(basis) == 1 and len(arr) > 1:
            basis = np.broadcast_to(basis, (len(arr), 9))
        coeffs = arr.reshape(-1, 3, 9)
        rgb = np.einsum("nk,nck->nc", basis, coeffs)
        if clamp:
            rgb = np.clip(rgb, 0.0, 1.0)
    else:
        raise ValueError(f"unknown decoder kind {dec.kind!r}")
    return rgb[0] if single else rgb


def fit_sh(samples, tex: VmTexture | None = None, mode: str = "coefficients-only"):
    """Per-point least-squares fit of degree-2 SH coefficients to RGB targets.

    samples: sequence of (point, direction, rgb) triples.  Points are grouped
    by exact coordinates; each group needs directions spanning the full
    9-dimensional basis.  tex is accepted for interface parity but unused in
    coefficients-only mode (projecting coefficients back into texture factors
    is a separate concern).  Returns a dict with points, per-point (27,)
    coefficients, and residuals.
    """
    if mode != "coefficients-only":
        raise ValueError(f"unsupported mode {mode!r}")
    pts = np.asarray([s[0] for s in samples], dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray([s[1] for s in samples], dtype=np.float64).reshape(-1, 3)
    rgb = np.asarray([s[2] for s in samples], dtype=np.float64).reshape(-1, 3)
    if len(pts) < 27:
        raise ValueError(f"need at least 27 samples, got {len(pts)}")
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    coeffs = np.zeros((len(uniq), 27))
    residuals = np.zeros(len(uniq))
    for g in range(len(uniq)):
        rows = inverse == g
        basis = sh_basis(dirs[rows])
        rank = np.linalg.matrix_rank(basis, tol=1e-10)
        if rank < 9:
            raise ValueError(
                f"direction set for point {uniq[g].tolist()} spans only rank "
                f"{rank} of the 9 SH basis functions; add more directions")
        sol, _, _, _ = np.linalg.lstsq(basis, rgb[rows], rcond=None)
        coeffs[g] = sol.T.reshape(-1)         # channel-major (3, 9) -> 27
        residuals[g] = float(np.sqrt(np.mean((basis @ sol - rgb[rows]) ** 2)))
    return {"points": uniq, "coefficients": coeffs, "residuals": residuals,
            "rms_residual": float(np.sqrt(np.mean(residuals**2)))}


def bake_vertex_colors(mesh: IndexedMesh, tex: VmTexture, dec,
                       view_dir=(0.0, 0.0, 1.0)) -> IndexedMesh:
    """Per-vertex shading under one fixed viewing direction."""
    if mesh.is_empty():
        return mesh.with_colors(np.zeros((mesh.vertex_count, 3)))
    feats = eval_features(tex, mesh.vertices)
    view = np.asarray(view_dir, dtype=np.float64)
    if dec.kind == "hq":
        dirs = np.broadcast_to(view, (len(feats), 3))
        enc = encode_frequencies(feats, dirs)
        colors = decode_color(dec, enc)
    else:
        colors = decode_color(dec, feats, directions=view)
    return mesh.with_colors(colors)


# ---------------------------------------------------------------------------
# Weight file format: JSON manifest + single raw block file.
# ---------------------------------------------------------------------------

def save_weights(arrays: dict, path) -> Path:
    """Write named arrays as a JSON manifest plus one raw binary sidecar.

    Blocks are stored row-major little-endian in manifest order, so weights
    exported from any training framework can be laid out to match.
    """
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    blocks = []
    offset = 0
    payload = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr))
        dtype = a.dtype.newbyteorder("<")
        raw = a.astype(dtype).tobytes()
        blocks.append({"name": name, "shape": list(a.shape),
                       "dtype": dtype.str, "offset": offset})
        payload.extend(raw)
        offset += len(raw)
    manifest = {"order": "row-major", "sidecar": path.name + ".bin",
                "blocks": blocks}
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    path.with_suffix(".bin").write_bytes(bytes(payload))
    return path.with_suffix(".json")


def load_weights(path) -> dict:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    with open(path) as fh:
        manifest = json.load(fh)
    raw = (path.parent / manifest["sidecar"]).read_bytes()
    out = {}
    for block in manifest["blocks"]:
        dtype = np.dtype(block["dtype"])
        count = int(np.prod(block["shape"])) if block["shape"] else 1
        start = block["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        out[block["name"]] = arr.reshape(block["shape"]).astype(np.float64)
    return out
