"""Feature extractors whose fibers get sampled.

The benchmark subject inverts the brightness colorization exactly: a gray
value x in [0,1] with background color c in [0,1)^3 maps per channel to
(1-x) c_i + x ((c_i + 0.5) mod 1), so the foreground always sits half a hue
wheel away from the background and the inverse divides by exactly +-0.5.
Embeddings of the recovered gray glyph (flatten, fixed orthogonal projection,
or a trained encoder) give the representation h; any re-colorization of the
same glyph lands on the same h, so fibers are known in closed form.

Images flow through the toolkit as flat float64 rows of length 3*H*W in
(H, W, channel) row-major order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics.nn import Layer, Mlp, load_mlp, mlp_apply
from .numerics.tensor import Tensor, mod1, reverse_grad


def _detach_mlp(m: Mlp) -> Mlp:
    """Copy with non-grad parameters; subjects are fixed, never trained."""
    return Mlp([Layer(Tensor(l.weight.data), Tensor(l.bias.data), l.activation)
                for l in m.layers])


def _check_color(c: np.ndarray):
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (3,):
        raise ValueError("color must have exactly three channels")
    if np.any(c < 0.0) or np.any(c >= 1.0):
        raise ValueError(f"color channels must lie in [0,1), got {c}")
    return c


def foreground_color(c: np.ndarray) -> np.ndarray:
    return np.mod(c + 0.5, 1.0)


def colorize(x_gray: np.ndarray, c) -> np.ndarray:
    """Brightness-coded colorization of a gray field; returns (H, W, 3)."""
    c = _check_color(c)
    x = np.asarray(x_gray, dtype=np.float64)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise ValueError("gray values must lie in [0,1]")
    return (1.0 - x)[..., None] * c + x[..., None] * foreground_color(c)


def decolorize(img: np.ndarray, c) -> np.ndarray:
    """Exact inverse of colorize given the background color.

    Each channel recovers the gray field independently (the denominator is
    +-0.5 by construction); the three recoveries are averaged so inexact
    images still map to a single gray field.
    """
    c = _check_color(c)
    img = np.asarray(img, dtype=np.float64)
    den = foreground_color(c) - c
    return ((img - c) / den).mean(axis=-1)


def border_indices(H: int, W: int) -> np.ndarray:
    """Flat pixel indices (into an H*W grid) of the one-pixel border frame."""
    mask = np.zeros((H, W), dtype=bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    return np.flatnonzero(mask.ravel())


def estimate_background(img: np.ndarray) -> np.ndarray:
    """Per-channel median over the border frame of an (H, W, 3) image."""
    img = np.asarray(img, dtype=np.float64)
    H, W, _ = img.shape
    flat = img.reshape(H * W, 3)
    return np.median(flat[border_indices(H, W)], axis=0)


def flatten_image(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64).reshape(-1)


def unflatten_image(x: np.ndarray, H: int, W: int) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).reshape(H, W, 3)


class SubjectModel:
    """Differentiable feature extractor over flat image rows."""

    output_dim: int

    def embed(self, x) -> Tensor:
        raise NotImplementedError

    def embed_np(self, x: np.ndarray) -> np.ndarray:
        return self.embed(Tensor(np.asarray(x, dtype=np.float64))).data


class LinearSubject(SubjectModel):
    def __init__(self, matrix: np.ndarray):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.output_dim = self.matrix.shape[0]

    def embed(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        h = x @ Tensor(self.matrix.T)
        return h.reshape(-1) if squeeze else h


def _orthogonal_projection(out_dim: int, in_dim: int, seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x70726F6A],
                                                            dtype=np.uint64)))
    a = rng.standard_normal((in_dim, in_dim))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q[:out_dim]


class ColorGlyphSubject(SubjectModel):
    """Decolorize with the border-estimated background, then embed the glyph.

    variant: "flatten" (identity embedding), ("proj", d_h) for a fixed random
    orthogonal projection, or ("ae", encoder_mlp) for a trained encoder.
    """

    def __init__(self, H: int, W: int, variant="flatten", proj_seed: int = 0):
        self.H, self.W = H, W
        self._border = border_indices(H, W)
        self._proj = None
        self._encoder = None
        if variant == "flatten":
            self.variant = "flatten"
            self.output_dim = H * W
        elif isinstance(variant, tuple) and variant[0] == "proj":
            self.variant = "proj"
            d_h = int(variant[1])
            if not (1 <= d_h <= H * W):
                raise ValueError("projection dim must be in [1, H*W]")
            self._proj = _orthogonal_projection(d_h, H * W, proj_seed)
            self.output_dim = d_h
        elif isinstance(variant, tuple) and variant[0] == "ae":
            self.variant = "ae"
            self._encoder = _detach_mlp(variant[1])
            if self._encoder.input_dim != H * W:
                raise ValueError("encoder input dim must equal H*W")
            self.output_dim = self._encoder.output_dim
        else:
            raise ValueError(f"unknown embedding variant {variant!r}")

    def recover_gray(self, x) -> Tensor:
        """Differentiable decolorization with self-estimated background; (B, H*W)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        B = x.shape[0]
        hw = self.H * self.W
        x3 = x.reshape(B, hw, 3)
        border = x3[:, self._border, :]  # (B, m, 3)
        c = border.transpose(0, 2, 1).median_lastaxis()  # (B, 3)
        den = mod1(c + 0.5) - c
        gray = ((x3 - c.reshape(B, 1, 3)) / den.reshape(B, 1, 3)).mean(axis=2)
        return gray.reshape(-1) if squeeze else gray

    def recover_background_np(self, x: np.ndarray) -> np.ndarray:
        """Batched border-median color estimate, plain numpy; (B, 3)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        x3 = x.reshape(x.shape[0], self.H * self.W, 3)
        return np.median(x3[:, self._border, :], axis=1)

    def embed(self, x) -> Tensor:
        gray = self.recover_gray(x)
        if self.variant == "flatten":
            return gray
        squeeze = gray.ndim == 1
        g = gray.reshape(1, -1) if squeeze else gray
        if self.variant == "proj":
            h = g @ Tensor(self._proj.T)
        else:
            h = mlp_apply(self._encoder, g)
        return h.reshape(-1) if squeeze else h


class FixedColorSubject(SubjectModel):
    """Decolorize against a known, fixed background color (no estimation)."""

    def __init__(self, c, H: int, W: int):
        self.c = _check_color(c)
        self.H, self.W = H, W
        self.output_dim = H * W

    def embed(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = x.reshape(1, -1)
        B = x.shape[0]
        x3 = x.reshape(B, self.H * self.W, 3)
        den = foreground_color(self.c) - self.c
        gray = ((x3 - Tensor(self.c)) / Tensor(den)).mean(axis=2)
        return gray.reshape(-1) if squeeze else gray


@dataclass
class FiberTarget:
    h: np.ndarray
    origin: np.ndarray | None = None
    subject_id: str = ""


def make_fiber_target(subject: SubjectModel, origin: np.ndarray,
                      subject_id: str = "") -> FiberTarget:
    origin = np.asarray(origin, dtype=np.float64)
    return FiberTarget(h=subject.embed_np(origin), origin=origin, subject_id=subject_id)


def fiber_loss(subject: SubjectModel, x, x_tilde) -> Tensor:
    """Squared embedding mismatch between two inputs; differentiable in x_tilde."""
    ha = subject.embed(x if isinstance(x, Tensor) else Tensor(x))
    hb = subject.embed(x_tilde if isinstance(x_tilde, Tensor) else Tensor(x_tilde))
    return ((ha - hb) ** 2).sum()


def fiber_losses_to_target(subject: SubjectModel, samples: np.ndarray,
                           h: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Per-row squared embedding distance to a target representation."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    out = np.empty(samples.shape[0])
    for a in range(0, samples.shape[0], chunk):
        emb = subject.embed_np(samples[a:a + chunk])
        out[a:a + chunk] = ((emb - h) ** 2).sum(axis=1)
    return out


def nearest_neighbor_baseline(subject: SubjectModel, target: FiberTarget,
                              dataset: np.ndarray):
    """Best dataset item by fiber loss; the target's origin is excluded.

    Returns (sample row, fiber loss, index).
    """
    dataset = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    losses = fiber_losses_to_target(subject, dataset, target.h)
    if target.origin is not None:
        dup = np.flatnonzero(np.all(dataset == target.origin, axis=1))
        losses[dup] = np.inf
    if not np.any(np.isfinite(losses)):
        raise ValueError("no candidates left after excluding the origin")
    idx = int(np.argmin(losses))
    return dataset[idx], float(losses[idx]), idx


def jacobian(subject: SubjectModel, x: np.ndarray) -> np.ndarray:
    """Rows d h_j / d x via one reverse sweep per output component."""
    x = np.asarray(x, dtype=np.float64)
    rows = []
    for j in range(subject.output_dim):
        rows.append(reverse_grad(lambda v: subject.embed(v)[j], x).data)
    return np.stack(rows)


def fiber_dimension(subject: SubjectModel, x: np.ndarray, tol: float = 1e-8) -> int:
    """dim(x) minus the numerical rank of the embedding Jacobian at x."""
    J = jacobian(subject, x)
    sv = np.linalg.svd(J, compute_uv=False)
    rank = int(np.sum(sv > tol * sv[0])) if sv.size and sv[0] > 0 else 0
    return int(np.asarray(x).size - rank)


def make_subject(spec: str, H: int, W: int) -> SubjectModel:
    """Resolve a subject id: colorglyph/flatten, colorglyph/proj:<d>,
    colorglyph/ae:<checkpoint>, linear:<matrix.npy>."""
    if spec == "colorglyph/flatten":
        return ColorGlyphSubject(H, W, "flatten")
    if spec.startswith("colorglyph/proj:"):
        return ColorGlyphSubject(H, W, ("proj", int(spec.split(":", 1)[1])))
    if spec.startswith("colorglyph/ae:"):
        encoder = load_mlp(spec.split(":", 1)[1])
        return ColorGlyphSubject(H, W, ("ae", encoder))
    if spec.startswith("linear:"):
        return LinearSubject(np.load(spec.split(":", 1)[1]))
    raise ValueError(f"unknown subject id '{spec}'")
