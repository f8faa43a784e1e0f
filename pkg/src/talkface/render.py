"""Parametric cartoon face renderer for the synthetic corpus.

The mouth is drawn as a lip-coloured ellipse with a near-black interior whose
vertical semi-axis is ``aperture * MOUTH_MAX_HALF_HEIGHT``.  The lip colour and
the interior colour are fixed across identities so that
:func:`talkface.metrics.extract_mouth_params` can recover aperture and mouth
centre from pixels alone.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from talkface._kernels import paint_ellipse

SIZE = 96
HALF = SIZE // 2

# face-frame layout, relative to the head centre (row, col offsets in px)
HEAD_CENTER = (44.0, 48.0)
EYE_OFFSET_ROW = -10.0
MOUTH_OFFSET_ROW = 24.0
MOUTH_HALF_WIDTH = 13.0
MOUTH_MAX_HALF_HEIGHT = 7.0
LIP_THICKNESS = 3.0

# max vertical opening in pixels (aperture 1.0)
MAX_APERTURE_PX = 2.0 * MOUTH_MAX_HALF_HEIGHT
_MIN_DRAWN_HALF_HEIGHT = 0.5

LIP_COLOR = (0.82, 0.10, 0.26)
INTERIOR_COLOR = (0.06, 0.02, 0.04)

MAX_SHIFT_PX = 6.0
MAX_ROT_DEG = 8.0


def luminance(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


@dataclass(frozen=True)
class Identity:
    """Per-seed appearance: colours and face geometry."""

    seed: int
    skin: tuple
    background: tuple
    iris: tuple
    head_axes: tuple
    eye_spacing: float
    eye_radius: float
    nose_axes: tuple

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Identity":
        return cls(
            seed=int(d["seed"]),
            skin=tuple(d["skin"]),
            background=tuple(d["background"]),
            iris=tuple(d["iris"]),
            head_axes=tuple(d["head_axes"]),
            eye_spacing=float(d["eye_spacing"]),
            eye_radius=float(d["eye_radius"]),
            nose_axes=tuple(d["nose_axes"]),
        )


def _hsv_to_rgb(h: float, s: float, v: float) -> tuple:
    import colorsys

    return tuple(float(c) for c in colorsys.hsv_to_rgb(h % 1.0, s, v))


def make_identity(seed: int) -> Identity:
    rng = np.random.default_rng([seed, 0x1D])
    # skin stays light and only mildly red so it never passes the lip test
    skin = _hsv_to_rgb(rng.uniform(0.04, 0.12), rng.uniform(0.18, 0.40), rng.uniform(0.80, 0.96))
    background = _hsv_to_rgb(rng.uniform(0.30, 0.75), rng.uniform(0.15, 0.45), rng.uniform(0.55, 0.85))
    iris = _hsv_to_rgb(rng.uniform(0.0, 1.0), rng.uniform(0.4, 0.8), rng.uniform(0.15, 0.35))
    return Identity(
        seed=int(seed),
        skin=skin,
        background=background,
        iris=iris,
        head_axes=(float(rng.uniform(29.0, 34.0)), float(rng.uniform(38.0, 42.0))),
        eye_spacing=float(rng.uniform(10.0, 14.0)),
        eye_radius=float(rng.uniform(3.5, 4.5)),
        nose_axes=(float(rng.uniform(3.0, 4.5)), float(rng.uniform(5.0, 7.0))),
    )


def _to_image(row_off: float, col_off: float, dy: float, dx: float, cos_t: float, sin_t: float):
    """Map a face-frame offset to image (row, col) under rotation + translation."""
    r = HEAD_CENTER[0] + dy + row_off * cos_t + col_off * sin_t
    c = HEAD_CENTER[1] + dx + col_off * cos_t - row_off * sin_t
    return r, c


def mouth_center(dy: float, dx: float, rot_deg: float) -> tuple:
    t = np.deg2rad(rot_deg)
    return _to_image(MOUTH_OFFSET_ROW, 0.0, dy, dx, float(np.cos(t)), float(np.sin(t)))


def render_face(identity: Identity, aperture: float, dy: float, dx: float, rot_deg: float) -> np.ndarray:
    """Render one 96x96x3 float64 frame with values in [0, 1]."""
    img = np.empty((SIZE, SIZE, 3), dtype=np.float64)
    img[:] = identity.background
    t = float(np.deg2rad(rot_deg))
    cos_t, sin_t = float(np.cos(t)), float(np.sin(t))
    ang = t

    paint_ellipse(img, _to_image(0.0, 0.0, dy, dx, cos_t, sin_t), identity.head_axes, ang, identity.skin)
    for side in (-1.0, 1.0):
        eye = _to_image(EYE_OFFSET_ROW, side * identity.eye_spacing, dy, dx, cos_t, sin_t)
        paint_ellipse(img, eye, (identity.eye_radius + 1.5, identity.eye_radius), ang, (0.97, 0.97, 0.97))
        paint_ellipse(img, eye, (identity.eye_radius * 0.6, identity.eye_radius * 0.6), ang, identity.iris)
    shade = tuple(0.88 * c for c in identity.skin)
    paint_ellipse(img, _to_image(8.0, 0.0, dy, dx, cos_t, sin_t), identity.nose_axes, ang, shade)

    mc = _to_image(MOUTH_OFFSET_ROW, 0.0, dy, dx, cos_t, sin_t)
    half_h = float(np.clip(aperture, 0.0, 1.0)) * MOUTH_MAX_HALF_HEIGHT
    paint_ellipse(img, mc, (MOUTH_HALF_WIDTH + LIP_THICKNESS, half_h + LIP_THICKNESS), ang, LIP_COLOR)
    if half_h > 0.0:
        # edge coverage overestimates area for sub-pixel shapes: draw thin
        # openings 0.5 px tall at reduced opacity, which keeps the area
        thin = max(half_h, _MIN_DRAWN_HALF_HEIGHT)
        paint_ellipse(img, mc, (MOUTH_HALF_WIDTH, thin), ang, INTERIOR_COLOR, half_h / thin)
    return img
