"""Synthetic street-scene generator with a planted spurious correlation.

Scenes are simple road/sky compositions with cars (the class of interest)
and distractor objects.  One distractor class (default: striped
obstacle/trash boxes) is drawn far more often in car scenes than in no-car
scenes, planting a known shortcut that downstream stages should recover.
The obstacle stripes reuse road and building grays, so the correlate is
identifiable only by its spatial pattern, not by its color histogram.

All randomness is derived from (seed, image id) substreams; repeated calls
are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from ..rngkit import substream, substream_seed
from .palette import (
    BUILDING,
    CAR,
    CURB,
    NATURE,
    OBSTACLE,
    ROAD,
    SKY,
    ClassPalette,
    LabelRule,
    binary_label,
)

ROAD_GRAY = 0.42
STRIPE_DARK = 0.24
STRIPE_LIGHT = 0.60

CAR_BODY_COLORS = (
    (0.72, 0.10, 0.10),   # red
    (0.10, 0.22, 0.68),   # blue
    (0.82, 0.66, 0.12),   # yellow
    (0.12, 0.45, 0.20),   # green
    (0.85, 0.85, 0.85),   # white
    (0.10, 0.10, 0.12),   # black
    (0.55, 0.56, 0.58),   # silver, near road gray
)


@dataclass(frozen=True)
class SceneSpec:
    """Layout and correlation parameters of the synthetic dataset."""

    image_size: tuple[int, int] = (100, 160)
    n_sequences: int = 24
    frames_per_sequence: int = 12
    p_car_scene: float = 0.5
    correlate_class_id: int = OBSTACLE
    correlate_prob_positive: float = 0.9
    correlate_prob_negative: float = 0.1
    cars_range: tuple[int, int] = (1, 2)
    car_height_range: tuple[int, int] = (16, 30)
    obstacles_range: tuple[int, int] = (1, 2)
    obstacle_size_range: tuple[int, int] = (14, 26)
    buildings_range: tuple[int, int] = (0, 3)
    nature_range: tuple[int, int] = (0, 3)
    curb_prob: float = 0.7
    ambiguous_prob: float = 0.04
    tiny_car_negative_prob: float = 0.06
    noise_sigma_range: tuple[float, float] = (0.008, 0.02)

    def __post_init__(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValidationError(f"image size {h}x{w} too small to compose a scene")
        if not self.correlate_prob_positive > self.correlate_prob_negative:
            raise ValidationError(
                "correlate_prob_positive must exceed correlate_prob_negative "
                f"({self.correlate_prob_positive} vs {self.correlate_prob_negative})"
            )
        for name in ("p_car_scene", "correlate_prob_positive", "correlate_prob_negative",
                     "curb_prob", "ambiguous_prob", "tiny_car_negative_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must be in [0, 1], got {v}")
        for name in ("cars_range", "car_height_range", "obstacles_range",
                     "obstacle_size_range", "buildings_range", "nature_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValidationError(f"{name} must be a (lo, hi) range with 0 <= lo <= hi")
        if self.n_sequences < 1 or self.frames_per_sequence < 1:
            raise ValidationError("need at least one sequence and one frame per sequence")
        # road zone is the band below the lowest horizon we may draw
        road_zone = h - int(0.50 * h) - 4
        car_h = self.car_height_range[1]
        if car_h + 2 > road_zone or int(2.2 * car_h) + 2 > w:
            raise ValidationError(
                f"car of height {car_h} does not fit the {road_zone}px road zone of a {h}x{w} image"
            )
        if self.obstacle_size_range[1] + 2 > road_zone or self.obstacle_size_range[1] + 2 > w:
            raise ValidationError(
                f"obstacle of size {self.obstacle_size_range[1]} does not fit the road zone"
            )

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "n_sequences": self.n_sequences,
            "frames_per_sequence": self.frames_per_sequence,
            "p_car_scene": self.p_car_scene,
            "correlate_class_id": self.correlate_class_id,
            "correlate_prob_positive": self.correlate_prob_positive,
            "correlate_prob_negative": self.correlate_prob_negative,
            "cars_range": list(self.cars_range),
            "car_height_range": list(self.car_height_range),
            "obstacles_range": list(self.obstacles_range),
            "obstacle_size_range": list(self.obstacle_size_range),
            "buildings_range": list(self.buildings_range),
            "nature_range": list(self.nature_range),
            "curb_prob": self.curb_prob,
            "ambiguous_prob": self.ambiguous_prob,
            "tiny_car_negative_prob": self.tiny_car_negative_prob,
            "noise_sigma_range": list(self.noise_sigma_range),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        kw = dict(d)
        for key in ("image_size", "cars_range", "car_height_range", "obstacles_range",
                    "obstacle_size_range", "buildings_range", "nature_range",
                    "noise_sigma_range"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass(frozen=True)
class SceneSample:
    """One generated or loaded image with its pixel-exact mask and label."""

    image_id: str
    sequence_id: str
    image: np.ndarray          # H x W x 3 float64 in [0, 1]
    mask: np.ndarray           # H x W uint8 class ids
    label: str
    car_pixel_fraction: float

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise ValidationError(
                f"image {self.image.shape[:2]} and mask {self.mask.shape} sizes differ"
            )


@dataclass(frozen=True)
class _SequenceStyle:
    horizon: int
    sky_color: tuple[float, float, float]
    road_gray: float
    noise_sigma: float

    @classmethod
    def sample(cls, rng: np.random.Generator, spec: SceneSpec) -> "_SequenceStyle":
        h = spec.image_size[0]
        horizon = int(h * rng.uniform(0.36, 0.50))
        tint = rng.uniform(-0.05, 0.05)
        sky = (0.55 + tint, 0.70 + tint, 0.86 + tint * 0.5)
        return cls(
            horizon=horizon,
            sky_color=sky,
            road_gray=ROAD_GRAY + rng.uniform(-0.02, 0.02),
            noise_sigma=rng.uniform(*spec.noise_sigma_range),
        )


def _paint_rect(img, mask, y0, y1, x0, x1, color, class_id):
    img[y0:y1, x0:x1] = color
    mask[y0:y1, x0:x1] = class_id


def _paint_background(img, mask, style, rng, h, w):
    sky = np.array(style.sky_color)
    grad = np.linspace(0.0, 0.08, style.horizon)[:, None, None]
    img[: style.horizon] = sky[None, None, :] - grad
    mask[: style.horizon] = SKY
    img[style.horizon:] = style.road_gray
    mask[style.horizon:] = ROAD
    # faint lane strip texture so the road is not perfectly flat
    for y in range(style.horizon + 4, h, 9):
        img[y, :, :] += rng.uniform(0.01, 0.03)


def _paint_curb(img, mask, style, rng, w):
    height = int(rng.integers(2, 5))
    y0 = style.horizon + int(rng.integers(1, 4))
    shade = rng.uniform(0.66, 0.76)
    _paint_rect(img, mask, y0, y0 + height, 0, w, shade, CURB)
    # notches every few pixels, as paving joints
    for x in range(int(rng.integers(0, 8)), w, 8):
        img[y0:y0 + height, x] = shade - 0.12


def _paint_building(img, mask, style, rng, w):
    bw = int(rng.integers(18, 52))
    bh = int(rng.integers(14, max(16, style.horizon - 4)))
    x0 = int(rng.integers(0, max(1, w - bw)))
    y1 = style.horizon
    y0 = max(0, y1 - bh)
    base = rng.uniform(0.52, 0.68)
    facade = (base, base * rng.uniform(0.92, 1.0), base * rng.uniform(0.85, 0.98))
    _paint_rect(img, mask, y0, y1, x0, x0 + bw, facade, BUILDING)
    # window grid
    wsize = int(rng.integers(2, 4))
    step = wsize + int(rng.integers(2, 4))
    lit = rng.uniform(0.0, 1.0) < 0.5
    wcol = (0.82, 0.78, 0.45) if lit else (0.16, 0.18, 0.22)
    for wy in range(y0 + 2, y1 - wsize, step):
        for wx in range(x0 + 2, x0 + bw - wsize, step):
            img[wy:wy + wsize, wx:wx + wsize] = wcol
            mask[wy:wy + wsize, wx:wx + wsize] = BUILDING


def _paint_nature(img, mask, style, rng, h, w):
    ry = int(rng.integers(5, 16))
    rx = int(rng.integers(6, 20))
    cy = int(style.horizon - rng.integers(0, max(1, ry)))
    cx = int(rng.integers(0, w))
    yy, xx = np.ogrid[:h, :w]
    blob = ((yy - cy) / max(ry, 1)) ** 2 + ((xx - cx) / max(rx, 1)) ** 2 <= 1.0
    green = np.array([rng.uniform(0.10, 0.20), rng.uniform(0.35, 0.55), rng.uniform(0.08, 0.18)])
    img[blob] = green
    mask[blob] = NATURE
    speckle = rng.uniform(0.85, 1.15, size=(int(blob.sum()), 1))
    img[blob] = np.clip(img[blob] * speckle, 0.0, 1.0)


def _free_intervals(w, occupied, need):
    """Start positions [x0, x1) where a `need`-wide object avoids `occupied`."""
    starts = []
    x = 1
    for ox0, ox1 in sorted(occupied) + [(w - 1, w - 1)]:
        if ox0 - x >= need:
            starts.append((x, ox0 - need))
        x = max(x, ox1 + 1)
    return starts


def _paint_obstacle(img, mask, style, rng, h, w, spec, occupied):
    size = int(rng.integers(spec.obstacle_size_range[0], spec.obstacle_size_range[1] + 1))
    ow = size
    oh = int(size * rng.uniform(0.8, 1.1))
    road_top = style.horizon + 6
    if road_top + oh + 2 >= h:
        oh = h - road_top - 3
    y0 = int(rng.integers(road_top, max(road_top + 1, h - oh - 2)))
    starts = _free_intervals(w, occupied, ow + 2)
    if starts:
        lo, hi = starts[int(rng.integers(0, len(starts)))]
        x0 = int(rng.integers(lo, hi + 1))
    else:
        x0 = int(rng.integers(1, max(2, w - ow - 1)))
    dark = STRIPE_DARK + rng.uniform(-0.02, 0.02)
    light = STRIPE_LIGHT + rng.uniform(-0.03, 0.03)
    stripe = int(rng.integers(2, 4))
    block = np.empty((oh, ow, 3))
    for i in range(oh):
        block[i] = light if (i // stripe) % 2 else dark
    img[y0:y0 + oh, x0:x0 + ow] = block
    mask[y0:y0 + oh, x0:x0 + ow] = OBSTACLE
    # thin outline
    img[y0, x0:x0 + ow] = dark - 0.06
    img[y0 + oh - 1, x0:x0 + ow] = dark - 0.06
    occupied.append((x0, x0 + ow))


def _paint_car(img, mask, style, rng, h, w, height, occupied):
    cw = int(height * rng.uniform(1.8, 2.2))
    road_top = style.horizon + 4
    y1 = int(rng.integers(min(road_top + height + 2, h - 2), h - 1))
    y0 = y1 - height
    starts = _free_intervals(w, occupied, cw + 2)
    if starts:
        lo, hi = starts[int(rng.integers(0, len(starts)))]
        x0 = int(rng.integers(lo, hi + 1))
    else:
        x0 = int(rng.integers(1, max(2, w - cw - 1)))
    body = np.array(CAR_BODY_COLORS[int(rng.integers(0, len(CAR_BODY_COLORS)))])
    body = np.clip(body + rng.uniform(-0.04, 0.04, size=3), 0.0, 1.0)
    _paint_rect(img, mask, y0 + height // 3, y1, x0, x0 + cw, body, CAR)
    # cabin with darker glass
    cx0 = x0 + cw // 5
    cx1 = x0 + cw - cw // 5
    _paint_rect(img, mask, y0, y0 + height // 3 + 1, cx0, cx1, body * 0.9, CAR)
    gx0, gx1 = cx0 + 1, cx1 - 1
    if gx1 > gx0:
        glass = np.array([0.14, 0.18, 0.26])
        _paint_rect(img, mask, y0 + 1, y0 + height // 3, gx0, gx1, glass, CAR)
    # wheels
    wheel_r = max(2, height // 5)
    yy, xx = np.ogrid[:h, :w]
    for wx in (x0 + wheel_r + 1, x0 + cw - wheel_r - 2):
        disk = (yy - (y1 - 1)) ** 2 + (xx - wx) ** 2 <= wheel_r ** 2
        img[disk] = 0.06
        mask[disk] = CAR
    occupied.append((x0, x0 + cw))


def generate_scene(
    spec: SceneSpec,
    rng_seed: int,
    *,
    image_id: str | None = None,
    sequence_id: str | None = None,
    style: _SequenceStyle | None = None,
    palette: ClassPalette | None = None,
    rule: LabelRule | None = None,
) -> SceneSample:
    """Render one scene; all randomness comes from `rng_seed`."""
    palette = palette or ClassPalette.default()
    rule = rule or LabelRule()
    rng = np.random.default_rng(int(rng_seed))
    h, w = spec.image_size
    if style is None:
        style = _SequenceStyle.sample(rng, spec)
    img = np.zeros((h, w, 3), dtype=np.float64)
    mask = np.zeros((h, w), dtype=np.uint8)

    _paint_background(img, mask, style, rng, h, w)
    if rng.uniform() < spec.curb_prob:
        _paint_curb(img, mask, style, rng, w)
    for _ in range(int(rng.integers(spec.buildings_range[0], spec.buildings_range[1] + 1))):
        _paint_building(img, mask, style, rng, w)
    for _ in range(int(rng.integers(spec.nature_range[0], spec.nature_range[1] + 1))):
        _paint_nature(img, mask, style, rng, h, w)

    has_car = rng.uniform() < spec.p_car_scene and spec.cars_range[1] > 0
    ambiguous = has_car and rng.uniform() < spec.ambiguous_prob
    tiny_negative = (not has_car) and rng.uniform() < spec.tiny_car_negative_prob

    occupied: list[tuple[int, int]] = []
    if has_car and not ambiguous:
        n_cars = int(rng.integers(max(1, spec.cars_range[0]), spec.cars_range[1] + 1))
        for _ in range(n_cars):
            height = int(rng.integers(spec.car_height_range[0], spec.car_height_range[1] + 1))
            _paint_car(img, mask, style, rng, h, w, height, occupied)
    elif ambiguous:
        # car area lands between the negative and positive thresholds
        _paint_car(img, mask, style, rng, h, w, int(rng.integers(8, 12)), occupied)
    elif tiny_negative:
        _paint_car(img, mask, style, rng, h, w, 4, occupied)

    correlate_p = spec.correlate_prob_positive if has_car else spec.correlate_prob_negative
    if rng.uniform() < correlate_p and spec.obstacles_range[1] > 0:
        n_obs = int(rng.integers(max(1, spec.obstacles_range[0]), spec.obstacles_range[1] + 1))
        for _ in range(n_obs):
            if spec.correlate_class_id == OBSTACLE:
                _paint_obstacle(img, mask, style, rng, h, w, spec, occupied)
            else:
                raise ValidationError(
                    f"unsupported correlate class id {spec.correlate_class_id}"
                )

    img += rng.normal(0.0, style.noise_sigma, size=img.shape)
    np.clip(img, 0.0, 1.0, out=img)
    # quantize to the 8-bit grid so save/load round-trips are exact
    img = np.round(img * 255.0) / 255.0

    label, fraction = binary_label(mask, palette, rule)
    return SceneSample(
        image_id=image_id or f"scene{int(rng_seed) % 10**8:08d}",
        sequence_id=sequence_id or "seq0000",
        image=img,
        mask=mask,
        label=label,
        car_pixel_fraction=fraction,
    )


def iter_dataset(
    spec: SceneSpec,
    seed: int,
    palette: ClassPalette | None = None,
    rule: LabelRule | None = None,
):
    """Yield all scenes of all sequences, deterministic in (spec, seed)."""
    palette = palette or ClassPalette.default()
    rule = rule or LabelRule()
    for s in range(spec.n_sequences):
        sequence_id = f"seq{s:04d}"
        style = _SequenceStyle.sample(substream(seed, "dataset", "style", sequence_id), spec)
        for f in range(spec.frames_per_sequence):
            image_id = f"{sequence_id}_f{f:03d}"
            yield generate_scene(
                spec,
                substream_seed(seed, "dataset", "scene", image_id),
                image_id=image_id,
                sequence_id=sequence_id,
                style=style,
                palette=palette,
                rule=rule,
            )


def generate_dataset(
    spec: SceneSpec,
    seed: int,
    palette: ClassPalette | None = None,
    rule: LabelRule | None = None,
) -> list[SceneSample]:
    return list(iter_dataset(spec, seed, palette=palette, rule=rule))
