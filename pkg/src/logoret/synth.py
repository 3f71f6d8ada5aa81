"""Synthetic "stamped" images: a transformed logo composited into a photo.

Images are ``(height, width, 4)`` uint8 RGBA arrays.  Every random draw comes
from a generator seeded by ``(seed, sample_index)`` so each sample is
reproducible on its own, independent of scheduling.
"""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateQuad, EmptyInput, OutOfFrame

log = logging.getLogger(__name__)

MIN_BBOX_AREA = 32.0
HOMOGRAPHY_RETRIES = 16
SAMPLE_ATTEMPTS = 8


@dataclass
class SynthConfig:
    seed: int = 0
    per_class: int = 1
    scale: tuple = (0.08, 0.5)  # target logo size as a fraction of the background's short side
    rotation: tuple = (-25.0, 25.0)  # degrees
    perspective: float = 0.15  # max corner displacement, fraction of the scaled logo's short side
    hue: tuple = (-0.05, 0.05)  # fraction of a full turn
    saturation: tuple = (0.7, 1.3)
    brightness: tuple = (0.5, 1.6)
    invert_probability: float = 0.1
    gradient: tuple = (0.0, 0.4)  # peak-to-peak change of the value channel, fraction of 255
    blur: tuple = (0.0, 2.5)  # gaussian sigma in pixels
    alpha: tuple = (0.6, 1.0)

    def __post_init__(self):
        for name in ("scale", "rotation", "hue", "saturation", "brightness", "gradient", "blur", "alpha"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"range {name} is not ordered: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))
        if not 0.0 <= self.invert_probability <= 1.0:
            raise ValueError("invert_probability must be in [0, 1]")
        if self.scale[0] <= 0 or self.blur[0] < 0 or self.perspective < 0:
            raise ValueError("scale must be positive, blur and perspective nonnegative")
        if not (0.0 <= self.alpha[0] and self.alpha[1] <= 1.0):
            raise ValueError("alpha range must lie in [0, 1]")
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")

    @classmethod
    def identity(cls, **overrides) -> "SynthConfig":
        """Config whose every transform is a no-op (useful for exact checks)."""
        base = dict(
            scale=(1.0, 1.0), rotation=(0.0, 0.0), perspective=0.0, hue=(0.0, 0.0),
            saturation=(1.0, 1.0), brightness=(1.0, 1.0), invert_probability=0.0,
            gradient=(0.0, 0.0), blur=(0.0, 0.0), alpha=(1.0, 1.0),
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_file(cls, path, **overrides) -> "SynthConfig":
        data = json.loads(Path(path).read_text())
        data.update(overrides)
        return cls(**data)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


# -- image io --------------------------------------------------------------------

def load_rgba(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"), dtype=np.uint8).copy()


def encode_png(img: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8), "RGBA").save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGBA"), dtype=np.uint8).copy()


def save_rgba(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(img))


# -- geometry ----------------------------------------------------------------------

def homography_from_points(src, dst) -> np.ndarray:
    """Direct linear solve for the 3x3 map taking four ``src`` points to ``dst``."""
    a, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        a.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(a, float), np.array(b, float))
    return np.append(h, 1.0).reshape(3, 3)


def project(h: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    hom = np.c_[pts, np.ones(len(pts))] @ h.T
    return hom[:, :2] / hom[:, 2:3]


def rect_corners(w: float, h: float) -> np.ndarray:
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def quad_is_convex(quad) -> bool:
    q = np.asarray(quad, dtype=np.float64)
    signs = []
    for i in range(4):
        a, b, c = q[i], q[(i + 1) % 4], q[(i + 2) % 4]
        signs.append((b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]))
    signs = np.array(signs)
    return bool(np.all(signs > 1e-9) or np.all(signs < -1e-9))


def quad_area(quad) -> float:
    x, y = np.asarray(quad, dtype=np.float64).T
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def homography_from_params(logo_size, scale: float, angle_deg: float, jitter, center) -> np.ndarray:
    """Scale and rotate the logo about its center, move it to ``center``, jitter corners."""
    w, h = logo_size
    src = rect_corners(w, h)
    t = math.radians(angle_deg)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    dst = (src - [w / 2, h / 2]) @ (scale * rot).T + np.asarray(center, float) + np.asarray(jitter, float)
    hm = homography_from_points(src, dst)
    if abs(np.linalg.det(hm)) <= 1e-9:
        raise DegenerateQuad("singular homography")
    return hm


def random_homography(rng: np.random.Generator, logo_size, background_size, config: SynthConfig):
    """Sample scale, rotation, corner jitter and placement; returns ``(H, params)``."""
    w, h = logo_size
    bw, bh = background_size
    for _ in range(HOMOGRAPHY_RETRIES):
        rel = rng.uniform(*config.scale)
        scale = rel * min(bw, bh) / max(w, h)
        angle = rng.uniform(*config.rotation)
        reach = config.perspective * scale * min(w, h)
        radius = reach * np.sqrt(rng.random(4))
        theta = rng.uniform(0.0, 2 * math.pi, 4)
        jitter = np.c_[radius * np.cos(theta), radius * np.sin(theta)]
        t = math.radians(angle)
        ex = 0.5 * scale * (abs(math.cos(t)) * w + abs(math.sin(t)) * h) + reach
        ey = 0.5 * scale * (abs(math.sin(t)) * w + abs(math.cos(t)) * h) + reach
        u = rng.random(2)
        cx = ex + u[0] * (bw - 2 * ex) if bw > 2 * ex else bw / 2
        cy = ey + u[1] * (bh - 2 * ey) if bh > 2 * ey else bh / 2
        quad = (rect_corners(w, h) - [w / 2, h / 2]) @ (scale * np.array(
            [[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])).T + [cx, cy] + jitter
        if not quad_is_convex(quad):
            continue
        try:
            hm = homography_from_params((w, h), scale, angle, jitter, (cx, cy))
        except (DegenerateQuad, np.linalg.LinAlgError):
            continue
        params = {
            "scale": float(rel),
            "pixel_scale": float(scale),
            "rotation": float(angle),
            "jitter": jitter.round(6).tolist(),
            "center": [float(cx), float(cy)],
        }
        return hm, params
    raise DegenerateQuad(f"no convex quad after {HOMOGRAPHY_RETRIES} draws")


# -- compositing -------------------------------------------------------------------

def _bilinear(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample float image ``img`` (h, w, c) at real coords with clamp-to-edge."""
    h, w = img.shape[:2]
    u = np.clip(u, 0.0, w - 1.0)
    v = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(u).astype(np.intp), w - 1)
    y0 = np.minimum(np.floor(v).astype(np.intp), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def warped_bbox(h: np.ndarray, logo_size, image_size):
    """Axis-aligned hull of the warped logo rectangle, clipped to the image."""
    corners = project(h, rect_corners(*logo_size))
    bw, bh = image_size
    x0, y0 = np.clip(corners.min(axis=0), 0, [bw, bh])
    x1, y1 = np.clip(corners.max(axis=0), 0, [bw, bh])
    return [float(x0), float(y0), float(x1), float(y1)]


def warp_composite(background: np.ndarray, logo: np.ndarray, h: np.ndarray, alpha: float):
    """Inverse-warp ``logo`` into ``background``; returns ``(image, bbox)``.

    Pixel centers sit at integer coordinates, so the identity map copies logo
    pixels verbatim.  Raises :class:`OutOfFrame` when the visible box is
    smaller than ``MIN_BBOX_AREA`` pixels.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    bh, bw = background.shape[:2]
    lh, lw = logo.shape[:2]
    bbox = warped_bbox(h, (lw, lh), (bw, bh))
    x0, y0, x1, y1 = bbox
    if (x1 - x0) * (y1 - y0) < MIN_BBOX_AREA:
        raise OutOfFrame(f"visible logo area {(x1 - x0) * (y1 - y0):.1f} px^2 is too small")

    out = background.copy()
    xs = np.arange(max(0, math.floor(x0) - 1), min(bw, math.ceil(x1) + 1))
    ys = np.arange(max(0, math.floor(y0) - 1), min(bh, math.ceil(y1) + 1))
    gx, gy = np.meshgrid(xs, ys)
    src = project(np.linalg.inv(h), np.c_[gx.ravel(), gy.ravel()])
    u, v = src[:, 0], src[:, 1]
    inside = (u >= -0.5) & (u < lw - 0.5) & (v >= -0.5) & (v < lh - 0.5)
    if inside.any():
        px = _bilinear(logo.astype(np.float64), u[inside], v[inside])
        weight = alpha * px[:, 3:4] / 255.0
        ty, tx = gy.ravel()[inside], gx.ravel()[inside]
        bg = background[ty, tx, :3].astype(np.float64)
        blended = weight * px[:, :3] + (1.0 - weight) * bg
        out[ty, tx, :3] = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return out, bbox


# -- photometric chain -------------------------------------------------------------

def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Float RGB in [0, 255] to HSV with hue in [0, 1), saturation in [0, 1], value in [0, 255]."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0.0)
    safe = np.where(delta > 0, delta, 1)
    hr = ((g - b) / safe) % 6
    hg = (b - r) / safe + 2
    hb = (r - g) / safe + 4
    hue = np.where(mx == r, hr, np.where(mx == g, hg, hb)) / 6.0
    hue = np.where(delta > 0, hue, 0.0) % 1.0
    return np.stack([hue, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    hue, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    h6 = hue * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [
        np.stack(c, axis=-1)
        for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))
    ]
    out = np.zeros(hsv.shape)
    for k, c in enumerate(choices):
        out = np.where((i == k)[..., None], c, out)
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized sampled gaussian with radius ``ceil(3 * sigma)``."""
    if sigma <= 0:
        return np.ones(1)
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(channels: np.ndarray, sigma: float) -> np.ndarray:
    """Separable gaussian blur of a float (h, w, c) array, clamp-to-edge borders."""
    k = gaussian_kernel(sigma)
    if len(k) == 1:
        return channels.astype(np.float64)
    r = len(k) // 2
    out = channels.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="edge")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for j, wj in enumerate(k):
            acc += wj * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out


def sample_photometric(rng: np.random.Generator, config: SynthConfig) -> dict:
    # fixed draw order keeps the stream aligned whatever the ranges are
    return {
        "hue_shift": float(rng.uniform(*config.hue)),
        "saturation": float(rng.uniform(*config.saturation)),
        "brightness": float(rng.uniform(*config.brightness)),
        "invert": bool(rng.random() < config.invert_probability),
        "gradient": float(rng.uniform(*config.gradient)),
        "gradient_angle": float(rng.uniform(0.0, 2 * math.pi)),
        "blur_sigma": float(rng.uniform(*config.blur)),
    }


def apply_photometric(img: np.ndarray, params: dict) -> np.ndarray:
    """Apply sampled color, brightness and blur parameters to the RGB channels."""
    rgb = img[..., :3].astype(np.float64)
    hsv = rgb_to_hsv(rgb)
    hsv[..., 0] = (hsv[..., 0] + params["hue_shift"]) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * params["saturation"], 0.0, 1.0)
    value = np.clip(hsv[..., 2] * params["brightness"], 0.0, 255.0)
    if params["invert"]:
        value = 255.0 - value
    if params["gradient"] > 0:
        h, w = value.shape
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        a = params["gradient_angle"]
        proj = xx * math.cos(a) + yy * math.sin(a)
        span = proj.max() - proj.min()
        ramp = (proj - proj.min()) / span - 0.5 if span > 0 else np.zeros_like(proj)
        value = np.clip(value + params["gradient"] * 255.0 * ramp, 0.0, 255.0)
    hsv[..., 2] = value
    rgb = gaussian_blur(hsv_to_rgb(hsv), params["blur_sigma"])
    out = img.copy()
    out[..., :3] = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return out


def photometric_chain(img: np.ndarray, rng: np.random.Generator, config: SynthConfig):
    """Randomized color/brightness/blur transform; returns ``(image, params)``."""
    params = sample_photometric(rng, config)
    return apply_photometric(img, params), params


# -- samples and datasets ----------------------------------------------------------

def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def generate_sample(background: np.ndarray, logo: np.ndarray, class_id: str,
                    rng: np.random.Generator, config: SynthConfig):
    """Stamp one logo; returns ``(image, record)`` where the record carries provenance.

    Retries up to ``SAMPLE_ATTEMPTS`` times when the logo lands out of frame.
    """
    bh, bw = background.shape[:2]
    lh, lw = logo.shape[:2]
    for attempt in range(SAMPLE_ATTEMPTS):
        photo = sample_photometric(rng, config)
        hm, geo = random_homography(rng, (lw, lh), (bw, bh), config)
        alpha = float(rng.uniform(*config.alpha))
        try:
            image, bbox = warp_composite(background, apply_photometric(logo, photo), hm, alpha)
        except OutOfFrame:
            continue
        params = {
            **geo,
            **photo,
            "alpha": alpha,
            "homography": hm.round(9).tolist(),
            "attempt": attempt,
        }
        return image, {"class": class_id, "bbox": bbox, "params": params}
    raise OutOfFrame(f"logo for {class_id} out of frame after {SAMPLE_ATTEMPTS} attempts")


def read_logos_manifest(path) -> dict[str, list[tuple[str, Path]]]:
    """Map class -> sorted ``(variant, png path)`` list."""
    path = Path(path)
    logos: dict[str, list] = {}
    for line in path.read_text().splitlines():
        if line.strip():
            rec = json.loads(line)
            logos.setdefault(rec["class"], []).append((rec.get("variant", "0"), path.parent / rec["path"]))
    return {c: sorted(v) for c, v in sorted(logos.items())}


def generate_dataset(backgrounds_dir, logos_manifest, config: SynthConfig, out_dir) -> list[dict]:
    """Write ``per_class`` stamped images per class plus ``manifest.jsonl``.

    Sample ``i`` belongs to class ``i // per_class`` (classes sorted by name)
    and draws its background and logo variant from its own generator.
    Existing images listed in an existing manifest are reused, so reruns
    only produce what is missing.
    """
    backgrounds = sorted(Path(backgrounds_dir).glob("*.png"))
    logos = read_logos_manifest(logos_manifest)
    if not backgrounds or not logos:
        raise EmptyInput("need at least one background and one logo class")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"
    previous = {}
    if manifest_path.exists():
        for line in manifest_path.read_text().splitlines():
            if line.strip():
                rec = json.loads(line)
                previous[rec["image"]] = rec

    cache: dict[Path, np.ndarray] = {}

    def load(p):
        if p not in cache:
            cache[p] = load_rgba(p)
        return cache[p]

    records = []
    classes = list(logos)
    for i in range(len(classes) * config.per_class):
        image_id = f"{i:06d}.png"
        target = out_dir / "images" / image_id
        if image_id in previous and target.exists():
            records.append(previous[image_id])
            continue
        class_id = classes[i // config.per_class]
        rng = sample_rng(config.seed, i)
        bg_path = backgrounds[rng.integers(len(backgrounds))]
        variant, logo_path = logos[class_id][rng.integers(len(logos[class_id]))]
        try:
            image, rec = generate_sample(load(bg_path), load(logo_path), class_id, rng, config)
        except OutOfFrame as exc:
            log.warning("skipping sample %d: %s", i, exc)
            continue
        save_rgba(target, image)
        records.append({
            "image": image_id,
            "class": class_id,
            "variant": variant,
            "background": bg_path.name,
            "bbox": rec["bbox"],
            "sample_index": i,
            "params": rec["params"],
        })
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
    if not manifest_path.exists() or manifest_path.read_text() != text:
        manifest_path.write_text(text)
    (out_dir / "config.json").write_text(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")
    return records


# -- procedural demo assets ----------------------------------------------------------

def _draw_logo(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    img = np.empty((height, width, 3))
    img[:] = rng.integers(0, 256, 3)
    for _ in range(int(rng.integers(3, 6))):
        color = rng.integers(0, 256, 3)
        kind = int(rng.integers(4))
        cx, cy = rng.uniform(0.15, 0.85) * width, rng.uniform(0.15, 0.85) * height
        size = rng.uniform(0.15, 0.45) * min(width, height)
        if kind == 0:
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= size**2
        elif kind == 1:
            mask = (np.abs(xx - cx) <= size * 1.3) & (np.abs(yy - cy) <= size * 0.6)
        elif kind == 2:
            mask = (yy - cy + size >= 0) & (np.abs(xx - cx) <= (yy - cy + size) * 0.6) & (yy <= cy + size)
        else:
            period = rng.uniform(6, 14)
            angle = rng.uniform(0, math.pi)
            band = (xx * math.cos(angle) + yy * math.sin(angle)) % period < period / 2
            mask = band & ((xx - cx) ** 2 + (yy - cy) ** 2 <= (1.5 * size) ** 2)
        img[mask] = color
    out = np.full((height, width, 4), 255, np.uint8)
    out[..., :3] = img.astype(np.uint8)
    return out


def _draw_background(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    coarse = rng.uniform(0, 255, (height // 16 + 2, width // 16 + 2, 3))
    ys = np.linspace(0, coarse.shape[0] - 1.001, height)
    xs = np.linspace(0, coarse.shape[1] - 1.001, width)
    gx, gy = np.meshgrid(xs, ys)
    smooth = _bilinear(coarse, gx, gy)
    noise = rng.normal(0, 12, (height, width, 3))
    out = np.full((height, width, 4), 255, np.uint8)
    out[..., :3] = np.clip(smooth + noise, 0, 255).astype(np.uint8)
    return out


def make_demo_assets(out_dir, n_classes: int = 10, n_backgrounds: int = 20, seed: int = 0,
                     logo_size=(96, 64), background_size=(320, 240)) -> Path:
    """Procedural logos and backgrounds for smoke tests; returns the logos manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "logos").mkdir(parents=True, exist_ok=True)
    (out_dir / "backgrounds").mkdir(parents=True, exist_ok=True)
    lines = []
    for c in range(n_classes):
        rng = np.random.default_rng([seed, 1, c])
        name = f"brand{c:04d}"
        save_rgba(out_dir / "logos" / f"{name}.png", _draw_logo(rng, *logo_size))
        lines.append(json.dumps({"class": name, "variant": "0", "path": f"logos/{name}.png"}))
    for b in range(n_backgrounds):
        rng = np.random.default_rng([seed, 2, b])
        save_rgba(out_dir / "backgrounds" / f"bg{b:04d}.png", _draw_background(rng, *background_size))
    manifest = out_dir / "logos.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
