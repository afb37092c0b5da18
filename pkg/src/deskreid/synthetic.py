"""Procedural identity-image generator.

Each identity is a "clothing" palette — head tone, torso color, leg color,
plus a torso stripe — drawn as colored blocks on a small canvas.  Every
rendered view jitters position, illumination, and background, and applies a
per-camera color response, so retrieval across cameras is non-trivial but
the identity signal stays dominant.  Evaluation identities are disjoint
from training identities; distractor identities appear under a single
camera and only in the gallery.
"""

import csv
from pathlib import Path

import numpy as np

from .data import write_ppm

# Photometric nuisance magnitudes.  Cameras differ by a per-channel affine
# response, and every view draws its own illumination level and sensor noise;
# together these make cross-camera matching depend on the clothing layout
# rather than raw color values.
CAMERA_GAIN_SPREAD = 0.12
CAMERA_BIAS_SPREAD = 0.04
ILLUMINATION_BASE = 0.75
ILLUMINATION_SPREAD = 0.35
PIXEL_NOISE = 0.02


def _hsv_to_rgb(h, s, v):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _identity_palette(rng):
    """Draw one identity's appearance; hues are spread by golden-ratio steps."""
    base_hue = rng.random()
    torso = _hsv_to_rgb(base_hue, 0.75 + 0.2 * rng.random(), 0.75 + 0.2 * rng.random())
    leg_hue = (base_hue + 0.382 + 0.2 * rng.random()) % 1.0
    legs = _hsv_to_rgb(leg_hue, 0.6 + 0.3 * rng.random(), 0.55 + 0.3 * rng.random())
    skin = 0.55 + 0.35 * rng.random()
    head = (skin, skin * (0.82 + 0.08 * rng.random()), skin * 0.68)
    stripe_period = int(rng.integers(3, 7))
    stripe_gain = 0.55 + 0.35 * rng.random()
    return {"torso": torso, "legs": legs, "head": head,
            "stripe_period": stripe_period, "stripe_gain": stripe_gain}


def _camera_response(camera, seed):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, camera]))
    gain = 1.0 + CAMERA_GAIN_SPREAD * (rng.random(3) - 0.5)
    bias = CAMERA_BIAS_SPREAD * (rng.random(3) - 0.5)
    return gain, bias


def render_identity_image(palette, camera, height, width, seed, rng):
    """Render one view of an identity as a [3, H, W] array in [0, 1]."""
    bg = 0.25 + 0.2 * rng.random()
    img = np.full((3, height, width), bg)
    img += 0.03 * (rng.random((3, height, width)) - 0.5)

    dy = int(rng.integers(-height // 16, height // 16 + 1))
    dx = int(rng.integers(-width // 8, width // 8 + 1))
    cy, cx = height // 2 + dy, width // 2 + dx
    half_w = max(3, int(round(width * 0.28)))

    def block(r0, r1, c0, c1, color):
        r0, r1 = max(r0, 0), min(r1, height)
        c0, c1 = max(c0, 0), min(c1, width)
        if r0 < r1 and c0 < c1:
            img[:, r0:r1, c0:c1] = np.asarray(color)[:, None, None]

    head_h = height // 6
    torso_h = int(height * 0.4)
    leg_h = int(height * 0.38)
    top = cy - (head_h + torso_h + leg_h) // 2

    block(top, top + head_h, cx - half_w // 2, cx + half_w // 2, palette["head"])
    t0, t1 = top + head_h, top + head_h + torso_h
    block(t0, t1, cx - half_w, cx + half_w, palette["torso"])
    rows = np.arange(height)
    stripe = (rows // palette["stripe_period"]) % 2 == 1
    sel = stripe & (rows >= max(t0, 0)) & (rows < min(t1, height))
    img[:, sel, max(cx - half_w, 0):min(cx + half_w, width)] *= palette["stripe_gain"]
    block(t1, t1 + leg_h, cx - half_w, cx + half_w, palette["legs"])

    gain, bias = _camera_response(camera, seed)
    illum = ILLUMINATION_BASE + ILLUMINATION_SPREAD * rng.random()
    img = img * illum * gain[:, None, None] + bias[:, None, None]
    img += PIXEL_NOISE * rng.standard_normal((3, height, width))
    return np.clip(img, 0.0, 1.0)


def generate_dataset(out_dir, seed, num_train_ids=10, train_per_id=20,
                     num_eval_ids=15, query_per_id=2, gallery_per_id=3,
                     num_distractors=40, num_cameras=4, height=64, width=32):
    """Write images plus a manifest.csv under ``out_dir``; returns the manifest path.

    Identity numbering: train ids, then eval ids, then distractor ids.
    Queries cycle over the first cameras and same-identity gallery views over
    the remaining ones, so every query keeps cross-camera matches after
    same-camera filtering.
    """
    if num_cameras < 2:
        raise ValueError("need at least 2 cameras for cross-camera retrieval")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    palette_rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    total_ids = num_train_ids + num_eval_ids + num_distractors
    palettes = [_identity_palette(palette_rng) for _ in range(total_ids)]

    rows = []

    def emit(ident, view, camera, split):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 6, ident, view]))
        img = render_identity_image(palettes[ident], camera, height, width, seed, rng)
        name = f"images/{split}_{ident:03d}_{view:03d}_c{camera}.ppm"
        write_ppm(out_dir / name, img)
        rows.append((name, ident, camera, split))

    for i in range(num_train_ids):
        for j in range(train_per_id):
            emit(i, j, j % num_cameras, "train")

    half = max(1, num_cameras // 2)
    for k in range(num_eval_ids):
        ident = num_train_ids + k
        for j in range(query_per_id):
            emit(ident, j, j % half, "query")
        for j in range(gallery_per_id):
            emit(ident, query_per_id + j, half + j % (num_cameras - half), "gallery")

    for d in range(num_distractors):
        ident = num_train_ids + num_eval_ids + d
        camera = d % num_cameras
        emit(ident, 0, camera, "gallery")

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "identity", "camera", "split"])
        writer.writerows(rows)
    return manifest_path
