"""
Contact sheet for synthetic domains.
Rows are domains, columns are classes; each cell shows the first sample of that class.
"""
import io
import os
from typing import Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .synthdata import DomainData


# --- Configuración ---

CELL = 48
LABEL_WIDTH = 120
HEADER = 20
BACKGROUND = (30, 30, 30)
BRAND_COLOR = (249, 115, 22)

FONT_PATHS = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
]


def _load_font(size: int) -> ImageFont.ImageFont:
    """DejaVuSans when available, Pillow's bitmap font otherwise."""
    for path in FONT_PATHS:
        if os.path.exists(path):
            return ImageFont.truetype(path, size)
    return ImageFont.load_default()


def _cell_image(x: np.ndarray, image_shape: Optional[tuple]) -> Image.Image:
    """One sample as a grayscale tile. Vectors become a one-row strip."""
    shape = image_shape or (1, x.size)
    values = np.asarray(x, dtype=np.float64).reshape(shape)
    lo, hi = float(values.min()), float(values.max())
    scaled = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    tile = Image.fromarray(np.round(scaled * 255).astype(np.uint8))
    return tile.resize((CELL, CELL if image_shape else CELL // 4), Image.Resampling.NEAREST)


def render_sheet(domains: Sequence[DomainData]) -> Image.Image:
    if not domains:
        raise ValueError("nothing to preview")
    num_classes = domains[0].spec.num_classes
    width = LABEL_WIDTH + num_classes * (CELL + 4)
    height = HEADER + len(domains) * (CELL + 4)
    sheet = Image.new("RGB", (width, height), BACKGROUND)
    draw = ImageDraw.Draw(sheet)
    font = _load_font(12)

    for c in range(num_classes):
        draw.text((LABEL_WIDTH + c * (CELL + 4) + CELL // 2 - 4, 3), str(c), font=font, fill=BRAND_COLOR)

    for row, data in enumerate(domains):
        y0 = HEADER + row * (CELL + 4)
        draw.text((6, y0 + CELL // 2 - 6), data.name, font=font, fill=(220, 220, 220))
        for c in range(num_classes):
            members = np.flatnonzero(data.y == c)
            if len(members) == 0:
                continue
            tile = _cell_image(data.x[members[0]], data.spec.image_shape)
            sheet.paste(tile.convert("RGB"), (LABEL_WIDTH + c * (CELL + 4), y0))
    return sheet


def generate_preview(domains: Sequence[DomainData]) -> bytes:
    """PNG bytes of the contact sheet."""
    output = io.BytesIO()
    render_sheet(domains).save(output, format="PNG", optimize=True)
    output.seek(0)
    return output.getvalue()


def write_preview(path: str, domains: Sequence[DomainData]) -> None:
    with open(path, "wb") as f:
        f.write(generate_preview(domains))
