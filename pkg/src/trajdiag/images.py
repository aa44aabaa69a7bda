"""Screenshot loading and downscaling for model requests."""

from __future__ import annotations

import io
import logging
from pathlib import Path

from PIL import Image

from .backend import ImagePart

logger = logging.getLogger(__name__)

DEFAULT_MAX_DIM = 1280

_MEDIA_TYPES = {"PNG": "image/png", "JPEG": "image/jpeg", "WEBP": "image/webp"}


def load_image_part(ref: str | None, max_dim: int = DEFAULT_MAX_DIM) -> ImagePart | None:
    """Read a screenshot file, downscaling so the longest side is <= max_dim.

    Returns None when the reference is absent, the file is unreadable, or the
    bytes do not decode as an image; callers substitute a textual placeholder.
    Oversized images are re-encoded as PNG, which keeps the output a pure
    function of the input bytes.
    """
    if not ref:
        return None
    try:
        data = Path(ref).read_bytes()
    except OSError:
        logger.debug("screenshot %s unreadable", ref)
        return None
    try:
        with Image.open(io.BytesIO(data)) as image:
            image.load()
            width, height = image.size
            longest = max(width, height)
            if longest <= max_dim:
                media_type = _MEDIA_TYPES.get(image.format or "", "image/png")
                return ImagePart(data=data, media_type=media_type)
            scale = max_dim / longest
            resized = image.resize(
                (max(1, round(width * scale)), max(1, round(height * scale))),
                Image.LANCZOS,
            )
            if resized.mode in ("P", "CMYK"):
                resized = resized.convert("RGB")
            buffer = io.BytesIO()
            resized.save(buffer, format="PNG")
            return ImagePart(data=buffer.getvalue(), media_type="image/png")
    except Exception:
        logger.debug("screenshot %s is not a decodable image", ref)
        return None
