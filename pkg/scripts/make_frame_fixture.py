#!/usr/bin/env python3
"""Regenerate fixtures/frame_800x600.jpg: a synthetic 800x600 front-view
road frame compressed to exactly 44134 bytes (43.1 KB) by padding with a
JPEG comment segment. Decoders ignore the comment; the byte size is what
the bandwidth tests depend on."""

from __future__ import annotations

import io
import sys
from pathlib import Path

from PIL import Image, ImageDraw

TARGET_BYTES = 44134  # 43.0996 KB
OUT = Path(__file__).resolve().parents[1] / "fixtures" / "frame_800x600.jpg"


def draw_frame() -> Image.Image:
    width, height = 800, 600
    img = Image.new("RGB", (width, height))
    draw = ImageDraw.Draw(img)
    horizon = 260

    for y in range(horizon):  # sky gradient
        shade = 180 + int(60 * y / horizon)
        draw.line([(0, y), (width, y)], fill=(120, 160, shade))
    draw.rectangle([0, horizon, width, height], fill=(96, 96, 96))  # road
    draw.polygon([(0, height), (320, horizon), (480, horizon), (width, height)],
                 fill=(82, 82, 86))

    vanish_x = 400
    for lane_x in (200, 600):  # edge lines
        draw.line([(lane_x, height), (vanish_x, horizon)], fill=(230, 230, 230),
                  width=4)
    for i in range(12):  # center dashes
        t0, t1 = i / 12, (i + 0.5) / 12
        y0 = height - t0 * (height - horizon)
        y1 = height - t1 * (height - horizon)
        draw.line([(vanish_x, y1), (vanish_x, y0)], fill=(240, 220, 80),
                  width=max(1, int(6 * (1 - t0))))

    draw.rectangle([470, 300, 560, 360], fill=(40, 45, 120))  # lead vehicle
    draw.rectangle([480, 345, 500, 360], fill=(20, 20, 20))
    draw.rectangle([530, 345, 550, 360], fill=(20, 20, 20))
    draw.rectangle([250, 320, 300, 355], fill=(140, 30, 30))  # oncoming car
    for x in (60, 720):  # roadside trees
        draw.rectangle([x - 6, horizon - 40, x + 6, horizon], fill=(90, 60, 30))
        draw.ellipse([x - 35, horizon - 110, x + 35, horizon - 30],
                     fill=(40, 110, 50))
    return img


def pad_to(data: bytes, target: int) -> bytes:
    """Insert a COM segment after SOI so the file is exactly `target` bytes."""
    if data[:2] != b"\xff\xd8":
        raise ValueError("not a JPEG stream")
    room = target - len(data) - 4
    if room < 0:
        raise ValueError(f"encoded frame already {len(data)}B > target {target}B")
    comment = b"\xff\xfe" + (room + 2).to_bytes(2, "big") + b"p" * room
    return data[:2] + comment + data[2:]


def main() -> int:
    img = draw_frame()
    quality = 90
    while quality > 10:
        buf = io.BytesIO()
        img.save(buf, format="JPEG", quality=quality)
        if buf.tell() + 4 <= TARGET_BYTES:
            break
        quality -= 5
    data = pad_to(buf.getvalue(), TARGET_BYTES)
    OUT.write_bytes(data)
    print(f"wrote {OUT} ({len(data)} bytes = {len(data) / 1024:.4f} KB, "
          f"quality {quality})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
