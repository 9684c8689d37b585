#!/usr/bin/env python3
"""Pack a directory of face-crop images into a .facestream file.

Images are read in sorted filename order, converted to 8-bit grayscale and
resized to a common size (the first image's, unless --size is given).

    python scripts/images_to_facestream.py crops/ out.facestream --size 112
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from streamasd.formats import write_facestream

EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".pgm"}


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("src", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--size", type=int, help="square output size in pixels")
    args = ap.parse_args(argv)

    paths = sorted(p for p in args.src.iterdir() if p.suffix.lower() in EXTS)
    if not paths:
        print(f"no images found in {args.src}", file=sys.stderr)
        return 2
    frames, shape = [], None
    for p in paths:
        img = Image.open(p).convert("L")
        if shape is None:
            shape = (args.size, args.size) if args.size else img.size
        if img.size != shape:
            img = img.resize(shape, Image.BILINEAR)
        frames.append(np.asarray(img, dtype=np.uint8))
    write_facestream(args.out, np.stack(frames))
    print(f"wrote {len(frames)} frames of {shape[1]}x{shape[0]} to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
