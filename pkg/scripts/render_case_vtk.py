#!/usr/bin/env python3
"""Export VTK files for one processed case, one file per cardiac phase.

Useful for inspecting a reconstruction in ParaView:

    python scripts/render_case_vtk.py --velocity out/cases/snr2/velocity \\
        --mask out/cases/snr2/static_mask --out viz/
"""

import argparse
import sys
from pathlib import Path

from flow4d import io as bundle_io


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--velocity", required=True, help="velocity directory")
    parser.add_argument("--mask", required=True, help="mask directory")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--frames", default=None,
                        help="comma-separated frame indices (default: all)")
    args = parser.parse_args(argv)

    field = bundle_io.load_velocity(args.velocity)
    mask = bundle_io.load_mask(args.mask)
    n_frames = field.meta.n_frames
    frames = (range(n_frames) if args.frames is None
              else [int(f) for f in args.frames.split(",")])
    out = Path(args.out)
    for frame in frames:
        path = out / f"frame_{frame:03d}.vtk"
        bundle_io.export_vtk(field, mask, frame, path)
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
