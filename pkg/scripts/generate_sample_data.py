#!/usr/bin/env python3
"""
Generate sample inputs for trying the sculptfab command line

Writes a stand-in "scanned" sculpture (an egg with a flat window face), a
circuit spec, the fiducial points a user would pick on the scan and a
synthetic labelled stroke corpus.

Usage:
    python scripts/generate_sample_data.py --output-dir sample_data
    python src/cli.py pipeline --scan sample_data/egg.stl --spec sample_data/board.json \\
        --fiducials sample_data/f.txt --pitch 0.5 -o out/
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import trimesh

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from blank_gen import parse_blank_spec, reference_points  # noqa: E402
from gesture import synth_corpus, write_strokes  # noqa: E402
from mesh_core import RigidTransform, TriangleMesh, repair_basic, save_mesh  # noqa: E402

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
logger = logging.getLogger(__name__)

BOARD = {
    "circuit": {
        "board_size": [30.0, 20.0, 1.6],
        "window": {"shape": "circle", "diameter": 14.0, "center_offset": [0.0, 0.0], "standoff": 4.0},
        "tilt_deg": 0.0,
    },
    "expansion": 3.0,
}


def make_egg(radius: float, flat_z: float) -> TriangleMesh:
    """Stretched sphere sliced flat at ``flat_z`` where the blank's window face was."""
    body = trimesh.creation.icosphere(subdivisions=4, radius=radius)
    body.apply_scale([1.1, 1.0, 1.0])
    cut = trimesh.intersections.slice_mesh_plane(
        body, plane_normal=[0.0, 0.0, -1.0], plane_origin=[0.0, 0.0, flat_z], cap=True
    )
    cut.merge_vertices()
    return repair_basic(TriangleMesh.from_trimesh(cut, "egg"))


def write_fiducials(path: Path, points: np.ndarray):
    lines = ["# fiducial bump apexes picked on the scan (mm)"]
    lines += [f"{x:.4f} {y:.4f} {z:.4f}" for x, y, z in points]
    path.write_text("\n".join(lines) + "\n")


def main():
    parser = argparse.ArgumentParser(description="Generate sample inputs for sculptfab")
    parser.add_argument("--output-dir", default="sample_data", help="Directory to write into")
    parser.add_argument("--radius", type=float, default=30.0, help="Egg radius (mm)")
    parser.add_argument("--flat-z", type=float, default=22.0, help="Height of the window face (mm)")
    parser.add_argument("--seed", type=int, default=0, help="Seed for the stroke corpus")

    args = parser.parse_args()

    if not 0.0 < args.flat_z < args.radius:
        logger.error(f"--flat-z must lie between 0 and the radius ({args.radius})")
        return 1

    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)

    egg = make_egg(args.radius, args.flat_z)
    save_mesh(egg, out / "egg.stl")
    logger.info(f"Wrote {out / 'egg.stl'} ({len(egg.triangles)} triangles)")

    (out / "board.json").write_text(json.dumps(BOARD, indent=2) + "\n")
    logger.info(f"Wrote {out / 'board.json'}")

    # the blank's window face sits on the egg's flat top, +z outward
    window_pose = RigidTransform(np.eye(3), [0.0, 0.0, args.flat_z])
    picked = window_pose.apply(reference_points(parse_blank_spec(BOARD)))
    write_fiducials(out / "f.txt", picked[[2, 0, 1]])
    logger.info(f"Wrote {out / 'f.txt'}")

    strokes = synth_corpus(seed=args.seed, device_id="sample-sensor")
    write_strokes(out / "strokes.jsonl", strokes, device_id="sample-sensor")
    logger.info(f"Wrote {len(strokes)} strokes to {out / 'strokes.jsonl'}")

    logger.info("Done!")
    return 0


if __name__ == "__main__":
    exit(main())
