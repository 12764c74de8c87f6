"""
The command-line pipeline, driven in process
============================================

Everything the library does is reachable through the ``hsicaps`` command.
This script builds a scene, writes a config file, and walks the whole
pipeline: info, split, train, eval, render-map.  Artifacts land in a
temporary directory that is printed at the end so you can inspect them.
"""

import tempfile
from pathlib import Path

from hsicaps import make_synthetic_cube, save_cube
from hsicaps.cli import RunConfig, main, serialize_config

work = Path(tempfile.mkdtemp(prefix="hsicaps-demo-"))

cube_path = work / "scene.hsic"
save_cube(make_synthetic_cube(24, 48, 26, 3, noise_sigma=0.2, seed=1), str(cube_path))

run_dir = work / "run"
config = RunConfig(
    cube=str(cube_path),
    output_dir=str(run_dir),
    epochs=3,
    batch_size=32,
    seed=0,
)
config_path = work / "run.cfg"
config_path.write_text(serialize_config(config))


def step(title, argv):
    print(f"\n$ hsicaps {' '.join(argv)}")
    print("-" * 60)
    code = main(argv)
    assert code == 0, f"{title} exited with {code}"


step("info", ["info", str(cube_path)])
step("split", ["split", str(cube_path)])
step("train", ["train", str(config_path)])
step("eval", ["eval", str(run_dir / "checkpoint.cckp"), str(cube_path)])
step(
    "render-map",
    [
        "render-map",
        str(run_dir / "checkpoint.cckp"),
        str(cube_path),
        "-o",
        str(work / "map.ppm"),
    ],
)

print("\nartifacts:")
for path in sorted(work.rglob("*")):
    if path.is_file():
        print(f"  {path}  ({path.stat().st_size} bytes)")
