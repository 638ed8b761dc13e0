"""
The command line
================

Runs each subcommand the way a shell user would, inside a temporary
directory. Equivalent shell commands are shown in the comments.
"""

import tempfile
from pathlib import Path


from mirnetv2.cli import main
from mirnetv2.data import add_gaussian_noise, procedural_images, save_image

work = Path(tempfile.mkdtemp(prefix="cli_tour_"))

# mirnetv2 analyze default
main(["analyze", "default"])

# a run config is plain "section.key = value" text
cfg = work / "run.cfg"
cfg.write_text("""\
model.n_rrg = 1
model.n_mrb = 1
model.stream_channels = 8, 12, 16
train.total_iters = 60
train.batch_size = 4
train.patch_schedule = 0:32, 0.5:48
data.procedural = 12
data.image_size = 48
data.val_count = 2
data.synth = gaussian sigma=25
run.seed = 0
""")

# mirnetv2 --sequential train run.cfg --output-dir work/run --quiet
main(["--sequential", "train", str(cfg), "--output-dir", str(work / "run"), "--quiet"])
print((work / "run" / "metrics.tsv").read_text().splitlines()[-1])

# a small paired test set: clean/ and degraded/ matched by file stem
for sub in ("clean", "degraded"):
    (work / "test" / sub).mkdir(parents=True)
for i, img in enumerate(procedural_images(3, 40, seed=99)):
    save_image(img, work / "test" / "clean" / f"img{i}.png")
    save_image(add_gaussian_noise(img, 25, seed=i), work / "test" / "degraded" / f"img{i}.png")

# mirnetv2 eval test                       (scores the noisy inputs)
# mirnetv2 eval test --checkpoint run/checkpoint.erck
main(["eval", str(work / "test")])
main(["eval", str(work / "test"), "--checkpoint", str(work / "run" / "checkpoint.erck")])

# mirnetv2 infer run/checkpoint.erck test/degraded/img0.png -o restored.png
main(["infer", str(work / "run" / "checkpoint.erck"), str(work / "test" / "degraded" / "img0.png"),
      "-o", str(work / "restored.png")])

# errors come back as exit codes: 1 for usage/config problems, 2 for runtime ones
print("bad size exit code:", main(["analyze", "tiny", "--size", "30x30"]))
