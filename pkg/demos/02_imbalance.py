"""Small labels under linear Dice versus the exponential logarithmic loss.

Run:  python demos/02_imbalance.py [workdir] [epochs]

Generates 20 desk-scale phantoms whose smallest label covers under a tenth
of a percent of the volume, then trains the same network on the same split
twice, changing only the loss.  The linear Dice run ignores the smallest label
(Dice 0); the log-space run reaches about 0.36 on it by epoch 30 with these
seeds.  Other splits land anywhere from 0 to 0.9 (see the README table).
Each run takes two to three minutes on one core; with fewer epochs neither
loss gets to the smallest label.
"""
import sys
import tempfile
from pathlib import Path

from elseg.losses import LossConfig
from elseg.synth import PhantomSpec, generate_dataset
from elseg.trainer import TrainRun, train

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="elseg-demo-"))
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30

manifest = generate_dataset(PhantomSpec(), 20, work / "data", seed=0)
freqs = manifest.frequencies()
print("label fractions:", " ".join(f"{f:.4f}" for f in freqs))
print(f"smallest / largest foreground: {freqs[-1] / freqs[1:].max():.4f}\n")

for name, loss in [("linear dice", LossConfig(kind="linear_dice")), ("exp-log 0.3", LossConfig())]:
    res = train(TrainRun(loss=loss, epochs=epochs, seed=0), manifest)
    last = res.log[-1]
    dice = " ".join(f"{d:.2f}" for d in last.val_dice)
    print(f"{name:12s} validation Dice per label: {dice}")
