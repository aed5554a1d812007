"""Transfer to an unlabelled target domain and embedding-based anomaly flags.

Run:  python demos/04_transfer_and_anomalies.py [--quick]

The target domain shifts every carrier frequency by 300 Hz.  Without
adaptation the source-trained student embeds target segments directly.  With
adaptation a fresh student is trained on the target signals alone to
reproduce the frozen source teacher's latent for the matching window.
Labels of the target are used only to measure separability afterwards.

For anomaly detection, class 0 stands in for the normal condition: its
embeddings form the reference Gaussian and everything else is scored by
Mahalanobis distance.  A few hundred reference points cannot pin down a
256-d covariance, so scoring happens in the 2-D principal plane here.
"""

import argparse
from dataclasses import replace

import numpy as np

from tcmkd import signal as sg
from tcmkd import transfer as tl
from tcmkd.training import TrainConfig, distill_student, train_teacher

parser = argparse.ArgumentParser()
parser.add_argument("--quick", action="store_true", help="fewer epochs")
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

source_spec = sg.SynthSpec()
source_epochs, adapt_epochs = (20, 30) if args.quick else (50, 100)

# %% Source domain: teacher and distilled student ------------------------------
train, test = sg.prepare_datasets(sg.synth_generate(source_spec, seed=args.seed), source_spec.num_classes)
cfg = TrainConfig(epochs=source_epochs, seed=args.seed)
teacher, _ = train_teacher(train, test, cfg)
student, h = distill_student(train, test, teacher, cfg)
print(f"source student test accuracy {h[-1].test_accuracy:.3f}")

# %% Target domain ---------------------------------------------------------------
target_spec = replace(source_spec, carrier_shift_hz=300.0, recordings_per_class=5)
target = sg.prepare_unlabeled(sg.synth_generate(target_spec, seed=1000 + args.seed), target_spec.num_classes)
print(f"target: {len(target.windows)} time steps, carriers shifted by {target_spec.carrier_shift_hz:.0f} Hz")

no_kd = tl.extract_embeddings_no_kd(student, target)
_, adapted, log = tl.tcmkd_tl_adapt(teacher, target, TrainConfig(epochs=adapt_epochs, seed=args.seed))
print(f"adaptation mse: {log.losses[0]:.3f} -> {log.losses[-1]:.3f} over {len(log.losses)} epochs")
print(f"silhouette without adaptation {tl.silhouette(no_kd):+.4f}, with adaptation {tl.silhouette(adapted):+.4f}")

# %% 2-D projection for plotting ---------------------------------------------------
proj = tl.fit_projection(adapted)
points = tl.project(adapted, proj)
share = proj.explained_variance / np.trace(np.cov(adapted.vectors.T, bias=True))
print(f"top-2 principal axes explain {100 * share.sum():.1f}% of the latent variance")
for k in range(target_spec.num_classes):
    c = points[adapted.labels == k].mean(axis=0)
    print(f"  class {k} centroid in the plane: ({c[0]:+.2f}, {c[1]:+.2f})")

# %% Anomaly scoring against a normal-condition reference ---------------------------
normal = np.flatnonzero(adapted.labels == 0)
reference, held_out = normal[::2], normal[1::2]
model = tl.fit_anomaly_model(points[reference], q=0.99)
flags = tl.flag(tl.score(points, model), model)
print(f"\nthreshold {model.threshold:.2f} at q = {model.q}, {len(reference)} reference points")
print(f"held-out normal segments flagged: {100 * flags[held_out].mean():.1f}%")
for k in range(1, target_spec.num_classes):
    print(f"class {k} segments flagged as anomalous: {100 * flags[adapted.labels == k].mean():.1f}%")
