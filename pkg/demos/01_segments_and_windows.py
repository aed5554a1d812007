"""Segments, temporal windows and the synthetic temporal-context dataset.

Run:  python demos/01_segments_and_windows.py

A vibration recording is cut into 1024-sample segments with 50% overlap.
Each segment that has two neighbours on both sides also gets a five-segment
temporal window (2 x 5120 samples) labelled by its centre segment.  The
synthetic generator hides the class cue in a slow amplitude envelope, which
is why the window matters.
"""

import numpy as np

from tcmkd import signal as sg

# %% Count laws ---------------------------------------------------------------
# With hop 512, N samples give floor((N - 1024) / 512) + 1 segments, and the
# two segments at each end have no full window.
for n in (25_000, 250_000):
    n_seg = sg.segment_count(n)
    print(f"{n:>7} samples -> {n_seg} segments, {max(n_seg - 4, 0)} windows")

# %% One synthetic recording per class ----------------------------------------
spec = sg.SynthSpec(recordings_per_class=1)
recs = sg.synth_generate(spec, seed=0)
print(f"\n{len(recs)} recordings, {spec.recording_length} samples at {spec.sample_rate_hz} Hz")
for rec in recs:
    carrier, period = sg.synth_class_params(spec, rec.label)
    print(f"  class {rec.label}: carrier {carrier:.0f} Hz, envelope period {period / spec.seg_len:.0f} segments")

# Classes 0/1 and 2/3 share a carrier, and averaged over a recording their
# segment energies look alike; only the rhythm of the envelope differs:
for rec in recs:
    segs = sg.segment_recording(rec)
    energy = np.array([s.data[0].var() for s in segs])
    print(f"  class {rec.label}: segment energy mean {energy.mean():.3f}, spread {energy.std():.3f}")

# %% Windows expose the envelope ----------------------------------------------
# Energy of consecutive segments traces the envelope; a window sees five of
# them, a segment sees one.
segs = sg.segment_recording(recs[0])
windows = sg.build_windows(segs)
w = windows[len(windows) // 2]
print(f"\nwindow centred on segment {w.center_index}: shape {w.data.shape}, label {w.label}")
for k, rec in enumerate(recs[:2]):
    energy = [s.data[0].var() for s in sg.segment_recording(rec)][:12]
    print(f"  class {k} energy over 12 segments: " + " ".join(f"{e:.2f}" for e in energy))

# %% Normalisation is fit on training segments only ---------------------------
train, test = sg.prepare_datasets(sg.synth_generate(sg.SynthSpec(recordings_per_class=2), seed=1), 4)
print(f"\ntrain: {len(train.segments)} segments / {len(train.windows)} windows; "
      f"test: {len(test.segments)} segments / {len(test.windows)} windows")
print(f"per-channel mean {np.round(train.norm_stats.mean, 4)}, std {np.round(train.norm_stats.std, 4)}")
