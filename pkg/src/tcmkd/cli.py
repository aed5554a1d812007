"""Command-line entry point: ``tcmkd <command> ...``.

Every command that produces a run directory writes ``manifest.json`` first,
holding the resolved configuration, CRC32 hashes of its inputs, the seed and
the tool version.  Exit codes: 0 success, 1 runtime failure, 2 usage error.

Configuration is a flat ``key = value`` file (``#`` starts a comment) passed
with ``--config``; command-line flags override it and ``--print-config``
shows the fully resolved set.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import zipfile
import zlib
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import signal as sg
from . import training as tr
from . import transfer as tl
from .autodiff import AdamConfig
from .models import CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger("tcmkd")

DEFAULTS = {
    "seed": 0,
    "epochs": 100,
    "batch_size": 64,
    "learning_rate": 1e-3,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_epsilon": 1e-8,
    "kd_weight": 1.0,
    "shuffle": True,
    "train_fraction": 0.8,
    "overlap_fraction": 0.5,
    "num_classes": 0,  # 0 = one more than the largest label seen at ingest
    "q": 0.99,
    "ridge": 1e-6,
    "synth_recordings_per_class": 10,
    "synth_recording_length": 25_000,
    "synth_noise": 0.15,
    "synth_carrier_shift_hz": 0.0,
}


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


# --------------------------------------------------------------------------
# configuration


def _parse_value(key, text):
    kind = type(DEFAULTS[key])
    text = text.strip()
    if kind is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r} expects a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise UsageError(f"config key {key!r} expects {kind.__name__}, got {text!r}") from None


def read_config_file(path):
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        values[key] = _parse_value(key, value)
    return values


def resolve_config(args):
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def format_config(cfg):
    return "".join(f"{k} = {str(v).lower() if isinstance(v, bool) else v}\n" for k, v in sorted(cfg.items()))


def train_config(cfg):
    adam = AdamConfig(cfg["learning_rate"], cfg["beta1"], cfg["beta2"], cfg["adam_epsilon"])
    return tr.TrainConfig(cfg["epochs"], cfg["batch_size"], adam, cfg["kd_weight"], cfg["seed"], cfg["shuffle"])


# --------------------------------------------------------------------------
# run manifests and file helpers


def crc32_file(path):
    crc = 0
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            crc = zlib.crc32(chunk, crc)
    return f"{crc:08x}"


def write_manifest(out_dir, command, cfg, inputs, outputs):
    manifest = {
        "command": command,
        "config": cfg,
        "inputs": {str(p): crc32_file(p) for p in inputs},
        "seed": cfg["seed"],
        "tool_version": __version__,
        "outputs": sorted(outputs),
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _save_npz(path, arrays):
    """``np.savez`` with fixed zip timestamps so identical data gives identical bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


# --------------------------------------------------------------------------
# persisted datasets


def save_dataset(ds: sg.LabeledDataset, path):
    _save_npz(path, {
        "x": np.stack([s.data for s in ds.segments]).astype(np.float32),
        "label": np.array([s.label for s in ds.segments], dtype=np.int64),
        "source": np.array([s.source_id for s in ds.segments], dtype=str),
        "index": np.array([s.index for s in ds.segments], dtype=np.int64),
        "start": np.array([s.start for s in ds.segments], dtype=np.int64),
    })


def load_dataset(path, meta):
    with np.load(path, allow_pickle=False) as z:
        x, label, source, index, start = z["x"], z["label"], z["source"], z["index"], z["start"]
    groups = {}
    for i in range(len(x)):
        seg = sg.Segment(str(source[i]), int(index[i]), x[i], int(label[i]), int(start[i]))
        groups.setdefault(seg.source_id, []).append(seg)
    segments, windows = [], []
    for group in groups.values():
        segments.extend(group)
        if meta["windows"]:
            windows.extend(sg.build_windows(group))
    stats = sg.NormStats(np.array(meta["norm_mean"], np.float32), np.array(meta["norm_std"], np.float32),
                         meta.get("norm_provenance", ""))
    return sg.LabeledDataset(segments, windows, meta["num_classes"], stats, meta["domain_tag"])


def open_dataset_dir(path):
    """Return ``(meta, {split: LabeledDataset}, input files)`` of an ingested dataset."""
    path = Path(path)
    meta_path = path / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{path}: missing dataset.json; run 'tcmkd ingest' first")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    splits, files = {}, [meta_path]
    for split in meta["splits"]:
        f = path / f"{split}.npz"
        if not f.exists():
            raise FileNotFoundError(f"{path}: missing dataset file {f.name}")
        splits[split] = load_dataset(f, meta)
        files.append(f)
    return meta, splits, files


def _require_windows(meta, path, what):
    if not meta["windows"]:
        raise tr.VariantError(
            f"{what} needs temporal windows but {path} was ingested with --no-windows; "
            "re-run 'tcmkd ingest' without it (each recording needs at least 5 segments)")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg):
    spec = sg.SynthSpec(recordings_per_class=cfg["synth_recordings_per_class"],
                        recording_length=cfg["synth_recording_length"],
                        noise=cfg["synth_noise"], carrier_shift_hz=cfg["synth_carrier_shift_hz"])
    recs = sg.synth_generate(spec, seed=cfg["seed"])
    names = [f"{r.id}.traw" for r in recs]
    out = Path(args.out)
    write_manifest(out, "synth", cfg, [], names)
    for rec, name in zip(recs, names):
        sg.write_recording(rec, out / name)
    print(f"recordings: {len(recs)}, classes: {spec.num_classes}, samples each: {spec.recording_length}")
    return 0


def cmd_convert(args, cfg):
    if args.sample_rate is None:
        raise UsageError("convert needs --sample-rate")
    sg.convert_csv_to_traw(args.input, args.out, args.sample_rate, args.label)
    print(f"wrote {args.out}")
    return 0


def _load_inputs(paths, args):
    recs, errors = [], []
    for p in paths:
        fmt = "csv" if Path(p).suffix.lower() == ".csv" else "traw"
        if fmt == "csv" and args.sample_rate is None:
            errors.append(f"{p}: CSV input needs --sample-rate")
            continue
        try:
            recs.append(sg.load_recording(p, fmt, args.sample_rate, args.label))
        except (OSError, ValueError) as exc:
            errors.append(str(exc))
    return recs, errors


def cmd_ingest(args, cfg):
    if not args.inputs:
        raise UsageError("ingest needs at least one input recording")
    recs, errors = _load_inputs(args.inputs, args)
    if errors:
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        print(f"error: {len(errors)} of {len(args.inputs)} input file(s) could not be parsed", file=sys.stderr)
        return 1
    rates = sorted({r.sample_rate_hz for r in recs})
    if len(rates) > 1:
        log.warning("mixed sample rates across inputs: %s Hz", ", ".join(map(str, rates)))
    labels = [r.label for r in recs if r.label is not None]
    num_classes = cfg["num_classes"] or (max(labels) + 1 if labels else 1)
    hop = sg.hop_length(sg.SEG_LEN, cfg["overlap_fraction"])
    n_seg = sum(sg.segment_count(r.n_samples, sg.SEG_LEN, hop) for r in recs)
    n_win = 0 if args.no_windows else sum(
        max(sg.segment_count(r.n_samples, sg.SEG_LEN, hop) - 2 * sg.HALF_WINDOW, 0) for r in recs)

    if args.domain == "source":
        if len(labels) != len(recs):
            raise ValueError("source-domain ingest needs a label on every recording (TRAW header or --label)")
        train, test = sg.prepare_datasets(recs, num_classes, cfg["train_fraction"],
                                          overlap_fraction=cfg["overlap_fraction"])
        splits = {"train": train, "test": test}
    else:
        splits = {"data": sg.prepare_unlabeled(recs, num_classes, overlap_fraction=cfg["overlap_fraction"])}

    out = Path(args.out)
    write_manifest(out, "ingest", cfg, args.inputs, ["dataset.json", *(f"{k}.npz" for k in splits)])
    stats = next(iter(splits.values())).norm_stats
    meta = {"domain_tag": args.domain, "num_classes": num_classes, "windows": not args.no_windows,
            "splits": list(splits), "norm_mean": stats.mean.tolist(), "norm_std": stats.std.tolist(),
            "norm_provenance": stats.provenance, "sample_rates": rates}
    write_text(out / "dataset.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    for name, ds in splits.items():
        save_dataset(ds, out / f"{name}.npz")
    print(f"segments: {n_seg}, windows: {n_win}")
    for name, ds in splits.items():
        print(f"{name}: segments {len(ds.segments)}, windows {len(ds.windows) if not args.no_windows else 0}")
    return 0


def _source_splits(path):
    meta, splits, files = open_dataset_dir(path)
    if "train" not in splits:
        raise ValueError(f"{path} is a target-domain dataset; training needs a labelled source dataset")
    return meta, splits["train"], splits["test"], files


def _finish_training(out, model, history, test, role):
    save_checkpoint(model, out / "model.ckpt")
    tr.write_metrics_csv(history, out / "metrics.csv")
    acc, cm = tr.evaluate(model, test)
    write_text(out / "confusion.csv", cm.to_csv())
    last = history[-1]
    print(f"{role}: epochs {last.epoch}, train_acc {last.train_accuracy:.4f}, test_acc {acc:.4f}")


TRAIN_OUTPUTS = ["model.ckpt", "metrics.csv", "confusion.csv"]


def cmd_train(args, cfg):
    meta, train, test, files = _source_splits(args.dataset)
    if args.model == "teacher":
        _require_windows(meta, args.dataset, "--model teacher")
    elif not meta["windows"]:
        log.info("dataset has no windows; the baseline uses every segment")
    out = Path(args.out)
    write_manifest(out, "train", cfg, files, TRAIN_OUTPUTS)
    fit = tr.train_teacher if args.model == "teacher" else tr.train_baseline
    model, history = fit(train, test, train_config(cfg))
    _finish_training(out, model, history, test, args.model)
    return 0


def cmd_distill(args, cfg):
    meta, train, test, files = _source_splits(args.dataset)
    _require_windows(meta, args.dataset, "distillation")
    teacher = load_checkpoint(args.teacher, expect_variant="wide")
    out = Path(args.out)
    write_manifest(out, "distill", cfg, [*files, args.teacher], TRAIN_OUTPUTS)
    model, history = tr.distill_student(train, test, teacher, train_config(cfg))
    _finish_training(out, model, history, test, "student")
    return 0


def cmd_transfer(args, cfg):
    needed = "--student" if args.mode == "no-kd" else "--teacher"
    ckpt = args.student if args.mode == "no-kd" else args.teacher
    if ckpt is None:
        raise UsageError(f"--mode {args.mode} needs {needed}")
    meta, splits, files = open_dataset_dir(args.dataset)
    target = splits.get("data")
    if target is None:
        target = splits["train"]
        log.warning("%s is a source dataset; using its training split as the target", args.dataset)
    _require_windows(meta, args.dataset, "transfer")
    out = Path(args.out)
    outputs = ["embeddings.csv", "projection.csv"]
    if args.mode == "tcmkd":
        outputs += ["student_target.ckpt", "adaptation_loss.csv"]
    model = load_checkpoint(ckpt, expect_variant="narrow" if args.mode == "no-kd" else "wide")
    write_manifest(out, "transfer", {**cfg, "mode": args.mode}, [*files, ckpt], outputs)
    if args.mode == "no-kd":
        emb = tl.extract_embeddings_no_kd(model, target)
    else:
        student, emb, adapt = tl.tcmkd_tl_adapt(model, target, train_config(cfg))
        save_checkpoint(student, out / "student_target.ckpt")
        write_text(out / "adaptation_loss.csv", tl.loss_curve_csv(adapt.losses))
        print(f"adaptation mse: first {adapt.losses[0]:.6f}, last {adapt.losses[-1]:.6f}")
    write_text(out / "embeddings.csv", tl.embeddings_to_csv(emb))
    points = tl.project(emb, tl.fit_projection(emb))
    write_text(out / "projection.csv", tl.projection_to_csv(points, emb.labels))
    print(f"embeddings: {len(emb)} x {emb.vectors.shape[1]} ({args.mode})")
    if emb.labels is not None and len(np.unique(emb.labels)) > 1:
        print(f"silhouette: {tl.silhouette(emb):.4f}")
    return 0


def cmd_score(args, cfg):
    emb = tl.read_embeddings_csv(args.embeddings)
    ref = tl.read_embeddings_csv(args.reference)
    if ref.vectors.shape[1] != emb.vectors.shape[1]:
        raise tl.SchemaError(f"{args.reference} has {ref.vectors.shape[1]} latent columns, "
                             f"{args.embeddings} has {emb.vectors.shape[1]}")
    model = tl.fit_anomaly_model(ref, ridge=cfg["ridge"], q=cfg["q"])
    scores = tl.score(emb, model)
    flags = tl.flag(scores, model)
    out = Path(args.out)
    write_manifest(out, "score", cfg, [args.embeddings, args.reference], ["scored.csv"])
    text = tl.embeddings_to_csv(replace(emb, scores=None), scores)
    rows = text.splitlines()
    body = [rows[0] + ",flag"] + [f"{r},{int(f)}" for r, f in zip(rows[1:], flags)]
    write_text(out / "scored.csv", "\n".join(body) + "\n")
    print(f"threshold: {model.threshold:.6f} (q = {cfg['q']})")
    print(f"flagged: {int(flags.sum())}/{len(flags)} ({100 * flags.mean():.2f}%)")
    return 0


def _read_metrics(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args, cfg):
    root = Path(args.run_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"{root}: not a directory")
    runs = []
    for mpath in sorted(root.rglob("manifest.json")):
        runs.append((mpath.parent, json.loads(mpath.read_text(encoding="utf-8"))))
    missing = []
    for run_dir, manifest in runs:
        missing += [str((run_dir / o).relative_to(root)) for o in manifest["outputs"] if not (run_dir / o).exists()]
    training = [(d, m) for d, m in runs if m["command"] in ("train", "distill")]
    if not training:
        missing.append("metrics.csv (no train or distill run found)")
    if missing:
        print("missing artifacts:", file=sys.stderr)
        for m in missing:
            print(f"  {m}", file=sys.stderr)
        return 1

    lines, curves = [], ["run,epoch,train_acc,test_acc"]
    for run_dir, m in training:
        name = str(run_dir.relative_to(root)) or "."
        rows = _read_metrics(run_dir / "metrics.csv")
        for r in rows:
            curves.append(f"{name},{r['epoch']},{r['train_acc']},{r['test_acc']}")
        best = max(float(r["test_acc"]) for r in rows)
        last = rows[-1]
        lines.append(f"{m['command']} {name}: final test_acc {float(last['test_acc']):.4f}, "
                     f"best {best:.4f}, train_acc {float(last['train_acc']):.4f}")
        cm = np.loadtxt(run_dir / "confusion.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)[:, 1:]
        off = cm - np.diag(np.diag(cm))
        if off.any():
            i, j = np.unravel_index(np.argmax(off), off.shape)
            lines.append(f"  most frequent confusion: class {i} predicted as {j} ({off[i, j]} times)")

    sil = {}
    sil_rows = ["run,mode,silhouette"]
    for run_dir, m in runs:
        if m["command"] != "transfer":
            continue
        emb = tl.read_embeddings_csv(run_dir / "embeddings.csv")
        if emb.labels is None or len(np.unique(emb.labels)) < 2:
            continue
        s = tl.silhouette(emb)
        mode = m["config"]["mode"]
        sil.setdefault(mode, []).append(s)
        name = str(run_dir.relative_to(root))
        sil_rows.append(f"{name},{mode},{s!r}")
        lines.append(f"transfer {name} ({mode}): silhouette {s:.4f}")
    if "tcmkd" in sil and "no-kd" in sil:
        a, b = np.mean(sil["tcmkd"]), np.mean(sil["no-kd"])
        rel = "≥" if a >= b else "<"
        lines.append(f"silhouette tcmkd {rel} no-kd: {a:.4f} {rel} {b:.4f}")

    text = "\n".join(lines) + "\n"
    write_text(root / "report.txt", text)
    write_text(root / "accuracy_curves.csv", "\n".join(curves) + "\n")
    write_text(root / "silhouettes.csv", "\n".join(sil_rows) + "\n")
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _config_parent():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration (override the config file)")
    g.add_argument("--config", help="key = value configuration file")
    g.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    for key, default in DEFAULTS.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            g.add_argument(flag, dest=key, type=lambda s, k=key: _parse_value(k, s), metavar="BOOL")
        else:
            g.add_argument(flag, dest=key, type=type(default), metavar=type(default).__name__.upper())
    return p


def build_parser():
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="tcmkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", parents=[parent], help="generate the synthetic temporal-context dataset as TRAW files")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("convert", parents=[parent], help="convert a CSV recording to TRAW")
    p.add_argument("input", nargs="?", help="CSV file, header row, one column per channel")
    p.add_argument("--out", help="TRAW file to write")
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--label", type=int)

    p = sub.add_parser("ingest", parents=[parent], help="segment, window and normalise recordings")
    p.add_argument("inputs", nargs="*", help="TRAW or CSV recordings")
    p.add_argument("--out", help="dataset directory")
    p.add_argument("--domain", choices=("source", "target"), default="source",
                   help="source: labelled, split into train/test; target: one unsplit set")
    p.add_argument("--sample-rate", type=int, help="sample rate for CSV inputs")
    p.add_argument("--label", type=int, help="label for inputs without one")
    p.add_argument("--no-windows", action="store_true", help="do not build five-segment windows")

    p = sub.add_parser("train", parents=[parent], help="train a baseline or a teacher")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--model", choices=("baseline", "teacher"), default="baseline")
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("distill", parents=[parent], help="distil a student from a teacher checkpoint")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--teacher", help="wide (teacher) checkpoint")
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("transfer", parents=[parent], help="embed a target dataset, with or without adaptation")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--mode", choices=("no-kd", "tcmkd"), default="tcmkd")
    p.add_argument("--teacher", help="source teacher checkpoint (tcmkd mode)")
    p.add_argument("--student", help="source student checkpoint (no-kd mode)")
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("score", parents=[parent], help="Mahalanobis anomaly scores against a reference set")
    p.add_argument("embeddings", nargs="?")
    p.add_argument("--reference", help="normal-condition embeddings CSV")
    p.add_argument("--out", help="run directory")

    p = sub.add_parser("report", parents=[parent], help="summarise the runs under a directory")
    p.add_argument("run_dir", nargs="?")
    return parser


REQUIRED = {
    "synth": ("out",),
    "convert": ("input", "out"),
    "ingest": ("out",),
    "train": ("dataset", "out"),
    "distill": ("dataset", "teacher", "out"),
    "transfer": ("dataset", "out"),
    "score": ("embeddings", "reference", "out"),
    "report": ("run_dir",),
}

COMMANDS = {
    "synth": cmd_synth, "convert": cmd_convert, "ingest": cmd_ingest, "train": cmd_train,
    "distill": cmd_distill, "transfer": cmd_transfer, "score": cmd_score, "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on malformed flags
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("tcmkd: error: a command is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(format_config(cfg))
            return 0
        absent = [name for name in REQUIRED[args.command] if getattr(args, name) is None]
        if absent:
            raise UsageError("missing required argument(s): " + ", ".join(
                name if name in ("dataset", "input", "embeddings", "run_dir") else "--" + name for name in absent))
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"tcmkd {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, CheckpointError, FloatingPointError) as exc:
        print(f"tcmkd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
