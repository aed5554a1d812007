"""Transfer to an unlabeled target domain and embedding-based anomaly detection.

Two ways of obtaining target-domain embeddings are provided:

* ``extract_embeddings_no_kd`` runs the source-trained student as-is;
* ``tcmkd_tl_adapt`` trains a fresh student feature extractor on the target
  domain to reproduce the frozen source teacher's latents of the matching
  temporal windows (MSE only, no labels).

Embeddings are then projected to 2-D with PCA, scored with a Mahalanobis
distance against a normal-condition reference, and compared by silhouette.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from . import autodiff as ad
from .autodiff import Tensor
from .models import Model, build_model, forward_features
from .signal import LabeledDataset
from .training import TrainConfig, VariantError, model_inputs

log = logging.getLogger(__name__)

PRODUCERS = ("student_source", "teacher_source_on_target", "student_target")


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: np.ndarray | None = None
    domain_tag: str = "target"
    producer: str = "student_source"
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise ValueError("embedding vectors must be an N x d matrix")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding vectors contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if len(self.labels) != len(self.vectors):
                raise ValueError(f"{len(self.labels)} labels for {len(self.vectors)} vectors")
        if self.producer not in PRODUCERS:
            raise ValueError(f"unknown producer {self.producer!r}")

    def __len__(self):
        return len(self.vectors)


def _labels_or_none(y):
    return None if y is None or len(y) == 0 or np.any(y < 0) else y


def extract_embeddings_no_kd(student_source: Model, target: LabeledDataset) -> EmbeddingSet:
    """Target latents from the source-trained student, without any adaptation."""
    if student_source.variant != "narrow":
        raise VariantError(f"no-KD transfer needs a narrow (student) model, got {student_source.variant}")
    x, y = model_inputs(student_source, target)
    z = forward_features(student_source, x)
    return EmbeddingSet(z, _labels_or_none(y), target.domain_tag, "student_source")


def extract_teacher_embeddings(teacher: Model, target: LabeledDataset) -> EmbeddingSet:
    if teacher.variant != "wide":
        raise VariantError(f"teacher must be a wide model, got {teacher.variant}")
    w, y = model_inputs(teacher, target)
    return EmbeddingSet(forward_features(teacher, w), _labels_or_none(y), target.domain_tag,
                        "teacher_source_on_target")


@dataclass
class AdaptationLog:
    losses: list = field(default_factory=list)
    # per epoch: list of (student batch latents, teacher batch latents) as seen by the loss
    batches: list = field(default_factory=list)


def tcmkd_tl_adapt(teacher_source: Model, target: LabeledDataset, config: TrainConfig = TrainConfig(),
                   keep_batches=False, callback=None, student_spec=None):
    """Train a fresh target student feature extractor against frozen teacher latents.

    Returns ``(student_target, embeddings, adaptation_log)``.  The logged loss
    of an epoch is the mean squared error over every latent entry of every
    batch, evaluated before that batch's parameter update.
    """
    if teacher_source.variant != "wide":
        raise VariantError(f"teacher must be a wide model, got {teacher_source.variant}")
    if not target.windows:
        raise VariantError("no temporal windows could be built on the target domain")
    student = build_model("narrow", teacher_source.spec.num_classes, seed=config.seed,
                          spec=student_spec or teacher_source.spec)
    if student.latent_dim != teacher_source.latent_dim:
        raise VariantError(f"latent mismatch: student {student.latent_dim} vs teacher {teacher_source.latent_dim}")
    x, w, y = target.paired_arrays()
    z_teacher = forward_features(teacher_source, w)
    params = list(student.fe_params.values())
    rng = np.random.default_rng(config.seed)
    out = AdaptationLog()
    n = len(x)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        sq_sum = 0.0
        kept = []
        for i in range(0, n, config.batch_size):
            idx = order[i:i + config.batch_size]
            z = student.features(x[idx])
            target_z = z_teacher[idx]
            loss = ad.mse(z, Tensor(target_z))
            if keep_batches:
                kept.append((z.data.copy(), target_z))
            ad.backward(loss)
            ad.adam_step(params, config.adam)
            sq_sum += float(loss.data) * z.data.size
        epoch_loss = sq_sum / (n * student.latent_dim)
        if not np.isfinite(epoch_loss):
            raise FloatingPointError(f"non-finite adaptation loss at epoch {epoch}")
        out.losses.append(epoch_loss)
        if keep_batches:
            out.batches.append(kept)
        log.info("adapt epoch %d mse %.5f", epoch, epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss)
    student.provenance = {"role": "student_target", "epochs": config.epochs, "seed": config.seed,
                          "dataset": target.domain_tag, "head": "untrained"}
    emb = EmbeddingSet(forward_features(student, x), _labels_or_none(y), target.domain_tag, "student_target")
    return student, emb, out


def loss_curve_csv(losses) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "mse"])
    for i, v in enumerate(losses, start=1):
        w.writerow([i, repr(float(v))])
    return buf.getvalue()


# --------------------------------------------------------------------------
# 2-D projection


class DegenerateInputError(ValueError):
    pass


@dataclass
class Projection2D:
    components: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray


def _vectors(emb):
    return emb.vectors if isinstance(emb, EmbeddingSet) else np.asarray(emb)


def fit_projection(embeddings) -> Projection2D:
    """Top-2 principal axes from the eigendecomposition of the covariance.

    Variances use the population convention (divide by N).  Each component
    is signed so that its largest-magnitude entry is positive.
    """
    z = _vectors(embeddings).astype(np.float64)
    if len(z) < 3:
        raise DegenerateInputError(f"need at least 3 points for a projection, got {len(z)}")
    mean = z.mean(axis=0)
    zc = z - mean
    if not np.any(zc):
        raise DegenerateInputError("all embedding points are identical")
    cov = zc.T @ zc / len(z)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    comps = evecs[:, order].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    var = np.clip(evals[order], 0.0, None)
    return Projection2D(comps, mean, var)


def project(embeddings, proj: Projection2D) -> np.ndarray:
    return (_vectors(embeddings).astype(np.float64) - proj.mean) @ proj.components.T


# --------------------------------------------------------------------------
# anomaly scoring


@dataclass
class AnomalyModel:
    mean: np.ndarray
    covariance: np.ndarray
    threshold: float
    ridge: float = 1e-6
    q: float = 0.99

    def __post_init__(self):
        self._chol = linalg.cho_factor(self.covariance + self.ridge * np.eye(len(self.mean)), lower=True)


def _mahalanobis(z, mean, chol):
    d = np.asarray(z, dtype=np.float64) - mean
    sol = linalg.cho_solve(chol, d.T)
    return np.sqrt(np.maximum(np.einsum("ij,ji->i", d, sol), 0.0))


def fit_anomaly_model(reference, ridge=1e-6, q=0.99) -> AnomalyModel:
    """Gaussian envelope of normal-condition embeddings with a quantile threshold."""
    z = _vectors(reference).astype(np.float64)
    if len(z) == 0:
        raise ValueError("empty reference set")
    if len(z) <= z.shape[1]:
        log.warning("reference set has %d points in %d dimensions; the covariance is rank-deficient "
                    "and distances are dominated by the ridge", len(z), z.shape[1])
    mean = z.mean(axis=0)
    zc = z - mean
    cov = zc.T @ zc / len(z)
    cov = (cov + cov.T) / 2
    model = AnomalyModel(mean, cov, 0.0, ridge, q)
    model.threshold = float(np.quantile(_mahalanobis(z, mean, model._chol), q))
    return model


def score(embeddings, model: AnomalyModel) -> np.ndarray:
    """Mahalanobis distance of each embedding from the reference Gaussian."""
    return _mahalanobis(_vectors(embeddings), model.mean, model._chol)


def flag(scores, model: AnomalyModel) -> np.ndarray:
    return np.asarray(scores) > model.threshold


# --------------------------------------------------------------------------
# separability


def silhouette(vectors, labels=None) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Points in singleton clusters get a coefficient of 0.
    """
    if isinstance(vectors, EmbeddingSet):
        labels = vectors.labels if labels is None else labels
        vectors = vectors.vectors
    if labels is None:
        raise ValueError("silhouette needs labels")
    z = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2:
        raise ValueError("silhouette needs at least 2 labelled clusters")
    if np.any(counts < 2):
        log.warning("singleton cluster(s) %s; their coefficients are set to 0",
                    classes[counts < 2].tolist())
    d = cdist(z, z)
    member = labels[:, None] == classes[None, :]
    sums = d @ member
    own = np.searchsorted(classes, labels)
    n_own = counts[own]
    a = sums[np.arange(len(z)), own] / np.maximum(n_own - 1, 1)
    means = sums / counts[None, :]
    means[np.arange(len(z)), own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1), 0.0)
    s[n_own < 2] = 0.0
    return float(s.mean())


# --------------------------------------------------------------------------
# CSV interfaces


class SchemaError(ValueError):
    pass


def embeddings_to_csv(emb: EmbeddingSet, scores=None) -> str:
    d = emb.vectors.shape[1]
    scores = emb.scores if scores is None else scores
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = [f"z{i}" for i in range(d)]
    if emb.labels is not None:
        header.append("label")
    if scores is not None:
        header.append("score")
    w.writerow(header)
    for i, row in enumerate(emb.vectors):
        rec = [repr(float(v)) for v in row]
        if emb.labels is not None:
            rec.append(int(emb.labels[i]))
        if scores is not None:
            rec.append(repr(float(scores[i])))
        w.writerow(rec)
    return buf.getvalue()


def read_embeddings_csv(path, producer="student_source", domain_tag="target") -> EmbeddingSet:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file, expected header z0..z(d-1)[,label][,score]")
    header = rows[0]
    zcols = [i for i, h in enumerate(header) if h.startswith("z")]
    expected = [f"z{i}" for i in range(len(zcols))]
    if [header[i] for i in zcols] != expected or zcols != list(range(len(zcols))) or not zcols:
        raise SchemaError(f"{path}: latent columns must be z0..z(d-1) in order, got {header[:len(zcols) + 1]}")
    extra = header[len(zcols):]
    if any(h not in ("label", "score", "flag") for h in extra):
        raise SchemaError(f"{path}: unexpected columns {[h for h in extra if h not in ('label', 'score', 'flag')]}")
    body = rows[1:]
    for n, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise SchemaError(f"{path}: line {n} has {len(r)} columns, header has {len(header)}")
    data = np.array([[float(v) for v in r[:len(zcols)]] for r in body]).reshape(len(body), len(zcols))
    labels = None
    if "label" in extra:
        li = header.index("label")
        labels = np.array([int(r[li]) for r in body], dtype=np.int64)
    scores = None
    if "score" in extra:
        si = header.index("score")
        scores = np.array([float(r[si]) for r in body])
    return EmbeddingSet(data, labels, domain_tag, producer, scores)


def projection_to_csv(points, labels=None, scores=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y", "label", "score"])
    for i, (px, py) in enumerate(points):
        w.writerow([repr(float(px)), repr(float(py)),
                    "" if labels is None else int(labels[i]),
                    "" if scores is None else repr(float(scores[i]))])
    return buf.getvalue()


__all__ = [
    "AdaptationLog", "AnomalyModel", "DegenerateInputError", "EmbeddingSet", "Projection2D",
    "SchemaError", "embeddings_to_csv", "extract_embeddings_no_kd", "extract_teacher_embeddings",
    "fit_anomaly_model", "fit_projection", "flag", "loss_curve_csv", "project", "projection_to_csv",
    "read_embeddings_csv", "score", "silhouette", "tcmkd_tl_adapt",
]
