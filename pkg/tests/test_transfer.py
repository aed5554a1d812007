import logging

import numpy as np
import pytest
from scipy.stats import ortho_group
from sklearn.metrics import silhouette_score

from tcmkd import transfer as tr
from tcmkd.models import ArchitectureSpec, ConvLayer, build_model, forward_features
from tcmkd.signal import SynthSpec, prepare_unlabeled, synth_generate
from tcmkd.training import TrainConfig, VariantError


@pytest.fixture(scope="module")
def target():
    spec = SynthSpec(recordings_per_class=1, recording_length=8000, carrier_shift_hz=200.0)
    return prepare_unlabeled(synth_generate(spec, seed=4), 4)


# ---------------------------------------------------------------- extraction

def test_no_kd_embeddings_shape_and_purity(target):
    student = build_model("narrow", 4, seed=1)
    before = student.state_dict()
    emb = tr.extract_embeddings_no_kd(student, target)
    assert emb.vectors.shape == (len(target.windows), 256)
    assert emb.producer == "student_source"
    for k, v in student.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    x, _, _ = target.paired_arrays()
    assert emb.vectors.tobytes() == forward_features(student, x).tobytes()


def test_no_kd_identical_inputs_identical_rows(target):
    student = build_model("narrow", 4, seed=1)
    x, _, _ = target.paired_arrays()
    z = forward_features(student, np.stack([x[0], x[0], x[1]]))
    assert z[0].tobytes() == z[1].tobytes()


def test_no_kd_rejects_wide(target):
    with pytest.raises(VariantError):
        tr.extract_embeddings_no_kd(build_model("wide", 4), target)


# ---------------------------------------------------------------- adaptation

def test_adaptation_bookkeeping_and_frozen_teacher(target):
    teacher = build_model("wide", 4, seed=3)
    before = teacher.state_dict()
    cfg = TrainConfig(epochs=3, batch_size=16, seed=0)
    student, emb, log = tr.tcmkd_tl_adapt(teacher, target, cfg, keep_batches=True)
    for k, v in teacher.state_dict().items():
        assert v.tobytes() == before[k].tobytes()
    assert emb.producer == "student_target" and emb.vectors.shape == (len(target.windows), 256)
    assert len(log.losses) == 3
    for loss, batches in zip(log.losses, log.batches):
        zs = np.concatenate([b[0] for b in batches]).astype(np.float64)
        zt = np.concatenate([b[1] for b in batches]).astype(np.float64)
        assert abs(np.mean((zs - zt) ** 2) - loss) <= 1e-5 * max(1.0, loss)
    # classifier head never touched
    fresh = build_model("narrow", 4, seed=0)
    for k, p in student.clf_params.items():
        assert p.data.tobytes() == fresh.clf_params[k].data.tobytes()


def test_adaptation_toy_overfit_decreases_monotonically():
    spec = SynthSpec(recordings_per_class=1, recording_length=1024 + 13 * 512, num_classes=2,
                     carrier_hz=(1100.0,), modulation_periods=(4.0, 6.0))
    ds = prepare_unlabeled(synth_generate(spec, seed=0), 2)
    assert len(ds.windows) == 20
    ds.windows = ds.windows[:10]
    teacher = build_model("wide", 2, seed=9)
    cfg = TrainConfig(epochs=5, batch_size=10, shuffle=False, seed=0)
    _, _, log = tr.tcmkd_tl_adapt(teacher, ds, cfg)
    assert all(b < a for a, b in zip(log.losses, log.losses[1:])), log.losses


def test_adaptation_converges_on_small_target(target):
    teacher = build_model("wide", 4, seed=3)
    cfg = TrainConfig(epochs=80, batch_size=16, seed=0)
    _, _, log = tr.tcmkd_tl_adapt(teacher, target, cfg)
    assert log.losses[-1] < 0.1 * log.losses[0]


def test_adaptation_errors(target):
    with pytest.raises(VariantError):
        tr.tcmkd_tl_adapt(build_model("narrow", 4), target, TrainConfig(epochs=1))
    empty = prepare_unlabeled(synth_generate(SynthSpec(recordings_per_class=1, recording_length=2048), 0), 4)
    with pytest.raises(VariantError, match="windows"):
        tr.tcmkd_tl_adapt(build_model("wide", 4), empty, TrainConfig(epochs=1))
    other = ArchitectureSpec(conv_stack=ArchitectureSpec().conv_stack[:4] + (ConvLayer(64, 3, 1, 2),))
    with pytest.raises(VariantError, match="latent mismatch"):
        tr.tcmkd_tl_adapt(build_model("wide", 4, spec=other), target, TrainConfig(epochs=1),
                          student_spec=ArchitectureSpec())


# ---------------------------------------------------------------- projection

def test_projection_recovers_plane():
    rng = np.random.default_rng(0)
    z = np.zeros((50, 256))
    z[:, 3] = rng.standard_normal(50) * 3
    z[:, 7] = rng.standard_normal(50)
    proj = tr.fit_projection(z)
    in_plane = proj.components[:, [3, 7]]
    np.testing.assert_allclose(np.linalg.norm(in_plane, axis=1), 1, atol=1e-6)
    cov = np.cov(z.T, bias=True)
    residual = np.trace(cov) - proj.explained_variance.sum()
    assert abs(residual) < 1e-6


def test_projection_three_points_hand_case():
    z = np.zeros((3, 256))
    z[:, 0] = [0, 1, 2]
    proj = tr.fit_projection(z)
    np.testing.assert_allclose(proj.components[0], np.eye(256)[0], atol=1e-12)
    np.testing.assert_allclose(proj.explained_variance, [2 / 3, 0], atol=1e-12)
    np.testing.assert_allclose(tr.project(z.mean(axis=0, keepdims=True), proj), [[0, 0]], atol=1e-12)


def test_projection_properties_random():
    rng = np.random.default_rng(5)
    for _ in range(5):
        z = rng.standard_normal((40, 16)) @ rng.standard_normal((16, 16))
        proj = tr.fit_projection(z)
        np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(2), atol=1e-6)
        assert proj.explained_variance[0] >= proj.explained_variance[1] >= 0
        p = tr.project(z, proj)
        assert abs(p[:, 0].var() - proj.explained_variance[0]) < 1e-5 * max(1, proj.explained_variance[0])
        for row in proj.components:
            assert row[np.argmax(np.abs(row))] > 0


def test_projection_degenerate():
    with pytest.raises(tr.DegenerateInputError):
        tr.fit_projection(np.ones((5, 4)))
    with pytest.raises(tr.DegenerateInputError):
        tr.fit_projection(np.ones((2, 4)))


# ---------------------------------------------------------------- anomaly

def test_score_of_mean_is_zero():
    rng = np.random.default_rng(0)
    ref = rng.standard_normal((500, 8))
    m = tr.fit_anomaly_model(ref)
    assert tr.score(m.mean[None], m)[0] == pytest.approx(0.0, abs=1e-12)


def test_unit_offset_under_identity_covariance():
    rng = np.random.default_rng(1)
    ref = rng.standard_normal((200_000, 4))
    m = tr.fit_anomaly_model(ref)
    point = m.mean + np.array([1.0, 0, 0, 0])
    assert tr.score(point[None], m)[0] == pytest.approx(1.0, abs=0.01)


def test_self_flag_rate_matches_quantile():
    rng = np.random.default_rng(2)
    ref = rng.standard_normal((3000, 16))
    m = tr.fit_anomaly_model(ref, q=0.99)
    rate = tr.flag(tr.score(ref, m), m).mean()
    assert abs(rate - 0.01) <= 0.005


def test_rank_deficient_reference_is_handled_by_ridge():
    rng = np.random.default_rng(3)
    ref = np.zeros((10, 32))
    ref[:, :3] = rng.standard_normal((10, 3))
    m = tr.fit_anomaly_model(ref)
    assert np.all(np.isfinite(tr.score(ref, m)))
    with pytest.raises(ValueError):
        tr.fit_anomaly_model(np.zeros((0, 4)))


def test_scores_rotation_invariant():
    rng = np.random.default_rng(4)
    ref = rng.standard_normal((400, 10)) * np.linspace(0.5, 3, 10)
    pts = rng.standard_normal((30, 10)) * 2
    base = tr.score(pts, tr.fit_anomaly_model(ref, ridge=0.0))
    for seed in range(3):
        rot = ortho_group.rvs(10, random_state=seed)
        got = tr.score(pts @ rot, tr.fit_anomaly_model(ref @ rot, ridge=0.0))
        np.testing.assert_allclose(got, base, atol=1e-5)


# ---------------------------------------------------------------- silhouette

def brute_silhouette(z, labels):
    n = len(z)
    s = []
    for i in range(n):
        own = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not own:
            s.append(0.0)
            continue
        a = np.mean([np.linalg.norm(z[i] - z[j]) for j in own])
        b = min(np.mean([np.linalg.norm(z[i] - z[j]) for j in range(n) if labels[j] == c])
                for c in set(labels) if c != labels[i])
        s.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return float(np.mean(s))


def test_silhouette_far_clusters():
    rng = np.random.default_rng(0)
    z = np.concatenate([rng.standard_normal((20, 3)) * 0.01, rng.standard_normal((20, 3)) * 0.01 + 100])
    assert tr.silhouette(z, np.repeat([0, 1], 20)) == pytest.approx(1.0, abs=1e-3)


def test_silhouette_random_labels_near_zero():
    vals = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((300, 5))
        vals.append(tr.silhouette(z, rng.integers(0, 3, 300)))
    assert abs(np.mean(vals)) <= 0.1


def test_silhouette_coincident_clusters_six_points():
    z = np.array([[0.0, 0], [1, 0], [0, 1], [0.0, 0], [1, 0], [0, 1]])
    labels = np.array([0, 0, 0, 1, 1, 1])
    got = tr.silhouette(z, labels)
    assert got == pytest.approx(brute_silhouette(z, labels), abs=1e-12)
    assert got <= 0


def test_silhouette_matches_reference_implementation():
    rng = np.random.default_rng(7)
    z = rng.standard_normal((60, 4))
    labels = rng.integers(0, 4, 60)
    assert tr.silhouette(z, labels) == pytest.approx(silhouette_score(z, labels), abs=1e-12)
    assert tr.silhouette(z, labels) == pytest.approx(brute_silhouette(z, labels), abs=1e-12)


def test_silhouette_singleton_cluster(caplog):
    z = np.array([[0.0], [0.1], [5.0], [5.1], [20.0]])
    labels = np.array([0, 0, 1, 1, 2])
    with caplog.at_level(logging.WARNING):
        got = tr.silhouette(z, labels)
    assert "singleton" in caplog.text
    assert got == pytest.approx(brute_silhouette(z, labels), abs=1e-12)


# ---------------------------------------------------------------- CSV

def test_embeddings_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    emb = tr.EmbeddingSet(rng.standard_normal((4, 3)), np.array([0, 1, 1, 2]))
    path = tmp_path / "e.csv"
    path.write_text(tr.embeddings_to_csv(emb, scores=np.arange(4.0)))
    assert path.read_text().splitlines()[0] == "z0,z1,z2,label,score"
    back = tr.read_embeddings_csv(path)
    np.testing.assert_array_equal(back.vectors, emb.vectors)
    np.testing.assert_array_equal(back.labels, emb.labels)
    np.testing.assert_array_equal(back.scores, np.arange(4.0))


def test_embeddings_csv_schema_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(tr.SchemaError):
        tr.read_embeddings_csv(p)
    p.write_text("z0,z1\n1,2\n3\n")
    with pytest.raises(tr.SchemaError, match="line 3"):
        tr.read_embeddings_csv(p)


def test_projection_csv_header():
    text = tr.projection_to_csv(np.zeros((2, 2)), labels=[0, 1])
    assert text.splitlines()[0] == "x,y,label,score"
    assert text.endswith("\n") and "\r" not in text


def test_rank_deficient_reference_warns(caplog):
    z = np.random.default_rng(0).standard_normal((10, 16))
    with caplog.at_level("WARNING", logger="tcmkd.transfer"):
        tr.fit_anomaly_model(z)
    assert "rank-deficient" in caplog.text
