import math

import numpy as np
import pytest
from stubs import ConstantMotionStub, CopyStub, WarpStub

from occstep import tensor as tn
from occstep.benchmark import CorruptionSpec, SceneConfig, gen_discontinuous, gen_synthetic_scene
from occstep.checks import toy_model_config
from occstep.geometry import PlanarMotion, reflect_y, se2_to_se3
from occstep.grid import SemanticOccGrid, desk_geometry
from occstep.model import OccWorldModel
from occstep.rollout import (RolloutConfig, RolloutResult, TrainConfig, baseline_copy_forward,
                             evaluate, loss, proactive_rollout, reactive_rollout, split_all,
                             teacher_forced_ce, train, warmup)
from occstep.sequence import OccSequence

GEOM = desk_geometry((2, 8, 8), 0.5)
K = 4


def random_history(rng, n=4):
    poses = [se2_to_se3((0.5 * i, 0.1 * i, 0.05 * i)) for i in range(n)]
    return OccSequence([SemanticOccGrid(rng.integers(0, K, GEOM.dims), K, GEOM) for _ in range(n)],
                       poses)


def test_config_and_result_validation():
    with pytest.raises(ValueError):
        RolloutConfig(horizon=0)
    with pytest.raises(ValueError):
        RolloutResult([np.zeros((2, 1, 1, 1))], [], "reactive")
    with pytest.raises(ValueError):
        RolloutResult([], [], "sampled")


def test_argmax_ties_go_to_lower_class():
    p = np.full((3, 1, 1, 2), 1 / 3)
    assert RolloutResult([p], [PlanarMotion.zero()], "reactive").labels()[0].tolist() == [[[0, 0]]]


def test_copy_forward(rng):
    hist = random_history(rng)
    res = baseline_copy_forward(hist, 3)
    assert len(res) == 3 and res.mode == "copy"
    for lab in res.labels():
        np.testing.assert_array_equal(lab, hist.frames[-1].labels)
    assert all(e.as_array().tolist() == [0, 0, 0] for e in res.predicted_egos)


def test_copy_stub_repeats_last_history_frame(rng):
    hist = random_history(rng)
    stub = CopyStub(GEOM, K)
    res = reactive_rollout(hist, 5, stub)
    assert len(res) == 5 and stub.n_steps == len(hist) + 5
    for lab in res.labels():
        np.testing.assert_array_equal(lab, hist.frames[-1].labels)


@pytest.mark.parametrize("h,T", [(1, 1), (3, 2), (4, 6)])
def test_step_count_is_h_plus_T(rng, h, T):
    hist = random_history(rng, h)
    model = OccWorldModel(toy_model_config())
    g = model.cfg.grid
    hist = OccSequence([SemanticOccGrid(rng.integers(0, 3, g.dims), 3, g) for _ in range(h)],
                       hist.poses)
    reactive_rollout(hist, T, model)
    assert model.n_steps == h + T
    proactive_rollout(hist, [np.eye(4)] * T, model)
    assert model.n_steps == 2 * (h + T)


def test_warmup_single_frame_and_determinism(rng):
    model = OccWorldModel(toy_model_config())
    g = model.cfg.grid
    hist = OccSequence([SemanticOccGrid(rng.integers(0, 3, g.dims), 3, g)], [np.eye(4)])
    s = warmup(hist, model)
    assert s.frame_index == 1
    with tn.no_grad():
        ref = model.step(hist.frames[0].labels, model.initial_state(), np.eye(4)).state
    np.testing.assert_array_equal(s.S.data, ref.S.data)
    np.testing.assert_array_equal(warmup(hist, model).S.data, s.S.data)
    with pytest.raises(ValueError):
        warmup(None, model)


def test_warmup_composes_across_gaps(rng):
    hist = random_history(rng, 4)
    stub = WarpStub(GEOM, K)
    for seed in range(30):
        cut = gen_discontinuous(hist, CorruptionSpec("discontinuous", p_f=0.25, seed=seed))
        if cut.meta["kept"] == [0, 2, 3]:
            break
    warmup(cut, stub)
    np.testing.assert_allclose(stub.motions[1], hist.relatives[0] @ hist.relatives[1], atol=1e-12)
    np.testing.assert_array_equal(stub.motions[2], hist.relatives[2])


def test_reactive_warps_with_previous_ego_estimate(rng):
    hist = random_history(rng)
    ego = (0.3, -0.1, 0.2)
    stub = ConstantMotionStub(GEOM, K, ego)
    reactive_rollout(hist, 3, stub)
    for m in stub.motions[len(hist):]:
        np.testing.assert_allclose(m, se2_to_se3(ego), atol=1e-15)


def test_literal_flag_feeds_last_observation(rng):
    hist = random_history(rng)
    stub = ConstantMotionStub(GEOM, K, (0.5, 0, 0))
    reactive_rollout(hist, 3, stub, RolloutConfig(history=4, horizon=3, literal=True))
    for lab in stub.inputs[len(hist):]:
        np.testing.assert_array_equal(lab, hist.frames[-1].labels)


def test_proactive_length_check(rng):
    hist = random_history(rng)
    with pytest.raises(ValueError):
        proactive_rollout(hist, [np.eye(4)] * 2, CopyStub(GEOM, K), RolloutConfig(horizon=3))
    with pytest.raises(ValueError):
        proactive_rollout(hist, [], CopyStub(GEOM, K))


def test_proactive_identity_on_static_scene(rng):
    lab = rng.integers(0, K, GEOM.dims)
    hist = OccSequence([SemanticOccGrid(lab, K, GEOM)] * 3, [np.eye(4)] * 3)
    res = proactive_rollout(hist, [np.eye(4)] * 4, WarpStub(GEOM, K))
    for out in res.labels():
        np.testing.assert_array_equal(out, lab)


def test_proactive_fed_reactive_poses_matches_reactive(rng):
    model = OccWorldModel(toy_model_config(), seed=4)
    g = model.cfg.grid
    hist = OccSequence([SemanticOccGrid(rng.integers(0, 3, g.dims), 3, g) for _ in range(3)],
                       [se2_to_se3((0.2 * i, 0, 0.1 * i)) for i in range(3)])
    rea = reactive_rollout(hist, 4, model)
    pro = proactive_rollout(hist, rea.predicted_egos, model)
    for a, b in zip(rea.predicted_frames, pro.predicted_frames):
        assert np.abs(a - b).max() < 1e-6


def test_mirrored_scene_with_negated_yaws_mirrors_outputs():
    """Metric y runs along W, so the y mirror of a scene flips the last array axis."""
    scene = gen_synthetic_scene(SceneConfig(dims=(4, 16, 16), K=4, n_frames=6, box_size=(1.0, 2.0),
                                            box_height=(0.4, 1.0)), 5)
    g = scene.geometry
    hist = OccSequence(scene.frames[:3], scene.poses[:3])
    mirrored = OccSequence([f.with_labels(f.labels[:, :, ::-1]) for f in hist.frames],
                           [reflect_y(p) for p in hist.poses])
    fut = scene.relatives[2:5]
    a = proactive_rollout(hist, fut, WarpStub(g, 4))
    b = proactive_rollout(mirrored, [reflect_y(m) for m in fut], WarpStub(g, 4))
    for pa, pb in zip(a.predicted_frames, b.predicted_frames):
        np.testing.assert_allclose(pb, pa[..., ::-1], atol=1e-9)
    for ea, eb in zip(a.predicted_egos, b.predicted_egos):
        np.testing.assert_allclose(eb.as_array(), ea.as_array() * [1, -1, -1], atol=1e-12)


# ------------------------------------------------------------------ loss


def test_loss_examples():
    target = np.array([[[0, 1], [2, 3]]])  # (1, 2, 2) grid, K = 4
    perfect = 20.0 * (np.arange(4)[:, None, None, None] == target[None]).astype(float)
    ego = PlanarMotion(0.3, -0.2, 0.1)
    assert float(loss(perfect, target, ego.as_array(), ego).data) < 1e-6
    uniform = np.zeros((4, 1, 2, 2))
    ce_only = loss(uniform, target, ego.as_array(), ego, weights=(1.0, 0.0, 0.0))
    assert float(ce_only.data) == pytest.approx(math.log(4), abs=1e-6)
    spun = np.array([0.3, -0.2, 0.1 + 2 * math.pi])
    assert float(loss(perfect, target, spun, ego, weights=(0.0, 0.0, 1.0)).data) < 1e-9


def test_loss_terms_and_warning():
    target = np.full((1, 1, 2), -1)
    with pytest.warns(RuntimeWarning):
        v = loss(np.zeros((3, 1, 1, 2)), target, np.array([1.0, 0.0, 0.0]), (0.0, 0.0, 0.0))
    assert float(v.data) == pytest.approx(0.1 * 0.5 / 2)  # smooth-L1 mean over x, y
    with pytest.raises(ValueError):
        loss(np.zeros((3, 1, 1, 2)), target, np.zeros(3), np.zeros(3), weights=(1, -1, 0))


def test_loss_gradient_wrt_logits(rng):
    target = rng.integers(-1, 3, (1, 2, 2))
    target[0, 0, 0] = 1
    err = tn.grad_check(lambda z, e: loss(z, target, e, PlanarMotion(0.2, 0.1, -0.3)),
                        [rng.standard_normal((3, 1, 2, 2)), np.array([[0.5, -0.4, 0.7]])])
    assert err < 1e-4


# ------------------------------------------------------------------ training


def tiny_dataset(n=2, frames=4, seed=0):
    cfg = SceneConfig(dims=(4, 8, 8), voxel=0.4, K=3, n_frames=frames, box_size=(0.8, 1.2),
                      box_height=(0.4, 1.0), spawn_radius=1.6)
    return [gen_synthetic_scene(cfg, seed + i) for i in range(n)]


def toy_model(seed=0):
    return OccWorldModel(toy_model_config(), seed=seed)


def test_zero_learning_rate_gives_flat_curve():
    data = tiny_dataset()
    model = toy_model()
    rep = train([data[0]] * 1, model, TrainConfig(steps=6, lr=0.0, window=3, log_every=0))
    assert max(rep.step_losses) - min(rep.step_losses) < 1e-7


def test_training_is_deterministic():
    data = tiny_dataset()
    cfg = TrainConfig(steps=5, seed=3, log_every=0)
    a = train(data, toy_model(), cfg)
    b = train(data, toy_model(), cfg)
    assert a.step_losses == b.step_losses and a.epoch_losses == b.epoch_losses
    assert a.curve_csv().startswith("epoch,loss\n")


def test_resume_continues_identically():
    data = tiny_dataset(frames=5)
    cfg = TrainConfig(steps=7, seed=1, log_every=0)
    full = train(data, toy_model(), cfg, evaluate=False)
    model = toy_model()
    opt = tn.AdamW(model.parameters(), lr=cfg.lr)
    first = train(data, model, TrainConfig(steps=3, seed=1, log_every=0), optimizer=opt,
                  evaluate=False)
    rest = train(data, model, TrainConfig(steps=4, seed=1, log_every=0), optimizer=opt,
                 start_step=3, resume_state=first.final_state, evaluate=False)
    assert first.step_losses + rest.step_losses == full.step_losses


def test_training_errors():
    with pytest.raises(ValueError):
        train([], toy_model())
    data = tiny_dataset()
    with pytest.raises(ValueError):
        train([OccSequence(data[0].frames[:1], data[0].poses[:1])], toy_model())
    model = toy_model()
    model.params["srd.sem.b"].data[0] = np.nan
    with pytest.raises(FloatingPointError):
        train(data, model, TrainConfig(steps=1, log_every=0), evaluate=False)


@pytest.mark.slow
def test_memorises_a_repeated_frame():
    scene = tiny_dataset(1)[0]
    frame = scene.frames[1]
    seq = OccSequence([frame] * 3, [np.eye(4)] * 3)
    model = toy_model()
    rep = train([seq], model, TrainConfig(steps=500, lr=3e-3, window=2, log_every=0))
    assert rep.ce_after < 0.01


def test_evaluate_with_perfect_stub_on_static_scenes(rng):
    lab = rng.integers(0, K, GEOM.dims)
    lab[0, 0, 0] = 1
    seq = OccSequence([SemanticOccGrid(lab, K, GEOM)] * 8, [np.eye(4)] * 8)
    cfg = RolloutConfig(history=2, horizon=6)
    hs, fs, ms = split_all([seq, seq], cfg)
    for mode in ("reactive", "proactive", "copy"):
        sc = evaluate(hs, fs, CopyStub(GEOM, K), cfg, mode, ms)
        assert sc.miou == 100.0 and sc.iou == 100.0 and sc.l2 == 0.0 and sc.l1 == 0.0
        assert len(sc.miou_per_second) == 3
    with pytest.raises(ValueError):
        evaluate(hs, fs, CopyStub(GEOM, K), cfg, "sampled", ms)


def test_teacher_forced_ce_matches_manual_loop():
    data = tiny_dataset(1)
    model = toy_model()
    ce = teacher_forced_ce(data, model)
    assert math.isfinite(ce) and ce > 0
    assert ce == teacher_forced_ce(data, model)
