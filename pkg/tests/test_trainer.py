import numpy as np
import pytest

from mrunet import checkpoint
from mrunet.phantoms import PhantomSpec, Structure, make_dataset
from mrunet.patches import PatchSpec
from mrunet.trainer import (
    FoldPlan,
    TrainConfig,
    TrainingError,
    make_folds,
    predict,
    predict_prepared,
    prepare_scan,
    run_cross_validation,
    train,
    write_ablation,
    write_history,
)
from mrunet.tensor import no_grad
from mrunet.unet import NetworkConfig, build
from mrunet.volume import Volume


def cfg_for(label, kappas=(), base=2, classes=3):
    return NetworkConfig(label, levels=4, base_channels=base, class_count=classes, target_size=16,
                         kappas=list(kappas))


def striped_scan(cfg, dims=(32, 32, 32), seed=0):
    x = np.indices(dims)[0]
    lab = ((x // 4) % cfg.class_count).astype(np.uint16)
    img = lab.astype(np.float32) + 0.05 * np.random.default_rng(seed).standard_normal(dims).astype(np.float32)
    return Volume(img), Volume(lab, classes=cfg.class_count)


def prepared(cfg, **kw):
    img, lab = striped_scan(cfg, **kw)
    return prepare_scan(0, img, lab, PatchSpec.from_config(cfg))


def test_iterations_must_be_positive():
    with pytest.raises(ValueError, match="iterations must be > 0"):
        TrainConfig(iterations=0)


def test_lr_zero_keeps_parameters_bit_identical():
    cfg = cfg_for("D", (1,))
    net = build(cfg, seed=0)
    before = {k: v.copy() for k, v in net.state().items()}
    train(net, [prepared(cfg)], TrainConfig(iterations=10, lr=0.0, val_interval=0))
    after = net.state()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_same_seed_bit_identical_history_and_checksum():
    cfg = cfg_for("D", (1,))
    runs = []
    for _ in range(2):
        net = build(cfg, seed=4)
        runs.append(train(net, [prepared(cfg)], TrainConfig(iterations=6, seed=9, val_interval=0)))
    a, b = runs
    assert [h["total"] for h in a.history] == [h["total"] for h in b.history]
    assert a.final_checksum == b.final_checksum
    net = build(cfg, seed=4)
    c = train(net, [prepared(cfg)], TrainConfig(iterations=6, seed=10, val_interval=0))
    assert [h["total"] for h in c.history] != [h["total"] for h in a.history]


def test_history_rows_are_additive():
    cfg = cfg_for("D", (1, 2))
    net = build(cfg)
    res = train(net, [prepared(cfg, dims=(32, 32, 32))], TrainConfig(iterations=3, val_interval=0))
    for row in res.history:
        acc = np.float32(row["target"])
        for k in (1, 2):
            acc = acc + np.float32(row[f"context_{k}"])
        assert np.float32(row["total"]) == acc


def test_smoke_config_a_learns_constant_regions():
    """Two constant-intensity label regions; every patch holds both classes."""
    cfg = cfg_for("A", base=8, classes=2)
    img = np.indices((32, 32, 32))[0]
    lab = ((img // 4) % 2).astype(np.uint16)
    scan = prepare_scan(0, Volume(lab.astype(np.float32)), Volume(lab, classes=2), PatchSpec.from_config(cfg))
    res = train(build(cfg, seed=0), [scan], TrainConfig(iterations=200, val_interval=0))
    assert res.history[-1]["total"] < 0.1


def test_nan_loss_aborts_with_diagnostic():
    cfg = cfg_for("A")
    net = build(cfg)
    net.params["target.head.b"].data[:] = np.nan
    with pytest.raises(TrainingError, match=r"iteration 1: head=target component=dice"):
        train(net, [prepared(cfg)], TrainConfig(iterations=3, val_interval=0))


def test_padding_mismatch_rejected():
    a = cfg_for("A")
    d = cfg_for("D", (1,))
    with pytest.raises(ValueError, match="padded"):
        train(build(d), [prepared(a)], TrainConfig(iterations=1, val_interval=0))


def test_periodic_checkpoints_are_deterministic(tmp_path):
    cfg = cfg_for("C", (1,))
    sums = []
    for run in ("r1", "r2"):
        out = tmp_path / run
        out.mkdir()
        train(build(cfg, seed=1), [prepared(cfg)], TrainConfig(iterations=4, checkpoint_interval=2, val_interval=0),
              out_dir=out)
        files = sorted(out.glob("checkpoint_*.bin"))
        assert [f.name for f in files] == ["checkpoint_000002.bin", "checkpoint_000004.bin"]
        sums.append([f.read_bytes() for f in files])
    assert sums[0] == sums[1]


def test_checkpoint_round_trip(tmp_path):
    net = build(cfg_for("D", (1,)), seed=2)
    digest = checkpoint.save(tmp_path / "c.bin", net.state(), {"iteration": 5})
    params, meta = checkpoint.load(tmp_path / "c.bin")
    assert meta == {"iteration": 5}
    assert all(np.array_equal(params[k], v) for k, v in net.state().items())
    assert digest == checkpoint.checksum(params, meta)
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.from_bytes(b"garbage" + bytes(20))


# -- prediction -----------------------------------------------------------------------

@pytest.mark.parametrize("label,kappas", [("A", ()), ("D", (1, 2))])
def test_single_tile_equivalence(label, kappas):
    """Image of exactly S: predict equals argmax of one forward pass on hand-built inputs."""
    cfg = cfg_for(label, kappas)
    net = build(cfg, seed=3)
    raw = np.random.default_rng(0).standard_normal((16, 16, 16)).astype(np.float32) * 3 + 1
    pred = predict(net, Volume(raw)).data
    norm = ((raw - raw.astype(np.float64).mean()) / raw.astype(np.float64).std()).astype(np.float32)
    pad = max([16 * 2**k for k in kappas], default=16) // 2 - 8
    big = np.pad(norm, pad, mode="edge")
    c = pad + 8
    xt = norm[None, None]
    xc = []
    for k in kappas:
        w = 16 * 2**k
        win = big[c - w // 2:c + w // 2, c - w // 2:c + w // 2, c - w // 2:c + w // 2]
        f = 2**k
        xc.append(win.reshape(16, f, 16, f, 16, f).mean(axis=(1, 3, 5))[None, None].astype(np.float32))
    with no_grad():
        ref = net(xt, xc)["target"].data[0].argmax(axis=0)
    np.testing.assert_array_equal(pred, ref)


def test_stitching_uses_nearest_tile():
    cfg = cfg_for("C", (1,))
    net = build(cfg, seed=5)
    img = np.random.default_rng(1).standard_normal((24, 16, 40)).astype(np.float32)
    spec = PatchSpec.from_config(cfg)
    scan = prepare_scan(0, Volume(img), None, spec)
    labels, logits = predict_prepared(net, scan, batch=3, return_logits=True)
    assert labels.shape == (24, 16, 40)
    np.testing.assert_array_equal(labels, logits.argmax(axis=0))
    # x tiles centred at 8 and 16, z at 8, 24, 32; voxel centres sit at index + 0.5
    from mrunet.patches import sample_patchset
    for (vx, vz), (cx, cz) in [((11, 27), (8, 24)), ((12, 28), (16, 32)), ((23, 39), (16, 32)), ((0, 15), (8, 8))]:
        ps = sample_patchset(scan.image, (cx + scan.pad[0], 8 + scan.pad[1], cz + scan.pad[2]), spec)
        with no_grad():
            out = net(ps.target[None, None], [c[None, None] for c in ps.contexts])["target"].data[0]
        np.testing.assert_array_equal(logits[:, vx, 3, vz], out[:, vx - cx + 8, 3, vz - cz + 8])


def test_predict_output_contract():
    cfg = cfg_for("A", classes=4)
    net = build(cfg)
    out = predict(net, Volume(np.random.default_rng(0).standard_normal((40, 32, 20)).astype(np.float32)))
    assert out.dims == (40, 32, 20) and out.classes == 4 and out.data.max() < 4
    with pytest.raises(ValueError, match="smaller"):
        predict(net, Volume(np.zeros((8, 32, 32), np.float32)))


# -- folds and cross-validation ----------------------------------------------------------

def test_fold_plan_partitions_scans():
    plan = make_folds(range(16), n_folds=5, n_val=2, seed=3)
    tests = sorted(i for f in plan.folds for i in f.test)
    assert tests == list(range(16))
    assert sorted(len(f.test) for f in plan.folds) == [3, 3, 3, 3, 4]
    for f in plan.folds:
        assert len(f.val) == 2
        assert not (set(f.train) & set(f.test)) and not (set(f.val) & set(f.test)) and not (set(f.train) & set(f.val))
        assert sorted(f.train + f.val + f.test) == list(range(16))
    assert FoldPlan.from_list(plan.to_list()).folds == plan.folds


def test_fold_overlap_rejected():
    from mrunet.trainer import Fold
    with pytest.raises(ValueError, match="overlap"):
        FoldPlan([Fold([0, 1], [2], [1, 3]), Fold([0, 1, 2], [], [3])], [0, 1, 2, 3])


TINY = PhantomSpec(dims=(32, 32, 32), structures=(Structure("bar", "bar", (7.0, 0.0, 0.0), (2.0, 2.0, 8.0)),),
                   trunk_semi_axes=(14.0, 10.0))


def test_cross_validation_table(tmp_path):
    scans = make_dataset(4, TINY, seed=0, max_shift=1)
    plan = make_folds([s.scan_id for s in scans], n_folds=2, n_val=1, seed=0)
    tc = TrainConfig(iterations=4, val_interval=2)
    rows = run_cross_validation([cfg_for("A"), cfg_for("D", (1,))], scans, plan, tc)
    assert [r.config.config_label for r in rows] == ["A", "D"]
    for r in rows:
        assert r.report.confusion.sum() == 4 * 32**3
        assert len(r.fold_results) == 2
    write_ablation(rows, tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().strip().splitlines()
    assert lines[0].split(",") == ["config", "target_fov", "context_fovs", "median_dsc", "q84_minus", "q16_minus",
                                   "nonzero_pct", "params", "input_voxels", "sec_per_iter"]
    assert len(lines) == 3
    write_history(rows[1].fold_results[0].history, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "iter,total,target,context_1"


def test_k0_row_equals_standalone_config_a():
    scans = make_dataset(4, TINY, seed=0, max_shift=1)
    plan = make_folds([s.scan_id for s in scans], n_folds=2, n_val=1, seed=0)
    tc = TrainConfig(iterations=3, val_interval=0)
    (row,) = run_cross_validation([cfg_for("A")], scans, plan, tc, fold_ids=[0])
    spec = PatchSpec.from_config(cfg_for("A"))
    by_id = {s.scan_id: s for s in scans}
    net = build(cfg_for("A"), seed=tc.seed)
    res = train(net, [prepare_scan(i, by_id[i].image, by_id[i].labels, spec) for i in plan.folds[0].train], tc)
    assert res.final_checksum == row.fold_results[0].final_checksum
