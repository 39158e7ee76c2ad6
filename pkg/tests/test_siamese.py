import numpy as np
import pytest
from sklearn.base import clone

from geosiam import autodiff as ad
from geosiam.siamese import (
    COMBINED,
    COORD_ONLY,
    DIST_ONLY,
    EMBED_DIM,
    INPUT_SCALE,
    INPUT_SHIFT,
    SiameseConfig,
    SiameseDistanceRegressor,
    Scaling,
    embed,
    eval_err_dist,
    init_siamese,
    load_model,
    loss_coord,
    loss_dist,
    predicted_sq_dist,
    save_model,
    total_loss,
    train_siamese,
)


def tiny_net():
    """One centre-tap conv channel feeding a 2-d embedding and a 3-d coordinate head."""
    p = ad.ParamStore()
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    p.add("conv0.w", w)
    p.add("conv0.b", np.zeros(1))
    ew = np.zeros((1, EMBED_DIM))
    ew[0, :2] = [1.0, 0.5]
    p.add("embed.w", ew, exempt=True)
    p.add("embed.b", np.zeros(EMBED_DIM), exempt=True)
    cw = np.zeros((EMBED_DIM, 3))
    cw[0, 0] = 0.25
    cw[1, 1] = 0.5
    p.add("coord.w", cw, exempt=True)
    p.add("coord.b", np.zeros(3), exempt=True)
    return p


def net_input(value):
    return (float(np.float32(value)) - float(np.float32(INPUT_SHIFT))) * INPUT_SCALE


def const_patches(*values, px=16):
    return np.stack([np.full((px, px), v, np.float32) for v in values])


def hand_case():
    """Inputs and the hand-evaluated pieces of the loss for ``tiny_net``."""
    x1, x2 = const_patches(0.95), const_patches(0.825)
    s1, s2 = net_input(0.95), net_input(0.825)
    f1 = np.array([s1, 0.5 * s1])
    f2 = np.array([s2, 0.5 * s2])
    pred1 = np.array([0.25 * f1[0], 0.5 * f1[1], 0.0])
    pred2 = np.array([0.25 * f2[0], 0.5 * f2[1], 0.0])
    return x1, x2, f1, f2, pred1, pred2


def test_identical_patches_identical_embeddings():
    params = init_siamese(0)
    x = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
    e = embed(params, np.concatenate([x, x]))
    assert np.array_equal(e[0], e[1])
    assert e.shape == (2, EMBED_DIM)


def test_zero_network_gives_zero_embedding():
    params = init_siamese(0)
    for name in params:
        params[name].data[...] = 0
    x = np.random.default_rng(1).random((3, 32, 32))
    assert not np.any(embed(params, x))


@pytest.mark.parametrize("layer", range(4))
def test_embedding_sensitive_to_every_conv_layer(layer):
    params = init_siamese(3)
    x = np.random.default_rng(2).random((2, 32, 32))
    base = embed(params, x)
    w = params[f"conv{layer}.w"].data
    w[tuple(np.argwhere(np.abs(w) > 0.05)[0])] += 0.5
    assert not np.allclose(embed(params, x), base)


def test_loss_dist_examples():
    f = np.random.default_rng(0).normal(size=EMBED_DIM)
    assert loss_dist(f, f, 0.0) == 0
    f1 = np.zeros(EMBED_DIM)
    f2 = np.zeros(EMBED_DIM)
    f2[:2] = 1.0
    assert loss_dist(f1, f2, 0.5) == pytest.approx(1.5, abs=1e-12)
    g = np.random.default_rng(1).normal(size=EMBED_DIM)
    assert loss_dist(f, g, 2.0) == loss_dist(g, f, 2.0)


def test_loss_coord_examples():
    head = ad.ParamStore()
    head.add("coord.w", np.eye(EMBED_DIM, 3))
    head.add("coord.b", np.zeros(3))
    f = np.zeros(EMBED_DIM)
    f[:3] = [1, 2, 3]
    assert loss_coord(f, head, [1, 2, 3]) == 0
    assert loss_coord(f, head, [0, 0, 0]) == pytest.approx(6.0)
    shift = np.array([0.5, -2.0, 7.0])
    shifted = ad.ParamStore()
    shifted.add("coord.w", np.eye(EMBED_DIM, 3))
    shifted.add("coord.b", shift)
    y = np.array([0.3, 1.1, -4.0])
    assert loss_coord(f, shifted, y + shift) == pytest.approx(loss_coord(f, head, y), abs=1e-6)


def test_total_loss_hand_value_alpha10_lambda001():
    x1, x2, f1, f2, pred1, pred2 = hand_case()
    y = 0.5
    c1 = np.zeros(3)
    c2 = np.array([0.0, 0.0, 0.25])
    expected = (
        abs(np.sum((f1 - f2) ** 2) - y)
        + 10 * (np.abs(pred1 - c1).sum() + np.abs(pred2 - c2).sum())
        + 0.001 * 1.0  # conv0.w holds a single unit weight; heads are exempt
    )
    cfg = SiameseConfig(alpha=10, lam=0.001, loss_mode=COMBINED)
    got = total_loss(tiny_net(), x1, x2, [y], c1[None], c2[None], cfg).item()
    assert got == pytest.approx(expected, abs=1e-6)


def test_total_loss_perfect_prediction_is_zero():
    x1, x2, f1, f2, pred1, pred2 = hand_case()
    cfg = SiameseConfig(alpha=10, lam=0.0)
    y = np.sum((f1 - f2) ** 2)
    got = total_loss(tiny_net(), x1, x2, [y], pred1[None], pred2[None], cfg).item()
    assert got == pytest.approx(0.0, abs=1e-6)


def test_total_loss_alpha0_lambda0_is_mean_dist_loss():
    params = init_siamese(4)
    rng = np.random.default_rng(3)
    x1, x2 = rng.random((5, 32, 32)), rng.random((5, 32, 32))
    y = rng.uniform(0, 2, 5)
    cfg = SiameseConfig(alpha=0.0, lam=0.0)
    got = total_loss(params, x1, x2, y, np.zeros((5, 3)), np.zeros((5, 3)), cfg).item()
    e1, e2 = embed(params, x1), embed(params, x2)
    ref = np.mean([loss_dist(a, b, t) for a, b, t in zip(e1, e2, y)])
    assert got == pytest.approx(ref, rel=1e-5)


def test_dist_only_leaves_coord_head_without_gradient():
    params = init_siamese(5)
    rng = np.random.default_rng(4)
    cfg = SiameseConfig(loss_mode=DIST_ONLY)
    params.zero_grad()
    loss = total_loss(params, rng.random((4, 32, 32)), rng.random((4, 32, 32)), rng.random(4),
                      rng.random((4, 3)), rng.random((4, 3)), cfg)
    loss.backward()
    assert not np.any(params["coord.w"].grad) and not np.any(params["coord.b"].grad)
    assert np.any(params["conv0.w"].grad)


def test_coord_only_still_trains_embedding():
    params = init_siamese(6)
    rng = np.random.default_rng(5)
    params.zero_grad()
    total_loss(params, rng.random((4, 32, 32)), rng.random((4, 32, 32)), rng.random(4),
               rng.random((4, 3)), rng.random((4, 3)), SiameseConfig(loss_mode=COORD_ONLY)).backward()
    assert np.any(params["embed.w"].grad) and np.any(params["conv0.w"].grad)


def test_one_epoch_ten_pairs_smoke(small_patches, tmp_path):
    ds, pairs = small_patches
    cfg = SiameseConfig(epochs=1)
    params, scaling, hist = train_siamese(
        ds.images, pairs.pairs[:10], pairs.y_dist[:10], ds.y_coord, cfg, checkpoint_dir=tmp_path
    )
    assert len(hist) == 1 and set(hist[0]) == {"epoch", "train_loss", "err_dist"}
    assert (tmp_path / "epoch000.ckpt").exists()


def test_training_loss_decreases(small_patches):
    ds, pairs = small_patches
    drops = []
    for seed in range(5):
        _, _, hist = train_siamese(ds.images, pairs.pairs, pairs.y_dist, ds.y_coord, SiameseConfig(seed=seed))
        drops.append(hist[0]["train_loss"] - hist[-1]["train_loss"])
    assert np.median(drops) > 0


def test_training_is_deterministic(small_patches):
    ds, pairs = small_patches
    cfg = SiameseConfig(epochs=1, seed=2)
    a = train_siamese(ds.images, pairs.pairs[:40], pairs.y_dist[:40], ds.y_coord, cfg)[0]
    b = train_siamese(ds.images, pairs.pairs[:40], pairs.y_dist[:40], ds.y_coord, cfg)[0]
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)


def test_err_dist_perfect_and_constant_models(small_patches):
    ds, pairs = small_patches
    params = init_siamese(7)
    scaling = Scaling(2.0, (0.0, 0.0, 0.0))
    emb = embed(params, ds.images)
    y_perfect = predicted_sq_dist(emb, pairs.pairs) * scaling.dist_scale
    assert eval_err_dist(params, ds.images, pairs.pairs, y_perfect, scaling) == pytest.approx(0, abs=1e-9)
    for name in params:
        if name != "embed.b":
            params[name].data[...] = 0
    params["embed.b"].data[...] = 1.0
    err = eval_err_dist(params, ds.images, pairs.pairs, pairs.y_dist, scaling)
    assert err == pytest.approx(np.mean(pairs.y_dist))


def test_err_dist_agrees_with_scalar_recomputation(small_patches):
    ds, pairs = small_patches
    params = init_siamese(8)
    scaling = Scaling(1.7, (0.0, 0.0, 0.0))
    emb = embed(params, ds.images).astype(np.float64)
    ref = 0.0
    for (a, b), y in zip(pairs.pairs, pairs.y_dist):
        d = sum((emb[a, k] - emb[b, k]) ** 2 for k in range(EMBED_DIM))
        ref += abs(d * 1.7 - y)
    ref /= len(pairs)
    assert eval_err_dist(params, ds.images, pairs.pairs, pairs.y_dist, scaling) == pytest.approx(ref, rel=1e-9)


def test_model_checkpoint_roundtrip(tmp_path):
    params = init_siamese(9)
    scaling = Scaling(1.25, (1.0, 2.0, 3.0), 3.75)
    cfg = SiameseConfig(loss_mode=COORD_ONLY, seed=9)
    save_model(params, scaling, cfg, tmp_path / "m.ckpt")
    p2, s2, c2 = load_model(tmp_path / "m.ckpt")
    assert s2 == scaling and c2 == cfg
    assert all(p2[k].data.tobytes() == params[k].data.tobytes() for k in params)


def test_config_validation():
    with pytest.raises(ValueError):
        SiameseConfig(loss_mode="both")
    with pytest.raises(ValueError):
        SiameseConfig(alpha=-1)


def test_estimator_api(small_patches, tmp_path):
    ds, pairs = small_patches
    est = SiameseDistanceRegressor(epochs=1, random_state=1)
    assert clone(est).get_params() == est.get_params()
    rows = np.column_stack([pairs.pairs[:30], pairs.y_dist[:30]])
    est.fit(ds.images, rows, ds.y_coord)
    emb = est.transform(ds.images[:5])
    assert emb.shape == (5, EMBED_DIM)
    assert est.predict_coords(ds.images[:5]).shape == (5, 3)
    d = est.predict_distance(ds.images[:3], ds.images[3:6])
    assert d.shape == (3,) and np.all(d >= 0)
    assert est.score(ds.images, pairs) == -est.err_dist(ds.images, pairs)
    est.save(tmp_path / "est.ckpt")
    back = SiameseDistanceRegressor.from_checkpoint(tmp_path / "est.ckpt")
    assert np.array_equal(back.transform(ds.images[:5]), emb)
    assert back.get_params()["random_state"] == 1


def test_estimator_input_validation(small_patches):
    ds, pairs = small_patches
    est = SiameseDistanceRegressor(epochs=1)
    with pytest.raises(ValueError, match="coords"):
        est.fit(ds.images, pairs)
    with pytest.raises(ValueError):
        est.fit(ds.images[:, :, :20], pairs, ds.y_coord)
    with pytest.raises(ValueError):
        est.fit(ds.images, np.array([[0, 10_000, 1.0]]), ds.y_coord)
    bad = pairs.y_dist.copy()
    bad[0] = np.nan
    with pytest.raises(ValueError):
        est.fit(ds.images, np.column_stack([pairs.pairs, bad]), ds.y_coord)


def test_mirrored_twins_agree_more_as_training_proceeds(small_world, small_patches, tmp_path):
    from geosiam.synthworld import render_patches

    mesh, world = small_world
    ds, pairs = small_patches
    half = mesh.n_vertices // 2
    left = np.arange(0, half, 17)
    imgs_l = np.stack([p.image for p in render_patches(world, left)])
    imgs_r = np.stack([p.image for p in render_patches(world, left + half)])
    curves = []
    for seed in range(3):
        d = tmp_path / f"s{seed}"
        train_siamese(ds.images, pairs.pairs, pairs.y_dist, ds.y_coord, SiameseConfig(seed=seed), checkpoint_dir=d)
        gaps = []
        for ckpt in sorted(d.glob("epoch*.ckpt")):
            params, scaling, _ = load_model(ckpt)
            head = lambda X: (embed(params, X) @ params["coord.w"].data + params["coord.b"].data)  # noqa: E731
            cl, cr = head(imgs_l), head(imgs_r)
            # relative to the spread of predictions, so a collapsed head does not look perfect
            spread = np.mean(np.abs(cl - cl.mean(axis=0)))
            gaps.append(np.mean(np.abs(cl - cr)) / spread)
        curves.append(gaps)
    med = np.median(curves, axis=0)
    assert med[-1] < med[0]
