"""Desk-scale claims on the default three-seed experiment (shared with the
acceptance suite through the session fixture)."""

import pytest

from conftest import SEEDS


def unlearn_row(rep, model):
    return rep.attack_rows(model, "unlearn")[0]


@pytest.mark.parametrize("seed", SEEDS)
def test_reversed_trigger_found_on_baseline(desk, seed):
    rep = desk[seed][0]
    assert unlearn_row(rep, "pre")["trigger_success"] >= 90.0


@pytest.mark.parametrize("seed", SEEDS)
def test_reversed_trigger_weaker_on_sew(desk, seed):
    rep = desk[seed][0]
    pre = unlearn_row(rep, "pre")["trigger_success"]
    post = unlearn_row(rep, "post")["trigger_success"]
    assert pre - post >= 30.0, f"trigger success pre {pre:.1f}%, post {post:.1f}%"


@pytest.mark.parametrize("seed", SEEDS)
def test_finetune_lowest_lr_keeps_watermark_above_cda(desk, seed):
    row = [r for r in desk[seed][0].attack_rows("post", "finetune") if r["param"] == 1e-3][0]
    assert row["wacc_after"] >= row["cda_after"]


@pytest.mark.parametrize("attack,param", [("finetune", 1e-3), ("fineprune", 0.4),
                                          ("unlearn", None)])
def test_robustness_ordering(desk, attack, param):
    for seed in SEEDS:
        rep = desk[seed][0]
        pick = [r for r in rep.attack_rows(None, attack) if param is None or r["param"] == param]
        by_model = {r["model"]: r["wacc_after"] for r in pick}
        assert by_model["post"] >= by_model["pre"], f"seed {seed}: {by_model}"


@pytest.mark.parametrize("seed", SEEDS)
def test_key_set_kept_for_scoring(desk, seed):
    rep, keep = desk[seed]
    from sewlab.eval import wacc

    assert wacc(keep["post"], keep["keyset"]) == rep.models["post"]["wacc"]
    assert wacc(keep["clean"], keep["keyset"]) == rep.clean["wacc"]


def embed_and_measure(seed):
    """Pre/post noise bounds for one seed, without the attack grid."""
    from sewlab.data import gen_synthetic, split
    from sewlab.eval.experiment import ExperimentConfig
    from sewlab.nn import make_cnn
    from sewlab.specificity import measure_spec
    from sewlab.watermark import build_key_dataset, embed_baseline, embed_sew, make_key

    cfg = ExperimentConfig(seed=seed)
    ds = gen_synthetic(cfg.classes, cfg.n_per_class, cfg.image_size, seed=cfg.seed_for("data"),
                       amplitude=cfg.amplitude, jitter=cfg.jitter,
                       texture_jitter=cfg.texture_jitter)
    train, _ = split(ds, cfg.train_fraction, cfg.seed_for("split"))
    key = make_key(ds.image_shape, cfg.patch, target=cfg.target, seed=cfg.seed_for("key"))
    keyset = build_key_dataset(train, key, cfg.key_size, seed=cfg.seed_for("keyset"))
    init = make_cnn(ds.image_shape, cfg.classes, cfg.conv_channels, seed=cfg.seed_for("init"))
    pre = embed_baseline(init, train, keyset, cfg.train_config())
    post = embed_sew(init, train, keyset, cfg.embed_config())
    mc = cfg.measure_config()
    return measure_spec(pre, keyset, mc).spec, measure_spec(post, keyset, mc).spec


def test_specificity_ordering_five_seeds(desk):
    specs = {s: (desk[s][0].models["pre"]["spec"]["spec"], desk[s][0].models["post"]["spec"]["spec"])
             for s in SEEDS}
    for seed in (3, 4):
        specs[seed] = embed_and_measure(seed)
    assert all(post < pre for pre, post in specs.values()), specs
