"""End-to-end experiment: clean control, baseline and SEW embedding, noise-bound
measurement, the attack grid, noise sweeps and the fixed-sigma ablation."""

import contextlib
from dataclasses import asdict, dataclass, field, fields

from sewlab.attacks import (ReverseConfig, fineprune_attack, finetune_attack,
                            reverse_engineer_trigger, unlearn_attack)
from sewlab.data import gen_synthetic, split
from sewlab.errors import StageError
from sewlab.eval.metrics import cda, wacc
from sewlab.nn.layers import make_cnn
from sewlab.nn.train import TrainConfig
from sewlab.seeding import subseed
from sewlab.specificity import MeasureConfig, measure_spec, noise_sweep
from sewlab.watermark import (EmbedConfig, build_key_dataset, embed_baseline,
                              embed_sew, make_key, train_clean)

ATTACKS = ("finetune", "fineprune", "unlearn")


@dataclass
class ExperimentConfig:
    run_id: str = "demo"
    seed: int = 0
    # data
    classes: int = 4
    n_per_class: int = 200
    image_size: int = 16
    channels: int = 3
    amplitude: float = 0.12
    jitter: float = 0.05
    texture_jitter: float = 0.3
    train_fraction: float = 0.8
    # model and training
    conv_channels: tuple = (8, 16)
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    # key
    patch: int = 6
    target: int = 0
    key_size: int = 100
    # embedding
    sigma_mode: str = "auto"
    sigma: float = 0.0
    lam: float = 1.0
    calibration_period: int = 5
    sigma_lr: float = 0.05
    key_batch: int = 32
    cover_region: str = "image"
    calibration_reference: str = "true"
    # measurement
    measure_lr: float = 0.01
    measure_max_iter: int = 2000
    measure_tol: float = 0.02
    measure_draws: int = 8
    measure_window: int = 25
    measure_region: str = "image"
    # attacks
    attacks: tuple = ATTACKS
    attacker_fraction: float = 0.2
    finetune_lrs: tuple = (1e-3, 1e-2, 1e-1)
    finetune_epochs: int = 5
    prune_ratios: tuple = (0.2, 0.4, 0.6, 0.8)
    prune_epochs: int = 2
    prune_lr: float = 1e-3
    reverse_beta: float = 1e-3
    reverse_steps: int = 1000
    reverse_lr: float = 0.1
    unlearn_lr: float = 1e-4
    unlearn_epochs: int = 2
    # sweeps and ablation
    sweep_sigmas: tuple = (0.0, 0.02, 0.05, 0.1, 0.15, 0.2, 0.3)
    sweep_draws: int = 4
    ablation_sigmas: tuple = (0.01, 1.0)

    def __post_init__(self):
        for f in fields(self):
            if f.type is tuple:
                setattr(self, f.name, tuple(getattr(self, f.name)))
        bad = [a for a in self.attacks if a not in ATTACKS]
        if bad:
            raise ValueError(f"unknown attacks {bad}; choose from {list(ATTACKS)}")
        if not 0 <= self.target < self.classes:
            raise ValueError(f"target {self.target} outside [0, {self.classes})")
        if not 0.0 < self.attacker_fraction < 1.0:
            raise ValueError("attacker_fraction must lie strictly between 0 and 1")
        if any(s < 0 for s in self.sweep_sigmas) or list(self.sweep_sigmas) != sorted(self.sweep_sigmas):
            raise ValueError("sweep_sigmas must be non-negative and ascending")
        if any(s < 0 for s in self.ablation_sigmas):
            raise ValueError("ablation_sigmas must be non-negative")

    def seed_for(self, stream):
        return subseed(self.seed, stream)

    def train_config(self):
        return TrainConfig(batch_size=self.batch_size, base_lr=self.lr, epochs=self.epochs,
                           momentum=self.momentum, seed=self.seed_for("order"))

    def embed_config(self, sigma_mode=None, sigma=None):
        return EmbedConfig(
            sigma_mode=sigma_mode or self.sigma_mode,
            sigma=self.sigma if sigma is None else sigma,
            lam=self.lam, calibration_period=self.calibration_period,
            sigma_lr=self.sigma_lr, key_batch=self.key_batch,
            cover_region=self.cover_region,
            calibration_reference=self.calibration_reference,
            train=self.train_config(),
        )

    def measure_config(self):
        return MeasureConfig(lr=self.measure_lr, max_iter=self.measure_max_iter,
                             tol=self.measure_tol, draws=self.measure_draws,
                             seed=self.seed_for("measure"), window=self.measure_window,
                             region=self.measure_region)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class ExperimentReport:
    run_id: str
    seed: int
    config: dict
    dataset: dict
    model: dict
    clean: dict
    models: dict  # "pre" / "post" -> cda, wacc, spec summary
    attacks: list = field(default_factory=list)
    sweeps: dict = field(default_factory=dict)
    ablation: list = field(default_factory=list)

    @property
    def integrity_ok(self):
        return self.clean["wacc"] < 100.0 / self.dataset["classes"] + 10.0

    def attack_rows(self, model=None, attack=None):
        return [r for r in self.attacks
                if (model is None or r["model"] == model)
                and (attack is None or r["attack"] == attack)]

    def to_dict(self):
        d = asdict(self)
        d["integrity_ok"] = self.integrity_ok
        return d


@contextlib.contextmanager
def stage(name):
    """Re-raise any failure inside the block as a StageError naming the stage."""
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - the stage name is the point
        raise StageError(name, exc) from exc


def spec_summary(rep):
    return {
        "spec": rep.spec, "converged": rep.converged, "iterations": rep.iterations,
        "beta_u": rep.beta_u, "key_dim": rep.key_dim,
        "converged_fraction": rep.converged_fraction,
        "excluded": len(rep.excluded), "trajectory": rep.trajectory,
    }


def _attack_grid(cfg, name, net, attacker, test, keyset):
    rows = []
    seed = cfg.seed_for("attack")

    def add(attack, param, res, extra=None):
        row = {"model": name, "attack": attack, "param": float(param),
               "cda_before": res.cda_before, "cda_after": res.cda_after,
               "wacc_before": res.wacc_before, "wacc_after": res.wacc_after}
        row.update(extra or {})
        rows.append(row)

    if "finetune" in cfg.attacks:
        for lr in cfg.finetune_lrs:
            with stage(f"attack:finetune:{name}:{lr}"):
                add("finetune", lr, finetune_attack(net, attacker, lr, cfg.finetune_epochs,
                                                    test, keyset, seed=seed))
    if "fineprune" in cfg.attacks:
        for ratio in cfg.prune_ratios:
            with stage(f"attack:fineprune:{name}:{ratio}"):
                add("fineprune", ratio, fineprune_attack(
                    net, attacker, ratio, cfg.prune_epochs, test, keyset,
                    lr=cfg.prune_lr, seed=seed))
    if "unlearn" in cfg.attacks:
        with stage(f"attack:unlearn:{name}"):
            rc = ReverseConfig(beta=cfg.reverse_beta, steps=cfg.reverse_steps,
                               lr=cfg.reverse_lr, seed=seed)
            trig = reverse_engineer_trigger(net, attacker, cfg.target, rc, holdout=test)
            res = unlearn_attack(net, attacker, trig, cfg.unlearn_lr, cfg.unlearn_epochs,
                                 test, keyset, seed=seed)
            add("unlearn", cfg.unlearn_lr, res,
                {"trigger_success": trig.success, "trigger_mask_l1": trig.mask_l1})
    return rows


def _sweep(cfg, net, test, keyset):
    seed = cfg.seed_for("sweep")
    c = noise_sweep(net, test.images, test.labels, cfg.sweep_sigmas,
                    draws=cfg.sweep_draws, seed=seed)
    w = noise_sweep(net, keyset.images, None, cfg.sweep_sigmas, target=keyset.target,
                    draws=cfg.sweep_draws, seed=seed)
    return [{"sigma": a["sigma"], "cda": a["accuracy"], "wacc": b["accuracy"]}
            for a, b in zip(c, w)]


def run_experiment(cfg, progress=None, keep=None):
    """Run every stage for one seed and return an ExperimentReport.

    ``keep``, if a dict, receives the trained networks and datasets.
    """
    say = progress or (lambda msg: None)
    with stage("data"):
        ds = gen_synthetic(cfg.classes, cfg.n_per_class, cfg.image_size,
                           seed=cfg.seed_for("data"), channels=cfg.channels,
                           amplitude=cfg.amplitude, jitter=cfg.jitter,
                           texture_jitter=cfg.texture_jitter)
        train, test = split(ds, cfg.train_fraction, cfg.seed_for("split"))
        attacker = split(train, cfg.attacker_fraction, cfg.seed_for("attacker"))[0]
        key = make_key(ds.image_shape, cfg.patch, target=cfg.target,
                       seed=cfg.seed_for("key"), num_classes=cfg.classes)
        keyset = build_key_dataset(train, key, cfg.key_size, seed=cfg.seed_for("keyset"))
    with stage("model"):
        init = make_cnn(ds.image_shape, cfg.classes, cfg.conv_channels,
                        seed=cfg.seed_for("init"))
    tc = cfg.train_config()

    say("training clean control")
    with stage("train-clean"):
        clean = train_clean(init, train, tc)
        clean_row = {"cda": cda(clean, test), "wacc": wacc(clean, keyset)}
    say("embedding baseline")
    with stage("embed-baseline"):
        pre = embed_baseline(init, train, keyset, tc)
    say("embedding SEW")
    with stage("embed-sew"):
        log = {}
        post = embed_sew(init, train, keyset, cfg.embed_config(), log=log)

    mc = cfg.measure_config()
    models = {}
    for name, net in (("pre", pre), ("post", post)):
        say(f"measuring {name}")
        with stage(f"measure:{name}"):
            models[name] = {"cda": cda(net, test), "wacc": wacc(net, keyset),
                            "spec": spec_summary(measure_spec(net, keyset, mc))}
    models["post"]["final_sigma"] = log["final_sigma"]
    models["post"]["sigma_history"] = [[int(s), float(v)] for s, v in log["sigma_history"]]

    attacks = []
    for name, net in (("pre", pre), ("post", post)):
        say(f"attacking {name}")
        attacks.extend(_attack_grid(cfg, name, net, attacker, test, keyset))

    sweeps = {}
    for name, net in (("pre", pre), ("post", post)):
        with stage(f"sweep:{name}"):
            sweeps[name] = _sweep(cfg, net, test, keyset)

    ablation = [{"label": f"{cfg.sigma_mode}", "sigma_mode": cfg.sigma_mode,
                 "sigma": float(log["final_sigma"]), "cda": models["post"]["cda"],
                 "wacc": models["post"]["wacc"], "spec": models["post"]["spec"]["spec"],
                 "converged_fraction": models["post"]["spec"]["converged_fraction"]}]
    for s in cfg.ablation_sigmas:
        say(f"ablation fixed sigma {s}")
        with stage(f"ablation:{s}"):
            net = embed_sew(init, train, keyset, cfg.embed_config("fixed", s))
            rep = measure_spec(net, keyset, mc)
            ablation.append({"label": f"fixed:{s}", "sigma_mode": "fixed", "sigma": float(s),
                             "cda": cda(net, test), "wacc": wacc(net, keyset),
                             "spec": rep.spec, "converged_fraction": rep.converged_fraction})

    if keep is not None:
        keep.update(clean=clean, pre=pre, post=post, train=train, test=test,
                    attacker=attacker, keyset=keyset, init=init)
    return ExperimentReport(
        run_id=cfg.run_id, seed=cfg.seed, config=cfg.to_dict(),
        dataset={"kind": "synthetic", "classes": cfg.classes, "n_train": len(train),
                 "n_test": len(test), "n_attacker": len(attacker),
                 "image_shape": list(ds.image_shape), "key_size": len(keyset)},
        model={"kind": "cnn", "conv_channels": list(cfg.conv_channels),
               "n_params": init.n_params()},
        clean=clean_row, models=models, attacks=attacks, sweeps=sweeps, ablation=ablation,
    )
