"""Training loop, evaluation, experiment persistence and CAM heatmaps."""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import distill, model
from .augment import MixKind, MixMethod, apply_augmentation, pairing, region_transform
from .numerics import RngStream

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class NumericError(RuntimeError):
    def __init__(self, message: str, epoch: int, step: int):
        super().__init__(f"{message} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


MODES = ("cekd", "single")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one run; serialized as ``config.json``.

    ``mode="single"`` trains the teacher alone on ``teacher_method`` with
    plain mixed cross-entropy (the augmentation-only baseline).
    """

    dataset: dict = field(default_factory=lambda: data_mod.DatasetSpec().to_dict())
    data_dir: str | None = None
    net: dict = field(default_factory=lambda: model.NetConfig().to_dict())
    mode: str = "cekd"
    teacher_method: dict = field(default_factory=lambda: {"kind": "snapmix", "alpha": 5.0, "apply_prob": 1.0})
    student_method: dict = field(default_factory=lambda: {"kind": "mixup", "alpha": 5.0, "apply_prob": 0.5})
    temperature: float = 4.0
    lambdas: list = field(default_factory=lambda: [0.7, 0.3, 0.5, 0.5, 0.5, 0.5])
    ce_weight: float = 1.0
    epochs: int = 20
    batch_size: int = 16
    base_lr: float = 0.05
    momentum: float = 0.9
    lr_decay_every: int = 14
    lr_factor: float = 0.1
    crop_pad: int = 2
    seed_data: int = 0
    seed_teacher_init: int = 1
    seed_student_init: int = 2
    seed_train: int = 3
    record_wall_time: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        try:
            self.teacher()
            self.student()
            self.weights()
            self.net_config()
            if self.data_dir is None:
                self.dataset_spec()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        if not self.base_lr > 0 or not 0 <= self.momentum < 1:
            raise ConfigError("base_lr must be positive and momentum in [0, 1)")
        if self.lr_decay_every < 1 or not self.lr_factor > 0:
            raise ConfigError("lr_decay_every must be >= 1 and lr_factor positive")

    def teacher(self) -> MixMethod:
        return MixMethod(**self.teacher_method)

    def student(self) -> MixMethod:
        return MixMethod(**self.student_method)

    def weights(self) -> distill.LossWeights:
        return distill.LossWeights(tuple(self.lambdas), self.temperature, self.ce_weight)

    def net_config(self) -> model.NetConfig:
        return model.NetConfig.from_dict(self.net)

    def dataset_spec(self) -> data_mod.DatasetSpec:
        return data_mod.DatasetSpec(**self.dataset)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["teacher_method"] = self.teacher().to_dict()
        d["student_method"] = self.student().to_dict()
        d["net"] = self.net_config().to_dict()
        if self.data_dir is None:
            d["dataset"] = self.dataset_spec().to_dict()
        d["lambdas"] = [float(v) for v in self.lambdas]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        d = copy.deepcopy(dataclasses.asdict(self))
        d.update(changes)
        return ExperimentConfig.from_dict(d)


@dataclass
class NetState:
    params: model.Params
    opt: model.OptState

    @classmethod
    def fresh(cls, config: model.NetConfig, seed: int) -> "NetState":
        params = model.init_params(config, RngStream(seed))
        return cls(params, model.OptState.zeros(params))


def teacher_cam_provider(params: model.Params):
    """CAMs of each sample's own class from the current teacher, upsampled to image size."""

    def provider(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
        _, trace = model.forward(params, images)
        cams = model.cams_for_labels(params, trace, labels)
        hw = images.shape[-1]
        return region_transform(cams, images.shape[-2], hw)

    return provider


@dataclass
class StepResult:
    breakdown: distill.LossBreakdown
    teacher: NetState
    student: NetState | None
    mixed_h1: object = None
    mixed_h2: object = None


def _check_finite(b: distill.LossBreakdown, epoch: int, step: int) -> None:
    for k, v in b.to_dict().items():
        if not math.isfinite(v):
            raise NumericError(f"non-finite loss term {k}={v}", epoch, step)


def prepare_batch(images, labels, config: ExperimentConfig, rng: RngStream, teacher: model.Params):
    """Flip/crop, one shared pairing, then the two mixing methods on the same pairs."""
    images = data_mod.transform_batch(np.asarray(images, dtype=np.float64), rng.child("transform"), config.crop_pad)
    labels = np.asarray(labels, dtype=np.int64)
    perm = pairing(len(labels), rng.child("pairing"))
    provider = teacher_cam_provider(teacher)
    h1 = apply_augmentation(images, labels, config.teacher(), rng.child("h1"), provider, perm)
    h2 = apply_augmentation(images, labels, config.student(), rng.child("h2"), provider, perm)
    return h1, h2


def forward_quad(teacher: model.Params, student: model.Params, h1_images, h2_images):
    n = len(h1_images)
    t_logits, t_trace = model.forward(teacher, np.concatenate([h1_images, h2_images]))
    s_logits, s_trace = model.forward(student, np.concatenate([h2_images, h1_images]))
    quad = distill.LogitsQuad(t1=t_logits[:n], t2=t_logits[n:], s1=s_logits[:n], s2=s_logits[n:])
    return quad, t_trace, s_trace


def cekd_gradients(teacher: model.Params, student: model.Params, h1, h2, weights: distill.LossWeights):
    """Loss breakdown and each network's gradient of its own total."""
    quad, t_trace, s_trace = forward_quad(teacher, student, h1.images, h2.images)
    lab1, lab2 = distill.MixedLabels.of(h1), distill.MixedLabels.of(h2)
    breakdown = distill.total_loss(quad, lab1, lab2, weights)
    g = distill.total_loss_grads(quad, lab1, lab2, weights)
    t_grads = model.backward(teacher, t_trace, np.concatenate([g.t1, g.t2]))
    s_grads = model.backward(student, s_trace, np.concatenate([g.s1, g.s2]))
    return breakdown, t_grads, s_grads


def train_step(
    images,
    labels,
    teacher: NetState,
    student: NetState,
    config: ExperimentConfig,
    rng: RngStream,
    lr: float,
    epoch: int = 0,
    step: int = 0,
) -> StepResult:
    if len(labels) < 2:
        raise ValueError("a training batch needs at least two samples")
    h1, h2 = prepare_batch(images, labels, config, rng, teacher.params)
    breakdown, t_grads, s_grads = cekd_gradients(teacher.params, student.params, h1, h2, config.weights())
    _check_finite(breakdown, epoch, step)
    t_params, t_opt = model.sgd_step(teacher.params, t_grads, teacher.opt, lr, config.momentum)
    s_params, s_opt = model.sgd_step(student.params, s_grads, student.opt, lr, config.momentum)
    return StepResult(breakdown, NetState(t_params, t_opt), NetState(s_params, s_opt), h1, h2)


def train_step_single(
    images, labels, net: NetState, config: ExperimentConfig, rng: RngStream, lr: float, epoch: int = 0, step: int = 0
) -> StepResult:
    """One network, one mixing method, mixed cross-entropy only."""
    if len(labels) < 2:
        raise ValueError("a training batch needs at least two samples")
    images = data_mod.transform_batch(np.asarray(images, dtype=np.float64), rng.child("transform"), config.crop_pad)
    labels = np.asarray(labels, dtype=np.int64)
    perm = pairing(len(labels), rng.child("pairing"))
    h1 = apply_augmentation(images, labels, config.teacher(), rng.child("h1"), teacher_cam_provider(net.params), perm)
    logits, trace = model.forward(net.params, h1.images)
    ce = distill.mixed_ce(logits, h1.label_a, h1.label_b, h1.w_a, h1.w_b)
    b = distill.LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, ce, 0.0, 0.0, 0.0, config.ce_weight * ce, 0.0)
    _check_finite(b, epoch, step)
    grads = model.backward(net.params, trace, config.ce_weight * distill.mixed_ce_grad(logits, h1.label_a, h1.label_b, h1.w_a, h1.w_b))
    params, opt = model.sgd_step(net.params, grads, net.opt, lr, config.momentum)
    return StepResult(b, NetState(params, opt), None, h1, None)


def evaluate(params: model.Params, dataset: data_mod.Dataset) -> float:
    """Top-1 accuracy on clean images."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = model.predict(params, dataset.images).argmax(axis=1)
    return float(np.mean(pred == dataset.labels))


# -- experiment runner ------------------------------------------------------


def load_data(config: ExperimentConfig) -> tuple[data_mod.Dataset, data_mod.Dataset]:
    if config.data_dir is not None:
        ds, manifest = data_mod.load_dataset(config.data_dir)
    else:
        spec = config.dataset_spec()
        ds, manifest = data_mod.generate_synthetic(spec)
    return data_mod.split(ds, manifest)


def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, allow_nan=False)


def _check_writable(out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    probe = out / ".write_probe"
    probe.write_bytes(b"")
    probe.unlink()


def run_experiment(config: ExperimentConfig, out_dir) -> Path:
    """Train per ``config`` and write config, metrics, checkpoints and summary into ``out_dir``."""
    out = Path(out_dir)
    _check_writable(out)
    resolved = config.to_dict()
    data_mod.write_text_atomic(out / "config.json", json.dumps(resolved, indent=2, sort_keys=True) + "\n")

    train, test = load_data(config)
    ids = set(test.ids)
    if ids & set(train.ids):
        raise ValueError("train and test splits overlap")
    net_cfg = config.net_config()
    if net_cfg.num_classes != train.num_classes or net_cfg.input_channels != train.images.shape[1]:
        raise ConfigError("net config does not match the dataset")

    single = config.mode == "single"
    teacher = NetState.fresh(net_cfg, config.seed_teacher_init)
    student = None if single else NetState.fresh(net_cfg, config.seed_student_init)
    root = RngStream(config.seed_train)

    metrics_path = out / "metrics.jsonl"
    timing = []
    lines: list[str] = []
    evals = []
    epoch_teacher_ce = []
    global_step = 0
    with open(metrics_path, "w") as fh:
        for epoch in range(config.epochs):
            lr = model.lr_schedule(epoch, config.base_lr, config.lr_decay_every, config.lr_factor)
            ce_sum, n_steps = 0.0, 0
            for step, rows in enumerate(data_mod.batch_iter(train, config.batch_size, epoch, seed=config.seed_train)):
                t0 = time.perf_counter()
                srng = root.child("step", epoch, step)
                imgs, labs = train.images[rows], train.labels[rows]
                if single:
                    res = train_step_single(imgs, labs, teacher, config, srng, lr, epoch, step)
                else:
                    res = train_step(imgs, labs, teacher, student, config, srng, lr, epoch, step)
                    student = res.student
                teacher = res.teacher
                b = res.breakdown
                ce_sum += b.L_CE_teacher_h1
                n_steps += 1
                wall_ms = (time.perf_counter() - t0) * 1e3
                timing.append(wall_ms)
                rec = {"kind": "train", "epoch": epoch, "step": global_step, **b.to_dict()}
                rec.update(teacher_acc=None, student_acc=None, lr=lr)
                rec["wall_ms"] = round(wall_ms, 3) if config.record_wall_time else None
                fh.write(_json_line(rec) + "\n")
                global_step += 1
            t_acc = evaluate(teacher.params, test)
            s_acc = None if single else evaluate(student.params, test)
            epoch_teacher_ce.append(ce_sum / max(n_steps, 1))
            ev = {"kind": "eval", "epoch": epoch, "step": global_step, "teacher_acc": t_acc, "student_acc": s_acc, "lr": lr}
            ev["train_teacher_ce"] = epoch_teacher_ce[-1]
            evals.append(ev)
            fh.write(_json_line(ev) + "\n")
            fh.flush()
            log.info("epoch %d lr %.4g teacher %.4f student %s", epoch, lr, t_acc, s_acc)

    seeds = {
        "data": config.seed_data if config.data_dir is None else None,
        "teacher_init": config.seed_teacher_init,
        "student_init": config.seed_student_init,
        "train": config.seed_train,
    }
    model.save_checkpoint(out / "teacher.npz", teacher.params, seeds, {"role": "teacher"})
    if student is not None:
        model.save_checkpoint(out / "student.npz", student.params, seeds, {"role": "student"})
    summary = {
        "mode": config.mode,
        "epochs": config.epochs,
        "steps": global_step,
        "best_teacher_acc": max(e["teacher_acc"] for e in evals),
        "final_teacher_acc": evals[-1]["teacher_acc"],
        "best_student_acc": None if single else max(e["student_acc"] for e in evals),
        "final_student_acc": None if single else evals[-1]["student_acc"],
        "epoch_teacher_ce": epoch_teacher_ce,
        "lambdas": [float(v) for v in config.lambdas],
        "seeds": seeds,
    }
    data_mod.write_text_atomic(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    data_mod.write_text_atomic(out / "timing.json", json.dumps({"step_wall_ms": timing}) + "\n")
    return out


# -- sweeps -----------------------------------------------------------------

ABLATIONS = {
    "cekd": None,
    "only_cd": lambda lams: lams[:2] + [0.0, 0.0, 0.0, 0.0],
    "only_ce": lambda lams: [0.0, 0.0] + lams[2:],
}


def parse_vary(spec: str) -> tuple[str, list[float]]:
    """``"lambda1=0.1,0.3"`` -> ``("lambda1", [0.1, 0.3])``."""
    name, sep, values = spec.partition("=")
    name = name.strip()
    if not sep or not values.strip():
        raise ConfigError(f"malformed --vary {spec!r}; expected name=v1,v2,...")
    try:
        vals = [float(v) for v in values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"malformed --vary values in {spec!r}") from exc
    return name, vals


def vary_config(config: ExperimentConfig, name: str, value: float) -> ExperimentConfig:
    lams = [float(v) for v in config.lambdas]
    if name.startswith("lambda") and name[6:].isdigit():
        idx = int(name[6:]) - 1
        if not 0 <= idx < 6:
            raise ConfigError(f"no such coefficient {name}")
        lams[idx] = value
        if idx == 0:
            # the lambda1 grid couples the two cross-distillation weights
            lams[1] = 1.0 - value
        return config.replace(lambdas=lams)
    if name in {"temperature", "ce_weight", "base_lr"}:
        return config.replace(**{name: value})
    raise ConfigError(f"cannot vary {name!r}")


def _fmt(v: float) -> str:
    return f"{v:g}"


def sweep(config: ExperimentConfig, out_dir, vary: str | None = None, ablation: bool = False, seeds=None) -> dict:
    """Run a grid of experiments; returns and writes ``sweep.json``.

    ``vary`` runs one experiment per listed value. ``ablation`` runs the full
    model, both single-module ablations and the single-network baseline.
    ``seeds`` repeats every cell with ``seed_teacher_init/student_init/train``
    offset by the seed.
    """
    out = Path(out_dir)
    _check_writable(out)
    cells: list[tuple[str, ExperimentConfig]] = []
    if vary:
        name, values = parse_vary(vary)
        cells += [(f"{name}={_fmt(v)}", vary_config(config, name, v)) for v in values]
    if ablation:
        lams = [float(v) for v in config.lambdas]
        for label, fn in ABLATIONS.items():
            cells.append((label, config if fn is None else config.replace(lambdas=fn(lams))))
        cells.append(("single", config.replace(mode="single")))
    if not cells:
        raise ConfigError("sweep needs --vary and/or --ablation")
    seeds = [None] if not seeds else list(seeds)
    results = []
    for label, cfg in cells:
        for seed in seeds:
            run_cfg = cfg if seed is None else seeded(cfg, seed)
            name = label if seed is None else f"{label}/seed{seed}"
            run_dir = out / name
            run_experiment(run_cfg, run_dir)
            summary = json.loads((run_dir / "summary.json").read_text())
            results.append({"cell": label, "seed": seed, "dir": name, "lambdas": run_cfg.lambdas, **{
                k: summary[k] for k in ("best_teacher_acc", "final_teacher_acc", "best_student_acc", "final_student_acc")
            }})
    report = {"runs": results}
    data_mod.write_text_atomic(out / "sweep.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def seeded(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return config.replace(
        seed_teacher_init=config.seed_teacher_init + 1000 * seed,
        seed_student_init=config.seed_student_init + 1000 * seed,
        seed_train=config.seed_train + 1000 * seed,
    )


# -- CAM heatmaps -----------------------------------------------------------


def emit_cam(checkpoint, images, ids, out_dir) -> list[dict]:
    """Write a min-max normalized CAM heatmap (PGM) and JSON sidecar per image.

    The sidecar records the GAP identity check: the spatial mean of the raw
    CAM must equal the predicted logit minus its bias.
    """
    params, _ = model.load_checkpoint(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.float64)
    logits, trace = model.forward(params, images)
    records = []
    for i, sid in enumerate(ids):
        c = int(logits[i].argmax())
        raw = model.cam(params, trace, c, sample=i)
        lo, hi = float(raw.min()), float(raw.max())
        norm = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)
        heat = np.clip(region_transform(norm, images.shape[-2], images.shape[-1]), 0.0, 1.0)
        data_mod.save_pgm(out / f"{sid}_cam.pgm", heat)
        identity_error = abs(float(raw.mean()) - (float(logits[i, c]) - float(params["fc.b"][c])))
        rec = {
            "id": sid,
            "predicted_class": c,
            "logit": float(logits[i, c]),
            "bias": float(params["fc.b"][c]),
            "raw_cam_mean": float(raw.mean()),
            "gap_identity_error": identity_error,
            "gap_identity_ok": identity_error <= 1e-6,
        }
        data_mod.write_text_atomic(out / f"{sid}_cam.json", json.dumps(rec, indent=2, sort_keys=True) + "\n")
        records.append(rec)
    return records


def augment_preview(method: MixMethod, images, labels, ids, out_dir, seed: int, params: model.Params | None = None):
    """Mix one batch and write the mixed images plus a ``records.tsv`` sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    provider = teacher_cam_provider(params) if params is not None else None
    if method.kind is MixKind.SNAPMIX and provider is None:
        raise ValueError("SnapMix preview requires network parameters for CAMs")
    batch = apply_augmentation(images, labels, method, RngStream(seed), provider)
    rows = ["index\tid\tpartner_id\tlabel_a\tlabel_b\tw_a\tw_b\tmethod\tmixed"]
    for i in range(len(batch)):
        data_mod.save_pgm(out / f"mix_{i:04d}.pgm" if batch.images.shape[1] == 1 else out / f"mix_{i:04d}.ppm", batch.images[i])
        rows.append(
            f"{i}\t{ids[i]}\t{ids[int(batch.perm[i])]}\t{int(batch.label_a[i])}\t{int(batch.label_b[i])}\t"
            f"{float(batch.w_a[i])!r}\t{float(batch.w_b[i])!r}\t{batch.method.value}\t{int(batch.mixed[i])}"
        )
    data_mod.write_text_atomic(out / "records.tsv", "\n".join(rows) + "\n")
    return batch
