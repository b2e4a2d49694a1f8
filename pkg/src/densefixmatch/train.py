"""Dense FixMatch and supervised training loops, checkpoints and run results.

All randomness hangs off two integers in the config: ``data_seed`` fixes the
dataset, validation set and the family of labeled splits; ``seed`` fixes
model init, batch order and augmentation. Sub-seeds are
``SeedSequence([root, TAG])`` with the tags below, and every augmentation
draw uses its own generator keyed by ``(aug_seed, step, stream, slot)``, so a
step can be replayed from the step counter alone.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import augment as aug
from .autodiff import IGNORE, Tensor
from .data import (
    GENERATOR_VERSION,
    ExplicitSampler,
    ImplicitSampler,
    SupervisedSampler,
    TrainView,
    gen_dataset,
    make_splits,
)
from .losses import (
    LOSS_CSV_COLUMNS,
    LossBreakdown,
    TeacherState,
    consistency_loss,
    ema_update,
    lambda_schedule,
    sgd_step,
    supervised_loss,
    total_loss,
)
from .matching import match, pseudolabel
from .metrics import evaluate_model
from .model import LayerSpec, ParamSet, forward_logits, init_model, predict, save_params, trainable

log = logging.getLogger(__name__)

TAG_DATA, TAG_SPLIT, TAG_VAL, TAG_INIT, TAG_AUG, TAG_SAMPLER = range(6)
STREAM_LABELED, STREAM_CONSISTENCY = 0, 1
CHECKPOINT_FORMAT = "densefixmatch-checkpoint"
CHECKPOINT_VERSION = 1


def derive_seed(root: int, tag: int) -> int:
    return int(np.random.SeedSequence([int(root), int(tag)]).generate_state(1)[0])


@dataclass
class TrainConfig:
    method: str = "dense_fixmatch"  # or "supervised"
    # pseudo-labels and objective
    tau: float = 0.5
    lambda_max: float = 1.0
    warmup_steps: int = 300
    ema_decay: float = 0.99
    use_teacher: bool = True
    unlabeled_on_labeled: bool = False
    cutout_ignores_pseudolabels: bool = False
    # augmentation
    crop_relation: str = "min-overlap"
    min_overlap: float = 0.25
    augmentation: str = "crop+color+geom+cutout"
    n_ops: int = 2
    magnitude_range: tuple = (0.0, 1.0)
    flip_prob: float = 0.5
    # batches
    sampling: str = "explicit"
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    batch_size: int = 16
    # splits
    n_labeled: int = 16
    n_splits: int = 4
    split_index: int = 0
    # optimisation
    steps: int = 1000
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    eval_interval: int = 250
    # randomness
    seed: int = 0
    data_seed: int = 0
    # data and model
    n_images: int = 512
    image_size: int = 48
    crop_size: int = 32
    num_classes: int = 4
    imbalance: float = 1.0
    n_val: int = 128
    channels: tuple = (3, 32, 32, 32)
    dtype: str = "float32"
    out_dir: Optional[str] = None

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name in ("magnitude_range", "channels"):
                setattr(self, f.name, tuple(getattr(self, f.name)))
        self.validate()

    def validate(self) -> None:
        if self.method not in ("dense_fixmatch", "supervised"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.sampling not in ("explicit", "implicit"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")
        if self.crop_relation not in aug.CROP_RELATIONS:
            raise ValueError(f"unknown crop relation {self.crop_relation!r}")
        aug.parse_subset(self.augmentation)
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if not 0 <= self.split_index < self.n_splits:
            raise ValueError("split_index must be < n_splits")
        if self.crop_size > self.image_size:
            raise ValueError("crop_size larger than image_size")
        if self.steps < 0 or self.eval_interval < 1:
            raise ValueError("steps must be >= 0 and eval_interval >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        d["generator_version"] = GENERATOR_VERSION
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def resume_key(self) -> str:
        """Like :meth:`hash` but ignoring ``steps``, so a run can be extended."""
        return self.replace(steps=0).hash()

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def layer_spec(self) -> LayerSpec:
        return LayerSpec(self.channels, 3, self.num_classes)


@dataclass
class TrainState:
    student: ParamSet
    teacher: TeacherState
    velocity: Optional[dict]
    step: int = 0


@dataclass
class RunResult:
    best_miou: float
    best_step: int
    final_miou: float
    final_student_miou: float
    per_class_iou: list
    history: list  # [step, teacher mIoU, student mIoU or None before the last step]
    loss_csv: Optional[str]
    config_hash: str
    split_index: int
    seed: int
    wall_time: float = 0.0

    def metrics(self) -> dict:
        """Everything except wall time; equal for identical runs."""
        d = dataclasses.asdict(self)
        d.pop("wall_time")
        return d


# ---------------------------------------------------------------------------


@dataclass
class DataBundle:
    train: list
    val: list
    split: object
    view: TrainView


def build_data(cfg: TrainConfig) -> DataBundle:
    common = dict(height=cfg.image_size, width=cfg.image_size, num_classes=cfg.num_classes, imbalance=cfg.imbalance)
    train = gen_dataset(derive_seed(cfg.data_seed, TAG_DATA), cfg.n_images, **common)
    val = gen_dataset(derive_seed(cfg.data_seed, TAG_VAL), cfg.n_val, **common)
    splits = make_splits(cfg.n_images, cfg.n_labeled, cfg.n_splits, derive_seed(cfg.data_seed, TAG_SPLIT))
    split = splits[cfg.split_index]
    return DataBundle(train, val, split, TrainView(train, split))


def init_state(cfg: TrainConfig) -> TrainState:
    student = init_model(derive_seed(cfg.seed, TAG_INIT), cfg.layer_spec, cfg.np_dtype)
    return TrainState(student, TeacherState(student.copy(), cfg.ema_decay), None, 0)


def make_sampler(cfg: TrainConfig, split):
    seed = derive_seed(cfg.seed, TAG_SAMPLER)
    if cfg.method == "supervised":
        return SupervisedSampler(split, cfg.batch_labeled, seed)
    if cfg.sampling == "explicit":
        return ExplicitSampler(split, cfg.batch_labeled, cfg.batch_unlabeled, seed)
    return ImplicitSampler(split, cfg.batch_size, seed)


def aug_rng(cfg: TrainConfig, step: int, stream: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([derive_seed(cfg.seed, TAG_AUG), step, stream, slot])


def sample_views(cfg: TrainConfig, rng: np.random.Generator) -> tuple[aug.AugRecord, aug.AugRecord]:
    """Weak and strong records for one consistency element."""
    weak = aug.sample_weak(rng, cfg.image_size, cfg.crop_size, cfg.flip_prob)
    pool, use_cutout = aug.parse_subset(cfg.augmentation)
    strong = aug.sample_strong(
        rng, cfg.image_size, cfg.crop_size, weak,
        pool=pool, n_ops=cfg.n_ops, magnitude_range=cfg.magnitude_range,
        cutout=aug.CutoutConfig() if use_cutout else None,
        crop_relation=cfg.crop_relation, min_overlap=cfg.min_overlap, flip_prob=cfg.flip_prob,
    )
    return weak, strong


def labeled_views(cfg: TrainConfig, view: TrainView, step: int, ids: list[int]):
    images, labels = [], []
    for slot, i in enumerate(ids):
        rec = aug.sample_weak(aug_rng(cfg, step, STREAM_LABELED, slot), cfg.image_size, cfg.crop_size, cfg.flip_prob)
        images.append(aug.apply_to_image(rec, view.image(i)))
        labels.append(aug.apply_geom_to_labels(rec.geometric, view.labels(i)))
    return np.stack(images).astype(cfg.np_dtype), np.stack(labels)


def consistency_views(cfg: TrainConfig, view: TrainView, step: int, ids: list[int], pl_params: ParamSet):
    """Strong-view images and their matched pseudo-labels.

    Only images are read here: this path never touches ground truth.
    """
    weak_imgs, strong_imgs, recs = [], [], []
    for slot, i in enumerate(ids):
        weak, strong = sample_views(cfg, aug_rng(cfg, step, STREAM_CONSISTENCY, slot))
        x = view.image(i)
        weak_imgs.append(aug.apply_to_image(weak, x))
        strong_imgs.append(aug.apply_to_image(strong, x))
        recs.append((weak, strong))
    probs = predict(pl_params, np.stack(weak_imgs).astype(cfg.np_dtype)).data
    pls = pseudolabel(probs, cfg.tau)
    matched = []
    for pl, (weak, strong) in zip(pls, recs):
        m = match(pl, weak, strong)
        if cfg.cutout_ignores_pseudolabels:
            m[aug.cutout_mask(strong)] = IGNORE
        matched.append(m)
    return np.stack(strong_imgs).astype(cfg.np_dtype), np.stack(matched)


def train_step(cfg: TrainConfig, state: TrainState, view: TrainView, plan) -> tuple[TrainState, LossBreakdown]:
    step = state.step
    params = trainable(state.student)

    lab_ids = plan.labeled_ids
    if lab_ids:
        x_l, y_l = labeled_views(cfg, view, step, lab_ids)
        l_s = supervised_loss(forward_logits(params, x_l), y_l)
    else:
        l_s = Tensor(np.zeros((), dtype=cfg.np_dtype))

    lam = 0.0
    l_u = None
    valid_frac = 0.0
    if cfg.method == "dense_fixmatch":
        lam = lambda_schedule(step, cfg.warmup_steps, cfg.lambda_max)
        if plan.mode == "implicit" or cfg.unlabeled_on_labeled:
            cons_ids = list(plan.ids)
        else:
            cons_ids = plan.unlabeled_ids
        if cons_ids:
            pl_params = state.teacher.params if cfg.use_teacher else state.student
            x_s, matched = consistency_views(cfg, view, step, cons_ids, pl_params)
            valid_frac = float(np.count_nonzero(matched != IGNORE)) / matched.size
            l_u = consistency_loss(forward_logits(params, x_s), matched)

    total = total_loss(l_s, l_u, lam) if l_u is not None else l_s
    bd = LossBreakdown(
        L_s=l_s.item(),
        L_u=0.0 if l_u is None else l_u.item(),
        lambda_t=lam,
        total=total.item(),
        valid_pixel_fraction=valid_frac,
        no_labeled_pixels=not lab_ids or not np.any(y_l != IGNORE),
    )
    if not np.isfinite(bd.total):
        _dump_diagnostic(cfg, state, bd)
        raise FloatingPointError(f"non-finite loss at step {step}: {bd}")

    total.backward()
    grads = {k: t.grad for k, t in params.items() if isinstance(t, Tensor) and t.grad is not None}
    student, velocity = sgd_step(state.student, grads, cfg.lr, cfg.momentum, cfg.weight_decay, state.velocity)
    teacher = ema_update(state.teacher, student)
    return TrainState(student, teacher, velocity, step + 1), bd


def _dump_diagnostic(cfg: TrainConfig, state: TrainState, bd: LossBreakdown) -> None:
    if not cfg.out_dir:
        return
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"diagnostic_step{state.step}.json").write_text(
        json.dumps({"step": state.step, "loss": dataclasses.asdict(bd), "config": cfg.to_dict()}, indent=2, default=str)
    )
    save_checkpoint(out / f"diagnostic_step{state.step}.npz", state, {})


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState, extra: dict) -> None:
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "step": state.step,
              "spec": state.student.spec.to_dict(), "decay": state.teacher.decay,
              "has_velocity": state.velocity is not None}
    header.update(extra)
    arrays = {"__header__": np.array(json.dumps(header))}
    for k, v in state.student.arrays.items():
        arrays[f"student/{k}"] = v
    for k, v in state.teacher.params.arrays.items():
        arrays[f"teacher/{k}"] = v
    for k, v in (state.velocity or {}).items():
        arrays[f"velocity/{k}"] = v
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint header {header.get('format')}/{header.get('version')}")
        s = header["spec"]
        spec = LayerSpec(tuple(s["channels"]), s["kernel"], s["num_classes"])
        names = list(spec.param_shapes())
        student = ParamSet(spec, {k: z[f"student/{k}"].copy() for k in names})
        teacher = ParamSet(spec, {k: z[f"teacher/{k}"].copy() for k in names})
        velocity = {k: z[f"velocity/{k}"].copy() for k in names} if header["has_velocity"] else None
    return TrainState(student, TeacherState(teacher, header["decay"]), velocity, header["step"]), header


# ---------------------------------------------------------------------------


class _LossLog:
    def __init__(self, path: Optional[Path], resume_step: int):
        self.path = path
        self.fh = None
        if path is None:
            return
        rows = []
        if resume_step > 0 and path.exists():
            with open(path, newline="") as fh:
                reader = csv.reader(fh)
                next(reader, None)
                rows = [r for r in reader if int(r[0]) < resume_step]
        self.fh = open(path, "w", newline="")
        self.writer = csv.writer(self.fh)
        self.writer.writerow(LOSS_CSV_COLUMNS)
        self.writer.writerows(rows)

    def write(self, step: int, bd: LossBreakdown) -> None:
        if self.fh is not None:
            self.writer.writerow([step, repr(bd.L_s), repr(bd.L_u), repr(bd.lambda_t), repr(bd.total),
                                  repr(bd.valid_pixel_fraction)])

    def close(self) -> None:
        if self.fh is not None:
            self.fh.close()


def train_run(cfg: TrainConfig, resume: bool = True, data: Optional[DataBundle] = None,
              state: Optional[TrainState] = None) -> RunResult:
    """Train, evaluate the teacher every ``eval_interval`` steps, keep the best.

    With ``out_dir`` set, writes ``losses.csv``, ``report.json``,
    ``checkpoint_last.npz`` (at every evaluation) and ``best_teacher.npz``;
    an existing ``checkpoint_last.npz`` is resumed when ``resume`` is true.
    """
    t0 = time.perf_counter()
    data = data or build_data(cfg)
    out = Path(cfg.out_dir) if cfg.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")

    history: list = []
    best = {"miou": -1.0, "step": -1, "per_class_iou": []}
    ckpt_path = out / "checkpoint_last.npz" if out else None
    if state is None:
        state = init_state(cfg)
        if resume and ckpt_path is not None and ckpt_path.exists():
            state, header = load_checkpoint(ckpt_path)
            if header.get("resume_key") != cfg.resume_key():
                raise ValueError(f"{ckpt_path} was written by a different config")
            history, best = header["history"], header["best"]
            # a shorter run scored its student at its own last step; an unbroken run would not have
            for row in history:
                if 0 < row[0] < cfg.steps:
                    row[2] = None
            log.info("resumed from step %d", state.step)

    sampler = make_sampler(cfg, data.split)
    losses = _LossLog(out / "losses.csv" if out else None, state.step)

    def evaluate(st: TrainState) -> None:
        # the student is scored only at the end; at step 0 it equals the teacher
        t = evaluate_model(st.teacher.params, data.val)
        if st.step == 0:
            s = t
        elif st.step == cfg.steps:
            s = evaluate_model(st.student, data.val)
        else:
            s = {"miou": None}
        history.append([st.step, t["miou"], s["miou"]])
        if t["miou"] > best["miou"]:
            best.update(miou=t["miou"], step=st.step, per_class_iou=t["per_class_iou"])
            if out is not None:
                save_params(out / "best_teacher.npz", st.teacher.params)
        log.info("step %d teacher mIoU %.4f student mIoU %s", st.step, t["miou"],
                 "-" if s["miou"] is None else f"{s['miou']:.4f}")

    try:
        if state.step == 0 and not history:
            evaluate(state)
        while state.step < cfg.steps:
            plan = sampler.plan(state.step)
            step = state.step
            state, bd = train_step(cfg, state, data.view, plan)
            losses.write(step, bd)
            if state.step % cfg.eval_interval == 0 or state.step == cfg.steps:
                evaluate(state)
                if ckpt_path is not None:
                    save_checkpoint(ckpt_path, state, {"resume_key": cfg.resume_key(), "history": history, "best": best})
    finally:
        losses.close()

    result = RunResult(
        best_miou=best["miou"],
        best_step=best["step"],
        final_miou=history[-1][1],
        final_student_miou=history[-1][2],
        per_class_iou=best["per_class_iou"],
        history=history,
        loss_csv=str(out / "losses.csv") if out else None,
        config_hash=cfg.hash(),
        split_index=cfg.split_index,
        seed=cfg.seed,
        wall_time=time.perf_counter() - t0,
    )
    if out is not None:
        (out / "report.json").write_text(json.dumps(dataclasses.asdict(result), indent=2))
    return result
