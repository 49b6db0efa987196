"""Siamese teacher/student optimisation with masked hard instance mining."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import mining
from .aggregators import BagOutput, MILModel, build_model
from .data import Bag
from .metrics import UndefinedMetricError, auc
from .numerics import Node, ParameterError, Tape, kernels
from .params_io import ParamFileError, load_params, save_params
from .recycle import GlobalRecycle, assemble

INIT_MODES = ("scratch", "teacher_init", "teacher_and_student_proj_init")
FRAMEWORKS = ("baseline", "mhim")

# independent named random streams under one root seed
STREAMS = {"init_student": 1, "init_teacher": 2, "init_grn": 3, "shuffle": 4, "mining": 5}


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng([seed, STREAMS[name], *extra])


class NumericAbort(ArithmeticError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # model
    model: str = "gated"
    dim: int = 512
    attn_dim: int = 128
    msa_layers: int = 2
    msa_heads: int = 8
    n_classes: int = 1
    # framework
    framework: str = "mhim"
    mask_ratio_high: float = 0.02
    ratio_decay: bool = True
    mask_ratio_low: float = 0.8
    mask_strategy: str = "rsm"
    score_source: str = "instance_probability"
    grn_queries: int = 16
    grn_momentum: float = 0.9
    grn_heads: int = 8
    alpha: float = 0.5
    temperature: float = 0.5
    ema_momentum: float = 0.9999
    init_mode: str = "teacher_and_student_proj_init"
    # optimiser
    lr: float = 2e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    pretrain_epochs: int = -1  # -1: same as epochs
    early_stopping: bool = True
    patience: int = 20
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.model not in ("gated", "msa"):
            raise TrainConfigError(f"model must be gated or msa, got {self.model!r}")
        if self.framework not in FRAMEWORKS:
            raise TrainConfigError(f"framework must be one of {FRAMEWORKS}")
        if self.init_mode not in INIT_MODES:
            raise TrainConfigError(f"init_mode must be one of {INIT_MODES}")
        if self.mask_strategy not in mining.STRATEGIES:
            raise TrainConfigError(f"mask_strategy must be one of {mining.STRATEGIES}")
        if self.score_source not in mining.SOURCES:
            raise TrainConfigError(f"score_source must be one of {mining.SOURCES}")
        if not 0.0 <= self.mask_ratio_high < 0.5:
            raise TrainConfigError("mask_ratio_high must be in [0, 0.5)")
        if not 0.0 <= self.mask_ratio_low < 1.0:
            raise TrainConfigError("mask_ratio_low must be in [0, 1)")
        if not 0.0 <= self.ema_momentum <= 1.0 or not 0.0 <= self.grn_momentum <= 1.0:
            raise TrainConfigError("momenta must lie in [0, 1]")
        if self.temperature <= 0:
            raise TrainConfigError("temperature must be positive")
        if self.alpha < 0:
            raise TrainConfigError("alpha must be non-negative")
        if self.dim % self.grn_heads or (self.model == "msa" and self.dim % self.msa_heads):
            raise TrainConfigError("dim must be divisible by the head counts")
        if self.epochs < 0 or self.grn_queries < 0 or self.patience < 1:
            raise TrainConfigError("epochs, grn_queries must be >= 0 and patience >= 1")
        return self

    @property
    def n_pretrain_epochs(self) -> int:
        return self.epochs if self.pretrain_epochs < 0 else self.pretrain_epochs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class LossReport:
    l_cls: float
    l_con: float
    loss: float
    alpha: float
    temperature: float
    prob: float = float("nan")
    lr: float = 0.0
    beta_h_eff: float = 0.0
    plan: mining.MaskPlan | None = field(default=None, repr=False)


class Adam:
    """Adam with decoupled weight decay; moments keyed by parameter name."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, groups: list[tuple[dict, dict]], lr: float) -> None:
        self.t += 1
        for params, grads in groups:
            for name, g in grads.items():
                p = params[name]
                if name not in self.m:
                    self.m[name] = np.zeros_like(p)
                    self.v[name] = np.zeros_like(p)
                kernels.adam_update(p, np.ascontiguousarray(g), self.m[name], self.v[name], lr,
                                    self.beta1, self.beta2, self.eps, self.weight_decay, self.t)


def cosine_lr(base: float, step: int, total: int) -> float:
    if total <= 0:
        return base
    t = min(step, total)
    return base * 0.5 * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# losses


def classification_loss(tape: Tape, logits: Node, label: int) -> Node:
    """Cross-entropy on bag logits; one logit means binary (sigmoid) BCE."""
    if logits.value.shape[1] == 1:
        # log sigmoid(l) and log(1 - sigmoid(l)) as a stable two-way log-softmax
        row = tape.concat_cols([tape.constant(np.zeros((1, 1))), logits])
    else:
        row = logits
    ls = tape.log_softmax(row)
    return tape.scale(tape.slice_cols(ls, int(label), int(label) + 1), -1.0)


def consistency_loss(tape: Tape, f_teacher, f_student: Node, temperature: float) -> Node:
    """-sum softmax(F_t / tau) * log_softmax(F_s); F_t enters as a constant."""
    if not temperature > 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    ft = f_teacher.value if isinstance(f_teacher, Node) else np.asarray(f_teacher, dtype=np.float64)
    target = kernels.softmax_rows(np.ascontiguousarray(ft.reshape(1, -1)), float(temperature))
    ls = tape.log_softmax(f_student)
    return tape.scale(tape.sum(tape.mul(tape.constant(target), ls)), -1.0)


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], momentum: float) -> dict:
    """In place: teacher <- momentum * teacher + (1 - momentum) * student."""
    if teacher.keys() != student.keys():
        raise ValueError("teacher and student parameter sets differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        kernels.ema_update_inplace(t, s, momentum)
    return teacher


# ---------------------------------------------------------------------------
# state


@dataclass
class SiameseState:
    config: TrainConfig
    student: MILModel
    grn: GlobalRecycle | None
    teacher: MILModel | None
    optimizer: Adam
    step: int = 0
    total_steps: int = 0

    def student_params(self) -> dict[str, np.ndarray]:
        """Student aggregator, recycle weights and global queries in one flat dict."""
        out = dict(self.student.params)
        if self.grn is not None:
            out.update(self.grn.params)
            out["grn.queries"] = self.grn.queries.q
        return out


def _new_model(cfg: TrainConfig, d_in: int, rng) -> MILModel:
    return build_model(cfg.model, rng, d_in, cfg.dim, cfg.n_classes, cfg.attn_dim,
                       cfg.msa_layers, cfg.msa_heads)


def _check_pretrained(pre: dict[str, np.ndarray], model: MILModel):
    if pre.keys() != model.params.keys():
        missing = sorted(set(model.params) ^ set(pre))
        raise ParamFileError(f"pretrained parameters do not match the model: {missing[:5]}")
    for name, v in pre.items():
        if v.shape != model.params[name].shape:
            raise ParamFileError(f"pretrained {name} has shape {v.shape}, "
                                 f"model expects {model.params[name].shape}")


def initialize(cfg: TrainConfig, d_in: int, pretrained=None) -> SiameseState:
    """Fresh training state.

    ``pretrained`` is a parameter dict or a path to a parameter file from
    :func:`pretrain_baseline`; it is required unless ``init_mode`` is
    ``scratch`` or the framework is ``baseline``.
    """
    cfg.validate()
    student = _new_model(cfg, d_in, stream(cfg.seed, "init_student"))
    opt = Adam(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    if cfg.framework == "baseline":
        return SiameseState(cfg, student, None, None, opt)
    grn = GlobalRecycle.create(stream(cfg.seed, "init_grn"), cfg.dim, cfg.grn_queries,
                               cfg.grn_heads, cfg.grn_momentum)
    if cfg.init_mode == "scratch":
        teacher = _new_model(cfg, d_in, stream(cfg.seed, "init_teacher"))
    else:
        if pretrained is None:
            raise ParamFileError(f"init_mode {cfg.init_mode!r} needs a pretrained baseline")
        pre = load_params(pretrained)[0] if not isinstance(pretrained, dict) else pretrained
        _check_pretrained(pre, student)
        teacher = student.copy()
        teacher.params = {k: np.array(v, dtype=np.float64) for k, v in pre.items()}
        if cfg.init_mode == "teacher_and_student_proj_init":
            for name in ("proj.weight", "proj.bias"):
                student.params[name] = np.array(pre[name], dtype=np.float64)
    return SiameseState(cfg, student, grn, teacher, opt)


# ---------------------------------------------------------------------------
# steps


def _check_finite(named, bag_id=""):
    for name, value in named:
        v = value.value if isinstance(value, Node) else np.asarray(value)
        if not np.all(np.isfinite(v)):
            raise NumericAbort(f"non-finite values in {name} (bag {bag_id})")


def _prob(logits: np.ndarray) -> np.ndarray:
    v = logits.ravel()
    if v.size == 1:
        z = math.exp(-abs(v[0]))
        return np.array([1.0 / (1.0 + z) if v[0] >= 0 else z / (1.0 + z)])
    e = np.exp(v - v.max())
    return e / e.sum()


def _score_for_auc(logits: np.ndarray) -> float:
    p = _prob(logits)
    return float(p[0] if p.size == 1 else p[-1])


def mine(state: SiameseState, x: np.ndarray, rng, beta_h: float):
    """Teacher pass over the full bag: (mask plan, detached teacher embedding)."""
    cfg = state.config
    t = Tape(record=False)
    h_t = state.teacher.project(t, x, trainable=False)
    out_t = state.teacher.aggregate(t, h_t, trainable=False)
    scores = mining.assess(out_t, state.teacher, h_t.value, cfg.score_source)
    plan = mining.plan_masks(scores, beta_h, cfg.mask_ratio_low, cfg.mask_strategy, rng)
    return plan, out_t.embedding.value


def current_beta_h(state: SiameseState) -> float:
    cfg = state.config
    if not cfg.ratio_decay:
        return cfg.mask_ratio_high
    return mining.decayed_ratio(mining.DecaySchedule(cfg.mask_ratio_high, state.total_steps),
                                state.step)


def train_step(state: SiameseState, bag: Bag, rng: np.random.Generator) -> LossReport:
    """One bag: teacher mining, student update, teacher EMA."""
    cfg = state.config
    if state.teacher is None:
        raise TrainConfigError("train_step needs a teacher; use baseline_step for the baseline")
    x = bag.features
    lr = cosine_lr(cfg.lr, state.step, state.total_steps)
    beta_h = current_beta_h(state)

    plan, f_t = mine(state, x, rng, beta_h)

    tape = Tape()
    h = state.student.project(tape, x)
    z = tape.gather_rows(h, plan.kept_idx)
    recovered = None
    if plan.recycle_idx.size and state.grn.queries.k:
        recovered = state.grn.forward(tape, tape.gather_rows(h, plan.recycle_idx))
        z = assemble(tape, z, recovered)
    out_s = state.student.aggregate(tape, z)

    l_cls = classification_loss(tape, out_s.logits, bag.label)
    l_con = consistency_loss(tape, f_t, out_s.embedding, cfg.temperature)
    loss = tape.add(l_cls, tape.scale(l_con, cfg.alpha)) if cfg.alpha != 0 else l_cls
    _check_finite([("teacher embedding", f_t), ("instance scores", plan.scores),
                   ("student logits", out_s.logits), ("student embedding", out_s.embedding),
                   ("classification loss", l_cls), ("consistency loss", l_con)], bag.id)

    tape.backward(loss)
    groups = [(state.student.params, tape.gradients(state.student.params))]
    if recovered is not None:
        groups.append((state.grn.params, tape.gradients(state.grn.params)))
    state.optimizer.step(groups, lr)
    if recovered is not None:
        state.grn.update_queries(recovered.value)
    ema_update(state.teacher.params, state.student.params, cfg.ema_momentum)
    state.step += 1
    return LossReport(float(l_cls.value[0, 0]), float(l_con.value[0, 0]), float(loss.value[0, 0]),
                      cfg.alpha, cfg.temperature, _score_for_auc(out_s.logits.value), lr, beta_h, plan)


def baseline_step(state: SiameseState, bag: Bag) -> LossReport:
    """Plain MIL training step on the full bag (no teacher, no masking)."""
    cfg = state.config
    lr = cosine_lr(cfg.lr, state.step, state.total_steps)
    tape = Tape()
    out = state.student.forward(tape, bag.features)
    loss = classification_loss(tape, out.logits, bag.label)
    _check_finite([("student logits", out.logits), ("classification loss", loss)], bag.id)
    tape.backward(loss)
    state.optimizer.step([(state.student.params, tape.gradients(state.student.params))], lr)
    state.step += 1
    v = float(loss.value[0, 0])
    return LossReport(v, 0.0, v, 0.0, cfg.temperature, _score_for_auc(out.logits.value), lr)


# ---------------------------------------------------------------------------
# loops


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_con: float
    loss: float
    lr: float
    beta_h_eff: float
    train_auc: float


HISTORY_COLUMNS = ["epoch", "L_cls", "L_con", "L", "lr", "beta_h_eff", "train_auc"]


def history_csv(history: list[EpochRecord]) -> str:
    lines = [",".join(HISTORY_COLUMNS)]
    for r in history:
        lines.append(",".join([str(r.epoch)] + [repr(float(v)) for v in
                                                (r.l_cls, r.l_con, r.loss, r.lr, r.beta_h_eff, r.train_auc)]))
    return "\n".join(lines) + "\n"


def fit(bags: list[Bag], cfg: TrainConfig, pretrained=None, epochs: int | None = None,
        keep_plans: bool = False):
    """Train for ``epochs`` (default ``cfg.epochs``) over shuffled bags, batch size one.

    Returns ``(state, history, plans)`` where ``plans`` maps bag id to the
    mask plan of its last step (empty unless ``keep_plans``).
    """
    cfg.validate()
    labels = {b.label for b in bags}
    if len(bags) < 2 or len(labels) < 2:
        raise TrainConfigError("training split needs at least two bags covering both classes")
    epochs = cfg.epochs if epochs is None else epochs
    d_in = bags[0].features.shape[1]
    state = initialize(cfg, d_in, pretrained)
    state.total_steps = epochs * len(bags)
    mine_rng = stream(cfg.seed, "mining")
    history: list[EpochRecord] = []
    plans: dict[str, mining.MaskPlan] = {}
    best, stale = math.inf, 0
    for epoch in range(epochs):
        order = stream(cfg.seed, "shuffle", epoch).permutation(len(bags))
        reps, ys = [], []
        for i in order:
            bag = bags[i]
            if cfg.framework == "baseline":
                rep = baseline_step(state, bag)
            else:
                rep = train_step(state, bag, mine_rng)
                if keep_plans:
                    plans[bag.id] = rep.plan
                rep.plan = None
            reps.append(rep)
            ys.append(bag.label)
        mean_loss = float(np.mean([r.loss for r in reps]))
        try:
            tr_auc = auc([r.prob for r in reps], [int(y > 0) for y in ys])
        except UndefinedMetricError:
            tr_auc = float("nan")
        history.append(EpochRecord(epoch, float(np.mean([r.l_cls for r in reps])),
                                   float(np.mean([r.l_con for r in reps])), mean_loss,
                                   cosine_lr(cfg.lr, state.step, state.total_steps),
                                   current_beta_h(state) if state.teacher is not None else 0.0,
                                   tr_auc))
        if cfg.early_stopping:
            if mean_loss < best:
                best, stale = mean_loss, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    return state, history, plans


def pretrain_baseline(bags: list[Bag], cfg: TrainConfig, path=None) -> dict[str, np.ndarray]:
    """Train the aggregator alone with the same optimiser and schedule."""
    base = replace(cfg, framework="baseline")
    state, _, _ = fit(bags, base, epochs=cfg.n_pretrain_epochs)
    params = {k: v.copy() for k, v in state.student.params.items()}
    if path is not None:
        save_params(path, params, state.student.hyper())
    return params


@dataclass
class Inference:
    prob: np.ndarray  # class probabilities (length 1 for binary: P(positive))
    attention: np.ndarray  # (N,) over original instances, sums to one
    instance_scores: np.ndarray  # (N,) class-aware instance probability

    @property
    def score(self) -> float:
        return float(self.prob[0] if self.prob.size == 1 else self.prob[-1])


def infer(student: MILModel, grn: GlobalRecycle | None, bag: Bag | np.ndarray) -> Inference:
    """Student-only prediction on concat(Z, recycle(Z)); no randomness, no state change."""
    x = bag.features if isinstance(bag, Bag) else np.asarray(bag, dtype=np.float64)
    tape = Tape(record=False)
    h = student.project(tape, x, trainable=False)
    z = h
    if grn is not None and grn.queries.k:
        z = tape.concat_rows([h, grn.forward(tape, h, trainable=False)])
    out = student.aggregate(tape, z, trainable=False)
    n = x.shape[0]
    att = out.attention[:n]
    att = att / att.sum()
    scores = mining.assess(BagOutput(None, None, att), student, h.value,
                           "instance_probability").scores
    return Inference(_prob(out.logits.value), att, scores)
