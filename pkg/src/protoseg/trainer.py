"""Two-stage training: supervised pretraining, then mean-teacher self-training
with pseudo-labels, bidirectional copy-paste mixing, and prototype maintenance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import losses, ops
from .encoder import (
    SegModel,
    clone_model,
    ema_update,
    encode,
    encoder_backward,
    init_model,
    model_checksum,
)
from .prototypes import (
    PrototypeBank,
    assign,
    cluster_stats,
    confidence_filter,
    init_kmeans,
    momentum_update,
)
from .volume import (
    LabelVolume,
    PasteRegion,
    SyntheticSpec,
    Volume,
    copy_paste_mix,
    generate_synthetic,
    mix_labels,
    sample_paste_region,
)

log = logging.getLogger(__name__)

UNLABELED_ONTO_LABELED = "unlabeled-onto-labeled"
LABELED_ONTO_UNLABELED = "labeled-onto-unlabeled"


class ConfigError(Exception):
    pass


class TrainingDiverged(Exception):
    pass


@dataclass
class TrainConfig:
    C: int = 2
    K: int = 3
    d: int = 16
    eta: float = 0.999
    alpha: float = 0.9
    tau1: float = 0.1
    tau2: float = 0.1
    gamma: float = 0.1
    ema_decay: float = 0.99
    lr: float = 0.01
    batch_size: int = 2
    pretrain_iters: int = 300
    selftrain_iters: int = 1000
    ramp_len: int = 600
    paste_ratio: float = 0.66
    seed: int = 0
    labeled_fraction: float = 0.1
    eval_fraction: float = 0.1
    eval_interval: int = 100
    dims: tuple[int, int, int] = (32, 32, 16)
    noise_std: float = 0.3

    def __post_init__(self):
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ConfigError("labeled_fraction must be in (0, 1]")
        if self.C < 2:
            raise ConfigError("C must be >= 2")
        if self.K < 1:
            raise ConfigError("K must be >= 1")


def _parse_value(name: str, raw: str):
    if name == "dims":
        parts = tuple(int(p) for p in raw.split(","))
        if len(parts) != 3:
            raise ValueError("dims must be three comma-separated integers")
        return parts
    typ = type(getattr(TrainConfig(), name))
    return typ(raw)


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` lines, ``#`` comments; every field required."""
    known = {f.name for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        try:
            values[key] = _parse_value(key, raw)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {e}") from e
    missing = sorted(known - set(values))
    if missing:
        raise ConfigError(f"missing config key: {missing[0]}")
    return TrainConfig(**values)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(TrainConfig):
        v = getattr(cfg, f.name)
        if f.name == "dims":
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class DatasetSplit:
    labeled: list[tuple[Volume, LabelVolume]]
    unlabeled: list[Volume]
    eval_cases: list[tuple[Volume, LabelVolume]]

    def __post_init__(self):
        if not self.labeled:
            raise ValueError("labeled set must be nonempty")


def split_counts(count: int, labeled_fraction: float, eval_fraction: float):
    n_eval = int(round(eval_fraction * count))
    n_labeled = int(round(labeled_fraction * count))
    n_unlabeled = count - n_eval - n_labeled
    if n_labeled < 1 or n_unlabeled < 0 or n_eval < 1:
        raise ValueError(f"degenerate split for count={count}")
    return n_labeled, n_unlabeled, n_eval


def default_synthetic_spec(cfg: TrainConfig, seed: int) -> SyntheticSpec:
    shapes = ("sphere", "box", "blob")[: cfg.C - 1]
    means = tuple(float(c) for c in range(cfg.C))
    return SyntheticSpec(
        dims=cfg.dims,
        num_classes=cfg.C,
        shapes=shapes,
        means=means,
        noise_std=cfg.noise_std,
        seed=seed,
    )


def make_dataset(cfg: TrainConfig, count: int = 40) -> DatasetSplit:
    """Synthetic dataset split; volume i is generated from seed hash(cfg.seed, i)."""
    n_lab, n_unl, n_eval = split_counts(count, cfg.labeled_fraction, cfg.eval_fraction)
    pairs = []
    for i in range(count):
        spec = default_synthetic_spec(cfg, seed=cfg.seed * 100_003 + i)
        pairs.append(generate_synthetic(spec))
    labeled = pairs[:n_lab]
    unlabeled = [v for v, _ in pairs[n_lab : n_lab + n_unl]]
    eval_cases = pairs[n_lab + n_unl :]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, eval_cases=eval_cases)


# ---------------------------------------------------------------------------
# prediction / evaluation helpers


def predict(model: SegModel, vol: Volume) -> tuple[LabelVolume, np.ndarray]:
    """Linear-head argmax labels and per-voxel probabilities (H, W, D, C)."""
    emb = encode(model, vol)
    probs = losses.linear_classify(emb, model.linear_w)
    labels = probs.argmax(axis=-1).astype(np.uint16)  # ties -> lowest class
    return LabelVolume(labels, model.num_classes), probs


def make_pseudo_labels(teacher: SegModel, x_u: Volume) -> tuple[LabelVolume, np.ndarray]:
    return predict(teacher, x_u)


def make_mixed_label(
    y_l: LabelVolume, y_u_hat: LabelVolume, region: PasteRegion, direction: str
) -> LabelVolume:
    if direction == UNLABELED_ONTO_LABELED:
        return mix_labels(y_u_hat, y_l, region)
    if direction == LABELED_ONTO_UNLABELED:
        return mix_labels(y_l, y_u_hat, region)
    raise ValueError(f"unknown mix direction {direction!r}")


def evaluate_model(model: SegModel, cases) -> dict[str, float | None]:
    """Macro foreground metrics averaged over eval cases."""
    from .metrics import evaluate

    dice, jacc, hds, asds = [], [], [], []
    for vol, gt in cases:
        pred, _ = predict(model, vol)
        m = evaluate(pred, gt).macro()
        dice.append(m.dice)
        jacc.append(m.jaccard)
        if m.hd95 is not None:
            hds.append(m.hd95)
        if m.asd is not None:
            asds.append(m.asd)
    return {
        "dice": float(np.mean(dice)),
        "jaccard": float(np.mean(jacc)),
        "hd95": float(np.mean(hds)) if hds else None,
        "asd": float(np.mean(asds)) if asds else None,
    }


# ---------------------------------------------------------------------------
# gradient plumbing


def _apply_grads(model: SegModel, gks, gbs, gw, lr: float) -> None:
    enc = model.encoder
    updated = ops.sgd_step(enc.kernels + enc.biases + [model.linear_w],
                           gks + gbs + [gw], lr)
    n = len(enc.kernels)
    enc.kernels = updated[:n]
    enc.biases = updated[n : 2 * n]
    model.linear_w = updated[2 * n]


def _supervised_step_grads(model: SegModel, vol: Volume, lab: LabelVolume):
    """CE+Dice on the linear head only; returns (loss, gks, gbs, gw)."""
    emb, cache = encode(model, vol, with_cache=True)
    probs, head_cache = losses.linear_head_forward(emb, model.linear_w)
    loss = losses.consistency_loss(probs, lab.labels)
    gprobs = losses.consistency_grad(probs, lab.labels)
    gz, gw = losses.linear_head_backward(head_cache, gprobs)
    gks, gbs = encoder_backward(model.encoder, cache, gz)
    return loss, gks, gbs, gw


def pretrain(split: DatasetSplit, cfg: TrainConfig):
    """Supervised stage on copy-paste-mixed labeled pairs.

    Returns (model, eval history rows at each eval interval).
    """
    if len(split.labeled) < 2:
        raise ValueError("pretraining needs at least 2 labeled volumes")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(rng, cfg.C, channels=(1, 8, 16, cfg.d))
    history: list[HistoryRow] = []
    n = len(split.labeled)
    for it in range(cfg.pretrain_iters):
        acc = None
        total = 0.0
        for _ in range(cfg.batch_size):
            i, j = rng.integers(n), rng.integers(n)
            region = sample_paste_region(cfg.dims, cfg.paste_ratio, rng)
            src_v, src_l = split.labeled[i]
            dst_v, dst_l = split.labeled[j]
            mixed_v, mixed_l = copy_paste_mix(src_v, src_l, dst_v, dst_l, region)
            loss, gks, gbs, gw = _supervised_step_grads(model, mixed_v, mixed_l)
            total += loss
            grads = gks + gbs + [gw]
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
        if not np.isfinite(total):
            raise TrainingDiverged(f"NaN loss at pretrain iteration {it}")
        acc = [g / cfg.batch_size for g in acc]
        nk = len(model.encoder.kernels)
        _apply_grads(model, acc[:nk], acc[nk : 2 * nk], acc[2 * nk], cfg.lr)
        if ((it + 1) % cfg.eval_interval == 0 or it == cfg.pretrain_iters - 1) and split.eval_cases:
            m = evaluate_model(model, split.eval_cases)
            history.append(
                HistoryRow(it + 1, "eval", m["dice"], m["jaccard"], m["hd95"], m["asd"])
            )
    return model, history


# ---------------------------------------------------------------------------
# self-training


def init_bank_from_labeled(
    model: SegModel, split: DatasetSplit, cfg: TrainConfig, max_per_class: int = 4096
) -> PrototypeBank:
    """k-means over the pretrained encoder's labeled-voxel embeddings."""
    rng = np.random.default_rng(cfg.seed + 1)
    buckets: dict[int, list[np.ndarray]] = {c: [] for c in range(cfg.C)}
    for vol, lab in split.labeled:
        emb = encode(model, vol).reshape(-1, cfg.d)
        labels = lab.labels.ravel(order="C")
        for c in range(cfg.C):
            buckets[c].append(emb[labels == c])
    per_class = {}
    for c in range(cfg.C):
        pts = np.concatenate(buckets[c], axis=0)
        if pts.shape[0] > max_per_class:
            pts = pts[rng.permutation(pts.shape[0])[:max_per_class]]
        per_class[c] = pts
    return init_kmeans(per_class, cfg.K, cfg.eta, seed=cfg.seed + 2)


@dataclass
class HistoryRow:
    iteration: int
    split: str
    dice: float
    jaccard: float
    hd95: float | None
    asd: float | None


@dataclass
class LossRow:
    iteration: int
    lam: float
    l_lin: float
    l_proto: float
    l_cont: float
    total: float


def _student_step_grads(model: SegModel, bank: PrototypeBank, mixed_v: Volume,
                        mixed_l: LabelVolume, lam: float, cfg: TrainConfig):
    """Eq-style composite objective; returns (LossBreakdown, gks, gbs, gw, emb)."""
    emb, cache = encode(model, mixed_v, with_cache=True)
    target = mixed_l.labels

    lin_probs, lin_cache = losses.linear_head_forward(emb, model.linear_w)
    l_lin = losses.consistency_loss(lin_probs, target)
    g_lin = losses.consistency_grad(lin_probs, target)
    gz, gw = losses.linear_head_backward(lin_cache, g_lin)

    pro_probs, pro_cache = losses.proto_head_forward(emb, bank, cfg.tau1)
    l_proto = losses.consistency_loss(pro_probs, target)
    g_pro = losses.consistency_grad(pro_probs, target)
    gz_pro = losses.proto_head_backward(pro_cache, g_pro)

    l_cont, cont_cache = losses.contrastive_forward(emb, bank, cfg.tau2)
    gz_cont = losses.contrastive_backward(cont_cache)

    breakdown = losses.total_loss(l_lin, l_proto, l_cont, lam, cfg.gamma)
    gz_total = gz + lam * (gz_pro + cfg.gamma * gz_cont)
    gks, gbs = encoder_backward(model.encoder, cache, gz_total)
    return breakdown, gks, gbs, gw, emb


def self_train(
    split: DatasetSplit,
    pretrained: SegModel,
    cfg: TrainConfig,
    assert_invariants: bool = False,
):
    """Teacher-student stage; returns (student, teacher, history, loss_rows)."""
    if not split.unlabeled:
        raise ValueError("self-training needs unlabeled volumes")
    rng = np.random.default_rng(cfg.seed + 10)
    student = clone_model(pretrained)
    bank = init_bank_from_labeled(student, split, cfg)
    student.bank = bank
    teacher = clone_model(student)

    history: list[HistoryRow] = []
    loss_rows: list[LossRow] = []
    n_lab, n_unl = len(split.labeled), len(split.unlabeled)

    def record_eval(it):
        m = evaluate_model(student, split.eval_cases)
        history.append(HistoryRow(it, "eval", m["dice"], m["jaccard"], m["hd95"], m["asd"]))

    for t in range(cfg.selftrain_iters):
        direction = UNLABELED_ONTO_LABELED if t % 2 == 0 else LABELED_ONTO_UNLABELED
        lam = losses.ramp_lambda(t, cfg.ramp_len)
        bank_snapshot = student.bank

        if assert_invariants:
            teacher_sum_before = model_checksum(teacher, include_bank=False)

        acc = None
        gw_acc = None
        batch_emb, batch_cls, batch_ks, batch_keep = [], [], [], []
        total = 0.0
        parts = np.zeros(3)
        for _ in range(cfg.batch_size):
            xl, yl = split.labeled[rng.integers(n_lab)]
            xu = split.unlabeled[rng.integers(n_unl)]
            yu_hat, probs_u = make_pseudo_labels(teacher, xu)
            region = sample_paste_region(cfg.dims, cfg.paste_ratio, rng)
            if direction == UNLABELED_ONTO_LABELED:
                mixed_v, _ = copy_paste_mix(xu, yu_hat, xl, yl, region)
                unlabeled_inside = True
            else:
                mixed_v, _ = copy_paste_mix(xl, yl, xu, yu_hat, region)
                unlabeled_inside = False
            label_region = region  # same instance for image and label mixing
            assert label_region is region
            mixed_l = make_mixed_label(yl, yu_hat, label_region, direction)

            breakdown, gks, gbs, gw, emb = _student_step_grads(
                student, bank_snapshot, mixed_v, mixed_l, lam, cfg
            )
            total += breakdown.total
            parts += (breakdown.l_cons_linear, breakdown.l_cons_proto,
                      breakdown.l_contrastive)
            grads = gks + gbs
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            gw_acc = gw if gw_acc is None else gw_acc + gw

            # bank-update bookkeeping for this batch item
            n_vox = int(np.prod(cfg.dims))
            emb_flat = emb.reshape(n_vox, cfg.d)
            cls = mixed_l.labels.ravel(order="C").astype(np.int64)
            in_region = np.zeros(cfg.dims, dtype=bool)
            in_region[region.slices()] = True
            labeled_mask = (~in_region if unlabeled_inside else in_region).ravel(order="C")
            conf = probs_u.reshape(n_vox, cfg.C)
            keep = confidence_filter(conf, labeled_mask, cfg.alpha)
            ks = np.take_along_axis(
                assign(emb_flat, bank_snapshot).class_best_k, cls[:, None], axis=1
            )[:, 0]
            batch_emb.append(emb_flat)
            batch_cls.append(cls)
            batch_ks.append(ks)
            batch_keep.append(keep)

        if not np.isfinite(total):
            raise TrainingDiverged(f"NaN loss at self-train iteration {t}")
        parts /= cfg.batch_size
        loss_rows.append(LossRow(t, lam, parts[0], parts[1], parts[2],
                                 total / cfg.batch_size))

        acc = [g / cfg.batch_size for g in acc]
        nk = len(student.encoder.kernels)
        _apply_grads(student, acc[:nk], acc[nk:], gw_acc / cfg.batch_size, cfg.lr)

        keep = np.concatenate(batch_keep)
        if keep.any():
            emb_all = np.concatenate(batch_emb)[keep]
            cls_all = np.concatenate(batch_cls)[keep]
            ks_all = np.concatenate(batch_ks)[keep]
            means, counts = cluster_stats(emb_all, cls_all, ks_all, cfg.C, cfg.K)
            student.bank = momentum_update(bank_snapshot, means, counts)
        else:
            log.info("iteration %d: empty filtered set, bank update skipped", t)
        teacher.bank = student.bank

        if assert_invariants and teacher_sum_before != model_checksum(teacher, include_bank=False):
            raise AssertionError("teacher weights changed outside EMA")
        ema_update(teacher, student, cfg.ema_decay)

        if (t + 1) % cfg.eval_interval == 0 or t == cfg.selftrain_iters - 1:
            record_eval(t + 1)

    return student, teacher, history, loss_rows
