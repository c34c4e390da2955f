"""Unimodal, offline-synthesis and joint training of the segmenter and generator."""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from . import tensor as T
from .data import FoldPlan, Modality, Subject, Volume, crop_pad_plan
from .nets import Network, build_classifier, build_generator, classifier_config, generator_config
from .tensor import Adam, Tensor

log = logging.getLogger(__name__)


class Regime(str, enum.Enum):
    UNIMODAL = "unimodal"
    OFFLINE = "offline"
    JOINT = "joint"


@dataclass
class TrainConfig:
    regime: Regime = Regime.JOINT
    epochs: int = 20
    batch_size: int = 4
    lr: float = 2e-4
    lambda_seg: float = 1.0
    seed: int = 0
    slice_size: tuple[int, int] = (64, 64)
    depth: int = 3
    base_filters: int = 16
    select_metric: str = "val_dice"
    max_batches: int | None = None  # stop after this many batches (short diagnostic runs)
    trace: bool = False  # record a generator digest after every generator update

    def validate(self):
        self.regime = Regime(self.regime)
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.lambda_seg < 0:
            raise ValueError(f"lambda_seg must be >= 0, got {self.lambda_seg}")
        d = 2 ** self.depth
        if self.slice_size[0] % d or self.slice_size[1] % d:
            raise ValueError(f"slice size {self.slice_size} must be divisible by {d}")
        if self.select_metric != "val_dice":
            raise ValueError(f"unsupported checkpoint-selection metric {self.select_metric!r}")


@dataclass
class EpochLog:
    epoch: int
    l_c: float | None = None
    l_g_l2: float | None = None
    l_g_seg: float | None = None
    val_dice: float | None = None


@dataclass
class TrainResult:
    classifier: Network
    generator: Network | None
    curves: list[EpochLog]
    selected_epoch: int
    seed: int
    stage1_val_l2: list[float] = field(default_factory=list)
    stage1_selected_epoch: int | None = None
    trace: list[str] = field(default_factory=list)


# ---------------------------------------------------------------- slices


@dataclass
class SliceSet:
    t1: np.ndarray      # (S, 1, H, W)
    flair: np.ndarray
    label: np.ndarray
    owner: np.ndarray   # subject index per slice
    ids: list[str]

    def __len__(self):
        return self.t1.shape[0]


def slice_set(subjects, ids, size) -> SliceSet:
    """Stack the axial slices of the chosen (already normalized) subjects."""
    by_id = {s.id: s for s in subjects}
    t1, fl, lab, owner = [], [], [], []
    for k, sid in enumerate(ids):
        s = by_id[sid]
        for z in range(s.t1.dims[0]):
            plan = crop_pad_plan(s.t1.dims[1:], size)
            t1.append(plan.apply(s.t1.voxels[z]))
            fl.append(plan.apply(s.flair.voxels[z]))
            lab.append(plan.apply(s.label.voxels[z]))
            owner.append(k)
    if not t1:
        return SliceSet(*(np.zeros((0, 1) + tuple(size)) for _ in range(3)), np.zeros(0, int), list(ids))
    st = lambda xs: np.stack(xs)[:, None]  # noqa: E731
    return SliceSet(st(t1), st(fl), st(lab), np.array(owner), list(ids))


def batch_schedule(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is merged into its predecessor."""
    if n < 2:
        raise ValueError(f"need at least 2 training slices, got {n}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def _check_finite(*vals):
    for v in vals:
        if not math.isfinite(v):
            raise T.NonFiniteError(f"non-finite loss {v}")


def _mean(xs):
    return float(np.mean(xs)) if xs else None


# ---------------------------------------------------------------- steps


def _synth_input(G: Network, xa: np.ndarray) -> np.ndarray:
    """G(X_a) as a constant: batch statistics, no running-stat update, no tape."""
    with T.no_grad():
        return G.forward(xa, update_stats=False).data


def classifier_step(C: Network, opt: Adam, xa, y, synth=None) -> float:
    """One update of C on BCE; ``synth`` is the constant second channel, if any."""
    x = xa if synth is None else np.concatenate([xa, synth], axis=1)
    C.train().requires_grad_(True)
    loss = T.bce_loss(C.forward(x), y)
    T.backward(loss)
    opt.step()
    return loss.item()


def generator_loss(G: Network, C: Network | None, xa, xb, y, lambda_seg: float):
    """L2 reconstruction plus ``lambda_seg`` times the segmenter's BCE through G.

    C runs on batch statistics and leaves its running stats untouched.
    Returns ``(total, l2, seg)``; ``seg`` is None without a classifier.
    """
    g_out = G.forward(xa)
    l2 = T.l2_loss(g_out, xb)
    if C is None:
        return l2, l2, None
    pred = C.forward(T.concat_channels(Tensor(xa), g_out), update_stats=False)
    seg = T.bce_loss(pred, y)
    return l2 + seg * lambda_seg, l2, seg


def generator_step(G: Network, opt: Adam, xa, xb, y=None, C: Network | None = None,
                   lambda_seg: float = 0.0) -> tuple[float, float | None]:
    G.train().requires_grad_(True)
    if C is not None:
        C.requires_grad_(False)
    total, l2, seg = generator_loss(G, C, xa, xb, y, lambda_seg)
    T.backward(total)
    opt.step()
    if C is not None:
        C.requires_grad_(True)
    return l2.item(), None if seg is None else seg.item()


def generator_gradients(G: Network, C: Network | None, xa, xb, y, lambda_seg: float) -> list[np.ndarray]:
    """d(generator loss)/d(G parameters) on one batch, without updating anything.

    G's running statistics are left untouched as well.
    """
    G.train().requires_grad_(True).zero_grad()
    if C is not None:
        C.train().requires_grad_(False)
    saved = G.snapshot()
    total, _, _ = generator_loss(G, C, xa, xb, y, lambda_seg)
    T.backward(total)
    grads = [p.grad.copy() for p in G.parameters()]
    G.load_state_arrays(saved)
    G.zero_grad()
    if C is not None:
        C.requires_grad_(True)
    return grads


# ---------------------------------------------------------------- evaluation helpers


def _forward_eval(net: Network, x: np.ndarray, batch: int = 8) -> np.ndarray:
    was_training = net.training
    net.eval()
    with T.no_grad():
        out = np.concatenate([net.forward(x[i:i + batch]).data for i in range(0, len(x), batch)])
    net.training = was_training
    return out


def _val_dice(C: Network, G: Network | None, val: SliceSet, unimodal: bool) -> float | None:
    if len(val) == 0:
        return None
    x = val.t1
    if not unimodal:
        x = np.concatenate([val.t1, _forward_eval(G, val.t1)], axis=1)
    pred = (_forward_eval(C, x) > 0.5).astype(np.float64)
    scores = []
    for k in range(len(val.ids)):
        sel = val.owner == k
        scores.append(metrics.dice(metrics.confusion(pred[sel], val.label[sel])))
    return float(np.mean(scores))


def _val_l2(G: Network, val: SliceSet) -> float | None:
    if len(val) == 0:
        return None
    out = _forward_eval(G, val.t1)
    return float(np.mean((out - val.flair) ** 2))


def _stats_only_losses(C, G, train: SliceSet, regime: Regime, lambda_seg: float, batch_size: int):
    """Losses of the current nets on the training slices, changing no state."""
    l_c, l2s, segs = [], [], []
    with T.no_grad():
        for idx in batch_schedule(len(train), batch_size, None):
            xa, xb, y = train.t1[idx], train.flair[idx], train.label[idx]
            if regime == Regime.UNIMODAL:
                l_c.append(T.bce_loss(C.forward(xa, update_stats=False), y).item())
                continue
            synth = G.forward(xa, update_stats=False).data
            l2s.append(float(np.mean((synth - xb) ** 2)))
            p = C.forward(np.concatenate([xa, synth], axis=1), update_stats=False)
            bce = T.bce_loss(p, y).item()
            l_c.append(bce)
            if regime == Regime.JOINT:
                segs.append(bce)
    return _mean(l_c), _mean(l2s), _mean(segs)


# ---------------------------------------------------------------- regimes


def _seeds(config: TrainConfig, fold: FoldPlan):
    # independent per-fold streams: seed xor fold index
    ss = np.random.SeedSequence(config.seed ^ fold.fold)
    g_seed, c_seed, shuffle_seed, stage2_seed = (int(v) for v in ss.generate_state(4))
    return g_seed, c_seed, shuffle_seed, stage2_seed


def _classifier(in_channels: int, config: TrainConfig, seed: int, train: SliceSet) -> Network:
    """Fresh classifier whose head bias starts at the logit of the training lesion fraction.

    Lesions cover a few percent of the slice; a zero bias would start every
    voxel at p = 0.5 and the first epochs go into unlearning that.
    """
    C = build_classifier(classifier_config(in_channels, config.depth, config.base_filters), seed)
    prior = float(np.clip(train.label.mean(), 1e-3, 0.5))
    C.head.bias.data[...] = np.log(prior / (1.0 - prior))
    return C


def _prepare(subjects, fold: FoldPlan, config: TrainConfig):
    config.validate()
    fold.check([s.id for s in subjects])
    if not fold.train:
        raise ValueError(f"fold {fold.fold} has an empty training set")
    train = slice_set(subjects, fold.train, config.slice_size)
    val = slice_set(subjects, fold.val, config.slice_size)
    return train, val


def _budget(config):
    return math.inf if config.max_batches is None else config.max_batches


def train_unimodal(subjects, fold: FoldPlan, config: TrainConfig) -> TrainResult:
    """Segmenter on T1 alone."""
    if Regime(config.regime) != Regime.UNIMODAL:
        raise ValueError("train_unimodal needs regime=unimodal")
    train, val = _prepare(subjects, fold, config)
    _, c_seed, shuffle_seed, _ = _seeds(config, fold)
    C = _classifier(1, config, c_seed, train)
    opt = Adam(C.parameters(), lr=config.lr)
    rng = np.random.default_rng(shuffle_seed)

    l_c0, _, _ = _stats_only_losses(C, None, train, Regime.UNIMODAL, 0.0, config.batch_size)
    curves = [EpochLog(0, l_c=l_c0, val_dice=_val_dice(C, None, val, True))]
    best, best_state = curves[0].val_dice, C.snapshot()
    selected, left = 0, _budget(config)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in batch_schedule(len(train), config.batch_size, rng):
            if left <= 0:
                break
            losses.append(classifier_step(C, opt, train.t1[idx], train.label[idx]))
            _check_finite(losses[-1])
            left -= 1
        if not losses:
            break
        vd = _val_dice(C, None, val, True)
        curves.append(EpochLog(epoch, l_c=_mean(losses), val_dice=vd))
        if vd is not None and (best is None or vd > best):
            best, best_state, selected = vd, C.snapshot(), epoch
    C.load_state_arrays(best_state)
    return TrainResult(C.eval(), None, curves, selected, config.seed)


def _train_generator_l2(G, train, val, config, rng, trace):
    """Offline stage 1: G alone on L2. Returns (per-epoch l2, val l2 curve, selected epoch)."""
    opt = Adam(G.parameters(), lr=config.lr)
    losses_by_epoch = [_train_l2_only(G, train, config.batch_size)]
    val_curve = [_val_l2(G, val)]
    best, best_state, selected = val_curve[0], G.snapshot(), 0
    left = _budget(config)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in batch_schedule(len(train), config.batch_size, rng):
            if left <= 0:
                break
            l2, _ = generator_step(G, opt, train.t1[idx], train.flair[idx])
            _check_finite(l2)
            losses.append(l2)
            if trace is not None:
                trace.append(G.digest())
            left -= 1
        if not losses:
            break
        losses_by_epoch.append(_mean(losses))
        vl = _val_l2(G, val)
        val_curve.append(vl)
        if vl is not None and (best is None or vl < best):
            best, best_state, selected = vl, G.snapshot(), epoch
    G.load_state_arrays(best_state)
    return losses_by_epoch, val_curve, selected


def _train_l2_only(G, train, batch_size):
    with T.no_grad():
        vals = [float(np.mean((G.forward(train.t1[idx], update_stats=False).data - train.flair[idx]) ** 2))
                for idx in batch_schedule(len(train), batch_size, None)]
    return _mean(vals)


def train_offline(subjects, fold: FoldPlan, config: TrainConfig) -> TrainResult:
    """Stage 1: G on pure L2. Stage 2: frozen G feeds a two-channel segmenter."""
    if Regime(config.regime) != Regime.OFFLINE:
        raise ValueError("train_offline needs regime=offline")
    train, val = _prepare(subjects, fold, config)
    g_seed, c_seed, shuffle_seed, stage2_seed = _seeds(config, fold)
    G = build_generator(generator_config(config.depth, config.base_filters), g_seed)
    trace = [] if config.trace else None
    l2_curve, val_l2, g_selected = _train_generator_l2(G, train, val, config, np.random.default_rng(shuffle_seed), trace)

    G.eval().requires_grad_(False)
    frozen = G.digest()
    synth_train = _forward_eval(G, train.t1)
    C = _classifier(2, config, c_seed, train)
    opt = Adam(C.parameters(), lr=config.lr)
    rng = np.random.default_rng(stage2_seed)
    x_train = np.concatenate([train.t1, synth_train], axis=1)

    l_c0 = _mean([T.bce_loss(C.forward(x_train[idx], update_stats=False), train.label[idx]).item()
                  for idx in batch_schedule(len(train), config.batch_size, None)])
    vd0 = _val_dice(C, G, val, False)
    curves = [EpochLog(0, l_c=l_c0, l_g_l2=l2_curve[0], val_dice=vd0)]
    best, best_state, selected = vd0, C.snapshot(), 0
    left = _budget(config)
    for epoch in range(1, config.epochs + 1):
        losses = []
        for idx in batch_schedule(len(train), config.batch_size, rng):
            if left <= 0:
                break
            losses.append(classifier_step(C, opt, train.t1[idx], train.label[idx], synth_train[idx]))
            _check_finite(losses[-1])
            left -= 1
        if not losses:
            break
        vd = _val_dice(C, G, val, False)
        l2 = l2_curve[epoch] if epoch < len(l2_curve) else None
        curves.append(EpochLog(epoch, l_c=_mean(losses), l_g_l2=l2, val_dice=vd))
        if vd is not None and (best is None or vd > best):
            best, best_state, selected = vd, C.snapshot(), epoch
    if G.digest() != frozen:
        raise RuntimeError("offline stage 2 modified the frozen generator")
    C.load_state_arrays(best_state)
    G.requires_grad_(True)
    return TrainResult(C.eval(), G.eval(), curves, selected, config.seed, val_l2, g_selected,
                       trace or [])


def train_joint(subjects, fold: FoldPlan, config: TrainConfig) -> TrainResult:
    """Alternating per-batch updates: C on BCE with G fixed, then G on L2 + lambda * BCE with C fixed."""
    if Regime(config.regime) != Regime.JOINT:
        raise ValueError("train_joint needs regime=joint")
    train, val = _prepare(subjects, fold, config)
    g_seed, c_seed, shuffle_seed, _ = _seeds(config, fold)
    G = build_generator(generator_config(config.depth, config.base_filters), g_seed)
    C = _classifier(2, config, c_seed, train)
    opt_g = Adam(G.parameters(), lr=config.lr)
    opt_c = Adam(C.parameters(), lr=config.lr)
    rng = np.random.default_rng(shuffle_seed)
    trace = []

    l_c0, l20, seg0 = _stats_only_losses(C, G, train, Regime.JOINT, config.lambda_seg, config.batch_size)
    curves = [EpochLog(0, l_c0, l20, seg0, _val_dice(C, G, val, False))]
    best, best_state, selected = curves[0].val_dice, (C.snapshot(), G.snapshot()), 0
    left = _budget(config)
    for epoch in range(1, config.epochs + 1):
        lc, l2s, segs = [], [], []
        for idx in batch_schedule(len(train), config.batch_size, rng):
            if left <= 0:
                break
            xa, xb, y = train.t1[idx], train.flair[idx], train.label[idx]

            g_before = G.digest()
            lc.append(classifier_step(C, opt_c, xa, y, _synth_input(G, xa)))
            if G.digest() != g_before:
                raise RuntimeError("classifier step modified the generator")

            c_before = C.digest()
            l2, seg = generator_step(G, opt_g, xa, xb, y, C, config.lambda_seg)
            if C.digest() != c_before:
                raise RuntimeError("generator step modified the classifier")
            l2s.append(l2)
            segs.append(seg)
            _check_finite(lc[-1], l2, seg)
            if config.trace:
                trace.append(G.digest())
            left -= 1
        if not lc:
            break
        vd = _val_dice(C, G, val, False)
        curves.append(EpochLog(epoch, _mean(lc), _mean(l2s), _mean(segs), vd))
        if vd is not None and (best is None or vd > best):
            best, best_state, selected = vd, (C.snapshot(), G.snapshot()), epoch
    C.load_state_arrays(best_state[0])
    G.load_state_arrays(best_state[1])
    return TrainResult(C.eval(), G.eval(), curves, selected, config.seed, trace=trace)


def train(subjects, fold: FoldPlan, config: TrainConfig) -> TrainResult:
    regime = Regime(config.regime)
    fn = {Regime.UNIMODAL: train_unimodal, Regime.OFFLINE: train_offline, Regime.JOINT: train_joint}[regime]
    return fn(subjects, fold, config)


# ---------------------------------------------------------------- inference


def _slice_frame(net: Network, dims, slice_size):
    if slice_size is None:
        d = net.config.divisor
        slice_size = tuple(-(-n // d) * d for n in dims[1:])
    if slice_size[0] % net.config.divisor or slice_size[1] % net.config.divisor:
        raise ValueError(f"slice size {slice_size} is not divisible by {net.config.divisor}")
    return crop_pad_plan(dims[1:], slice_size)


def synthesize(generator: Network, t1: Volume, slice_size=None) -> Volume:
    """Slice-wise G(X_a) mapped back to the input's coordinates."""
    if generator.config.in_channels != 1:
        raise ValueError("synthesize needs a one-channel generator")
    plan = _slice_frame(generator, t1.dims, slice_size)
    x = np.stack([plan.apply(s) for s in t1.voxels])[:, None]
    out = _forward_eval(generator, x)
    return Volume(np.stack([plan.invert(o[0]) for o in out]), Modality.SYNTH_FLAIR)


def predict_proba(classifier: Network, t1: Volume, second: Volume | None = None, slice_size=None) -> np.ndarray:
    cin = classifier.config.in_channels
    if (second is None) != (cin == 1):
        raise ValueError(f"classifier takes {cin} channel(s); got {'one' if second is None else 'two'} input volume(s)")
    if second is not None and second.dims != t1.dims:
        raise ValueError(f"input dims differ: {t1.dims} vs {second.dims}")
    plan = _slice_frame(classifier, t1.dims, slice_size)
    chans = [t1] if second is None else [t1, second]
    x = np.stack([[plan.apply(v.voxels[z]) for v in chans] for z in range(t1.dims[0])])
    out = _forward_eval(classifier, x)
    return np.stack([plan.invert(o[0]) for o in out])


def predict(classifier: Network, t1: Volume, flair_or_synth: Volume | None = None,
            threshold: float = 0.5, slice_size=None) -> Volume:
    prob = predict_proba(classifier, t1, flair_or_synth, slice_size)
    return Volume((prob > threshold).astype(np.float64), Modality.LABEL)


def evaluate_subject(result: TrainResult, subject: Subject, regime: Regime, slice_size=None):
    """Score one preprocessed test subject. Returns (row, prediction, synthetic FLAIR or None)."""
    regime = Regime(regime)
    synth = None
    if regime == Regime.UNIMODAL:
        pred = predict(result.classifier, subject.t1, None, slice_size=slice_size)
    else:
        synth = synthesize(result.generator, subject.t1, slice_size)
        pred = predict(result.classifier, subject.t1, synth, slice_size=slice_size)
    c = metrics.confusion(pred, subject.label)
    row = metrics.SubjectRow(regime.value, subject.id, metrics.dice(c), metrics.fpr(c), metrics.fnr(c))
    if synth is not None:
        mask = subject.t1.voxels != 0
        row.mae = metrics.mae(subject.flair, synth, mask)
        row.psnr = metrics.psnr(subject.flair, synth, mask)
    return row, pred, synth
