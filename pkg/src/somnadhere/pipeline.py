"""Cross-validated pretraining, frozen-encoder classification, and inference.

Nights are preprocessed once into :class:`NightTensors` (token features and,
when EEG is present, a log band-power target per token). Each fold then
pretrains an encoder/decoder on its training participants, freezes the
encoder, trains the classifier on oversampled training nights, and scores
its test participants plus any external hold-out.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import multiprocessing as mp
import zipfile
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import dsp, nn
from .data import Cohort, MissingSignalError, NightRecord
from .nn.model import ModelWeights

log = logging.getLogger(__name__)

EEG_HZ = 64.0
SPEC_BAND_EDGES = np.arange(0.0, 33.0)  # 32 one-hertz bands over 0-32 Hz
N_SPEC_BANDS = len(SPEC_BAND_EDGES) - 1
EPOCH_S = 30.0
PREDICTION_HEADER = ("participant_id", "night_id", "phase_id", "label", "z")


class PipelineError(ValueError):
    pass


class LeakageError(AssertionError):
    pass


# --- configuration -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainRunConfig:
    pretrain_steps: int = 4000
    classifier_steps: int = 4000
    batch_size: int = 48
    oversample: bool = True
    seed: int = 0
    model: nn.ModelConfig = field(default_factory=lambda: nn.preset("paper"))
    lr_pretrain: float = 1e-4
    lr_classifier: float = 1e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    k_folds: int = 4

    def warmup(self, steps: int) -> int:
        return int(round(self.warmup_frac * steps))

    def validate(self) -> None:
        for name in ("pretrain_steps", "classifier_steps"):
            steps = getattr(self, name)
            if steps <= self.warmup(steps) or steps < 1:
                raise PipelineError(f"{name}={steps} must exceed its warmup ({self.warmup(steps)})")
        if self.batch_size < 2:
            raise PipelineError("batch_size must be at least 2")
        if self.k_folds < 2:
            raise PipelineError("k_folds must be at least 2")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = json.loads(self.model.to_json())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainRunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise PipelineError(f"unknown TrainRunConfig keys {sorted(unknown)}")
        if isinstance(d.get("model"), str):
            d["model"] = nn.preset(d["model"])
        elif isinstance(d.get("model"), dict):
            d["model"] = nn.ModelConfig.from_dict(d["model"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


RUN_PRESETS = {
    "tiny": TrainRunConfig(pretrain_steps=20, classifier_steps=20, batch_size=4,
                           model=nn.preset("tiny").with_(patch_samples=300, spec_bins=32, max_tokens=120),
                           lr_pretrain=1e-3, lr_classifier=1e-3),
    "desk": TrainRunConfig(pretrain_steps=500, classifier_steps=1000, batch_size=16, model=nn.preset("desk"),
                           lr_pretrain=1e-3, lr_classifier=5e-4),
    "paper": TrainRunConfig(),
}


def run_preset(name: str) -> TrainRunConfig:
    try:
        return RUN_PRESETS[name]
    except KeyError:
        raise PipelineError(f"unknown preset {name!r}; choose from {sorted(RUN_PRESETS)}") from None


# --- preprocessing -----------------------------------------------------------------

@dataclass(frozen=True)
class NightTensors:
    features: np.ndarray  # [T, token_dim] float32
    target: Optional[np.ndarray] = None  # [T, spec_bins] float32, log10 band power


def windows_per_token(cfg: nn.ModelConfig) -> int:
    w = cfg.patch_samples / (cfg.resp_hz * EPOCH_S)
    if abs(w - round(w)) > 1e-9 or round(w) < 1:
        raise PipelineError(f"patch of {cfg.patch_samples} samples is not a whole number of 30 s windows")
    return int(round(w))


def preprocess_respiration(sig: dsp.Signal, cfg: nn.ModelConfig) -> np.ndarray:
    """High-pass, resample to the model rate, robust-normalize, tokenize, featurize."""
    x = dsp.iir_filter(sig, dsp.RESP_HIGHPASS)
    x = dsp.resample(x, cfg.resp_hz)
    x = dsp.normalize(x)
    return nn.token_features(nn.patchify(x, cfg), cfg)


def preprocess_eeg(sig: dsp.Signal, cfg: nn.ModelConfig) -> np.ndarray:
    """log10 band power per token: ``windows_per_token`` windows x 32 bands, flattened."""
    x = dsp.iir_filter(sig, dsp.eeg_filter_for(sig.rate_hz))
    x = dsp.resample(x, EEG_HZ)
    spec = dsp.bin_spectrogram(dsp.multitaper_spectrogram(x, EPOCH_S, EPOCH_S), SPEC_BAND_EDGES)
    W = windows_per_token(cfg)
    if W * N_SPEC_BANDS != cfg.spec_bins:
        raise PipelineError(f"spec_bins {cfg.spec_bins} != {W} windows x {N_SPEC_BANDS} bands")
    T = spec.n_windows // W
    logp = np.log10(spec.power[: T * W] + 1e-3)
    return logp.reshape(T, W * N_SPEC_BANDS).astype(np.float32)


def preprocess_night(night: NightRecord, cfg: nn.ModelConfig, with_eeg: bool = True) -> NightTensors:
    feats = preprocess_respiration(night.respiration, cfg)
    if not (with_eeg and night.has_eeg):
        return NightTensors(feats)
    target = preprocess_eeg(night.eeg, cfg)
    T = min(len(feats), len(target))
    if T < 1:
        raise PipelineError(f"night {night.key}: EEG shorter than one token")
    return NightTensors(feats[:T], target[:T])


def _cache_path(cache_dir: Path, key) -> Path:
    return cache_dir / f"{key[0]}__{key[1]}.npz"


def _write_npz(path: Path, arrays: dict) -> None:
    # np.savez stamps the wall clock into each zip entry; a fixed date keeps the bytes stable
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def preprocess_cohort(cohort: Cohort, cfg: nn.ModelConfig, cache_dir=None, with_eeg: bool = True,
                      progress: Optional[Callable[[int, int], None]] = None) -> dict:
    """``(participant_id, night_id) -> NightTensors``; reuses ``cache_dir`` when given."""
    out = {}
    cache_dir = Path(cache_dir) if cache_dir else None
    if cache_dir:
        cache_dir.mkdir(parents=True, exist_ok=True)
        stamp = cache_dir / "model_config.json"
        if stamp.exists() and stamp.read_text() != cfg.to_json():
            raise PipelineError(f"{cache_dir} was built for a different model config")
        stamp.write_text(cfg.to_json())
    for i, night in enumerate(cohort.nights):
        path = _cache_path(cache_dir, night.key) if cache_dir else None
        if path is not None and path.exists():
            with np.load(path) as z:
                out[night.key] = NightTensors(z["features"], z["target"] if "target" in z.files else None)
        else:
            nt = preprocess_night(night, cfg, with_eeg)
            if path is not None:
                arrays = {"features": nt.features}
                if nt.target is not None:
                    arrays["target"] = nt.target
                tmp = path.with_suffix(".tmp.npz")
                _write_npz(tmp, arrays)
                tmp.replace(path)
            out[night.key] = nt
        if progress:
            progress(i + 1, len(cohort.nights))
    return out


# --- folds -------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: tuple
    test: tuple


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple
    holdout: tuple = ()
    seed: int = 0

    @property
    def k(self) -> int:
        return len(self.folds)

    def check(self) -> None:
        """Assert the plan partitions its participants without leakage."""
        hold = set(self.holdout)
        everyone = set(self.folds[0].train) | set(self.folds[0].test)
        seen = set()
        for i, f in enumerate(self.folds):
            tr, te = set(f.train), set(f.test)
            if tr & te:
                raise LeakageError(f"fold {i}: participants in both train and test: {sorted(tr & te)[:5]}")
            if (tr | te) & hold:
                raise LeakageError(f"fold {i}: hold-out participants used in cross-validation")
            if tr | te != everyone:
                raise LeakageError(f"fold {i}: does not cover the same participants")
            if seen & te:
                raise LeakageError(f"fold {i}: participants tested twice")
            seen |= te
        if seen != everyone:
            raise LeakageError("test folds do not cover every participant")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "holdout": list(self.holdout),
                "folds": [{"train": list(f.train), "test": list(f.test)} for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        plan = cls(tuple(Fold(tuple(f["train"]), tuple(f["test"])) for f in d["folds"]),
                   tuple(d.get("holdout", ())), int(d.get("seed", 0)))
        plan.check()
        return plan


def participant_labels(cohort: Cohort) -> dict:
    """A participant is positive if any of their nights is."""
    return {pid: any(n.label for n in ns) for pid, ns in cohort.by_participant().items()}


def make_folds(cohort: Cohort, k: int = 4, seed: int = 0, holdout=()) -> FoldPlan:
    """Participant-level folds stratified by label.

    Positives and negatives are shuffled separately and dealt round-robin,
    negatives continuing where the positives stopped, so fold sizes and
    positive counts each differ by at most one.
    """
    holdout = tuple(sorted(set(holdout)))
    labels = {p: l for p, l in participant_labels(cohort).items() if p not in set(holdout)}
    pos = sorted(p for p, l in labels.items() if l)
    neg = sorted(p for p, l in labels.items() if not l)
    if len(pos) < k or len(neg) < k:
        raise PipelineError(f"need at least {k} positive and {k} negative participants, "
                            f"got {len(pos)} and {len(neg)}")
    rng = np.random.default_rng([seed, 4242])
    pos = [pos[i] for i in rng.permutation(len(pos))]
    neg = [neg[i] for i in rng.permutation(len(neg))]
    buckets = [[] for _ in range(k)]
    for i, p in enumerate(pos + neg):
        buckets[i % k].append(p)
    everyone = set(labels)
    folds = tuple(Fold(tuple(sorted(everyone - set(b))), tuple(sorted(b))) for b in buckets)
    plan = FoldPlan(folds, holdout, seed)
    plan.check()
    return plan


def holdout_ids(cohort: Cohort, prefix: str = "h") -> tuple:
    return tuple(p for p in cohort.participants() if p.startswith(prefix))


def oversample(items: list, labels, seed: int) -> list:
    """Duplicate random minority-class items (with replacement) until classes balance.

    The returned list keeps the input order and appends the duplicates.
    """
    labels = np.asarray(labels, dtype=bool)
    if len(items) != labels.size:
        raise PipelineError("items and labels differ in length")
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise PipelineError("oversampling needs both classes")
    minority = np.flatnonzero(labels if n_pos < n_neg else ~labels)
    extra = abs(n_neg - n_pos)
    rng = np.random.default_rng([seed, 777])
    picks = minority[rng.integers(0, minority.size, size=extra)] if extra else np.array([], dtype=int)
    return list(items) + [items[i] for i in picks]


# --- training ----------------------------------------------------------------------

def _pad(arrays: list, width: int, dtype=np.float32):
    T = max(a.shape[0] for a in arrays)
    out = np.zeros((len(arrays), T, width), dtype)
    mask = np.zeros((len(arrays), T), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, :a.shape[0]] = a
        mask[i, :a.shape[0]] = True
    return out, mask


def _batches(n: int, batch_size: int, rng):
    """Endless shuffled epochs of index batches; short epoch tails are dropped."""
    if n < batch_size:
        batch_size = n
    while True:
        perm = rng.permutation(n)
        for lo in range(0, n - batch_size + 1, batch_size):
            yield perm[lo:lo + batch_size]


def _norm_stats(arrays: list, groups: int = 1):
    """Per-feature mean/std over all token rows; ``groups`` tiles shared stats."""
    x = np.concatenate(arrays).astype(np.float64)
    x = x.reshape(-1, x.shape[1] // groups)
    mean, std = x.mean(axis=0), x.std(axis=0)
    std = np.where(std > 1e-6, std, 1.0)
    return np.tile(mean, groups).astype(np.float32), np.tile(std, groups).astype(np.float32)


def normalized_features(nt: NightTensors, w: ModelWeights) -> np.ndarray:
    return (nt.features - w["aux.tok_mean"]) / w["aux.tok_std"]


def _optimizer(cfg: TrainRunConfig, lr: float, trainable) -> nn.OptimizerState:
    return nn.OptimizerState(lr_base=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                             weight_decay=cfg.weight_decay, trainable=trainable)


def _assert_clean(keys, test_ids, fold, stage):
    bad = {k[0] for k in keys} & test_ids
    if bad:
        raise LeakageError(f"fold {fold} {stage}: test participants {sorted(bad)[:5]} in a training batch")


def pretrain(data: dict, train_keys: list, cfg: TrainRunConfig, *, fold: int = 0, test_ids=frozenset(),
             log_fn: Optional[Callable[[dict], None]] = None) -> tuple:
    """Jointly train encoder and decoder to reconstruct EEG band power from respiration.

    Returns ``(weights, losses)``; weights include the normalization tensors
    ``aux.*`` computed on ``train_keys`` only and the final-step parameters.
    """
    cfg.validate()
    mc = cfg.model
    test_ids = frozenset(test_ids)
    _assert_clean(train_keys, test_ids, fold, "pretrain")
    missing = [k for k in train_keys if data[k].target is None]
    if missing:
        raise MissingSignalError(f"pretraining nights without EEG: {missing[:5]}")
    rng = np.random.default_rng([cfg.seed, fold, 1])
    w = nn.init_weights(mc, seed=int(rng.integers(2 ** 31)))
    w["aux.tok_mean"], w["aux.tok_std"] = _norm_stats([data[k].features for k in train_keys])
    w["aux.spec_mean"], w["aux.spec_std"] = _norm_stats([data[k].target for k in train_keys],
                                                        groups=windows_per_token(mc))
    state = _optimizer(cfg, cfg.lr_pretrain, ("enc.", "dec."))
    warm = cfg.warmup(cfg.pretrain_steps)
    batches = _batches(len(train_keys), cfg.batch_size, rng)
    losses = []
    for step in range(cfg.pretrain_steps):
        keys = [train_keys[i] for i in next(batches)]
        _assert_clean(keys, test_ids, fold, "pretrain")
        feats, mask = _pad([normalized_features(data[k], w) for k in keys], mc.token_dim)
        tgt, _ = _pad([(data[k].target - w["aux.spec_mean"]) / w["aux.spec_std"] for k in keys], mc.spec_bins)
        loss, grads = nn.loss_and_grads(nn.Batch(mask=mask, features=feats, target=tgt), w, mc, "pretrain",
                                        train=True, rng=rng)
        lr = nn.lr_schedule(step, cfg.pretrain_steps, warm, cfg.lr_pretrain)
        nn.adamw_step(w, grads, state, lr)
        losses.append(loss)
        if log_fn:
            log_fn({"fold": fold, "stage": "pretrain", "step": step, "loss": loss, "lr": lr,
                    "participants": sorted({k[0] for k in keys})})
    return w, losses


def encode_night(nt: NightTensors, w: ModelWeights, mc: nn.ModelConfig) -> np.ndarray:
    """Frozen-encoder latents for one night (eval mode, no padding)."""
    return nn.encoder_forward(normalized_features(nt, w), w, mc)


def train_classifier(data: dict, train_keys: list, labels: dict, w: ModelWeights, cfg: TrainRunConfig, *,
                     fold: int = 0, test_ids=frozenset(), log_fn=None, latents: Optional[dict] = None) -> tuple:
    """Train the CLS classifier on frozen-encoder latents; encoder weights are untouched.

    ``labels`` maps night keys to 0/1. Returns ``(weights, losses)``.
    """
    cfg.validate()
    mc = cfg.model
    test_ids = frozenset(test_ids)
    _assert_clean(train_keys, test_ids, fold, "classify")
    rng = np.random.default_rng([cfg.seed, fold, 2])
    if latents is None:
        latents = {k: encode_night(data[k], w, mc) for k in train_keys}
    y = [bool(labels[k]) for k in train_keys]
    keys = oversample(train_keys, y, seed=cfg.seed * 1009 + fold) if cfg.oversample else list(train_keys)
    state = _optimizer(cfg, cfg.lr_classifier, ("cls.",))
    warm = cfg.warmup(cfg.classifier_steps)
    batches = _batches(len(keys), cfg.batch_size, rng)
    losses = []
    for step in range(cfg.classifier_steps):
        bk = [keys[i] for i in next(batches)]
        _assert_clean(bk, test_ids, fold, "classify")
        lat, mask = _pad([latents[k] for k in bk], mc.embed_dim)
        lab = np.array([labels[k] for k in bk], dtype=np.float32)
        loss, grads = nn.loss_and_grads(nn.Batch(mask=mask, latents=lat, labels=lab), w, mc, "classify",
                                        train=True, rng=rng)
        lr = nn.lr_schedule(step, cfg.classifier_steps, warm, cfg.lr_classifier)
        nn.adamw_step(w, grads, state, lr)
        losses.append(loss)
        if log_fn:
            log_fn({"fold": fold, "stage": "classify", "step": step, "loss": loss, "lr": lr,
                    "participants": sorted({k[0] for k in bk})})
    return w, losses


# --- inference ---------------------------------------------------------------------

@dataclass(frozen=True)
class PredictionScore:
    participant_id: str
    night_id: str
    phase_id: int
    z: float
    label: bool


def score_tensors(nt: NightTensors, enc: ModelWeights, cls: ModelWeights, mc: nn.ModelConfig) -> float:
    lat = encode_night(nt, enc, mc)
    return float(nn.classifier_forward(lat, cls, mc))


def predict_night(night: NightRecord, encoder_ckpt, classifier_ckpt=None) -> PredictionScore:
    """Score one night from respiration alone.

    ``encoder_ckpt`` / ``classifier_ckpt`` are checkpoint paths or
    ``(weights, cfg)`` pairs; the classifier defaults to the encoder's file.
    """
    enc, mc = _load(encoder_ckpt)
    cls, mc2 = _load(classifier_ckpt) if classifier_ckpt is not None else (enc, mc)
    if mc != mc2:
        raise PipelineError("encoder and classifier checkpoints disagree on the model config")
    nt = NightTensors(preprocess_respiration(night.respiration, mc))
    z = score_tensors(nt, enc, cls, mc)
    return PredictionScore(night.participant_id, night.night_id, night.phase_id, z, night.label)


def _load(ck):
    if isinstance(ck, (str, Path)):
        return nn.load_checkpoint(ck)
    return ck


@dataclass(frozen=True)
class AggregateScore:
    participant_id: str
    phase_id: int
    z: float
    label: bool
    n_nights: int


def aggregate_scores(preds) -> list:
    """Mean nightly z per (participant, phase), sorted by that key."""
    groups = defaultdict(list)
    for p in preds:
        groups[(p.participant_id, p.phase_id)].append(p)
    out = []
    for (pid, phase), ps in sorted(groups.items()):
        out.append(AggregateScore(pid, phase, float(np.mean([p.z for p in ps])), any(p.label for p in ps), len(ps)))
    return out


def write_predictions(path, preds) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PREDICTION_HEADER)
        for p in preds:
            w.writerow([p.participant_id, p.night_id, p.phase_id, int(p.label), repr(float(p.z))])
    return path


def read_predictions(path) -> list:
    with Path(path).open(newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != PREDICTION_HEADER:
            raise PipelineError(f"{path}: expected header {','.join(PREDICTION_HEADER)}")
        return [PredictionScore(row["participant_id"], row["night_id"], int(row["phase_id"]),
                                float(row["z"]), row["label"] == "1") for row in r]


# --- cross-validation ----------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    weights: ModelWeights
    test: list  # PredictionScore
    holdout: list  # PredictionScore from this fold's model
    log: list
    pretrain_losses: list
    classifier_losses: list


@dataclass
class CVResult:
    predictions: list  # each CV participant scored once, by its test fold
    holdout: list  # hold-out nights, z averaged over fold models
    folds: list

    def write_log(self, path) -> Path:
        path = Path(path)
        with path.open("w") as fh:
            for f in self.folds:
                for rec in f.log:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return path


_SHARED: dict = {}


def run_fold(i: int, cohort: Cohort, plan: FoldPlan, data: dict, cfg: TrainRunConfig) -> FoldResult:
    fold = plan.folds[i]
    train_ids, test_ids = set(fold.train), frozenset(fold.test)
    train_keys = [n.key for n in cohort.nights if n.participant_id in train_ids]
    labels = {n.key: n.label for n in cohort.nights}
    records = []
    w, pl = pretrain(data, train_keys, cfg, fold=i, test_ids=test_ids, log_fn=records.append)
    before = {k: v.copy() for k, v in w.items() if not k.startswith("cls.")}
    w, cl = train_classifier(data, train_keys, labels, w, cfg, fold=i, test_ids=test_ids, log_fn=records.append)
    if any(not np.array_equal(before[k], w[k]) for k in before):
        raise PipelineError(f"fold {i}: encoder weights changed during classifier training")
    mc = cfg.model
    test, hold = [], []
    holdout = set(plan.holdout)
    for n in cohort.nights:
        if n.participant_id in test_ids or n.participant_id in holdout:
            z = score_tensors(data[n.key], w, w, mc)
            ps = PredictionScore(n.participant_id, n.night_id, n.phase_id, z, n.label)
            (test if n.participant_id in test_ids else hold).append(ps)
    log.info("fold %d done: %d test nights, %d hold-out nights", i, len(test), len(hold))
    return FoldResult(i, w, test, hold, records, pl, cl)


def _fold_worker(i):
    s = _SHARED
    return run_fold(i, s["cohort"], s["plan"], s["data"], s["cfg"])


def run_cv(cohort: Cohort, plan: FoldPlan, cfg: TrainRunConfig, data: Optional[dict] = None,
           threads: int = 1, checkpoint_dir=None) -> CVResult:
    """Train one model per fold and score test and hold-out participants.

    Folds are independent (own rng streams), so ``threads > 1`` runs them in
    worker processes and produces identical results.
    """
    cfg.validate()
    plan.check()
    known = set(cohort.participants())
    if not set(plan.folds[0].train) | set(plan.folds[0].test) | set(plan.holdout) <= known:
        raise PipelineError("fold plan names participants missing from the cohort")
    if data is None:
        data = preprocess_cohort(cohort, cfg.model)
    idx = list(range(plan.k))
    if threads > 1 and plan.k > 1:
        _SHARED.update(cohort=cohort, plan=plan, data=data, cfg=cfg)
        try:
            ctx = mp.get_context("fork")
            with ctx.Pool(min(threads, plan.k)) as pool:
                results = pool.map(_fold_worker, idx)
        finally:
            _SHARED.clear()
    else:
        results = [run_fold(i, cohort, plan, data, cfg) for i in idx]
    if checkpoint_dir is not None:
        d = Path(checkpoint_dir)
        d.mkdir(parents=True, exist_ok=True)
        for r in results:
            nn.save_checkpoint(d / f"fold{r.fold}.somn", r.weights, cfg.model)
    order = {n.key: i for i, n in enumerate(cohort.nights)}
    preds = sorted((p for r in results for p in r.test), key=lambda p: order[(p.participant_id, p.night_id)])
    hold = defaultdict(list)
    for r in results:
        for p in r.holdout:
            hold[(p.participant_id, p.night_id)].append(p)
    holdout = [replace(ps[0], z=float(np.mean([p.z for p in ps])))
               for _, ps in sorted(hold.items(), key=lambda kv: order[kv[0]])]
    return CVResult(preds, holdout, results)
