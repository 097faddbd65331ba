"""Stage orchestration behind the command line.

A :class:`Run` owns one output directory and lazily loads whatever earlier
stages left there (cohort, preprocessing cache, fold plan, checkpoints), so
every subcommand can be rerun on its own. Artifacts are deterministic
given the config and seeds; fold-parallel stages use per-fold rng streams
and one BLAS thread per worker, so ``--threads`` changes speed only.
"""
from __future__ import annotations

import hashlib
import json
import logging
import multiprocessing as mp
import platform
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, features, interpret, nn, pipeline, report, stats, synth
from .data import CohortError, MedClass, load_cohort, qc_filter, write_cohort, MANIFEST_NAME

log = logging.getLogger(__name__)


class RunConfigError(ValueError):
    pass


class StageFailure(RuntimeError):
    pass


# --- configuration ------------------------------------------------------------------

_SECTION_DEFAULTS = {
    "folds": {"k": 4, "seed": 0},
    "qc": {"min_sleep_hours": 4.0},
    "eval": {"n_boot": 1000, "seed": 0, "fixed_specificity": None, "baseline_trees": 1000,
             "baselines": ["sleep", "eeg"]},
    "interpret": {"window_nights": 14, "n_boot": 1000, "longitudinal_participants": 3,
                  "longitudinal_nights": 60, "switch_night": 30, "longitudinal_class": "SNRI",
                  "longitudinal_dose": 1.0},
}


@dataclass(frozen=True)
class RunConfig:
    synth: synth.SynthConfig = field(default_factory=lambda: synth.SynthConfig(n_holdout=50))
    train: pipeline.TrainRunConfig = field(default_factory=lambda: pipeline.run_preset("desk"))
    folds: dict = field(default_factory=lambda: dict(_SECTION_DEFAULTS["folds"]))
    qc: dict = field(default_factory=lambda: dict(_SECTION_DEFAULTS["qc"]))
    eval: dict = field(default_factory=lambda: dict(_SECTION_DEFAULTS["eval"]))
    interpret: dict = field(default_factory=lambda: dict(_SECTION_DEFAULTS["interpret"]))

    def seeds(self) -> dict:
        return {"cohort": self.synth.seed, "folds": self.folds["seed"], "train": self.train.seed,
                "eval": self.eval["seed"]}

    def to_dict(self) -> dict:
        return {"synth": self.synth.to_dict(), "train": self.train.to_dict(), "folds": self.folds,
                "qc": self.qc, "eval": self.eval, "interpret": self.interpret}


def _section(name: str, given: dict) -> dict:
    if not isinstance(given, dict):
        raise RunConfigError(f"section {name!r} must be an object")
    unknown = set(given) - set(_SECTION_DEFAULTS[name])
    if unknown:
        raise RunConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return {**_SECTION_DEFAULTS[name], **given}


def build_run_config(d: Optional[dict] = None, *, preset: str = "desk", seed: Optional[int] = None) -> RunConfig:
    """Resolve a config dict on top of the defaults and ``preset``; unknown keys are rejected."""
    d = dict(d or {})
    unknown = set(d) - set(RunConfig.__dataclass_fields__)
    if unknown:
        raise RunConfigError(f"unknown config sections {sorted(unknown)}")
    try:
        s = {"n_holdout": 50, **d.get("synth", {})}
        scfg = synth.SynthConfig.from_dict(s)
        base = pipeline.run_preset(preset).to_dict()
        tr = d.get("train", {})
        if not isinstance(tr, dict):
            raise RunConfigError("section 'train' must be an object")
        tcfg = pipeline.TrainRunConfig.from_dict({**base, **tr})
        folds = _section("folds", d.get("folds", {}))
        qc = _section("qc", d.get("qc", {}))
        ev = _section("eval", d.get("eval", {}))
        it = _section("interpret", d.get("interpret", {}))
    except (synth.SynthError, pipeline.PipelineError, nn.ConfigError, TypeError) as e:
        raise RunConfigError(str(e)) from e
    if seed is not None:
        scfg = replace(scfg, seed=seed)
        tcfg = replace(tcfg, seed=seed)
        folds = {**folds, "seed": seed}
        ev = {**ev, "seed": seed}
    if not 2 <= int(folds["k"]):
        raise RunConfigError("folds.k must be at least 2")
    for b in ev["baselines"]:
        if b not in features.BASELINE_KINDS:
            raise RunConfigError(f"unknown baseline {b!r}")
    return RunConfig(scfg, tcfg, folds, qc, ev, it)


def load_run_config(path=None, *, preset: str = "desk", seed: Optional[int] = None) -> RunConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise RunConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise RunConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(d, dict):
            raise RunConfigError(f"{path}: top level must be an object")
    return build_run_config(d, preset=preset, seed=seed)


# --- manifest -----------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy
    return {"somnadhere": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


class Manifest:
    """``manifest.json``: config, seeds, versions, per-stage timings and artifact hashes."""

    def __init__(self, out: Path):
        self.path = out / "manifest.json"
        self.out = out
        self.data = json.loads(self.path.read_text()) if self.path.exists() else {"stages": {}}

    def start(self, stage: str, cfg: RunConfig, config_path) -> None:
        self.data.update(config_path=str(config_path) if config_path else None, config=cfg.to_dict(),
                         seeds=cfg.seeds(), versions=_versions())
        self.data["stages"][stage] = {"status": "running"}
        self._write()

    def finish(self, stage: str, artifacts, seconds: float) -> None:
        hashes = {}
        for p in sorted({Path(a) for a in artifacts}):
            hashes[str(p.relative_to(self.out))] = sha256_file(p)
        self.data["stages"][stage] = {"status": "done", "seconds": round(seconds, 3), "artifacts": hashes}
        self._write()

    def _write(self):
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        tmp.replace(self.path)


# --- fold-parallel helper ---------------------------------------------------------------

_SHARED: dict = {}


def _call_shared(i):
    return _SHARED["fn"](_SHARED["run"], i)


def _map_folds(fn, run, n: int, threads: int) -> list:
    if threads <= 1 or n <= 1:
        return [fn(run, i) for i in range(n)]
    _SHARED.update(fn=fn, run=run)
    try:
        with mp.get_context("fork").Pool(min(threads, n)) as pool:
            return pool.map(_call_shared, range(n))
    finally:
        _SHARED.clear()


# --- the run ------------------------------------------------------------------------

class Run:
    def __init__(self, cfg: RunConfig, out, threads: int = 1, cohort=None):
        self.cfg = cfg
        self.out = Path(out)
        self.threads = threads
        self._cohort = cohort
        self._qc = None
        self._data = None
        self._plan = None

    # paths
    def p(self, *parts) -> Path:
        path = self.out.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def ckpt(self, fold: int, stage: str = "final") -> Path:
        name = f"fold{fold}.pretrain.somn" if stage == "pretrain" else f"fold{fold}.somn"
        return self.p("checkpoints", name)

    # lazily loaded state
    @property
    def cohort(self):
        if self._cohort is None:
            path = self.out / "cohort" / MANIFEST_NAME
            if not path.exists():
                raise StageFailure(f"missing cohort {path}: run 'synth' first")
            self._cohort = load_cohort(path)
        return self._cohort

    @property
    def qc(self):
        if self._qc is None:
            self._qc = qc_filter(self.cohort, self.cfg.qc["min_sleep_hours"])
        return self._qc

    @property
    def kept(self):
        return self.qc[0]

    @property
    def data(self) -> dict:
        if self._data is None:
            self._data = pipeline.preprocess_cohort(self.kept, self.cfg.train.model, cache_dir=self.out / "cache")
        return self._data

    @property
    def plan(self) -> pipeline.FoldPlan:
        if self._plan is None:
            path = self.out / "folds.json"
            if path.exists():
                self._plan = pipeline.FoldPlan.from_dict(json.loads(path.read_text()))
            else:
                self._plan = pipeline.make_folds(self.kept, self.cfg.folds["k"], self.cfg.folds["seed"],
                                                 pipeline.holdout_ids(self.kept))
        return self._plan

    def fold_models(self) -> list:
        models = []
        for i in range(self.plan.k):
            path = self.ckpt(i)
            if not path.exists():
                raise StageFailure(f"missing checkpoint {path}: run 'train' first")
            w, mc = nn.load_checkpoint(path)
            if mc != self.cfg.train.model:
                raise StageFailure(f"{path} was trained with a different model config")
            models.append(w)
        return models

    def fold_of(self) -> dict:
        return {pid: i for i, f in enumerate(self.plan.folds) for pid in f.test}

    # stages
    def synth(self) -> list:
        cohort = synth.gen_cohort(self.cfg.synth)
        manifest = write_cohort(cohort, self.out / "cohort")
        self._cohort = cohort
        return [manifest, *sorted((self.out / "cohort").glob("*.f32"))]

    def preprocess(self) -> list:
        _, qc_log = self.qc
        qc_path = report.dump_json(self.p("qc_log.json"), qc_log)
        _ = self.data
        return [qc_path, *sorted((self.out / "cache").glob("*.npz"))]

    def pretrain(self) -> list:
        plan = self.plan
        folds_path = self.p("folds.json")
        folds_path.write_text(json.dumps(plan.to_dict(), indent=1, sort_keys=True) + "\n")
        _ = self.data
        results = _map_folds(_pretrain_fold, self, plan.k, self.threads)
        for i, (w, _) in enumerate(results):
            nn.save_checkpoint(self.ckpt(i, "pretrain"), w, self.cfg.train.model)
        logp = _write_ndjson(self.p("logs", "pretrain.ndjson"), [r for _, recs in results for r in recs])
        return [folds_path, logp, *(self.ckpt(i, "pretrain") for i in range(plan.k))]

    def train(self) -> list:
        for i in range(self.plan.k):
            if not self.ckpt(i, "pretrain").exists():
                raise StageFailure(f"missing checkpoint {self.ckpt(i, 'pretrain')}: run 'pretrain' first")
        _ = self.data
        results = _map_folds(_train_fold, self, self.plan.k, self.threads)
        for i, (w, _) in enumerate(results):
            nn.save_checkpoint(self.ckpt(i), w, self.cfg.train.model)
        logp = _write_ndjson(self.p("logs", "train.ndjson"), [r for _, recs in results for r in recs])
        return [logp, *(self.ckpt(i) for i in range(self.plan.k))]

    def predict(self) -> list:
        models = self.fold_models()
        mc = self.cfg.train.model
        fold_of = self.fold_of()
        hold = set(self.plan.holdout)
        cv, ho = [], []
        for n in self.kept.nights:
            nt = self.data[n.key]
            if n.participant_id in fold_of:
                w = models[fold_of[n.participant_id]]
                cv.append(pipeline.PredictionScore(n.participant_id, n.night_id, n.phase_id,
                                                   pipeline.score_tensors(nt, w, w, mc), n.label))
            elif n.participant_id in hold:
                z = float(np.mean([pipeline.score_tensors(nt, w, w, mc) for w in models]))
                ho.append(pipeline.PredictionScore(n.participant_id, n.night_id, n.phase_id, z, n.label))
        a = pipeline.write_predictions(self.p("predictions.csv"), cv)
        b = pipeline.write_predictions(self.p("predictions_holdout.csv"), ho)
        return [a, b]

    def predictions(self):
        path, hpath = self.out / "predictions.csv", self.out / "predictions_holdout.csv"
        if not path.exists():
            self.predict()
        return pipeline.read_predictions(path), (pipeline.read_predictions(hpath) if hpath.exists() else [])

    def eval(self) -> list:
        self.fold_models()  # fail early without checkpoints
        cv, ho = self.predictions()
        ev = self.cfg.eval
        baselines, arts = {}, []
        for kind in ev["baselines"]:
            bcv, bho = features.baseline_cv(self.kept, self.plan, kind, data=self.data if kind == "eeg" else None,
                                            n_trees=ev["baseline_trees"], seed=ev["seed"])
            baselines[f"rf_{kind}"] = (bcv, bho)
            arts.append(pipeline.write_predictions(self.p("eval", f"baseline_{kind}.csv"), bcv + bho))
        out, tables, _ = report.evaluate_run(cv, ho, self.kept, baselines=baselines, n_boot=ev["n_boot"],
                                             seed=ev["seed"], fixed_specificity=ev["fixed_specificity"])
        arts.append(report.dump_json(self.p("eval", "eval.json"), out))
        arts.append(report.write_subgroup_csv(self.p("eval", "subgroups.csv"), tables))
        return arts

    def interpret(self) -> list:
        res, arts = interpret_run(self)
        arts.append(report.dump_json(self.p("interpret", "interpret.json"), res))
        return arts

    def report(self) -> list:
        ev_path, it_path = self.out / "eval" / "eval.json", self.out / "interpret" / "interpret.json"
        for path, stage in ((ev_path, "eval"), (it_path, "interpret")):
            if not path.exists():
                raise StageFailure(f"missing {path}: run '{stage}' first")
        ev, it = json.loads(ev_path.read_text()), json.loads(it_path.read_text())
        cv, ho = self.predictions()
        units, _ = report.join_units(cv, self.kept)
        extra = {}
        for kind in self.cfg.eval["baselines"]:
            bp = self.out / "eval" / f"baseline_{kind}.csv"
            if bp.exists():
                hold = set(self.plan.holdout)
                preds = [p for p in pipeline.read_predictions(bp) if p.participant_id not in hold]
                extra[f"RF {kind}"] = report.join_units(preds, self.kept)[0]
        arts = [
            report.roc_figure(self.p("report", "roc.svg"), units, extra=extra),
            report.bar_figure(self.p("report", "dose_response.svg"), ev["subgroups"]["dose"], "dose (PDD/DDD)"),
            report.confounder_figure(self.p("report", "confounders.svg"), units),
            report.spectra_figure(self.p("report", "spectra_diff.svg"), it["spectra"]["freqs_hz"],
                                  it["spectra"]["diff"]),
            report.trajectory_figure(self.p("report", "trajectories.svg"),
                                     {t["participant_id"]: (t["date_index"], t["z"], t["smoothed"])
                                      for t in it["longitudinal"]["trajectories"]},
                                     it["longitudinal"]["threshold"]),
            report.latent_figure(self.p("report", "latent_pca.svg"), it["latent"]["coords"],
                                 it["latent"]["labels"], it["latent"]["explained"]),
        ]
        summary = {"eval": {k: ev[k] for k in ("cv", "holdout", "baselines") if k in ev},
                   "subgroup_tables": sorted(ev["subgroups"]),
                   "interpret": {k: it[k] for k in ("rem_correlation", "spectra_band_tests", "longitudinal")}}
        summary["interpret"]["longitudinal"] = {k: v for k, v in it["longitudinal"].items() if k != "trajectories"}
        arts.append(report.dump_json(self.p("report", "report.json"), summary))
        return arts


def _write_ndjson(path, records) -> Path:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return Path(path)


def _fold_keys(run: Run, i: int):
    fold = run.plan.folds[i]
    train = set(fold.train)
    return [n.key for n in run.kept.nights if n.participant_id in train], frozenset(fold.test)


def _pretrain_fold(run: Run, i: int):
    keys, test = _fold_keys(run, i)
    recs = []
    w, _ = pipeline.pretrain(run.data, keys, run.cfg.train, fold=i, test_ids=test, log_fn=recs.append)
    return w, recs


def _train_fold(run: Run, i: int):
    keys, test = _fold_keys(run, i)
    w, mc = nn.load_checkpoint(run.ckpt(i, "pretrain"))
    if mc != run.cfg.train.model:
        raise StageFailure(f"pretrain checkpoint for fold {i} has a different model config")
    labels = {n.key: n.label for n in run.kept.nights}
    recs = []
    w, _ = pipeline.train_classifier(run.data, keys, labels, w, run.cfg.train, fold=i, test_ids=test,
                                     log_fn=recs.append)
    return w, recs


# --- interpretation -------------------------------------------------------------------

def interpret_run(run: Run):
    """All interpretability analyses on cross-validated (test-fold) nights."""
    models = run.fold_models()
    mc = run.cfg.train.model
    it = run.cfg.interpret
    fold_of = run.fold_of()
    nights = [n for n in run.kept.nights if n.participant_id in fold_of]
    arts = []
    med = [n.label and not n.meds.co_meds for n in nights]
    ctrl = [not n.label and n.meds.med_class == MedClass.NONE for n in nights]
    # reconstructed spectra: medicated monotherapy vs unmedicated
    recon, lab = [], []
    for n, m, c in zip(nights, med, ctrl):
        if m or c:
            recon.append(interpret.reconstruct_night(run.data[n.key].features, models[fold_of[n.participant_id]], mc))
            lab.append(m)
    sd = interpret.spectra_cohort_diff(recon, lab, n_boot=it["n_boot"], seed=run.cfg.eval["seed"])
    arts.append(interpret.write_spectra_csv(run.p("interpret", "spectra_diff.csv"), sd))
    # score vs REM latency on participant-phase aggregates
    cv, _ = run.predictions()
    units, _ = report.join_units(cv, run.kept)
    lat = {}
    for n in run.kept.nights:
        lat.setdefault((n.participant_id, n.phase_id), []).append(interpret.rem_latency_min(n.hypnogram)
                                                                  if n.hypnogram is not None else None)
    unit_lat = {k: (float(np.mean([v for v in vs if v is not None])) if any(v is not None for v in vs) else np.nan)
                for k, vs in lat.items()}
    rem = {}
    for name, sel in (("antidepressant", lambda u: u.label and not u.co_meds),
                      ("control", lambda u: not u.label and u.med_class == "None"), ("all", lambda u: True)):
        us = [u for u in units if sel(u)]
        try:
            rem[name] = interpret.score_rem_correlation([u.z for u in us],
                                                        [unit_lat[(u.participant_id, u.phase_id)] for u in us]
                                                        ).to_dict() | {"n": len(us)}
        except stats.MetricError as e:
            rem[name] = {"error": str(e), "n": len(us)}
    # early-sleep band power vs REM latency, measured EEG
    early = {}
    for name, flags in (("antidepressant", med), ("control", ctrl)):
        specs, hyps = [], []
        for n, f in zip(nights, flags):
            if f and run.data[n.key].target is not None and n.hypnogram is not None:
                spec = features.spectrogram_from_target(run.data[n.key].target)
                k = min(spec.n_windows, len(n.hypnogram))
                specs.append(type(spec)(spec.power[:k], spec.freqs_hz, spec.window_s))
                hyps.append(type(n.hypnogram)(n.hypnogram.epochs[:k], n.hypnogram.epoch_len_s))
        try:
            r = interpret.early_sleep_power_vs_rem(specs, hyps)
            early[name] = {"so": r.so.to_dict(), "beta": r.beta.to_dict(), "so_beta": r.so_beta.to_dict(),
                           "n_used": r.n_used, "n_skipped": r.n_skipped}
        except (interpret.InterpretError, stats.MetricError) as e:
            early[name] = {"error": str(e)}
    # latent projection of CLS embeddings
    emb = []
    for n in nights:
        w = models[fold_of[n.participant_id]]
        lat_n = pipeline.encode_night(run.data[n.key], w, mc)
        emb.append(nn.classifier_embedding(lat_n, w, mc))
    proj = interpret.latent_projection(np.array(emb, dtype=np.float64))
    lp = run.p("interpret", "latent_pca.csv")
    with open(lp, "w") as fh:
        fh.write("participant_id,night_id,label,pc1,pc2\n")
        for n, (a, b) in zip(nights, proj.coords):
            fh.write(f"{n.participant_id},{n.night_id},{int(n.label)},{a!r},{b!r}\n")
    arts.append(lp)
    # longitudinal switching participants
    thr = stats.youden_threshold([u.z for u in units], [u.label for u in units])[0]
    trajs, crossings = [], []
    k = it["switch_night"]
    for j in range(it["longitudinal_participants"]):
        pid = f"L{j:04d}"
        ln = synth.gen_longitudinal(run.cfg.synth, n_nights=it["longitudinal_nights"], switch_night=k,
                                    key=it["longitudinal_class"], ratio=it["longitudinal_dose"],
                                    kind="start", pid=pid, p_index=2_000_000 + j)
        z = []
        for n in ln:
            nt = pipeline.NightTensors(pipeline.preprocess_respiration(n.respiration, mc))
            z.append(float(np.mean([pipeline.score_tensors(nt, w, w, mc) for w in models])))
        tr = interpret.longitudinal_smooth(np.arange(len(z)), z, it["window_nights"])
        cross = tr.first_crossing(thr)
        arts.append(interpret.write_trajectory_csv(run.p("interpret", f"trajectory_{pid}.csv"), tr, pid))
        trajs.append({"participant_id": pid, "date_index": tr.date_index.tolist(), "z": tr.z.tolist(),
                      "smoothed": tr.smoothed.tolist()})
        crossings.append({"participant_id": pid, "switch_night": k, "crossing_night": cross,
                          "within_window": cross is not None and abs(cross - k) <= 7})
    res = {
        "spectra": {"freqs_hz": sd.freqs_hz.tolist(), "diff": sd.diff.tolist(), "raw_max_abs": sd.raw_max_abs,
                    "n_medicated": sd.n_a, "n_control": sd.n_b},
        "spectra_band_tests": {k: v.to_dict() for k, v in sd.band_tests.items()},
        "rem_correlation": rem,
        "early_sleep": early,
        "latent": {"explained": proj.explained.tolist(), "coords": proj.coords.tolist(),
                   "labels": [bool(n.label) for n in nights]},
        "longitudinal": {"threshold": thr, "window_nights": it["window_nights"], "crossings": crossings,
                         "trajectories": trajs},
    }
    return res, arts


# --- selftest ------------------------------------------------------------------------

def selftest(out=None) -> list:
    """Metric oracles and gradient checks; raises StageFailure on any mismatch."""
    import itertools
    from .nn import gradcheck
    lines, ok = [], True
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        n = int(rng.integers(2, 60))
        s = rng.integers(0, 8, n).astype(float)
        y = rng.random(n) < 0.5
        y[0], y[1] = True, False
        pos, neg = s[y], s[~y]
        brute = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
        worst = max(worst, abs(stats.auroc(s, y) - brute / (pos.size * neg.size)))
    lines.append(("auroc vs pairwise concordance", worst <= 1e-12, f"max diff {worst:.1e}"))
    t = stats.welch_t([10, 11, 12], [0, 1, 2])
    good = abs(t.statistic - 10 / np.sqrt(2 / 3)) < 1e-10 and abs(t.df - 4) < 1e-10
    lines.append(("welch_t worked example", good, f"t={t.statistic:.6f} df={t.df:.3f}"))
    d = stats.cohens_d([0, 2], [-1, 1])
    lines.append(("cohens_d worked example", abs(d - 1 / np.sqrt(2)) < 1e-10, f"d={d:.10f}"))
    mc = nn.preset("tiny")
    for seed in range(2):
        for mode in ("pretrain", "classify"):
            r = gradcheck.check(mc, seed, mode)
            lines.append((f"gradcheck {mode} seed {seed}", r["ok"],
                          f"rel32={r['rel32'][0]:.1e} rel64={r['rel64'][0]:.1e}"))
    for name, passed, detail in lines:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
        ok &= bool(passed)
    if not ok:
        raise StageFailure("selftest mismatches (see above)")
    return []


STAGES = ("synth", "preprocess", "pretrain", "train", "predict", "eval", "interpret", "report", "selftest")


def run_stage(name: str, cfg: RunConfig, out=None, threads: int = 1, config_path=None, cohort=None) -> list:
    if name not in STAGES:
        raise StageFailure(f"unknown stage {name!r}")
    if name == "selftest":
        return selftest(out)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out, threads, cohort)
    manifest = Manifest(out)
    manifest.start(name, cfg, config_path)
    t0 = time.perf_counter()
    try:
        arts = getattr(run, name)()
    except CohortError as e:
        raise StageFailure(str(e)) from e
    manifest.finish(name, arts, time.perf_counter() - t0)
    log.info("%s done in %.1f s (%d artifacts)", name, time.perf_counter() - t0, len(arts))
    return arts
