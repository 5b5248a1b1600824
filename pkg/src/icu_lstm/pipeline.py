"""Two-stage experiment: mortality classifier, then LOS classifier for predicted deaths."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import baselines as bl
from . import nn
from .data import PRNG_ID, CohortEntry, SyntheticConfig, generate_synthetic_cohort, \
    read_cohort, read_observations
from .metrics import (auroc_multiclass, confusion_matrix, f1_binary, f1_degenerate,
                      kfold_split, mcc_binary, mcc_degenerate, multiclass_roc_curves, roc_curve)
from .preprocess import (FRAMES, ChannelGrid, LabeledWindow, apply_exclusions,
                         compute_channel_stats, group_observations, impute_mean,
                         interpolate_linear, label_los, label_mortality, prepare_grid,
                         resample_to_grid, undersample)

log = logging.getLogger(__name__)

MODELS = ("lstm", "nb", "lr", "saps2", "sofa")
REPORT_FORMAT = "icu-lstm-report/1"


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str, stay_id: Optional[str] = None):
        where = f"[{stage}]" if stay_id is None else f"[{stage}, stay {stay_id}]"
        super().__init__(f"{where} {message}")
        self.stage = stage
        self.stay_id = stay_id


@dataclass(frozen=True)
class ExperimentConfig:
    cohort_path: Optional[str] = None
    observations_path: Optional[str] = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    frames: tuple = (6,)
    model: nn.ModelConfig = field(default_factory=nn.ModelConfig)
    models: tuple = MODELS
    test_fraction: float = 0.2
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        if not self.frames:
            raise ValueError("at least one frame is required")
        for f in self.frames:
            if f not in FRAMES:
                raise ValueError(f"frame_hours must be one of {FRAMES}, got {f}")
        unknown = [m for m in self.models if m not in MODELS]
        if unknown or not self.models:
            raise ValueError(f"unknown model(s) {unknown}; choose from {MODELS}")
        if not 0.0 < self.test_fraction <= 0.5:
            raise ValueError("test_fraction must lie in (0, 0.5]")
        if (self.cohort_path is None) != (self.observations_path is None):
            raise ValueError("cohort_path and observations_path must be given together")

    @property
    def uses_files(self) -> bool:
        return self.cohort_path is not None

    def echo(self) -> dict:
        return {
            "cohort_path": self.cohort_path,
            "observations_path": self.observations_path,
            "synthetic": None if self.uses_files else asdict(self.synthetic),
            "frame_hours": list(self.frames),
            "model": asdict(self.model),
            "models": list(self.models),
            "test_fraction": self.test_fraction,
            "seed": self.seed,
            "out_dir": self.out_dir,
        }


CONFIG_KEYS = ("cohort_path", "observations_path", "synthetic.n", "synthetic.mortality_rate",
               "synthetic.signal", "synthetic.missing_rate", "frame_hours", "hidden_units",
               "dropout_rate", "learning_rate", "epochs", "batch_size", "folds",
               "test_fraction", "seed", "models", "out_dir")


def parse_config(text: str, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Read flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ValueError(f"config line {lineno}: duplicate key {key!r}")
        raw[key] = value
    raw.update({k: str(v) for k, v in (overrides or {}).items() if v is not None})
    return config_from_mapping(raw)


def config_from_mapping(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(sorted(unknown))}")

    def get(key, conv, default):
        if key not in raw:
            return default
        try:
            return conv(raw[key])
        except ValueError:
            raise ValueError(f"config key {key!r}: cannot parse {raw[key]!r}") from None

    seed = get("seed", int, 0)
    synth_default = SyntheticConfig()
    synthetic = SyntheticConfig(
        n_stays=get("synthetic.n", int, synth_default.n_stays),
        mortality_rate=get("synthetic.mortality_rate", float, synth_default.mortality_rate),
        frame_signal_strength=get("synthetic.signal", float, synth_default.frame_signal_strength),
        missing_rate=get("synthetic.missing_rate", float, synth_default.missing_rate),
        seed=seed,
    )
    md = nn.ModelConfig()
    model = nn.ModelConfig(
        hidden_units=get("hidden_units", int, md.hidden_units),
        dropout_rate=get("dropout_rate", float, md.dropout_rate),
        learning_rate=get("learning_rate", float, md.learning_rate),
        epochs=get("epochs", int, md.epochs),
        batch_size=get("batch_size", int, md.batch_size),
        folds=get("folds", int, md.folds),
        seed=seed,
    )
    return ExperimentConfig(
        cohort_path=raw.get("cohort_path") or None,
        observations_path=raw.get("observations_path") or None,
        synthetic=synthetic,
        frames=get("frame_hours", _int_list, (6,)),
        model=model,
        models=get("models", _str_list, MODELS),
        test_fraction=get("test_fraction", float, 0.2),
        seed=seed,
        out_dir=raw.get("out_dir", "out"),
    )


def _int_list(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _str_list(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


@dataclass(frozen=True)
class StagePrediction:
    stay_id: str
    mortality_probability: float
    mortality_decision: int
    los_class: Optional[int] = None
    los_probabilities: Optional[tuple] = None

    def __post_init__(self):
        if (self.los_class is not None) != (self.mortality_decision == 1):
            raise ValueError("los_class must be present exactly when mortality is predicted")


@dataclass
class ExperimentResult:
    report: dict
    binary_rocs: dict = field(default_factory=dict)  # (model, frame) -> RocCurve
    multiclass_rocs: dict = field(default_factory=dict)  # frame -> {name: RocCurve}
    predictions: dict = field(default_factory=dict)  # frame -> [StagePrediction]
    fold_manifest: list = field(default_factory=list)  # (stay_id, fold, role)
    models: dict = field(default_factory=dict)  # (stage, frame) -> TrainedModel


# ---------------------------------------------------------------------------


def derive_seed(seed: int, index: int) -> int:
    return seed ^ index


def load_inputs(cfg: ExperimentConfig):
    if cfg.uses_files:
        try:
            cohort = read_cohort(cfg.cohort_path)
        except ValueError as e:
            raise PipelineError("ingest", f"{cfg.cohort_path}: {e}") from e
        try:
            obs = read_observations(cfg.observations_path)
        except ValueError as e:
            raise PipelineError("ingest", f"{cfg.observations_path}: {e}") from e
        return cohort, obs
    return generate_synthetic_cohort(cfg.synthetic)


def split_test(n: int, test_fraction: float, seed: int):
    """Seeded held-out split; returns sorted (test, development) index arrays."""
    n_test = min(n - 1, max(1, int(round(test_fraction * n))))
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return np.sort(perm[:n_test]), np.sort(perm[n_test:])


def build_grids(cohort, by_stay, frame):
    grids = []
    for e in cohort:
        try:
            grids.append(interpolate_linear(resample_to_grid(by_stay.get(e.stay_id, []), frame,
                                                             e.stay_id)))
        except ValueError as err:
            raise PipelineError("grid", str(err), e.stay_id) from err
    return grids


class _Partition:
    """Interpolated grids of a set of stays prepared with one set of training stats."""

    def __init__(self, entries, grids, stats):
        self.entries = entries
        self.grids = grids
        self.raw = [impute_mean(g, stats) for g in grids]
        self.norm = [prepare_grid(g, stats) for g in grids]
        self.mortality = np.array([label_mortality(e) for e in entries])

    def stage1_windows(self):
        return [LabeledWindow(g, int(y)) for g, y in zip(self.norm, self.mortality)]

    def stage2_index(self):
        return [i for i, e in enumerate(self.entries)
                if e.death_time_hours is not None and e.death_time_hours > 0]

    def stage2_windows(self):
        return [LabeledWindow(self.norm[i], 1, label_los(self.entries[i]))
                for i in self.stage2_index()]


def _binary_summary(y_true, y_pred):
    cm = confusion_matrix(y_true, y_pred, 2)
    return {"f1": f1_binary(cm), "mcc": mcc_binary(cm),
            "f1_degenerate": f1_degenerate(cm), "mcc_degenerate": mcc_degenerate(cm),
            "confusion": cm.counts.tolist()}


def _safe_auc(scores, labels):
    try:
        return roc_curve(scores, labels).auc
    except ValueError:
        return None


def _class_counts(labels, n):
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n).tolist()


class _StageRunner:
    """Fits every requested model on one training partition and scores another."""

    def __init__(self, cfg: ExperimentConfig, frame: int, seed: int):
        self.cfg = cfg
        self.frame = frame
        self.seed = seed
        self.model_cfg = nn.ModelConfig(**{**asdict(cfg.model), "seed": seed})

    def fit_and_score(self, train: _Partition, test: _Partition, stats):
        out = {"binary": {}, "multiclass": None, "balance": {}}
        scores = {}
        windows = train.stage1_windows()
        balanced = undersample(windows, lambda w: w.mortality_label, self.seed)
        out["balance"]["stage1"] = _class_counts([w.mortality_label for w in balanced], 2)
        y_test = test.mortality
        models = {}

        if "lstm" in self.cfg.models:
            try:
                m1 = nn.train(balanced, nn.BINARY, self.model_cfg, stats)
            except nn.TrainingDiverged as e:
                raise PipelineError(f"train stage-1 lstm, frame {self.frame}", str(e)) from e
            models["mortality"] = m1
            scores["lstm"] = nn.predict_batch(m1, test.norm)
            out["binary"]["lstm"] = nn.decide_batch(scores["lstm"], nn.BINARY)

        if "nb" in self.cfg.models or "lr" in self.cfg.models:
            Xb = bl.flatten_windows([w.grid for w in balanced])
            yb = np.array([w.mortality_label for w in balanced])
            Xt = bl.flatten_windows(test.norm)
            if "nb" in self.cfg.models:
                nbm = bl.nb_fit(Xb, yb)
                post = bl.nb_predict(nbm, Xt)
                scores["nb"] = post[:, list(nbm.classes).index(1)]
                out["binary"]["nb"] = (scores["nb"] >= 0.5).astype(int)
            if "lr" in self.cfg.models:
                try:
                    lrm = bl.lr_fit(Xb, yb)
                except bl.LrDiverged as e:
                    raise PipelineError(f"train lr, frame {self.frame}", str(e)) from e
                scores["lr"] = bl.lr_predict(lrm, Xt)
                out["binary"]["lr"] = (scores["lr"] >= 0.5).astype(int)

        for name, fn in (("saps2", _saps2_total), ("sofa", _sofa_total)):
            if name not in self.cfg.models:
                continue
            train_scores = np.array([fn(g, e) for g, e in zip(train.raw, train.entries)])
            threshold = bl.score_to_classifier(train_scores, train.mortality)
            scores[name] = np.array([fn(g, e) for g, e in zip(test.raw, test.entries)])
            out["binary"][name] = (scores[name] >= threshold).astype(int)
            out.setdefault("thresholds", {})[name] = threshold

        out["scores"] = scores
        out["summary"] = {name: {**_binary_summary(y_test, pred),
                                 "auroc": _safe_auc(scores[name], y_test)}
                          for name, pred in out["binary"].items()}

        if "lstm" in self.cfg.models:
            out.update(self._stage2(train, test, stats, models))
        out["models"] = models
        return out

    def _stage2(self, train, test, stats, models):
        windows = train.stage2_windows()
        if not windows:
            return {"multiclass": None}
        balanced = undersample(windows, lambda w: w.los_class, self.seed)
        try:
            m2 = nn.train(balanced, nn.MULTICLASS, self.model_cfg, stats)
        except nn.TrainingDiverged as e:
            raise PipelineError(f"train stage-2 lstm, frame {self.frame}", str(e)) from e
        models["los"] = m2
        res = {"balance_stage2": _class_counts([w.los_class for w in balanced], 4)}
        idx = test.stage2_index()
        if not idx:
            res["multiclass"] = None
            return res
        probs = nn.predict_batch(m2, [test.norm[i] for i in idx])
        labels = np.array([label_los(test.entries[i]) for i in idx])
        try:
            auc = auroc_multiclass(probs, labels, 4)
        except ValueError:
            res["multiclass"] = None
            return res
        res["multiclass"] = {
            "macro": _none_if_nan(auc.macro), "micro": auc.micro, "per_class": auc.per_class,
            "macro_skipped": [c for c, a in enumerate(auc.per_class) if a is None],
            "n": len(idx),
        }
        res["multiclass_probs"] = (probs, labels)
        return res


def _none_if_nan(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _saps2_total(grid: ChannelGrid, entry: CohortEntry) -> int:
    try:
        return bl.saps2_score(grid, entry.age_years).total
    except bl.ScoreInputError as e:
        raise PipelineError("saps2", str(e), entry.stay_id) from e


def _sofa_total(grid: ChannelGrid, entry: CohortEntry) -> int:
    try:
        return bl.sofa_score(grid).total
    except bl.ScoreInputError as e:
        raise PipelineError("sofa", str(e), entry.stay_id) from e


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Run every requested frame; no files are written here (see ``report.emit_report``)."""
    cohort_all, obs = load_inputs(cfg)
    known = {e.stay_id for e in cohort_all}
    by_stay = group_observations(obs)
    orphans = sorted(set(by_stay) - known)
    if orphans:
        raise PipelineError("ingest", "observations reference a stay missing from the cohort",
                            orphans[0])
    cohort = apply_exclusions(cohort_all)
    n = len(cohort)
    K = cfg.model.folds
    if n < K + 1:
        raise PipelineError("split", f"only {n} stays remain after exclusions")
    test_idx, dev_idx = split_test(n, cfg.test_fraction, cfg.seed)
    folds = kfold_split(len(dev_idx), K, cfg.seed)

    result = ExperimentResult(report={})
    for i in test_idx:
        result.fold_manifest.append((cohort[i].stay_id, "test", "test"))
    for f, fold in enumerate(folds):
        val = set(fold.tolist())
        for j, i in enumerate(dev_idx):
            result.fold_manifest.append((cohort[i].stay_id, str(f), "val" if j in val else "train"))

    binary_rows, multi_rows, balance, training = [], [], [], {}
    for frame in cfg.frames:
        log.info("frame %d h: %d stays (%d test)", frame, n, len(test_idx))
        grids = build_grids(cohort, by_stay, frame)

        def part(ix, stats):
            return _Partition([cohort[i] for i in ix], [grids[i] for i in ix], stats)

        fold_results = []
        for f, fold in enumerate(folds):
            tr = dev_idx[np.setdiff1d(np.arange(len(dev_idx)), fold)]
            va = dev_idx[fold]
            stats = _stats([grids[i] for i in tr], f"fold {f}")
            runner = _StageRunner(cfg, frame, derive_seed(cfg.seed, f))
            res = runner.fit_and_score(part(tr, stats), part(va, stats), stats)
            fold_results.append(res)
            balance.append({"frame": frame, "fold": f, "stage1": res["balance"]["stage1"],
                            "stage2": res.get("balance_stage2")})

        stats = _stats([grids[i] for i in dev_idx], "development set")
        runner = _StageRunner(cfg, frame, derive_seed(cfg.seed, K))
        test_part = part(test_idx, stats)
        final = runner.fit_and_score(part(dev_idx, stats), test_part, stats)
        balance.append({"frame": frame, "fold": "final", "stage1": final["balance"]["stage1"],
                        "stage2": final.get("balance_stage2")})

        for name in cfg.models:
            folds_m = [r["summary"][name] for r in fold_results]
            row = {
                "model": name,
                "frame_hours": frame,
                "test": final["summary"][name],
                "folds": folds_m,
                "fold_mean": {"f1": _mean([m["f1"] for m in folds_m]),
                              "mcc": _mean([m["mcc"] for m in folds_m]),
                              "auroc": _mean([m["auroc"] for m in folds_m])},
                "reference_comparable": name not in ("saps2", "sofa") or frame == 24,
            }
            if name in final.get("thresholds", {}):
                row["threshold"] = final["thresholds"][name]
            binary_rows.append(row)
            labels = test_part.mortality
            if labels.min() != labels.max():
                result.binary_rocs[(name, frame)] = roc_curve(final["scores"][name], labels)

        if "lstm" in cfg.models:
            fold_mc = [r.get("multiclass") for r in fold_results]
            multi_rows.append({
                "model": "lstm",
                "frame_hours": frame,
                "test": final.get("multiclass"),
                "folds": fold_mc,
                "fold_mean": {k: _mean([m[k] if m else None for m in fold_mc])
                              for k in ("macro", "micro")},
            })
            if "multiclass_probs" in final:
                probs, labels = final["multiclass_probs"]
                result.multiclass_rocs[frame] = multiclass_roc_curves(probs, labels, 4)
            result.predictions[frame] = _stage_predictions(test_part, final["models"])
            training[str(frame)] = {stage: m.training_log for stage, m in final["models"].items()}
            for stage, m in final["models"].items():
                result.models[(stage, frame)] = m

    result.report = {
        "format": REPORT_FORMAT,
        "prng": PRNG_ID,
        "seed": cfg.seed,
        "config": cfg.echo(),
        "design": {
            "split": "seeded held-out test; K-fold CV on the rest; final refit on the rest",
            "fold_seed": "seed XOR fold index (final refit uses index K)",
            "imputation": "linear interpolation within stay, then training-set channel means",
            "normalization": "z-score with training-set channel statistics",
            "undersampling": "training partitions only, to the minority class count",
            "dropout": "inverted dropout on the final hidden state during training",
            "grad_clip_norm": nn.GRAD_CLIP_NORM,
            "multiclass_output": "softmax",
            "baseline_inputs": "all models see the same windows; nb/lr use the flattened "
                               "normalized grid, saps2/sofa the imputed grid in raw units",
            "score_threshold": "maximizes F1 on the training partition",
        },
        "cohort": {"n_stays": len(cohort_all), "n_after_exclusions": n,
                   "n_test": int(len(test_idx)), "n_development": int(len(dev_idx)),
                   "test_mortality": int(sum(label_mortality(cohort[i]) for i in test_idx))},
        "binary": binary_rows,
        "multiclass": multi_rows,
        "training_balance": balance,
        "training_log": training,
    }
    return result


def _stats(grids, where):
    try:
        return compute_channel_stats(grids)
    except ValueError as e:
        raise PipelineError("channel statistics", f"{where}: {e}") from e


def _stage_predictions(part: _Partition, models: dict) -> list[StagePrediction]:
    return predict_stages(models["mortality"], models.get("los"), part.norm)


def predict_stages(mortality_model, los_model, grids, los_grids=None) -> list[StagePrediction]:
    """Gate the LOS model on the mortality decision for each normalized grid.

    ``los_grids`` supplies inputs normalized for the LOS model when its
    statistics differ from the mortality model's.
    """
    los_grids = grids if los_grids is None else los_grids
    p1 = nn.predict_batch(mortality_model, grids)
    d1 = nn.decide_batch(p1, nn.BINARY)
    positive = [i for i in range(len(grids)) if d1[i] == 1]
    if positive and los_model is None:
        raise PipelineError("predict", "no LOS model available for a predicted death",
                            grids[positive[0]].stay_id)
    los = {}
    if positive:
        p2 = nn.predict_batch(los_model, [los_grids[i] for i in positive])
        for i, row in zip(positive, p2):
            los[i] = row
    out = []
    for i, g in enumerate(grids):
        if d1[i] == 1:
            row = los[i]
            out.append(StagePrediction(g.stay_id, float(p1[i]), 1, nn.decide(row),
                                       tuple(float(x) for x in row)))
        else:
            out.append(StagePrediction(g.stay_id, float(p1[i]), 0))
    return out
