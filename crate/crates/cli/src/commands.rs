use std::path::{Path, PathBuf};

use distgp::data::{Dataset, Targets};
use distgp::net::{
    audit_affine, audit_distgp, collapse_check, lipschitz_bound_affine, lipschitz_bound_distgp, load_checkpoint,
    AuditReport, CollapseReport, LayerState,
};
use distgp::ood::{
    auc, dice, flag_rate, rotation_sweep, score_examples, threshold_at_fpr, write_json, write_scores_csv,
    ExampleScores, ScoreName, ScoreSet, UncertaintyReport,
};
use distgp::training::{accuracy, derive_seed, init_model, rmse, train, write_metrics, Model, Task};
use distgp::Error;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::config::{DatasetConfig, RunConfig};
use crate::exit::{code_for, Failure, NUMERICAL};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const LAST_GOOD_FILE: &str = "last_good.ckpt";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const OOD_SCORES_FILE: &str = "ood_scores.csv";
pub const OOD_AUC_FILE: &str = "ood_auc.json";
pub const OOD_THRESHOLDS_FILE: &str = "ood_thresholds.json";
pub const ROTATION_FILE: &str = "rotation.json";
pub const ROTATION_SCORES_FILE: &str = "rotation_scores.csv";
pub const AUDIT_FILE: &str = "audit.json";

/// Command-line values that replace fields of the run config.
#[derive(Clone, Debug, Default)]
pub struct TrainOverrides {
    pub task: Option<Task>,
    pub outputs: Option<PathBuf>,
    pub seed: Option<u64>,
    pub max_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
}

fn write_out<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_json(path, value).map_err(|e| Failure::io(format!("{}: {e}", path.display())))
}

fn io_err(path: &Path) -> impl Fn(Error) -> Failure + '_ {
    move |e| Failure { code: code_for(&e), message: format!("{}: {e}", path.display()) }
}

pub fn cmd_train(config_path: &Path, overrides: &TrainOverrides) -> Result<PathBuf, Failure> {
    let mut cfg = RunConfig::load(config_path)?;
    if let Some(t) = overrides.task {
        cfg.task = t;
    }
    if let Some(o) = &overrides.outputs {
        cfg.outputs = o.clone();
    }
    if let Some(s) = overrides.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = overrides.max_steps {
        cfg.train.max_steps = s;
    }
    if let Some(b) = overrides.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(lr) = overrides.learning_rate {
        cfg.train.learning_rate = lr;
    }
    cfg.validate().map_err(Failure::config)?;

    let data = cfg.dataset.load(cfg.task)?;
    let out = cfg.outputs.clone();
    std::fs::create_dir_all(&out).map_err(|e| Failure::io(format!("{}: {e}", out.display())))?;
    write_out(&out.join(RESOLVED_CONFIG_FILE), &cfg)?;

    let mut model = match init_model(cfg.network.clone(), &data, cfg.task, &cfg.train) {
        Ok(m) => m,
        Err(e) if e.is_numerical() => {
            write_out(&out.join(DIAGNOSTICS_FILE), &json!({"stage": "init", "step": 0, "error": e.to_string()}))?;
            return Err(Failure { code: NUMERICAL, message: format!("initialisation failed: {e}") });
        }
        Err(e) => return Err(e.into()),
    };
    let run_meta = json!({"run_config": cfg});
    match train(&mut model, &data, &cfg.train) {
        Ok(history) => {
            let path = out.join(METRICS_FILE);
            write_metrics(&path, &history).map_err(io_err(&path))?;
            let path = out.join(CHECKPOINT_FILE);
            model.save(&path, run_meta).map_err(io_err(&path))?;
            Ok(path)
        }
        Err(failure) => {
            let path = out.join(METRICS_FILE);
            write_metrics(&path, &failure.history).map_err(io_err(&path))?;
            let code = code_for(&failure.error);
            if code == NUMERICAL {
                let path = out.join(LAST_GOOD_FILE);
                model.save(&path, run_meta).map_err(io_err(&path))?;
                let params = model.net.params();
                let norms: serde_json::Map<String, serde_json::Value> = params
                    .ids()
                    .map(|id| (params.name(id).to_string(), json!(params.raw(id).frobenius_norm())))
                    .collect();
                write_out(
                    &out.join(DIAGNOSTICS_FILE),
                    &json!({
                        "stage": "train",
                        "step": failure.step,
                        "error": failure.error.to_string(),
                        "last_metrics": failure.history.last(),
                        "last_good_checkpoint": LAST_GOOD_FILE,
                        "raw_parameter_norms": norms,
                    }),
                )?;
            }
            Err(Failure { code, message: failure.to_string() })
        }
    }
}

/// A trained model and the run config it was trained under, if stored.
pub struct Loaded {
    pub model: Model,
    pub run: Option<RunConfig>,
}

pub fn load_model(path: &Path) -> Result<Loaded, Failure> {
    let ckpt = load_checkpoint(path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    let run = match ckpt.metadata.get("run_config") {
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|e| Failure::io(format!("{}: stored run config: {e}", path.display())))?,
        ),
        None => None,
    };
    let model = Model::from_checkpoint(ckpt).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    Ok(Loaded { model, run })
}

/// Prediction settings shared by `eval` and `ood`; unset values fall back
/// to the training config stored in the checkpoint.
#[derive(Clone, Debug, Default)]
pub struct PredictOptions {
    pub batch_size: Option<usize>,
    pub mc_samples: Option<usize>,
    pub seed: Option<u64>,
}

struct Resolved {
    batch_size: usize,
    mc_samples: usize,
    seed: u64,
}

impl PredictOptions {
    fn resolve(&self, run: Option<&RunConfig>) -> Resolved {
        let train = run.map(|r| r.train.clone()).unwrap_or_default();
        Resolved {
            batch_size: self.batch_size.unwrap_or(train.batch_size.max(256)),
            mc_samples: self.mc_samples.unwrap_or(train.mc_samples),
            seed: self.seed.unwrap_or(train.seed),
        }
    }
}

fn dataset_for(loaded: &Loaded, flag: Option<&str>, what: &str) -> Result<Dataset, Failure> {
    let cfg = match (flag, &loaded.run) {
        (Some(text), _) => DatasetConfig::parse(text)?,
        (None, Some(run)) => run.dataset.clone(),
        (None, None) => {
            return Err(Failure::config(format!("checkpoint stores no dataset; pass the {what} dataset explicitly")))
        }
    };
    cfg.load(loaded.model.task)
}

fn out_dir(out: Option<&Path>, checkpoint: &Path) -> Result<PathBuf, Failure> {
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    if !dir.as_os_str().is_empty() {
        std::fs::create_dir_all(&dir).map_err(|e| Failure::io(format!("{}: {e}", dir.display())))?;
    }
    Ok(dir)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

pub fn cmd_eval(checkpoint: &Path, data: Option<&str>, out: Option<&Path>, opts: &PredictOptions) -> Result<(), Failure> {
    let loaded = load_model(checkpoint)?;
    let data = dataset_for(&loaded, data, "evaluation")?;
    let dir = out_dir(out, checkpoint)?;
    let o = opts.resolve(loaded.run.as_ref());
    let model = &loaded.model;
    let p = model.predict(&data.inputs, o.batch_size, o.mc_samples, o.seed)?;

    let c = p.mean.cols();
    let mut header = vec!["example_id".to_string()];
    for kind in ["mean", "variance", "within"] {
        header.extend((0..c).map(|j| format!("{kind}_{j}")));
    }
    header.extend(["distributional", "distributional_entropy", "predictive_entropy"].map(String::from));
    let classes = p.predicted_classes();
    let mut summary = json!({
        "task": model.task,
        "split": data.split,
        "examples": data.len(),
        "mean_distributional_variance": mean(&p.distributional),
        "mean_distributional_entropy": mean(&p.distributional_entropy),
        "mean_predictive_entropy": mean(&p.predictive_entropy),
    });
    match &data.targets {
        Targets::Real(y) => {
            header.extend((0..y.cols()).map(|j| format!("target_{j}")));
            summary["rmse"] = json!(rmse(&p.mean, y)?);
        }
        Targets::Classes { labels, .. } => {
            header.extend(["predicted", "label"].map(String::from));
            let pred = classes.as_ref().ok_or_else(|| Failure::config("labelled data needs a classification model"))?;
            summary["accuracy"] = json!(accuracy(pred, labels)?);
        }
    }

    let path = dir.join(PREDICTIONS_FILE);
    let csv_err = |e: csv::Error| Failure::io(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..data.len() {
        let mut row = vec![i.to_string()];
        for m in [&p.mean, &p.variance, &p.within] {
            row.extend(m.row(i).iter().map(|v| format!("{v:e}")));
        }
        for v in [p.distributional[i], p.distributional_entropy[i], p.predictive_entropy[i]] {
            row.push(format!("{v:e}"));
        }
        match &data.targets {
            Targets::Real(y) => row.extend(y.row(i).iter().map(|v| format!("{v:e}"))),
            Targets::Classes { labels, .. } => {
                row.push(classes.as_ref().map_or(String::new(), |c| c[i].to_string()));
                row.push(labels[i].to_string());
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
    write_out(&dir.join(EVAL_SUMMARY_FILE), &summary)
}

#[derive(Clone, Debug, Default)]
pub struct OodOptions<'a> {
    pub in_data: Option<&'a str>,
    pub ood_data: Option<&'a str>,
    pub fprs: Vec<f64>,
    pub rotations: Vec<f64>,
}

#[derive(Serialize)]
struct ThresholdRow {
    score: &'static str,
    fpr: f64,
    threshold: f64,
    in_flag_rate: f64,
    ood_flag_rate: f64,
    /// Overlap of flagged examples with the true OOD examples.
    dice: f64,
}

fn auc_table(in_s: &ExampleScores, ood_s: &ExampleScores) -> Result<serde_json::Map<String, serde_json::Value>, Failure> {
    let mut table = serde_json::Map::new();
    for name in ScoreName::ALL {
        let set = ScoreSet::new(in_s.get(name).to_vec(), ood_s.get(name).to_vec(), name)?;
        table.insert(name.as_str().into(), json!(auc(&set)?));
    }
    Ok(table)
}

fn thresholds(in_s: &ExampleScores, ood_s: &ExampleScores, fprs: &[f64]) -> Result<Vec<ThresholdRow>, Failure> {
    let truth: Vec<bool> = std::iter::repeat_n(false, in_s.len()).chain(std::iter::repeat_n(true, ood_s.len())).collect();
    let mut rows = Vec::new();
    for name in ScoreName::ALL {
        for &fpr in fprs {
            let t = threshold_at_fpr(in_s.get(name), fpr)?;
            let flagged: Vec<bool> = in_s.get(name).iter().chain(ood_s.get(name)).map(|&s| s > t).collect();
            rows.push(ThresholdRow {
                score: name.as_str(),
                fpr,
                threshold: t,
                in_flag_rate: flag_rate(in_s.get(name), t),
                ood_flag_rate: flag_rate(ood_s.get(name), t),
                dice: dice(&flagged, &truth)?,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_ood(checkpoint: &Path, opts: &OodOptions<'_>, out: Option<&Path>, predict: &PredictOptions) -> Result<(), Failure> {
    if opts.ood_data.is_none() && opts.rotations.is_empty() {
        return Err(Failure::config("ood needs an OOD dataset, a rotation sweep, or both"));
    }
    if let Some(f) = opts.fprs.iter().find(|f| !(**f > 0.0 && **f < 1.0)) {
        return Err(Failure::config(format!("false-positive rate {f} outside (0, 1)")));
    }
    let loaded = load_model(checkpoint)?;
    let model = &loaded.model;
    let o = predict.resolve(loaded.run.as_ref());
    let in_data = dataset_for(&loaded, opts.in_data, "in-distribution")?;
    let dir = out_dir(out, checkpoint)?;
    let in_s = score_examples(model, &in_data.inputs, o.batch_size, o.mc_samples, o.seed)?;

    if let Some(text) = opts.ood_data {
        let ood_data = DatasetConfig::parse(text)?.load(model.task)?;
        let ood_s = score_examples(model, &ood_data.inputs, o.batch_size, o.mc_samples, o.seed)?;
        let path = dir.join(OOD_SCORES_FILE);
        write_scores_csv(&path, &[("in", &in_s), ("ood", &ood_s)]).map_err(io_err(&path))?;
        write_out(&dir.join(OOD_AUC_FILE), &auc_table(&in_s, &ood_s)?)?;
        write_out(&dir.join(OOD_THRESHOLDS_FILE), &thresholds(&in_s, &ood_s, &opts.fprs)?)?;
    }

    if !opts.rotations.is_empty() {
        let sweep = rotation_sweep(model, &in_data.inputs, in_data.shape, &opts.rotations, o.batch_size, o.mc_samples, o.seed)?;
        #[derive(Serialize)]
        struct Angle<'a> {
            #[serde(flatten)]
            report: &'a UncertaintyReport,
            /// Rotated against unrotated examples.
            auc: serde_json::Map<String, serde_json::Value>,
        }
        let mut rows = Vec::new();
        let mut labelled = Vec::new();
        for (report, scores) in &sweep {
            rows.push(Angle { report, auc: auc_table(&in_s, scores)? });
            labelled.push((format!("rot{}", report.angle), scores));
        }
        let parts: Vec<(&str, &ExampleScores)> = labelled.iter().map(|(s, e)| (s.as_str(), *e)).collect();
        let path = dir.join(ROTATION_SCORES_FILE);
        write_scores_csv(&path, &parts).map_err(io_err(&path))?;
        write_out(&dir.join(ROTATION_FILE), &rows)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct AuditOptions {
    pub lipschitz: bool,
    pub collapse: bool,
    pub pairs: usize,
    pub seed: u64,
}

#[derive(Serialize)]
struct LayerAudit {
    layer: usize,
    kind: &'static str,
    bound: Option<f64>,
    /// Per-output constants of a DistGP activation.
    #[serde(skip_serializing_if = "Option::is_none")]
    per_output: Option<Vec<f64>>,
    audit: Option<AuditReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    skipped: Option<String>,
}

fn audit_layer(model: &Model, i: usize, opts: AuditOptions) -> distgp::Result<Option<LayerAudit>> {
    let kind = model.net.spec().layers[i].kind();
    let seed = derive_seed(opts.seed, &format!("audit/l{i}"));
    Ok(match model.net.layer_state(i)? {
        LayerState::Affine(a) => Some(LayerAudit {
            layer: i,
            kind,
            bound: Some(lipschitz_bound_affine(&a)),
            per_output: None,
            audit: Some(audit_affine(&a, opts.pairs, seed)),
            skipped: None,
        }),
        LayerState::DistGp(layer) => match lipschitz_bound_distgp(&layer) {
            Ok(b) => Some(LayerAudit {
                layer: i,
                kind,
                bound: Some(b.total),
                per_output: Some(b.per_output),
                audit: Some(audit_distgp(&layer, opts.pairs, seed)?),
                skipped: None,
            }),
            Err(Error::DimensionMismatch(why)) => {
                Some(LayerAudit { layer: i, kind, bound: None, per_output: None, audit: None, skipped: Some(why) })
            }
            Err(e) => return Err(e),
        },
        _ => None,
    })
}

pub fn cmd_audit(checkpoint: &Path, opts: AuditOptions, out: Option<&Path>) -> Result<(), Failure> {
    let (lipschitz, collapse) = if opts.lipschitz || opts.collapse { (opts.lipschitz, opts.collapse) } else { (true, true) };
    let loaded = load_model(checkpoint)?;
    let model = &loaded.model;
    let dir = out_dir(out, checkpoint)?;
    let mut report = serde_json::Map::new();
    if lipschitz {
        let layers: Vec<Option<LayerAudit>> = (0..model.net.num_layers())
            .into_par_iter()
            .map(|i| audit_layer(model, i, opts))
            .collect::<distgp::Result<_>>()?;
        let layers: Vec<LayerAudit> = layers.into_iter().flatten().collect();
        let violations: usize = layers.iter().filter_map(|l| l.audit.as_ref()).map(|a| a.violations).sum();
        let max_affine = layers.iter().filter(|l| l.kind == "affine_conv").filter_map(|l| l.bound).fold(None, |m: Option<f64>, b| {
            Some(m.map_or(b, |m| m.max(b)))
        });
        report.insert(
            "lipschitz".into(),
            json!({"pairs": opts.pairs, "layers": layers, "violations": violations, "max_affine_bound": max_affine}),
        );
    }
    if collapse {
        let c: CollapseReport = collapse_check(&model.net)?;
        report.insert("collapse".into(), serde_json::to_value(c).expect("plain struct"));
    }
    write_out(&dir.join(AUDIT_FILE), &report)
}
