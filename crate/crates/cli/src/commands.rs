use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Mutex;

use lsr_core::dataset::{split_manifest, synthesize_dataset, write_pts, LoadedSample};
use lsr_core::evaluation::{
    ced_curve, default_thresholds, discrepancy_error_correlation, nme, write_ced_csv, write_correlation_csv,
    write_nme_csv, NmeResult,
};
use lsr_core::geometry_validator::IBUG68_STABLE_SUBSET;
use lsr_core::regressor::{
    predict as cascade_predict, train_cascade, RidgeWeight, ShapeRegressor, TrainReport, TrainingSample,
};
use lsr_core::reinforce::{self, combined_score, initialize, Origin, ReinforceInput, Validation, Validators};
use lsr_core::{
    BoundingBox, CascadeModel, DatasetManifest, Error, GrayImage, ModelBundle, PerturbationConfig, PupilIndices,
    ReinforceConfig, Shape, SplitTag, SyntheticFaceConfig, TrainConfig,
};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::args::{EvalArgs, ExportArgs, PredictArgs, ReinforceArgs, ReinforceFlags, SynthArgs, TrainArgs, TrainFlags};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Runtime(Error::InvalidConfig(_) | Error::InvalidRatios(_)) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Runtime(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Line-delimited JSON events on standard output.
pub struct Log {
    pub quiet: bool,
}

impl Log {
    fn event(&self, v: Value) {
        if !self.quiet {
            println!("{v}");
        }
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, s: &str) -> Result<Vec<T>> {
    s.split(',').map(|t| t.trim().parse().map_err(|_| usage(format!("{flag}: cannot parse `{t}`")))).collect()
}

fn parse_split(s: &str) -> Result<SplitTag> {
    match s {
        "train" => Ok(SplitTag::Train),
        "unlabeled" => Ok(SplitTag::Unlabeled),
        "test" => Ok(SplitTag::Test),
        _ => Err(usage(format!("unknown split `{s}` (train, unlabeled, test)"))),
    }
}

fn write_jsonl(path: &Path, rows: &[Value]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).map_err(Error::from)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

fn split_ratios(spec: &str, count: usize) -> Result<[f64; 3]> {
    let v: Vec<f64> = parse_list("--split", spec)?;
    let [a, b, c] = v[..] else { return Err(usage("--split takes three comma-separated values")) };
    if [a, b, c].iter().any(|x| !(*x >= 0.0)) {
        return Err(usage("--split values must be nonnegative"));
    }
    let sum = a + b + c;
    if (sum - 1.0).abs() <= 1e-9 {
        return Ok([a, b, c]);
    }
    if [a, b, c].iter().all(|x| x.fract() == 0.0) && sum == count as f64 {
        let n = count as f64;
        return Ok([a / n, b / n, c / n]);
    }
    Err(usage(format!("--split must be ratios summing to 1 or counts summing to {count}")))
}

pub fn synth(a: &SynthArgs, log: &Log) -> Result<()> {
    let ratios = a.split.as_deref().map(|s| split_ratios(s, a.count)).transpose()?;
    let cfg = SyntheticFaceConfig {
        deformation_std: a.deformation,
        homography_jitter: a.homography_jitter,
        bbox_jitter: a.bbox_jitter,
        clutter: a.clutter,
        noise: a.noise,
        texture_seed: a.texture_seed,
        image_size: a.image_size,
        count: a.count,
        rng_seed: a.seed,
        ..Default::default()
    };
    cfg.validate()?;
    fs::create_dir_all(&a.out)?;
    let mut manifest = synthesize_dataset(&cfg, &a.out)?;
    if let Some(r) = ratios {
        let (tr, un, te) = split_manifest(&manifest, r, a.seed)?;
        let tag = |id: &str| {
            [(&tr, SplitTag::Train), (&un, SplitTag::Unlabeled), (&te, SplitTag::Test)]
                .into_iter()
                .find(|(m, _)| m.entries.iter().any(|e| e.id == id))
                .map(|(_, t)| t)
                .expect("every entry lands in one split")
        };
        for e in manifest.entries.iter_mut() {
            e.split = tag(&e.id);
        }
        manifest.save(&a.out.join("manifest.jsonl"))?;
    }
    let count = |t| manifest.entries.iter().filter(|e| e.split == t).count();
    log.event(json!({
        "event": "synth",
        "faces": manifest.entries.len(),
        "train": count(SplitTag::Train),
        "unlabeled": count(SplitTag::Unlabeled),
        "test": count(SplitTag::Test),
    }));
    Ok(())
}

fn train_config(f: &TrainFlags, pupils: &PupilIndices) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let ridge = match (f.mu, f.mu_per_feature) {
        (Some(m), _) => RidgeWeight::Fixed(m),
        (None, Some(p)) => RidgeWeight::PerFeature(p),
        (None, None) => d.ridge,
    };
    let cfg = TrainConfig {
        stages: f.stages.unwrap_or(d.stages),
        trees_per_landmark: f.trees.unwrap_or(d.trees_per_landmark),
        tree_depth: f.depth.unwrap_or(d.tree_depth),
        radius_schedule: f
            .radius
            .as_deref()
            .map(|s| parse_list("--radius", s))
            .transpose()?
            .unwrap_or(d.radius_schedule),
        ridge,
        initial_perturbations_per_sample: f.perturbations.unwrap_or(d.initial_perturbations_per_sample),
        candidates_per_split: f.candidates.unwrap_or(d.candidates_per_split),
        pixel_pool_size: f.pixel_pool.unwrap_or(d.pixel_pool_size),
        rng_seed: f.seed,
        pupils: Some(pupils.clone()),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn labeled<'a>(samples: &'a [LoadedSample], what: &'static str) -> Result<Vec<(&'a LoadedSample, &'a Shape)>> {
    samples
        .iter()
        .map(|s| s.shape.as_ref().map(|sh| (s, sh)).ok_or(CliError::Runtime(Error::EmptyInput(what))))
        .collect()
}

fn load_split(manifest: &DatasetManifest, tag: SplitTag) -> Result<Vec<LoadedSample>> {
    Ok(manifest.with_split(tag).load_samples()?)
}

fn stage_events(report: &TrainReport) -> Vec<Value> {
    report
        .stages
        .iter()
        .map(|s| {
            json!({
                "event": "stage",
                "stage": s.stage,
                "rows": report.rows,
                "nme_before": s.nme_before,
                "nme_after": s.nme_after,
                "residual_before": s.residual_before,
                "residual_after": s.residual_after,
            })
        })
        .collect()
}

pub fn train(a: &TrainArgs, log: &Log) -> Result<()> {
    let tag = parse_split(&a.split)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let cfg = train_config(&a.train, &manifest.pupils)?;
    fs::create_dir_all(&a.out)?;
    let samples = load_split(&manifest, tag)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("the training split is empty").into());
    }
    let rows = labeled(&samples, "the training split has unlabeled entries")?;
    let train: Vec<TrainingSample<'_>> = rows
        .iter()
        .map(|(s, sh)| TrainingSample { image: &s.image, bbox: s.bbox, shape: sh, survives: true })
        .collect();
    let (model, report) = train_cascade(&train, &cfg)?;
    let events = stage_events(&report);
    events.iter().for_each(|e| log.event(e.clone()));
    write_jsonl(&a.out.join("train_log.jsonl"), &events)?;
    ModelBundle::new(model).save(&a.out.join("model.lsrm"))?;
    log.event(json!({ "event": "saved", "model": a.out.join("model.lsrm").display().to_string() }));
    Ok(())
}

fn mean_pupil_distance(shapes: &[&Shape], pupils: &PupilIndices) -> Result<f64> {
    let d: Vec<f64> = shapes.iter().map(|s| pupils.distance(s)).collect::<lsr_core::Result<_>>()?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

fn reinforce_config(f: &ReinforceFlags, seed: u64, landmarks: usize, ipd: f64) -> Result<ReinforceConfig> {
    let subset = match &f.stable_subset {
        Some(s) => parse_list("--stable-subset", s)?,
        None if landmarks == 68 => IBUG68_STABLE_SUBSET.to_vec(),
        None => return Err(usage("--stable-subset is required for markups other than 68 points")),
    };
    let perturbation =
        PerturbationConfig { sigma: f.sigma * ipd, d_t: f.dt * ipd, samples_per_landmark: f.draws, rng_seed: seed };
    let cfg = ReinforceConfig {
        lambda: f.lambda,
        alpha0: f.alpha0,
        alpha_step: f.alpha_step,
        max_iterations: f.max_iters,
        tolerance: f.tol,
        score_floor: f.score_floor,
        refit_manual: f.refit_manual,
        bins: f.bins,
        smoothing: f.smoothing,
        rel_std_threshold: f.rel_std,
        max_combinations: f.max_combinations,
        ..ReinforceConfig::new(perturbation, subset)
    };
    cfg.validate()?;
    Ok(cfg)
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn reinforce(a: &ReinforceArgs, log: &Log) -> Result<()> {
    let manifest = DatasetManifest::load(&a.manifest)?;
    let tcfg = train_config(&a.train, &manifest.pupils)?;
    let seed_samples = load_split(&manifest, SplitTag::Train)?;
    let pool = load_split(&manifest, SplitTag::Unlabeled)?;
    let test = load_split(&manifest, SplitTag::Test)?;
    let manual = labeled(&seed_samples, "the train split has unlabeled entries")?;
    if manual.is_empty() {
        return Err(Error::EmptySeed.into());
    }
    let ipd = mean_pupil_distance(&manual.iter().map(|(_, s)| *s).collect::<Vec<_>>(), &manifest.pupils)?;
    let rcfg = reinforce_config(&a.reinforce, a.train.seed, manifest.landmark_count, ipd)?;
    let ckpt = a.out.join("checkpoints");
    fs::create_dir_all(&ckpt)?;

    // ground truth of the pool is never given to the loop; it only feeds the oracle columns of the log
    let oracle: Vec<Option<&Shape>> =
        seed_samples.iter().map(|_| None).chain(pool.iter().map(|s| s.shape.as_ref())).collect();
    let inputs: Vec<ReinforceInput<'_>> = manual
        .iter()
        .map(|(s, sh)| ReinforceInput { id: s.id.clone(), image: &s.image, bbox: s.bbox, label: Some((*sh).clone()) })
        .chain(pool.iter().map(|s| ReinforceInput { id: s.id.clone(), image: &s.image, bbox: s.bbox, label: None }))
        .collect();
    let validation = Validation {
        samples: test.iter().filter_map(|s| s.shape.clone().map(|sh| (&s.image, s.bbox, sh))).collect(),
        pupils: manifest.pupils.clone(),
    };
    let regressor = LoggedLbf { config: tcfg, reports: Mutex::new(Vec::new()) };
    let state = initialize(inputs, &rcfg)?;
    log.event(json!({
        "event": "validators",
        "combinations": state.validators.geometry.combinations.len(),
        "sigma_px": rcfg.perturbation.sigma,
        "d_t_px": rcfg.perturbation.d_t,
    }));
    let pupils = manifest.pupils.clone();
    let mut iteration_rows = Vec::new();
    let (model, state) = reinforce::run(state, &regressor, &rcfg, Some(&validation), |s| {
        let h = s.history.last().expect("logged after a step");
        let errors = |survivors_only: bool| -> Vec<f64> {
            s.records
                .iter()
                .zip(&oracle)
                .filter(|(r, _)| r.origin == Origin::Predicted && (!survivors_only || r.v))
                .filter_map(|(r, gt)| nme(r.label.as_ref()?, gt.as_ref()?, &pupils).ok())
                .collect()
        };
        let mut row = serde_json::to_value(h).map_err(Error::from)?;
        row["event"] = json!("iteration");
        row["pool_true_nme"] = json!(mean(&errors(false)));
        row["survivor_true_nme"] = json!(mean(&errors(true)));
        log.event(row.clone());
        iteration_rows.push(row);
        let bundle = ModelBundle {
            cascade: s.model.clone().expect("model after a step"),
            classifiers: Some(s.validators.appearance.clone()),
            geometry: Some(s.validators.geometry.clone()),
        };
        bundle.save(&ckpt.join(format!("iter_{:03}.lsrm", s.t)))?;
        Ok(())
    })?;
    write_jsonl(&a.out.join("iterations.jsonl"), &iteration_rows)?;
    let reports = regressor.reports.into_inner().expect("no training panicked");
    let stages: Vec<Value> = reports
        .iter()
        .enumerate()
        .flat_map(|(k, r)| {
            stage_events(r).into_iter().map(move |mut e| {
                e["training"] = json!(k);
                e
            })
        })
        .collect();
    write_jsonl(&a.out.join("train_log.jsonl"), &stages)?;
    let records: Vec<Value> = state
        .records
        .iter()
        .zip(&oracle)
        .map(|(r, gt)| {
            let true_nme = match (&r.label, gt) {
                (Some(l), Some(g)) => nme(l, g, &pupils).ok(),
                _ => None,
            };
            json!({
                "id": r.id,
                "origin": r.origin,
                "v": r.v,
                "a": r.a,
                "g": r.g,
                "score": if r.score.is_finite() { json!(r.score) } else { json!("inf") },
                "true_nme": true_nme,
            })
        })
        .collect();
    write_jsonl(&a.out.join("records.jsonl"), &records)?;
    let bundle = ModelBundle {
        cascade: model,
        classifiers: Some(state.validators.appearance.clone()),
        geometry: Some(state.validators.geometry.clone()),
    };
    bundle.save(&a.out.join("model.lsrm"))?;
    log.event(json!({
        "event": "done",
        "iterations": state.t,
        "survivors": state.survivor_count(),
        "total": state.records.len(),
        "model": a.out.join("model.lsrm").display().to_string(),
    }));
    Ok(())
}

/// The LBF cascade, keeping the stage report of every training it runs.
struct LoggedLbf {
    config: TrainConfig,
    reports: Mutex<Vec<TrainReport>>,
}

impl ShapeRegressor for LoggedLbf {
    type Model = CascadeModel;

    fn train(&self, samples: &[TrainingSample<'_>]) -> lsr_core::Result<CascadeModel> {
        let (model, report) = train_cascade(samples, &self.config)?;
        self.reports.lock().expect("no training panicked").push(report);
        Ok(model)
    }

    fn predict(&self, model: &CascadeModel, image: &GrayImage, bbox: &BoundingBox) -> Shape {
        cascade_predict(model, image, bbox)
    }
}

pub fn predict(a: &PredictArgs, log: &Log) -> Result<()> {
    let tag = parse_split(&a.split)?;
    let bundle = ModelBundle::load(&a.model)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let samples = load_split(&manifest, tag)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("the selected split is empty").into());
    }
    let dir = a.out.join("pts");
    fs::create_dir_all(&dir)?;
    let shapes: Vec<Shape> = samples.par_iter().map(|s| cascade_predict(&bundle.cascade, &s.image, &s.bbox)).collect();
    for (s, shape) in samples.iter().zip(&shapes) {
        write_pts(&dir.join(format!("{}.pts", s.id)), shape)?;
    }
    log.event(json!({ "event": "predict", "faces": samples.len() }));
    Ok(())
}

pub fn eval(a: &EvalArgs, log: &Log) -> Result<()> {
    let tag = parse_split(&a.split)?;
    if !(a.lambda >= 0.0) {
        return Err(usage("--lambda must be nonnegative"));
    }
    let bundle = ModelBundle::load(&a.model)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let samples = load_split(&manifest, tag)?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("the evaluation split is empty").into());
    }
    let rows = labeled(&samples, "the evaluation split has unlabeled entries")?;
    fs::create_dir_all(&a.out)?;
    let preds: Vec<Shape> = rows.par_iter().map(|(s, _)| cascade_predict(&bundle.cascade, &s.image, &s.bbox)).collect();
    let errors: Vec<f64> =
        preds.iter().zip(&rows).map(|(p, (_, gt))| nme(p, gt, &manifest.pupils)).collect::<lsr_core::Result<_>>()?;
    let ids: Vec<String> = rows.iter().map(|(s, _)| s.id.clone()).collect();
    let result = NmeResult::new(a.split.clone(), errors)?;
    write_nme_csv(&a.out.join("nme.csv"), &ids, &result.errors)?;
    let curve = ced_curve(&result.errors, &default_thresholds())?;
    write_ced_csv(&a.out.join("ced.csv"), &curve)?;
    let mut summary = json!({ "event": "eval", "split": a.split, "faces": ids.len(), "mean_nme": result.mean });
    if let (Some(appearance), Some(geometry)) = (&bundle.classifiers, &bundle.geometry) {
        let validators = Validators { appearance: appearance.clone(), geometry: geometry.clone() };
        let extractor = validators.appearance.extractor()?;
        let scores: Vec<f64> = rows
            .par_iter()
            .zip(&preds)
            .map(|((s, _), p)| {
                let (va, vg) = validators.score(&extractor, &s.image, p);
                combined_score(va, vg, a.lambda, a.score_floor)
            })
            .collect();
        let triples: Vec<(String, f64, f64)> =
            ids.iter().cloned().zip(scores).zip(&result.errors).map(|((i, s), e)| (i, s, *e)).collect();
        let report = discrepancy_error_correlation(&triples)?;
        write_correlation_csv(&a.out.join("correlation.csv"), &report)?;
        summary["spearman"] = json!(report.spearman);
        summary["pearson"] = json!(report.pearson);
    }
    log.event(summary);
    Ok(())
}

pub fn export(a: &ExportArgs, log: &Log) -> Result<()> {
    let bundle = ModelBundle::load(&a.model)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("model.json");
    fs::write(&path, bundle.to_json()?)?;
    log.event(json!({ "event": "export", "path": path.display().to_string() }));
    Ok(())
}
