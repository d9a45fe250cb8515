use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use eigendistort::fisher::{
    dense_spectrum, predicted_log_threshold_ratio, synthesize, EigenFlags, IterConfig, LogRatio, Telemetry,
    DEFAULT_MAX_ITERS, DEFAULT_TOL,
};
use eigendistort::fixtures::fixture_image;
use eigendistort::io::{
    load_image, load_manifest, load_params, render_distorted, render_gallery, save_image, save_params, write_json,
    write_manifest, ImageFormat, Provenance, GALLERY_ALPHA_MAX, GALLERY_ALPHA_MIN,
};
use eigendistort::observer::{
    empirical_d, run_experiment, DReport, DecisionRule, EigenPairImage, ExperimentReport, ObserverConfig,
    PsychometricFamily,
};
use eigendistort::tensor::{derive_seed, Grid2};
use eigendistort::trainer::{
    evaluate, generate_synthetic_dataset, log_to_jsonl, Polarity, ScoreNoise, SyntheticConfig, TrainConfig,
};
use eigendistort::zoo::{ModelKind, ModelSpec};
use eigendistort::{Error, Result};

pub const EXIT_INPUT: u8 = 2;
pub const EXIT_CONVERGENCE: u8 = 3;

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NotConverged(_) => EXIT_CONVERGENCE,
        _ => EXIT_INPUT,
    }
}

pub enum Status {
    Done,
    NotConverged(String),
}

#[derive(Args, Serialize, Debug)]
pub struct ModelArgs {
    /// mse, ln, lg, lgg, onoff or cnn
    #[arg(long)]
    pub model: Option<String>,
    /// Parameter JSON; its model type must agree with --model
    #[arg(long)]
    pub params: Option<PathBuf>,
}

impl ModelArgs {
    fn spec(&self, default: ModelKind, seed: u64) -> Result<ModelSpec> {
        let kind = self.model.as_deref().map(ModelKind::parse).transpose()?;
        match &self.params {
            Some(p) => {
                let spec = load_params(p)?;
                match kind {
                    Some(k) if k != spec.kind => Err(Error::ParamDomain(format!(
                        "--model {k} disagrees with {} parameters in {}",
                        spec.kind,
                        p.display()
                    ))),
                    _ => Ok(spec),
                }
            }
            None => ModelSpec::default_for(kind.unwrap_or(default), seed),
        }
    }
}

fn out_file(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(dir.join(name))
}

fn iter_config(seed: u64, tol: f64, max_iters: usize) -> Result<IterConfig> {
    let cfg = IterConfig { seed, tol, max_iters };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args, Serialize, Debug)]
pub struct SynthArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Also write the six gallery renderings
    #[arg(long)]
    pub gallery: bool,
}

#[derive(Serialize)]
struct IterationCounts {
    max: usize,
    min: usize,
}

#[derive(Serialize)]
struct SynthReport {
    model_type: ModelKind,
    lambda_max: f64,
    lambda_min: f64,
    log_ratio: LogRatio,
    flags: EigenFlags,
    iterations: IterationCounts,
    telemetry_max: Telemetry,
    telemetry_min: Telemetry,
    e_max_file: &'static str,
    e_min_file: &'static str,
    provenance: Provenance,
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned())
}

pub fn synth(a: &SynthArgs) -> Result<Status> {
    let cfg = iter_config(a.seed, a.tol, a.max_iters)?;
    let x = load_image(&a.image)?;
    let spec = a.model.spec(ModelKind::OnOff, a.seed)?;
    let model = spec.build(x.height(), x.width())?;
    let r = synthesize(&model, &x, &cfg)?;
    save_image(&r.e_max, &out_file(&a.out_dir, "e_max.f32")?, ImageFormat::RawF32)?;
    save_image(&r.e_min, &out_file(&a.out_dir, "e_min.f32")?, ImageFormat::RawF32)?;
    let (imax, imin) = r.iterations();
    let report = SynthReport {
        model_type: spec.kind,
        lambda_max: r.lambda_max,
        lambda_min: r.lambda_min,
        log_ratio: predicted_log_threshold_ratio(&r),
        flags: r.flags,
        iterations: IterationCounts { max: imax, min: imin },
        telemetry_max: r.telemetry_max.clone(),
        telemetry_min: r.telemetry_min.clone(),
        e_max_file: "e_max.f32",
        e_min_file: "e_min.f32",
        provenance: Provenance::new(a.seed, a)?,
    };
    write_json(&out_file(&a.out_dir, "eigen.json")?, &report)?;
    if a.gallery {
        render_gallery(&x, &r.e_max, &r.e_min, &a.out_dir, &stem_of(&a.image))?;
    }
    Ok(if r.converged() {
        Status::Done
    } else {
        Status::NotConverged(format!(
            "iteration budget {} exhausted (max pair {}, min pair {})",
            a.max_iters, r.flags.converged_max, r.flags.converged_min
        ))
    })
}

#[derive(Args, Serialize, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Single rendering: unit direction (RAW-F32) and --alpha
    #[arg(long, requires = "alpha", conflicts_with_all = ["e_max", "e_min"])]
    pub direction: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Gallery: both eigen-distortions
    #[arg(long, requires = "e_min")]
    pub e_max: Option<PathBuf>,
    #[arg(long, requires = "e_max")]
    pub e_min: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Serialize)]
struct RenderReport {
    files: Vec<String>,
    clipped_pixels: Vec<usize>,
    alphas: Vec<f64>,
    provenance: Provenance,
}

fn names(files: &[PathBuf]) -> Vec<String> {
    files
        .iter()
        .map(|f| f.file_name().map_or(String::new(), |n| n.to_string_lossy().into_owned()))
        .collect()
}

pub fn render(a: &RenderArgs) -> Result<Status> {
    let x = load_image(&a.image)?;
    let name = stem_of(&a.image);
    let report = match (&a.direction, a.alpha, &a.e_max, &a.e_min) {
        (Some(d), Some(alpha), None, None) => {
            let e = load_image(d)?;
            let r = render_distorted(&x, &e, alpha, &out_file(&a.out_dir, &format!("{name}_render"))?)?;
            RenderReport {
                files: names(&r.files),
                clipped_pixels: vec![r.clipped_pixels],
                alphas: vec![alpha],
                provenance: Provenance::new(a.seed, a)?,
            }
        }
        (None, _, Some(em), Some(el)) => {
            out_file(&a.out_dir, "")?;
            let g = render_gallery(&x, &load_image(em)?, &load_image(el)?, &a.out_dir, &name)?;
            RenderReport {
                files: names(&g.files),
                clipped_pixels: g.clipped_pixels.to_vec(),
                alphas: vec![GALLERY_ALPHA_MAX, GALLERY_ALPHA_MIN],
                provenance: Provenance::new(a.seed, a)?,
            }
        }
        _ => {
            return Err(Error::ParamDomain(
                "give --direction with --alpha, or --e-max with --e-min".into(),
            ))
        }
    };
    write_json(&out_file(&a.out_dir, "render.json")?, &report)?;
    Ok(Status::Done)
}

#[derive(Args, Serialize, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
}

#[derive(Serialize)]
struct TrainSummary {
    model_type: ModelKind,
    best_epoch: usize,
    rho_train: f64,
    rho_holdout: Option<f64>,
    holdout_records: usize,
    config: TrainConfig,
    provenance: Provenance,
}

pub fn train(a: &TrainArgs) -> Result<Status> {
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        holdout_fraction: a.holdout,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let records = load_manifest(&a.manifest)?.load_records()?;
    let initial = a.model.spec(ModelKind::Lgg, a.seed)?;
    let out = eigendistort::trainer::train(&initial, &records, &cfg)?;
    let prov = Provenance::new(a.seed, a)?;
    save_params(&out.spec, &out_file(&a.out_dir, "params.json")?, Some(prov.clone()))?;
    let log = log_to_jsonl(&out.log)?;
    fs::write(out_file(&a.out_dir, "train_log.jsonl")?, log).map_err(|e| Error::Io {
        path: a.out_dir.join("train_log.jsonl"),
        source: e,
    })?;
    let best = &out.log[out.best_epoch - 1];
    let summary = TrainSummary {
        model_type: out.spec.kind,
        best_epoch: out.best_epoch,
        rho_train: best.rho_train,
        rho_holdout: best.rho_holdout,
        holdout_records: out.holdout.len(),
        config: cfg,
        provenance: prov,
    };
    write_json(&out_file(&a.out_dir, "train_summary.json")?, &summary)?;
    Ok(Status::Done)
}

#[derive(Args, Serialize, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write eval.json here
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct EvalReport {
    model_type: ModelKind,
    records: usize,
    polarity: Polarity,
    rho: f64,
    provenance: Provenance,
}

pub fn eval(a: &EvalArgs) -> Result<Status> {
    let manifest = load_manifest(&a.manifest)?;
    let records = manifest.load_records()?;
    let spec = a.model.spec(ModelKind::OnOff, a.seed)?;
    let (h, w) = records[0].reference.dims();
    let model = spec.build(h, w)?;
    let rho = evaluate(&model, &records)?;
    println!("rho={rho:.6}");
    if let Some(dir) = &a.out_dir {
        let report = EvalReport {
            model_type: spec.kind,
            records: records.len(),
            polarity: manifest.polarity,
            rho,
            provenance: Provenance::new(a.seed, a)?,
        };
        write_json(&out_file(dir, "eval.json")?, &report)?;
    }
    Ok(Status::Done)
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleArg {
    Template,
    Distance,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyArg {
    Linear,
    Log,
}

#[derive(Args, Serialize, Debug)]
pub struct SimulateArgs {
    /// Model whose eigen-distortions are tested
    #[command(flatten)]
    pub model: ModelArgs,
    /// Reference observer model
    #[arg(long, default_value = "onoff")]
    pub reference: String,
    #[arg(long)]
    pub reference_params: Option<PathBuf>,
    /// Repeat for several images
    #[arg(long, required = true)]
    pub image: Vec<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    /// Response-noise standard deviation
    #[arg(long, default_value_t = 1e-3)]
    pub sigma: f64,
    /// Trials per distortion vector
    #[arg(long, default_value_t = 120)]
    pub trials: usize,
    #[arg(long, default_value_t = 3)]
    pub subjects: usize,
    #[arg(long, value_enum, default_value_t = RuleArg::Template)]
    pub rule: RuleArg,
    #[arg(long, value_enum, default_value_t = FamilyArg::Linear)]
    pub family: FamilyArg,
}

#[derive(Serialize)]
struct ImageEigen {
    image_id: String,
    lambda_max: f64,
    lambda_min: f64,
    predicted_log_ratio: LogRatio,
    flags: EigenFlags,
}

#[derive(Serialize)]
struct SimulateReport {
    model_type: ModelKind,
    reference_type: ModelKind,
    sigma: f64,
    trials_per_vector: usize,
    subjects: usize,
    d: DReport,
    eigen: Vec<ImageEigen>,
    experiments: Vec<ExperimentReport>,
    provenance: Provenance,
}

pub fn simulate(a: &SimulateArgs) -> Result<Status> {
    let icfg = iter_config(a.seed, a.tol, a.max_iters)?;
    let ocfg = ObserverConfig {
        sigma: a.sigma,
        trials_per_vector: a.trials,
        rule: match a.rule {
            RuleArg::Template => DecisionRule::Template,
            RuleArg::Distance => DecisionRule::DistanceToReference,
        },
        family: match a.family {
            FamilyArg::Linear => PsychometricFamily::LinearAlpha,
            FamilyArg::Log => PsychometricFamily::LogAlpha,
        },
        seed: derive_seed(a.seed, &[1]),
        ..ObserverConfig::default()
    };
    ocfg.validate()?;
    let spec = a.model.spec(ModelKind::OnOff, a.seed)?;
    let ref_args = ModelArgs {
        model: Some(a.reference.clone()),
        params: a.reference_params.clone(),
    };
    let ref_spec = ref_args.spec(ModelKind::OnOff, a.seed)?;
    let images = a.image.iter().map(|p| load_image(p)).collect::<Result<Vec<Grid2>>>()?;
    let (h, w) = images[0].dims();
    if images.iter().any(|x| x.dims() != (h, w)) {
        return Err(Error::Shape("all --image files must share dimensions".into()));
    }
    let model = spec.build(h, w)?;
    let reference = ref_spec.build(h, w)?;
    let mut pairs = Vec::new();
    let mut eigen = Vec::new();
    let mut unconverged = Vec::new();
    for (i, (x, p)) in images.iter().zip(&a.image).enumerate() {
        let r = synthesize(&model, x, &IterConfig { seed: derive_seed(a.seed, &[0, i as u64]), ..icfg })?;
        if !r.converged() {
            unconverged.push(stem_of(p));
        }
        eigen.push(ImageEigen {
            image_id: stem_of(p),
            lambda_max: r.lambda_max,
            lambda_min: r.lambda_min,
            predicted_log_ratio: predicted_log_threshold_ratio(&r),
            flags: r.flags,
        });
        pairs.push(EigenPairImage {
            image: x.clone(),
            e_max: r.e_max,
            e_min: r.e_min,
        });
    }
    let d = empirical_d(&pairs, &reference, &ocfg, a.subjects)?;
    let experiments = pairs
        .iter()
        .zip(&a.image)
        .enumerate()
        .map(|(i, (pair, p))| {
            let c = ObserverConfig {
                seed: derive_seed(a.seed, &[2, i as u64]),
                ..ocfg
            };
            run_experiment(&stem_of(p), spec.kind.as_str(), &reference, pair, &c)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = SimulateReport {
        model_type: spec.kind,
        reference_type: ref_spec.kind,
        sigma: a.sigma,
        trials_per_vector: a.trials,
        subjects: a.subjects,
        d,
        eigen,
        experiments,
        provenance: Provenance::new(a.seed, a)?,
    };
    write_json(&out_file(&a.out_dir, "report.json")?, &report)?;
    Ok(if unconverged.is_empty() {
        Status::Done
    } else {
        Status::NotConverged(format!("eigen-synthesis did not converge for {}", unconverged.join(", ")))
    })
}

#[derive(Args, Serialize, Debug)]
pub struct OracleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Central-difference step (default scales with the image)
    #[arg(long)]
    pub fd_step: Option<f64>,
}

#[derive(Serialize)]
struct OracleReport {
    model_type: ModelKind,
    lambda_max: f64,
    lambda_min: f64,
    /// Ascending.
    eigenvalues: Vec<f64>,
    e_max_file: &'static str,
    e_min_file: &'static str,
    provenance: Provenance,
}

pub fn oracle(a: &OracleArgs) -> Result<Status> {
    let x = load_image(&a.image)?;
    let spec = a.model.spec(ModelKind::OnOff, a.seed)?;
    let model = spec.build(x.height(), x.width())?;
    let s = dense_spectrum(&model, &x, a.fd_step)?;
    save_image(&s.e_max, &out_file(&a.out_dir, "e_max.f32")?, ImageFormat::RawF32)?;
    save_image(&s.e_min, &out_file(&a.out_dir, "e_min.f32")?, ImageFormat::RawF32)?;
    let report = OracleReport {
        model_type: spec.kind,
        lambda_max: s.lambda_max,
        lambda_min: s.lambda_min,
        eigenvalues: s.values,
        e_max_file: "e_max.f32",
        e_min_file: "e_min.f32",
        provenance: Provenance::new(a.seed, a)?,
    };
    write_json(&out_file(&a.out_dir, "oracle.json")?, &report)?;
    Ok(Status::Done)
}

#[derive(Args, Serialize, Debug)]
pub struct DatasetArgs {
    /// Model that scores the distortions
    #[command(flatten)]
    pub model: ModelArgs,
    /// Base images; seeded fixtures are used when none are given
    #[arg(long)]
    pub image: Vec<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub fixtures: usize,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 200)]
    pub records: usize,
    /// Score-noise standard deviation
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Read --noise as a fraction of the score spread
    #[arg(long)]
    pub relative_noise: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    #[serde(skip)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct DatasetReport {
    model_type: ModelKind,
    records: usize,
    manifest: &'static str,
    provenance: Provenance,
}

pub fn dataset(a: &DatasetArgs) -> Result<Status> {
    let bases: Vec<Grid2> = if a.image.is_empty() {
        if a.fixtures == 0 || a.size < 2 {
            return Err(Error::ParamDomain("need at least one fixture of size >= 2".into()));
        }
        (0..a.fixtures)
            .map(|i| fixture_image(derive_seed(a.seed, &[9, i as u64]), a.size, a.size))
            .collect()
    } else {
        a.image.iter().map(|p| load_image(p)).collect::<Result<_>>()?
    };
    // stored as single precision, so score what will be read back
    let bases: Vec<Grid2> = bases.iter().map(|b| b.map(|v| v as f32 as f64)).collect();
    let (h, w) = bases[0].dims();
    let spec = a.model.spec(ModelKind::Lgg, a.seed)?;
    let model = spec.build(h, w)?;
    let noise = if a.relative_noise {
        ScoreNoise::RelativeToDistanceStd(a.noise)
    } else {
        ScoreNoise::Absolute(a.noise)
    };
    let cfg = SyntheticConfig {
        n_records: a.records,
        noise,
        seed: a.seed,
    };
    let records = generate_synthetic_dataset(&model, &bases, &cfg)?;
    let img_dir = a.out_dir.join("images");
    for (k, b) in bases.iter().enumerate() {
        save_image(b, &out_file(&img_dir, &format!("ref_{k}.f32"))?, ImageFormat::RawF32)?;
    }
    let mut rows = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let k = bases.iter().position(|b| *b == r.reference).expect("reference is a base image");
        let name = format!("dist_{i:04}.f32");
        save_image(&r.distorted, &img_dir.join(&name), ImageFormat::RawF32)?;
        rows.push((format!("images/ref_{k}.f32"), format!("images/{name}"), r.score));
    }
    write_manifest(&out_file(&a.out_dir, "manifest.csv")?, Polarity::Distortion, &rows)?;
    let report = DatasetReport {
        model_type: spec.kind,
        records: records.len(),
        manifest: "manifest.csv",
        provenance: Provenance::new(a.seed, a)?,
    };
    write_json(&out_file(&a.out_dir, "dataset.json")?, &report)?;
    Ok(Status::Done)
}
