use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use defectnet::data::{
    composition_table, generate_dataset, images_to_tensor, load_dataset, save_dataset, Dataset, DatasetSpec,
    GrayImage, Sample, Split, ANNOTATIONS_FILE, IMAGE_DIR,
};
use defectnet::detector::{detection_json, parse_detections, Detection};
use defectnet::metrics::{evaluate, ApMode, EvalReport, ImageResult};
use defectnet::model::{config_differences, Model};
use defectnet::plot;
use defectnet::trainer::{evaluate_model, parse_betas, sweep_csv, TrainOutcome, Trainer};

use crate::runconfig::{echo, RunConfig, CONFIG_FILE, ENV_PREFIX};
use crate::ConfigArgs;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Output directory that remembers what was written to it.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
        self.record(name);
        Ok(())
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    fn finish(mut self) -> Result<()> {
        self.files.sort();
        let body: String = self.files.iter().map(|f| format!("{f}\n")).collect();
        let path = self.dir.join(MANIFEST_FILE);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }
}

fn layered_config(cfg: &ConfigArgs, env: impl IntoIterator<Item = (String, String)>) -> Result<RunConfig> {
    let mut rc = RunConfig::default();
    if let Some(path) = &cfg.config {
        rc.apply_file(path)?;
    }
    rc.apply_env(env)?;
    rc.apply_overrides(&cfg.set)?;
    rc.validate()?;
    Ok(rc)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    if !dir.join(ANNOTATIONS_FILE).is_file() {
        bail!("{} is not a dataset directory (no {ANNOTATIONS_FILE})", dir.display());
    }
    load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))
}

pub fn gen(
    spec: &str,
    out: &Path,
    seed: Option<u64>,
    force: bool,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let mut rc = RunConfig {
        data: match DatasetSpec::preset(spec) {
            Ok(s) => s,
            Err(_) if Path::new(spec).is_file() => {
                let text = fs::read_to_string(spec).with_context(|| format!("reading spec {spec}"))?;
                DatasetSpec::from_text(&text).with_context(|| format!("in spec {spec}"))?
            }
            Err(e) => bail!("{e}; no spec file named {spec:?} either"),
        },
        ..RunConfig::default()
    };
    rc.apply_env(env)?;
    if let Some(seed) = seed {
        rc.data.seed = seed;
    }
    rc.data.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() && !force {
        bail!("{} is not empty; pass --force to write into it", out.display());
    }
    let data = generate_dataset(&rc.data)?;
    save_dataset(out, &data)?;
    let mut o = Outputs::create(out)?;
    o.record(ANNOTATIONS_FILE);
    for s in &data.samples {
        o.record(&format!("{IMAGE_DIR}/{}.pgm", s.id));
    }
    let table = composition_table(&rc.data, &data);
    o.write("composition.txt", &table)?;
    o.write(CONFIG_FILE, echo(&rc.data.pairs()))?;
    o.finish()?;
    print!("{table}");
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Trains on the train split, writing logs even when training aborts.
fn train_into(rc: &RunConfig, data: &Dataset, o: &mut Outputs, prefix: &str) -> Result<TrainOutcome> {
    let train_set = data.split(Split::Train);
    if train_set.is_empty() {
        bail!("dataset has an empty train split");
    }
    let val_set = data.split(Split::Val);
    let mut t = Trainer::new(rc.model.clone(), rc.train.clone())?;
    let started = Instant::now();
    let result = t.run(&train_set);
    o.write(&format!("{prefix}loss.csv"), t.log.loss_csv())?;
    o.write(&format!("{prefix}weights.csv"), t.log.weights_csv())?;
    if let Err(e) = result {
        return Err(anyhow::Error::new(e).context(format!(
            "training stopped at iteration {} (last batch [{}]); partial logs are in {}",
            t.iteration,
            t.last_batch.join(", "),
            o.dir.display()
        )));
    }
    log::info!(
        "trained {} iterations in {:.1}s, final loss {}",
        t.iteration,
        started.elapsed().as_secs_f64(),
        fmt_opt(t.log.final_total())
    );
    o.write(&format!("{prefix}loss.svg"), plot::loss_chart(&t.log))?;
    o.write(&format!("{prefix}weights.svg"), plot::weights_chart(&t.log))?;
    let val_map = if val_set.is_empty() {
        log::warn!("empty val split; no validation mAP");
        None
    } else {
        evaluate_model(&t.model, &val_set, 0.5, 0.5)?.map
    };
    let meta = t.checkpoint_meta();
    o.write(&format!("{prefix}{CHECKPOINT_FILE}"), t.model.checkpoint_text(&meta))?;
    Ok(TrainOutcome {
        model: t.model,
        log: t.log,
        val_map,
    })
}

pub fn train(data: &Path, cfg: &ConfigArgs, out: &Path, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let rc = layered_config(cfg, env)?;
    let data = load_data(data)?;
    let mut o = Outputs::create(out)?;
    o.write(CONFIG_FILE, echo(&rc.model_and_train_pairs()))?;
    let outcome = train_into(&rc, &data, &mut o, "");
    let TrainOutcome { log, val_map, .. } = match outcome {
        Ok(v) => v,
        Err(e) => {
            o.finish()?;
            return Err(e);
        }
    };
    o.write(
        "summary.csv",
        format!("variant,final_loss,val_map\n{},{},{}\n", rc.model.variant, fmt_opt(log.final_total()), fmt_opt(val_map)),
    )?;
    o.finish()?;
    println!("final_loss {} val_map {}", fmt_opt(log.final_total()), fmt_opt(val_map));
    Ok(())
}

pub struct EvalArgs {
    pub data: PathBuf,
    pub ckpt: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub split: String,
    pub iou: f64,
    pub conf: f64,
    pub out: PathBuf,
}

fn from_predictions(path: &Path, samples: &[&Sample]) -> Result<Vec<ImageResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut by_image: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (image, d) in parse_detections(&text).with_context(|| format!("in {}", path.display()))? {
        by_image.entry(image).or_default().push(d);
    }
    let results: Vec<ImageResult> = samples
        .iter()
        .map(|s| ImageResult {
            id: s.id.clone(),
            ground_truth: s.ground_truth(),
            detections: by_image.remove(&s.id).unwrap_or_default(),
        })
        .collect();
    if !by_image.is_empty() {
        log::warn!(
            "ignoring detections for {} images outside the split (first: {})",
            by_image.len(),
            by_image.keys().next().expect("non-empty")
        );
    }
    Ok(results)
}

fn eval_chart(report: &EvalReport) -> String {
    let names: Vec<&str> = report.classes.iter().map(|c| c.class.name()).collect();
    plot::bar_chart(
        &format!("per-class AP and recall (IoU {})", report.iou_thr),
        &names,
        &[
            ("AP", report.classes.iter().map(|c| c.ap).collect()),
            ("recall", report.classes.iter().map(|c| c.recall).collect()),
        ],
    )
}

pub fn eval(args: &EvalArgs, cfg: &ConfigArgs, env: impl IntoIterator<Item = (String, String)>) -> Result<()> {
    let env: Vec<(String, String)> = env.into_iter().collect();
    let configured = cfg.config.is_some() || !cfg.set.is_empty() || env.iter().any(|(k, _)| k.starts_with(ENV_PREFIX));
    let rc = layered_config(cfg, env)?;
    let split: Split = args.split.parse()?;
    let data = load_data(&args.data)?;
    let samples = data.split(split);
    if samples.is_empty() {
        bail!("the {} split is empty", split.as_str());
    }
    let mut o = Outputs::create(&args.out)?;
    let (results, timing) = match (&args.ckpt, &args.predictions) {
        (Some(ckpt), _) => {
            let (model, extra) = Model::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            if configured {
                let diff = config_differences(&rc.model, &model.config);
                if !diff.is_empty() {
                    bail!("checkpoint and config disagree on {}", diff.join(", "));
                }
            }
            let mut pairs = model.config.pairs();
            pairs.extend(extra);
            o.write(CONFIG_FILE, echo(&pairs))?;
            let mut results = Vec::with_capacity(samples.len());
            let mut seconds = 0.0;
            for s in &samples {
                let x = images_to_tensor(&[&s.image])?;
                let started = Instant::now();
                let detections = model.detect(&x)?.pop().unwrap_or_default();
                seconds += started.elapsed().as_secs_f64();
                results.push(ImageResult {
                    id: s.id.clone(),
                    ground_truth: s.ground_truth(),
                    detections,
                });
            }
            (results, Some(seconds / samples.len() as f64))
        }
        (None, Some(pred)) => {
            o.write(CONFIG_FILE, echo(&rc.model_and_train_pairs()))?;
            (from_predictions(pred, &samples)?, None)
        }
        (None, None) => bail!("eval needs --ckpt or --predictions"),
    };
    let report = evaluate(&results, args.iou, args.conf, ApMode::AllPoints)?;
    let predictions: String = results
        .iter()
        .flat_map(|r| r.detections.iter().map(|d| detection_json(&r.id, d) + "\n"))
        .collect();
    o.write("predictions.jsonl", predictions)?;
    o.write("eval.csv", report.to_csv(timing))?;
    o.write("eval.svg", eval_chart(&report))?;
    o.finish()?;
    match report.map {
        Some(m) => println!("mAP {:.4}", 100.0 * m),
        None => println!("mAP undefined (no ground truth in split)"),
    }
    Ok(())
}

pub fn detect(image: &Path, ckpt: &Path, conf: f64, svg_path: Option<&Path>) -> Result<()> {
    let img = GrayImage::load(image).with_context(|| format!("reading image {}", image.display()))?;
    if img.width % 32 != 0 || img.height % 32 != 0 {
        bail!("image is {}x{}; both sides must be multiples of 32", img.width, img.height);
    }
    let (model, _) = Model::load(ckpt).with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
    let id = image.file_stem().map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    let dets: Vec<Detection> = model
        .detect(&images_to_tensor(&[&img])?)?
        .pop()
        .unwrap_or_default()
        .into_iter()
        .filter(|d| d.score >= conf)
        .collect();
    for d in &dets {
        println!("{}", detection_json(&id, d));
    }
    if let Some(path) = svg_path {
        fs::write(path, plot::overlay(&img, &dets)).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn sweep_beta(
    data: &Path,
    cfg: &ConfigArgs,
    betas: &str,
    out: &Path,
    env: impl IntoIterator<Item = (String, String)>,
) -> Result<()> {
    let betas = parse_betas(betas)?;
    let rc = layered_config(cfg, env)?;
    let data = load_data(data)?;
    let mut o = Outputs::create(out)?;
    o.write(CONFIG_FILE, echo(&rc.model_and_train_pairs()))?;
    let mut runs = Vec::with_capacity(betas.len());
    for &beta in &betas {
        let mut run = rc.clone();
        run.model.beta = beta;
        log::info!("training with beta {beta}");
        match train_into(&run, &data, &mut o, &format!("beta_{beta}_")) {
            Ok(r) => runs.push((beta, r)),
            Err(e) => {
                o.finish()?;
                return Err(e.context(format!("beta {beta}")));
            }
        }
    }
    let refs: Vec<(f64, &TrainOutcome)> = runs.iter().map(|(b, r)| (*b, r)).collect();
    let csv = sweep_csv(&refs);
    o.write("sweep.csv", &csv)?;
    o.write("sweep.svg", plot::sweep_chart(&refs))?;
    o.finish()?;
    print!("{csv}");
    Ok(())
}
