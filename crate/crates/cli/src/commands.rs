use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use seaflow::datagen::{generate, DataConfig};
use seaflow::flow::FlowField;
use seaflow::flowio::{error_to_color, flow_to_color, read_flo, read_ppm, write_flo, write_ppm};
use seaflow::metrics::{error_map, evaluate, MetricReport};
use seaflow::model::Model;
use seaflow::trainer::{
    ablate as run_ablation, checkpoint_config, content_hash, load_checkpoint_model, train_sample_seed, AblationSpec,
    Precision, TrainConfig, Trainer, LOG_HEADER,
};
use seaflow::{Error, Result, Scalar};

use crate::run::{layered, read_string, to_toml, Manifest, Overrides, Run};
use crate::{AblateArgs, EvalArgs, GenArgs, InferArgs, TrainArgs};

pub const CHECKPOINT: &str = "checkpoint.bin";
pub const METRICS: &str = "metrics.csv";
pub const DATASET_MANIFEST: &str = "dataset.toml";
/// Errors at or above this many pixels saturate in error-map images.
const ERROR_MAP_MAX: f64 = 5.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub count: usize,
    pub seed: u64,
    pub data: DataConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            count: 10,
            seed: 0,
            data: DataConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct DatasetManifest {
    /// Hash of the generator configuration shared by every sample.
    config_hash: String,
    sample: Vec<DatasetEntry>,
}

#[derive(Serialize)]
struct DatasetEntry {
    name: String,
    seed: u64,
    config_hash: String,
}

/// File stem shared by the frames, flow and metadata of sample `i`.
fn sample_name(i: usize) -> String {
    format!("{i:06}")
}

pub fn gen(a: GenArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("count", a.count)?
        .set("seed", a.seed)?
        .set("data.mode", a.mode)?
        .set("data.height", a.height)?
        .set("data.width", a.width)?;
    let cfg: GenConfig = layered(a.common.config.as_deref(), o)?;
    cfg.data.validate()?;
    let effective = to_toml(&cfg);
    let dir = Run::resolve("gen", a.common.out.as_deref(), &effective);
    let manifest = Manifest {
        command: "gen",
        config_path: a.common.config.clone(),
        seed: Some(cfg.seed),
        effective,
        inputs: json!({}),
    };
    let run = Run::start(dir, &manifest, false)?;
    let data_hash = content_hash(to_toml(&cfg.data).as_bytes());
    let mut entries = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let seed = train_sample_seed(cfg.seed, i);
        let pair = generate(&cfg.data, seed);
        let name = sample_name(i);
        write_ppm(&pair.i1, &run.path(&format!("{name}_img1.ppm")))?;
        write_ppm(&pair.i2, &run.path(&format!("{name}_img2.ppm")))?;
        write_flo(&pair.gt, &run.path(&format!("{name}_flow.flo")))?;
        let meta = serde_json::to_string_pretty(&pair.meta).expect("metadata serializes");
        run.write(&format!("{name}_meta.json"), meta)?;
        entries.push(DatasetEntry {
            name,
            seed,
            config_hash: data_hash.clone(),
        });
    }
    let listing = DatasetManifest {
        config_hash: data_hash,
        sample: entries,
    };
    run.write(DATASET_MANIFEST, to_toml(&listing))?;
    eprintln!("wrote {} samples to {}", cfg.count, run.dir.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("steps", a.steps)?
        .set("seed", a.seed)?
        .set("batch", a.batch)?
        .set("lr", a.lr)?
        .set("loss.kind", a.loss)?
        .set("precision", a.precision)?;
    let given = a.common.config.is_some() || !o.is_empty();
    let cfg: TrainConfig = match (&a.common.out, a.resume) {
        (Some(out), true) if !given => checkpoint_config(&out.join(CHECKPOINT))?,
        _ => layered(a.common.config.as_deref(), o)?,
    };
    cfg.validate()?;
    let effective = cfg.to_toml();
    let dir = Run::resolve("train", a.common.out.as_deref(), &effective);
    let manifest = Manifest {
        command: "train",
        config_path: a.common.config.clone(),
        seed: Some(cfg.seed),
        effective,
        inputs: json!({
            "resume": a.resume,
            "init_from": a.init_from.as_ref().map(|p| p.display().to_string()),
            "stop_after": a.stop_after,
        }),
    };
    let run = Run::start(dir, &manifest, a.resume)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(&cfg, &run, &a),
        Precision::F64 => train_as::<f64>(&cfg, &run, &a),
    }
}

fn train_as<T: Scalar>(cfg: &TrainConfig, run: &Run, a: &TrainArgs) -> Result<()> {
    let ckpt = run.path(CHECKPOINT);
    let log_path = run.path(METRICS);
    let mut trainer = if a.resume {
        let t = Trainer::<T>::resume(cfg, &ckpt)?;
        // Rows past the checkpoint are replayed by the resumed run.
        let kept: String = read_string(&log_path)?
            .lines()
            .filter(|l| *l == LOG_HEADER || l.split(',').next().and_then(|s| s.parse::<usize>().ok()) < Some(t.state.step))
            .map(|l| format!("{l}\n"))
            .collect();
        run.write(METRICS, kept)?;
        t
    } else {
        let mut t = Trainer::<T>::new(cfg)?;
        if let Some(p) = &a.init_from {
            t.init_from(p)?;
        }
        run.write(METRICS, format!("{LOG_HEADER}\n"))?;
        t
    };
    let file = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::Io {
            path: log_path.clone(),
            source: e,
        })?;
    let mut log = std::io::BufWriter::new(file);
    let stop = a.stop_after.unwrap_or(cfg.steps);
    let result = trainer.run_until(&mut log, Some(&ckpt), stop);
    log.flush().map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let report = result?;
    let m = report.final_eval.last();
    eprintln!(
        "step {}/{}: epe {:.4} px1 {:.4} fl {:.4} wauc {:.2} ({} skipped updates)",
        report.steps, cfg.steps, m.epe, m.px1, m.fl_all, m.wauc, report.skipped
    );
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    pub ckpt: Option<PathBuf>,
    pub image1: Option<PathBuf>,
    pub image2: Option<PathBuf>,
    /// Defaults to the model's inference iteration count.
    pub iters: Option<usize>,
    pub downsample: Option<usize>,
}

fn required<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
    field.as_deref().ok_or_else(|| Error::Config(format!("{name} is required")))
}

pub fn infer(a: InferArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("ckpt", a.ckpt.as_ref())?
        .set("image1", a.image1.as_ref())?
        .set("image2", a.image2.as_ref())?
        .set("iters", a.iters)?
        .set("downsample", a.downsample)?;
    let cfg: InferConfig = layered(a.common.config.as_deref(), o)?;
    let ckpt = required(&cfg.ckpt, "ckpt")?;
    let (p1, p2) = (required(&cfg.image1, "image1")?, required(&cfg.image2, "image2")?);
    let train_cfg = checkpoint_config(ckpt)?;
    let effective = to_toml(&cfg);
    let dir = Run::resolve("infer", a.common.out.as_deref(), &effective);
    let manifest = Manifest {
        command: "infer",
        config_path: a.common.config.clone(),
        seed: None,
        effective,
        inputs: json!({}),
    };
    let run = Run::start(dir, &manifest, false)?;
    let (i1, i2) = (read_ppm(p1)?, read_ppm(p2)?);
    let iters = cfg.iters.unwrap_or(train_cfg.model.inference_iterations);
    let down = cfg.downsample.unwrap_or(1);
    let flow = match train_cfg.precision {
        Precision::F32 => load_checkpoint_model::<f32>(ckpt)?.0.infer_frames(&i1, &i2, iters, down)?.flow.cast(),
        Precision::F64 => load_checkpoint_model::<f64>(ckpt)?.0.infer_frames(&i1, &i2, iters, down)?.flow,
    };
    write_flo(&flow, &run.path("flow.flo"))?;
    write_ppm(&flow_to_color(&flow, None), &run.path("flow.ppm"))?;
    eprintln!("wrote {}x{} flow to {}", flow.height(), flow.width(), run.dir.display());
    Ok(())
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub dataset: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub pred: Option<PathBuf>,
    /// One report row per entry; empty means the model's inference count.
    pub iters: Vec<usize>,
    pub downsample: Option<usize>,
    pub error_maps: bool,
}

/// Samples of a dataset directory, by file stem, in name order.
fn dataset_samples(dir: &Path) -> Result<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.into(),
        source: e,
    })?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix("_img1.ppm").map(str::to_string))
        .collect();
    names.sort();
    Ok(names)
}

/// Source of predicted flow for one report row.
enum Predictor<'a> {
    Files(&'a Path),
    Model32(&'a Model<f32>, usize),
    Model64(&'a Model<f64>, usize),
}

impl Predictor<'_> {
    fn predict(&self, dataset: &Path, name: &str, down: usize) -> Result<Option<FlowField<f64>>> {
        let frames = || -> Result<_> {
            Ok((
                read_ppm(&dataset.join(format!("{name}_img1.ppm")))?,
                read_ppm(&dataset.join(format!("{name}_img2.ppm")))?,
            ))
        };
        Ok(Some(match *self {
            Predictor::Files(dir) => {
                let p = dir.join(format!("{name}_flow.flo"));
                if !p.exists() {
                    return Ok(None);
                }
                read_flo(&p)?
            }
            Predictor::Model32(m, n) => {
                let (a, b) = frames()?;
                m.infer_frames(&a, &b, n, down)?.flow.cast()
            }
            Predictor::Model64(m, n) => {
                let (a, b) = frames()?;
                m.infer_frames(&a, &b, n, down)?.flow
            }
        }))
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("dataset", a.dataset.as_ref())?
        .set("ckpt", a.ckpt.as_ref())?
        .set("pred", a.pred.as_ref())?
        .set("iters", (!a.iters.is_empty()).then_some(&a.iters))?
        .set("downsample", a.downsample)?
        .set("error_maps", a.error_maps.then_some(true))?;
    let cfg: EvalConfig = layered(a.common.config.as_deref(), o)?;
    let dataset = required(&cfg.dataset, "dataset")?;
    if cfg.ckpt.is_some() == cfg.pred.is_some() {
        return Err(Error::Config("exactly one of ckpt and pred is required".into()));
    }
    let effective = to_toml(&cfg);
    let dir = Run::resolve("eval", a.common.out.as_deref(), &effective);
    let manifest = Manifest {
        command: "eval",
        config_path: a.common.config.clone(),
        seed: None,
        effective,
        inputs: json!({}),
    };
    let run = Run::start(dir, &manifest, false)?;
    let names = dataset_samples(dataset)?;

    let mut m32 = None;
    let mut m64 = None;
    let mut rows: Vec<(String, Predictor)> = Vec::new();
    if let Some(p) = &cfg.pred {
        rows.push(("pred".into(), Predictor::Files(p)));
    } else if let Some(ck) = &cfg.ckpt {
        let tc = checkpoint_config(ck)?;
        let iters = if cfg.iters.is_empty() { vec![tc.model.inference_iterations] } else { cfg.iters.clone() };
        match tc.precision {
            Precision::F32 => m32 = Some(load_checkpoint_model::<f32>(ck)?.0),
            Precision::F64 => m64 = Some(load_checkpoint_model::<f64>(ck)?.0),
        }
        for n in iters {
            let p = match (&m32, &m64) {
                (Some(m), _) => Predictor::Model32(m, n),
                (_, Some(m)) => Predictor::Model64(m, n),
                _ => unreachable!("one model is loaded"),
            };
            rows.push((format!("iters={n}"), p));
        }
    }

    let down = cfg.downsample.unwrap_or(1);
    if cfg.error_maps {
        fs::create_dir_all(run.path("errors")).map_err(|e| Error::Io {
            path: run.path("errors"),
            source: e,
        })?;
    }
    let mut per_sample = format!("label,sample,{}\n", MetricReport::CSV_HEADER);
    let mut report = format!("label,{},skipped\n", MetricReport::CSV_HEADER);
    let mut table = String::from("label         EPE      1px     Fl      WAUC    valid  skipped\n");
    for (label, predictor) in &rows {
        let mut reports = Vec::new();
        let mut skipped = 0;
        for name in &names {
            let gt_path = dataset.join(format!("{name}_flow.flo"));
            let gt: Option<FlowField<f64>> = if gt_path.exists() { Some(read_flo(&gt_path)?) } else { None };
            let Some(gt) = gt.filter(|g| g.n_valid() > 0) else {
                eprintln!("warning: {name}: no ground truth, skipped");
                skipped += 1;
                continue;
            };
            let Some(pred) = predictor.predict(dataset, name, down)? else {
                eprintln!("warning: {name}: no prediction, skipped");
                skipped += 1;
                continue;
            };
            let m = evaluate(&pred, &gt)?;
            let _ = writeln!(per_sample, "{label},{name},{}", m.csv_row());
            if cfg.error_maps {
                let map = error_to_color(&error_map(&pred, &gt)?, gt.height(), gt.width(), ERROR_MAP_MAX);
                let tag = label.replace('=', "");
                write_ppm(&map, &run.path(&format!("errors/{tag}_{name}.ppm")))?;
            }
            reports.push(m);
        }
        let total = MetricReport::aggregate(&reports)?;
        let _ = writeln!(report, "{label},{},{skipped}", total.csv_row());
        let _ = writeln!(
            table,
            "{label:<12} {:>7.4} {:>7.4} {:>7.4} {:>7.2} {:>7} {:>7}",
            total.epe, total.px1, total.fl_all, total.wauc, total.n_valid, skipped
        );
    }
    run.write("samples.csv", per_sample)?;
    run.write("report.csv", report)?;
    print!("{table}");
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    let mut o = Overrides::default();
    o.set("seeds", (!a.seeds.is_empty()).then_some(&a.seeds))?
        .set("base.steps", a.steps)?;
    let spec = AblationSpec::from_toml(&to_toml(&layered::<AblationSpec>(a.common.config.as_deref(), o)?))?;
    let effective = to_toml(&spec);
    let dir = Run::resolve("ablate", a.common.out.as_deref(), &effective);
    let manifest = Manifest {
        command: "ablate",
        config_path: a.common.config.clone(),
        seed: None,
        effective,
        inputs: json!({}),
    };
    let run = Run::start(dir, &manifest, false)?;
    let mut progress = |label: &str| eprintln!("training {label}");
    let table = match spec.base.precision {
        Precision::F32 => run_ablation::<f32>(&spec, &mut progress)?,
        Precision::F64 => run_ablation::<f64>(&spec, &mut progress)?,
    };
    let md = table.to_markdown();
    run.write("table.md", &md)?;
    run.write("table.csv", table.to_csv())?;
    print!("{md}");
    Ok(())
}
