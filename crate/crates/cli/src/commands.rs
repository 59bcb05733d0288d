//! Subcommand implementations. Every failure becomes a [`CliError`] whose
//! code is the process exit status.

use std::fs;
use std::path::{Path, PathBuf};

use listcycle::checkpoint::{self, Checkpoint};
use listcycle::config::RunConfig;
use listcycle::evaluation::{self, Edit, PRESENCE};
use listcycle::image::ImageTensor;
use listcycle::io::{decode_png, encode_png};
use listcycle::list::ObjectList;
use listcycle::scenes::{scene_at, GroundTruthRecord, Manifest, SceneSpec};
use listcycle::selection::PatchGeometry;
use listcycle::training::{train, LossRecord, ModelState, Models, TrainData};
use listcycle::Error;
use serde::{Deserialize, Serialize};

use crate::draw::{draw_box, eta_color};
use crate::Command;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = if matches!(e, Error::NonFiniteLoss(_)) { 3 } else { 2 };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::usage(e.to_string())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn read_png(path: &Path) -> Result<ImageTensor> {
    decode_png(&read(path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint::load(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// One predicted row in image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRow {
    pub x: f64,
    pub y: f64,
    pub alpha: f64,
    pub eta: Vec<f64>,
}

/// `infer` output for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub rows: Vec<PredictionRow>,
}

impl Prediction {
    fn new(list: &ObjectList, geometry: &PatchGeometry) -> Self {
        Prediction {
            height: geometry.height,
            width: geometry.width,
            rows: list
                .entries
                .iter()
                .map(|e| {
                    let (x, y) = geometry.to_image_pixels(e.x, e.y);
                    PredictionRow {
                        x,
                        y,
                        alpha: e.alpha,
                        eta: e.eta.clone(),
                    }
                })
                .collect(),
        }
    }

    fn active(&self) -> impl Iterator<Item = &PredictionRow> {
        self.rows.iter().filter(|r| r.alpha > PRESENCE)
    }
}

pub fn scene_name(index: u64) -> String {
    format!("scene_{index:05}")
}

/// A synthesized dataset directory: manifest plus `scene_NNNNN.{png,json}`.
struct Dataset {
    manifest: Manifest,
    names: Vec<String>,
    images: Vec<ImageTensor>,
    truths: Vec<GroundTruthRecord>,
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.is_dir() {
        return Err(CliError::usage(format!("dataset directory {} does not exist", dir.display())));
    }
    let manifest = Manifest::from_json(&read(&dir.join("manifest.json"))?)?;
    let mut ds = Dataset {
        names: Vec::new(),
        images: Vec::new(),
        truths: Vec::new(),
        manifest,
    };
    for i in 0..ds.manifest.count {
        let name = scene_name(i);
        ds.images.push(read_png(&dir.join(format!("{name}.png")))?);
        let json = dir.join(format!("{name}.json"));
        ds.truths.push(
            GroundTruthRecord::from_json(&read(&json)?)
                .map_err(|e| CliError::usage(format!("{}: {e}", json.display())))?,
        );
        ds.names.push(name);
    }
    Ok(ds)
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            config,
            preset,
            manifest,
            count,
            seed,
            out,
        } => synth(config, preset, manifest, count, seed, &out),
        Command::Train {
            config,
            dataset,
            seed,
            steps,
            out,
            resume,
        } => train_cmd(config, dataset, seed, steps, out, resume),
        Command::Infer {
            checkpoint,
            images,
            k,
            seed,
            out,
        } => infer(&checkpoint, &images, k, seed, &out),
        Command::Eval {
            checkpoint,
            pred_dir,
            dataset,
            tau,
            k,
            seed,
            out,
            dbi_out,
        } => eval(checkpoint, pred_dir, &dataset, tau, k, seed, out, dbi_out),
        Command::Sweep {
            checkpoint,
            grid,
            dims,
            seed,
            out,
        } => sweep(&checkpoint, grid, &dims, seed, &out),
        Command::Manipulate {
            checkpoint,
            image,
            edit,
            k,
            seed,
            out,
        } => manipulate(&checkpoint, &image, &edit, k, seed, &out),
        Command::Gradcheck { size, seed } => gradcheck(size, seed),
    }
}

fn preset_spec(name: &str) -> Result<SceneSpec> {
    Ok(match name {
        "tetrominoes" => SceneSpec::tetrominoes(),
        "mini-tetrominoes" => SceneSpec::mini_tetrominoes(),
        "sprites" => SceneSpec::sprites(),
        "sprites27" => SceneSpec::sprites27(),
        other => return Err(CliError::usage(format!("unknown preset `{other}`"))),
    })
}

/// Accepts either a bare scene spec or a full run config.
fn spec_from_file(path: &Path) -> Result<SceneSpec> {
    let bytes = read(path)?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let spec = if value.get("scene").is_some() {
        RunConfig::from_json(&bytes)?.scene
    } else {
        serde_json::from_value::<SceneSpec>(value).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?
    };
    spec.validate()?;
    Ok(spec)
}

fn synth(
    config: Option<PathBuf>,
    preset: Option<String>,
    manifest: Option<PathBuf>,
    count: u64,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let manifest = match (config, preset, manifest) {
        (_, _, Some(m)) => Manifest::from_json(&read(&m)?)?,
        (Some(c), _, _) => Manifest::new(spec_from_file(&c)?, seed, count),
        (None, Some(p), None) => Manifest::new(preset_spec(&p)?, seed, count),
        (None, None, None) => return Err(CliError::usage("synth needs --config, --preset or --manifest")),
    };
    create_dir(out)?;
    for i in 0..manifest.count {
        let scene = scene_at(&manifest.spec, manifest.seed, i)?;
        let name = scene_name(i);
        write(&out.join(format!("{name}.png")), encode_png(&scene.image)?)?;
        write(&out.join(format!("{name}.json")), scene.record().to_json())?;
    }
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    write(&out.join("manifest.json"), json)?;
    log::info!("wrote {} scenes to {}", manifest.count, out.display());
    Ok(())
}

const LOSS_FILE: &str = "losses.csv";

fn train_cmd(
    config: Option<PathBuf>,
    dataset: Option<PathBuf>,
    seed: Option<u64>,
    steps: Option<u64>,
    out: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    // `out` and `dataset` flags locate files and are not stored, so resumed
    // and uninterrupted runs write identical checkpoints
    let (mut run, state) = match &resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if seed.is_some() {
                return Err(CliError::usage("--seed cannot change on resume"));
            }
            (ck.config, Some(ck.state))
        }
        None => {
            let path = config.ok_or_else(|| CliError::usage("train needs --config or --resume"))?;
            let mut run = RunConfig::from_json(&read(&path)?)
                .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            if let Some(s) = seed {
                run.train.seed = s;
            }
            (run, None)
        }
    };
    if let Some(s) = steps {
        run.train.steps = s;
    }
    run.validate()?;
    let dataset = dataset
        .or_else(|| run.dataset.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::usage("no dataset given (--dataset or config `dataset`)"))?;
    let out = out
        .or_else(|| run.out.as_ref().map(PathBuf::from))
        .ok_or_else(|| CliError::usage("no output directory given (--out or config `out`)"))?;
    let data = load_dataset(&dataset)?;
    let (h, w) = (run.scene.height, run.scene.width);
    if data.images.iter().any(|i| i.height != h || i.width != w) {
        return Err(CliError::usage(format!("dataset images must be {h}×{w} to match the config")));
    }
    create_dir(&out)?;

    let models = Models::new(&run.model);
    let mut state = match state {
        Some(s) => s,
        None => ModelState::init(&models, &run.train)?,
    };
    let loss_path = out.join(LOSS_FILE);
    let append = resume.is_some() && loss_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&loss_path)
        .map_err(|e| CliError::usage(format!("{}: {e}", loss_path.display())))?;
    let mut csv = csv::WriterBuilder::new().has_headers(!append).from_writer(file);

    let every = run.train.checkpoint_every;
    let train_data = TrainData {
        images: &data.images,
        scene: &run.scene,
    };
    let mut save_error = None;
    let result = train(&models, &mut state, &run, &train_data, run.train.steps, |s, rec: &LossRecord| {
        csv.serialize(rec).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        if every > 0 && s.step % every == 0 && s.step < run.train.steps {
            let path = out.join(format!("ckpt_{:06}.orgn", s.step));
            let ck = Checkpoint {
                config: run.clone(),
                state: s.clone(),
            };
            if let Err(e) = checkpoint::save(&path, &ck) {
                save_error = Some(format!("{}: {e}", path.display()));
                return Err(e);
            }
        }
        if s.step % 100 == 0 {
            log::info!("step {} total {:.4}", s.step, rec.total);
        }
        Ok(())
    });
    csv.flush()
        .map_err(|e| CliError::usage(format!("{}: {e}", loss_path.display())))?;
    if let Some(msg) = save_error {
        return Err(CliError::usage(msg));
    }
    result?;
    let ck = Checkpoint { config: run, state };
    let path = out.join("final.orgn");
    checkpoint::save(&path, &ck).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    log::info!("finished at step {}; wrote {}", ck.state.step, path.display());
    Ok(())
}

fn resolve_k(k: Option<usize>, run: &RunConfig) -> usize {
    k.unwrap_or(run.model.k)
}

fn infer(ckpt: &Path, images: &[PathBuf], k: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let models = Models::new(&ck.config.model);
    let k = resolve_k(k, &ck.config);
    create_dir(out)?;
    let mut written = 0;
    for path in images {
        let image = match read_png(path) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {}", e.message);
                continue;
            }
        };
        let geometry = models.list_gen.geometry(image.height, image.width)?;
        let list = models.list_gen.generate_list(&ck.state.params, &image, k, seed)?;
        let pred = Prediction::new(&list, &geometry);
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into());
        let json = serde_json::to_vec_pretty(&pred).expect("prediction serializes");
        write(&out.join(format!("{stem}.json")), json)?;
        let mut annotated = image;
        for r in pred.active() {
            draw_box(&mut annotated, r.x, r.y, ck.config.model.patch, eta_color(&r.eta));
        }
        write(&out.join(format!("{stem}.png")), encode_png(&annotated)?)?;
        written += 1;
    }
    if written == 0 {
        return Err(CliError::usage("no input image could be read"));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ckpt: Option<PathBuf>,
    pred_dir: Option<PathBuf>,
    dataset: &Path,
    tau: Option<f64>,
    k: Option<usize>,
    seed: u64,
    out: Option<PathBuf>,
    dbi_out: Option<PathBuf>,
) -> Result<()> {
    let data = load_dataset(dataset)?;
    let preds: Vec<Prediction> = match (&ckpt, &pred_dir) {
        (_, Some(dir)) => data
            .names
            .iter()
            .map(|n| {
                let path = dir.join(format!("{n}.json"));
                serde_json::from_slice(&read(&path)?).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
            })
            .collect::<Result<_>>()?,
        (Some(path), None) => {
            let ck = load_checkpoint(path)?;
            let models = Models::new(&ck.config.model);
            let k = resolve_k(k, &ck.config);
            data.images
                .iter()
                .map(|img| {
                    let geometry = models.list_gen.geometry(img.height, img.width)?;
                    let list = models.list_gen.generate_list(&ck.state.params, img, k, seed)?;
                    Ok(Prediction::new(&list, &geometry))
                })
                .collect::<Result<_>>()?
        }
        (None, None) => return Err(CliError::usage("eval needs --checkpoint or --pred-dir")),
    };
    let tau = match tau {
        Some(t) if t.is_finite() && t > 0.0 => t,
        Some(t) => return Err(CliError::usage(format!("tau must be positive, got {t}"))),
        None => {
            let t = &data.truths[0];
            evaluation::default_tau(t.height, t.width)
        }
    };
    let points: Vec<(String, Vec<(f64, f64)>)> = data
        .names
        .iter()
        .zip(&preds)
        .map(|(n, p)| (n.clone(), p.active().map(|r| (r.x, r.y)).collect()))
        .collect();
    let rows = evaluation::evaluate(&points, &data.truths, tau)?;
    let sink: Box<dyn std::io::Write> = match &out {
        Some(p) => Box::new(fs::File::create(p).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout()),
    };
    let mut csv = csv::Writer::from_writer(sink);
    for r in &rows {
        csv.serialize(r)?;
    }
    csv.flush().map_err(|e| CliError::usage(e.to_string()))?;
    if let Some(all) = rows.last() {
        log::info!("tau {tau:.3}: precision {:.4} recall {:.4} F1 {:.4}", all.precision, all.recall, all.f1);
    }

    if let Some(path) = dbi_out {
        let spec = &data.manifest.spec;
        let (mut features, mut labels) = (Vec::new(), Vec::new());
        for ((pred, truth), (_, pts)) in preds.iter().zip(&data.truths).zip(&points) {
            let gt: Vec<_> = truth.active().collect();
            let gt_pts: Vec<(f64, f64)> = gt.iter().map(|r| (r.x, r.y)).collect();
            let report = evaluation::match_points(pts, &gt_pts, tau)?;
            let active: Vec<_> = pred.active().collect();
            for &(p, g, _) in &report.pairs {
                if let Some(label) = &gt[g].label {
                    features.push(active[p].eta.clone());
                    labels.push(label.type_id(spec));
                }
            }
        }
        let dbi = evaluation::davies_bouldin(&features, &labels)?;
        let groups = {
            let mut l = labels.clone();
            l.sort_unstable();
            l.dedup();
            l.len()
        };
        let mut csv = csv::Writer::from_path(&path)?;
        csv.write_record(["dbi", "groups", "samples"])?;
        csv.write_record([dbi.to_string(), groups.to_string(), labels.len().to_string()])?;
        csv.flush().map_err(|e| CliError::usage(e.to_string()))?;
        log::info!("DBI {dbi:.4} over {groups} types");
    }
    Ok(())
}

fn sweep(ckpt: &Path, grid: usize, dims: &[usize], seed: u64, out: &Path) -> Result<()> {
    let &[a, b] = dims else {
        return Err(CliError::usage("--dims takes exactly two indices"));
    };
    let ck = load_checkpoint(ckpt)?;
    let models = Models::new(&ck.config.model);
    let img = evaluation::latent_sweep(
        &models.image_gen,
        &ck.state.params,
        (a, b),
        grid,
        ck.config.model.k,
        ck.config.scene.height,
        ck.config.scene.width,
        seed,
    )?;
    write(out, encode_png(&img)?)
}

fn manipulate(ckpt: &Path, image: &Path, edit: &str, k: Option<usize>, seed: u64, out: &Path) -> Result<()> {
    let edit = Edit::parse(edit)?;
    let ck = load_checkpoint(ckpt)?;
    let models = Models::new(&ck.config.model);
    let img = read_png(image)?;
    let k = resolve_k(k, &ck.config);
    let (list, rendered) =
        evaluation::manipulate_and_render(&models.list_gen, &models.image_gen, &ck.state.params, &img, k, &edit, seed)?;
    let geometry = models.list_gen.geometry(img.height, img.width)?;
    write(out, encode_png(&rendered)?)?;
    let json = serde_json::to_vec_pretty(&Prediction::new(&list, &geometry)).expect("prediction serializes");
    write(&out.with_extension("json"), json)
}

fn gradcheck(size: usize, seed: u64) -> Result<()> {
    let err = listcycle::generators::cycle_grad_check(size, seed)?;
    println!("cycle gradient check at {size}×{size}: max relative error {err:.3e}");
    if err < 1e-4 {
        Ok(())
    } else {
        Err(CliError {
            code: 3,
            message: format!("relative error {err:.3e} exceeds 1e-4"),
        })
    }
}
