//! Subcommand bodies. Each writes its artifacts and returns the text report
//! printed by the binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use epiflow_core::fusion::{evaluate, filter_depths, fuse_cloud};
use epiflow_core::geometry::{CameraView, EpipolarField};
use epiflow_core::raster::DepthMap;
use epiflow_core::refiner::{initialize, Model};
use epiflow_core::synthdata::{generate, GroundTruth, PrimitiveKind, Scene, SceneSpec};
use epiflow_core::training::{normalized_error, Trainer};
use epiflow_core::{Error, Result};
use epiflow_tensor::{ParamSet, Real};

use crate::config::RunConfig;
use crate::io::{depth_path, read_pfm, read_ply, write_pfm, write_ply, Bundle, PlyFormat};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    Plane,
    Sphere,
    Step,
}

/// Scene `index` of the desk-scale family, with the chosen primitive.
pub fn scene_spec(index: u64, primitive: Primitive, lambda: f64) -> SceneSpec {
    let mut spec = SceneSpec::plane(index).with_lambda(lambda);
    spec.primitive = match primitive {
        Primitive::Plane => spec.primitive,
        Primitive::Sphere => PrimitiveKind::Sphere { radius: 6.0 },
        Primitive::Step => PrimitiveKind::Step { tilt_deg: 15.0, gap: 0.4 },
    };
    spec
}

/// Training and validation scenes derived from the run seed.
pub fn synthetic_split(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let train = (0..cfg.train_scenes as u64)
        .map(|i| generate(&SceneSpec::plane(i), cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..cfg.val_scenes as u64)
        .map(|i| generate(&SceneSpec::plane(1000 + i), cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    Ok((train, val))
}

pub fn scene_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("scene_{index:03}"))
}

pub fn synth(cfg: &RunConfig, out: &Path, scenes: usize, lambda: f64, primitive: Primitive) -> Result<String> {
    let mut report = String::new();
    for i in 0..scenes {
        let scene = generate(&scene_spec(i as u64, primitive, lambda), cfg.seed)?;
        let dir = scene_dir(out, i);
        Bundle::from_scene(&scene).write(&dir)?;
        writeln!(report, "{}: {} views, {} gt points", dir.display(), scene.views.len(), scene.gt.cloud.len()).unwrap();
    }
    Ok(report)
}

fn metadata_line(bundle: &Bundle) -> String {
    let flag = if bundle.ignored_metadata > 0 { "yes" } else { "no" };
    format!("depth-range metadata ignored: {flag}")
}

/// Writes the pre-refinement depth of every reference view at full resolution.
pub fn init(bundle_dir: &Path, out: &Path) -> Result<String> {
    let bundle = Bundle::read(bundle_dir)?;
    let mut report = String::new();
    for entry in 0..bundle.pairs.0.len() {
        let views = bundle.views_for(entry)?;
        let sources: Vec<&CameraView> = views[1..].iter().collect();
        let field = EpipolarField::build(&views[0], &sources, 1)?;
        let init = initialize(&field)?;
        let values = init.depth.iter().map(|d| d.unwrap_or(0.0)).collect();
        let mask = init.depth.iter().map(Option::is_some).collect();
        let depth = DepthMap::new(field.width, field.height, values, mask)?;
        let r = bundle.pairs.0[entry].0;
        let path = depth_path(out, r);
        fs::create_dir_all(path.parent().expect("nested path"))?;
        fs::write(&path, write_pfm(&depth))?;
        writeln!(report, "view {r}: scale {:e}, {} valid pixels", init.scale, depth.valid_count()).unwrap();
    }
    writeln!(report, "{}", metadata_line(&bundle)).unwrap();
    Ok(report)
}

pub fn load_model<T: Real>(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Model<T>> {
    let mut model = Model::<T>::new(cfg.model())?;
    if let Some(path) = checkpoint {
        model.params.restore(path)?;
    }
    Ok(model)
}

/// Per reference view of the pair list, one refined depth map.
pub fn infer<T: Real>(cfg: &RunConfig, bundle_dir: &Path, out: &Path, checkpoint: Option<&Path>) -> Result<String> {
    let bundle = Bundle::read(bundle_dir)?;
    let model = load_model::<T>(cfg, checkpoint)?;
    let mut report = String::new();
    for entry in 0..bundle.pairs.0.len() {
        let views = bundle.views_for(entry)?;
        let inf = model.run_inference(&views)?;
        let r = bundle.pairs.0[entry].0;
        let path = depth_path(out, r);
        fs::create_dir_all(path.parent().expect("nested path"))?;
        fs::write(&path, write_pfm(&inf.depth))?;
        write!(report, "view {r}: {} valid pixels, {} clamp events", inf.depth.valid_count(), inf.clamp_events).unwrap();
        if let Some(gt) = bundle.gt_depths.as_ref().and_then(|g| g.get(r)) {
            let err = inf.depth.mean_abs_rel_error(gt).ok_or(Error::EmptyMask)?;
            write!(report, ", mean abs rel error {err:e}").unwrap();
        }
        report.push('\n');
    }
    writeln!(report, "{}", metadata_line(&bundle)).unwrap();
    fs::write(out.join("report.txt"), &report)?;
    Ok(report)
}

/// Training scenes from bundle directories: every pair entry with a
/// ground-truth depth for its reference becomes one sample.
pub fn bundle_scenes(root: &Path) -> Result<Vec<Scene>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("pair.txt").exists())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let bundle = Bundle::read(&dir)?;
        let Some(gt) = &bundle.gt_depths else { continue };
        for entry in 0..bundle.pairs.0.len() {
            let r = bundle.pairs.0[entry].0;
            out.push(Scene {
                spec: SceneSpec::default(),
                views: bundle.views_for(entry)?,
                gt: GroundTruth {
                    depths: vec![gt[r].clone()],
                    cloud: Vec::new(),
                },
            });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no bundle with ground truth under {}", root.display())));
    }
    Ok(out)
}

pub struct TrainPaths<'a> {
    pub checkpoint: &'a Path,
    pub log: Option<&'a Path>,
    pub data: Option<&'a Path>,
    pub resume: Option<&'a Path>,
}

pub fn state_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("state")
}

/// Trains to the configured schedule; saves the best parameters and a
/// resumable state next to them.
pub fn train<T: Real>(cfg: &RunConfig, paths: &TrainPaths) -> Result<String> {
    let (train, val) = match paths.data {
        Some(root) => (bundle_scenes(root)?, Vec::new()),
        None => synthetic_split(cfg)?,
    };
    let model = Model::<T>::new(cfg.model())?;
    let mut trainer = match paths.resume {
        Some(path) => {
            let mut state = ParamSet::<T>::new();
            for e in epiflow_tensor::checkpoint::decode(&fs::read(path)?)? {
                state.insert(&e.name, e.to_tensor(), e.trainable)?;
            }
            Trainer::resume(model, cfg.training(), &state)?
        }
        None => Trainer::new(model, cfg.training())?,
    };
    let start = trainer.step;
    let run = match paths.log {
        Some(p) => {
            let mut f = std::io::BufWriter::new(fs::File::create(p)?);
            trainer.run(&train, &val, &mut f)?
        }
        None => trainer.run(&train, &val, &mut std::io::sink())?,
    };
    run.best.save(paths.checkpoint)?;
    trainer.state()?.save(&state_path(paths.checkpoint))?;
    let mut report = String::new();
    writeln!(report, "steps {}..{}", start, trainer.step).unwrap();
    if let Some(last) = run.history.last() {
        writeln!(report, "final loss {:e}", last.loss).unwrap();
    }
    if let Some(v) = run.best_val {
        writeln!(report, "best validation error {v:e}").unwrap();
    }
    let train_err = train
        .iter()
        .map(|s| normalized_error(&trainer.model.run_inference(&s.views)?.depth, &s.gt.depths[0]))
        .collect::<Result<Vec<_>>>()?;
    writeln!(report, "training error {:e}", train_err.iter().sum::<f64>() / train_err.len() as f64).unwrap();
    writeln!(report, "checkpoint {}", paths.checkpoint.display()).unwrap();
    Ok(report)
}

/// Filters the depth maps in `depths/` against each other and fuses the
/// survivors into one cloud.
pub fn fuse(cfg: &RunConfig, bundle_dir: &Path, depth_dir: &Path, out: &Path) -> Result<String> {
    let bundle = Bundle::read(bundle_dir)?;
    let depths = (0..bundle.views.len())
        .map(|i| read_pfm(&fs::read(depth_path(depth_dir, i))?))
        .collect::<Result<Vec<_>>>()?;
    let masks = filter_depths(&depths, &bundle.views, &cfg.filter())?;
    let cloud = fuse_cloud(&depths, &masks, &bundle.views, cfg.voxel)?;
    fs::write(out, write_ply(&cloud, PlyFormat::BinaryLittleEndian))?;
    let kept: usize = masks.iter().map(|m| m.iter().filter(|&&k| k).count()).sum();
    Ok(format!("{kept} consistent pixels, {} points written to {}\n", cloud.len(), out.display()))
}

pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path) -> Result<String> {
    let pred = read_ply(&fs::read(pred)?)?;
    let gt = read_ply(&fs::read(gt)?)?;
    let report = evaluate(&pred, &gt, &cfg.eval())?;
    Ok(format!("{}\n", serde_json::to_string(&report).expect("plain record")))
}
