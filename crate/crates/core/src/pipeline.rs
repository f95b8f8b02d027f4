//! Configuration and orchestration of training and segmentation runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crf::{crf_rnn_forward, finetune_step3, train_step2, CrfParameters, SliceSchedule, TrainingSlice};
use crate::error::{Error, Result, StageContext};
use crate::fcnn::network::{DEFAULT_INPUT_OFFSET, DEFAULT_INPUT_SCALE};
use crate::fcnn::{sample_training_patches, train_step1, Architecture, NetworkParameters, PatchBatch, PatchGeometry, TrainingSchedule};
use crate::fusion::fuse_volumes;
use crate::postprocess::{postprocess, PostprocessThresholds, ALL_STEPS};
use crate::preprocess::{normalize_volume, NormalizationTargets};
use crate::volume::{Axis, LabelSlice, LabelVolume, MultiModalVolume};

/// Model files of one view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewModel {
    pub fcnn: PathBuf,
    #[serde(default)]
    pub crf: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Volume to segment.
    pub input: Option<PathBuf>,
    /// Where the final label volume is written.
    pub output: Option<PathBuf>,
    /// Directory of `<stem>.mmv` / `<stem>_labels.mmv` training pairs.
    pub data_dir: Option<PathBuf>,
    /// Directory holding `<view>.fcnn` and `<view>.crf`.
    pub model_dir: Option<PathBuf>,
    /// Explicit per-view model paths, overriding `model_dir`.
    pub models: BTreeMap<Axis, ViewModel>,
    /// Directory receiving intermediate volumes.
    pub dump_dir: Option<PathBuf>,
    /// 3 (Flair, T1c, T2) or 4 (adds T1).
    pub modalities: usize,
    /// Pooling window `n`.
    pub pool: usize,
    /// Feature maps per hidden layer.
    pub width: usize,
    /// Intensities enter the FCNN as `(x - input_offset) * input_scale`.
    pub input_offset: f64,
    pub input_scale: f64,
    /// Initial CRF parameters, including the iteration count.
    pub crf: CrfParameters,
    /// Refine FCNN outputs with the CRF during segmentation.
    pub use_crf: bool,
    /// Overrides the iteration count of loaded CRF models.
    pub segment_iterations: Option<usize>,
    /// Normalize input intensities before use.
    pub normalize: bool,
    /// Overrides the per-channel defaults.
    pub normalization: Option<NormalizationTargets>,
    pub thresholds: PostprocessThresholds,
    pub postprocess_steps: Vec<u8>,
    pub views: Vec<Axis>,
    pub seed: u64,
    /// Training patches per class, spread evenly across training volumes.
    pub patches_per_class: usize,
    /// Tumor-bearing slices per volume used for CRF training; all when unset.
    pub crf_slices_per_volume: Option<usize>,
    pub training_steps: Vec<u8>,
    pub step1: TrainingSchedule,
    pub step2: SliceSchedule,
    pub step3: SliceSchedule,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            input: None,
            output: None,
            data_dir: None,
            model_dir: None,
            models: BTreeMap::new(),
            dump_dir: None,
            modalities: 3,
            pool: 5,
            width: 64,
            input_offset: DEFAULT_INPUT_OFFSET,
            input_scale: DEFAULT_INPUT_SCALE,
            crf: CrfParameters::default(),
            use_crf: true,
            segment_iterations: None,
            normalize: true,
            normalization: None,
            thresholds: PostprocessThresholds::default(),
            postprocess_steps: ALL_STEPS.to_vec(),
            views: Axis::ALL.to_vec(),
            seed: 0,
            patches_per_class: 1000,
            crf_slices_per_volume: None,
            training_steps: vec![1, 2, 3],
            step1: TrainingSchedule::default(),
            step2: SliceSchedule::default(),
            step3: SliceSchedule::finetune(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_slice(&fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.pool % 2 == 0 {
            return Err(Error::InvalidArgument(format!("pool size must be odd, got {}", self.pool)));
        }
        if !(3..=4).contains(&self.modalities) {
            return Err(Error::InvalidArgument(format!("modalities must be 3 or 4, got {}", self.modalities)));
        }
        if self.views.is_empty() {
            return Err(Error::InvalidArgument("no views requested".into()));
        }
        let mut seen = self.views.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.views.len() {
            return Err(Error::InvalidArgument("views repeat".into()));
        }
        if let Some(&k) = self.postprocess_steps.iter().find(|k| !ALL_STEPS.contains(k)) {
            return Err(Error::InvalidArgument(format!("no post-processing step {k}")));
        }
        if let Some(&k) = self.training_steps.iter().find(|&&k| !(1..=3).contains(&k)) {
            return Err(Error::InvalidArgument(format!("no training step {k}")));
        }
        self.thresholds.validate()?;
        self.crf.validate()?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            pool: self.pool,
            in_channels: self.modalities,
            width: self.width,
            input_offset: self.input_offset,
            input_scale: self.input_scale,
        }
    }

    /// FCNN and CRF file paths of a view.
    pub fn model_paths(&self, axis: Axis) -> Result<(PathBuf, Option<PathBuf>)> {
        if let Some(m) = self.models.get(&axis) {
            return Ok((m.fcnn.clone(), m.crf.clone()));
        }
        match &self.model_dir {
            Some(dir) => Ok((
                dir.join(format!("{axis}.fcnn")),
                Some(dir.join(format!("{axis}.crf"))),
            )),
            None => Err(Error::InvalidArgument(format!("missing model for {axis} view"))),
        }
    }

    /// Seed for one view, distinct across views.
    pub fn view_seed(&self, axis: Axis) -> u64 {
        let k = Axis::ALL.iter().position(|&a| a == axis).unwrap_or(0) as u64 + 1;
        self.seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

/// A training volume with its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub name: String,
    pub volume: MultiModalVolume,
    pub labels: LabelVolume,
}

/// Loads every `<stem>.mmv` with a matching `<stem>_labels.mmv`, sorted by stem.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    let mut stems: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(".mmv").map(str::to_owned))
        .filter(|s| !s.ends_with("_labels"))
        .filter(|s| dir.join(format!("{s}_labels.mmv")).exists())
        .collect();
    stems.sort();
    if stems.is_empty() {
        return Err(Error::InvalidArgument(format!("no labeled volumes in {}", dir.display())));
    }
    stems
        .into_iter()
        .map(|name| {
            let volume = MultiModalVolume::load(dir.join(format!("{name}.mmv")))?;
            let labels = LabelVolume::load(dir.join(format!("{name}_labels.mmv")))?;
            if volume.dims() != labels.dims() {
                return Err(Error::DimMismatch(format!("{name}: volume {} vs labels {}", volume.dims(), labels.dims())));
            }
            Ok(Case { name, volume, labels })
        })
        .collect()
}

/// Normalizes a volume as configured (or returns it unchanged when disabled).
pub fn preprocess_volume(volume: &MultiModalVolume, cfg: &PipelineConfig) -> Result<MultiModalVolume> {
    if volume.channels() != cfg.modalities {
        return Err(Error::DimMismatch(format!(
            "configured for {} modalities, volume has {}",
            cfg.modalities,
            volume.channels()
        )));
    }
    if !cfg.normalize {
        return Ok(volume.clone());
    }
    let targets = match &cfg.normalization {
        Some(t) => t.clone(),
        None => NormalizationTargets::for_channels(volume.channel_names())?,
    };
    normalize_volume(volume, &targets)
}

/// Per-pixel argmax of class probabilities, ties to the lower label.
fn argmax_planes(probabilities: &[f64], classes: usize, pixels: usize) -> Vec<u8> {
    (0..pixels)
        .map(|i| {
            let mut best = 0;
            for u in 1..classes {
                if probabilities[u * pixels + i] > probabilities[best * pixels + i] {
                    best = u;
                }
            }
            best as u8
        })
        .collect()
}

/// Segments every slice of a normalized volume along `axis`.
pub fn segment_view(volume: &MultiModalVolume, fcnn: &NetworkParameters, crf: Option<&CrfParameters>, axis: Axis) -> Result<LabelVolume> {
    let dims = volume.dims();
    let mut out = LabelVolume::zeros(dims)?;
    let (height, width) = dims.slice_shape(axis);
    for index in 0..dims.extent(axis) {
        let slice = volume.extract_slice(axis, index)?;
        let maps = fcnn.segment_slice(&slice)?;
        let data = match crf {
            Some(params) => crf_rnn_forward(&maps, &slice, params)?.argmax(),
            None => argmax_planes(&maps.probabilities, maps.classes(), maps.pixels()),
        };
        out.insert_slice(&LabelSlice {
            axis,
            index,
            height,
            width,
            data,
        })?;
    }
    Ok(out)
}

/// Majority vote over three views; a single view passes through.
pub fn fuse_views(views: &[(Axis, LabelVolume)]) -> Result<LabelVolume> {
    match views {
        [(_, only)] => Ok(only.clone()),
        [_, _, _] => {
            let get = |axis: Axis| {
                views
                    .iter()
                    .find(|(a, _)| *a == axis)
                    .map(|(_, v)| v)
                    .ok_or_else(|| Error::InvalidArgument(format!("no {axis} result")))
            };
            fuse_volumes(get(Axis::Axial)?, get(Axis::Coronal)?, get(Axis::Sagittal)?)
        }
        _ => Err(Error::InvalidArgument(format!("fusion needs one or three views, got {}", views.len()))),
    }
}

/// Trained models of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewModels {
    pub axis: Axis,
    pub fcnn: NetworkParameters,
    pub crf: Option<CrfParameters>,
}

/// Every intermediate of a segmentation run.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentOutputs {
    pub normalized: MultiModalVolume,
    pub views: Vec<(Axis, LabelVolume)>,
    pub fused: LabelVolume,
    pub labels: LabelVolume,
}

/// Preprocesses, segments every requested view, fuses and post-processes.
pub fn segment_volume(volume: &MultiModalVolume, models: &[ViewModels], cfg: &PipelineConfig) -> Result<SegmentOutputs> {
    cfg.validate()?;
    let normalized = preprocess_volume(volume, cfg).stage("preprocess")?;
    let mut views = Vec::new();
    for &axis in &cfg.views {
        let m = models
            .iter()
            .find(|m| m.axis == axis)
            .ok_or_else(|| Error::InvalidArgument(format!("missing model for {axis} view")))
            .stage("segment")?;
        let crf = if cfg.use_crf { m.crf.as_ref() } else { None };
        let labels = segment_view(&normalized, &m.fcnn, crf, axis).stage(&format!("segment {axis}"))?;
        views.push((axis, labels));
    }
    let fused = fuse_views(&views).stage("fuse")?;
    let labels = postprocess(&fused, &normalized, &cfg.thresholds, &cfg.postprocess_steps).stage("postprocess")?;
    Ok(SegmentOutputs {
        normalized,
        views,
        fused,
        labels,
    })
}

/// Loads the configured models of every requested view.
pub fn load_models(cfg: &PipelineConfig) -> Result<Vec<ViewModels>> {
    cfg.views
        .iter()
        .map(|&axis| {
            let (fcnn_path, crf_path) = cfg.model_paths(axis)?;
            if !fcnn_path.exists() {
                return Err(Error::InvalidArgument(format!("missing model {}", fcnn_path.display())));
            }
            let fcnn = NetworkParameters::load(&fcnn_path)?;
            let crf = match crf_path {
                Some(p) if cfg.use_crf => {
                    if !p.exists() {
                        return Err(Error::InvalidArgument(format!("missing model {}", p.display())));
                    }
                    let mut crf = CrfParameters::load(p)?;
                    if let Some(t) = cfg.segment_iterations {
                        crf.iterations = t;
                    }
                    crf.validate()?;
                    Some(crf)
                }
                _ => None,
            };
            Ok(ViewModels { axis, fcnn, crf })
        })
        .collect::<Result<_>>()
        .stage("load models")
}

fn file_stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.strip_suffix(".mmv").map(str::to_owned).unwrap_or(name)
}

/// Segments `cfg.input`, writes `cfg.output` and any requested dumps.
pub fn run_segment(cfg: &PipelineConfig) -> Result<LabelVolume> {
    cfg.validate().stage("config")?;
    let input = cfg
        .input
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no input volume".into()))
        .stage("config")?;
    let volume = MultiModalVolume::load(input).stage("load input")?;
    let models = load_models(cfg)?;
    let out = segment_volume(&volume, &models, cfg)?;
    if let Some(dir) = &cfg.dump_dir {
        let stem = file_stem(input);
        let dump = || -> Result<()> {
            fs::create_dir_all(dir)?;
            out.normalized.save(dir.join(format!("{stem}_normalized.mmv")))?;
            for (axis, v) in &out.views {
                v.save(dir.join(format!("{stem}_{axis}.mmv")))?;
            }
            out.fused.save(dir.join(format!("{stem}_fused.mmv")))?;
            out.labels.save(dir.join(format!("{stem}_final.mmv")))
        };
        dump().stage("dump")?;
    }
    if let Some(path) = &cfg.output {
        out.labels.save(path).stage("write output")?;
    }
    Ok(out.labels)
}

/// Tumor-bearing slices of a volume along `axis`, evenly thinned to `limit`.
pub fn training_slices(volume: &MultiModalVolume, labels: &LabelVolume, axis: Axis, limit: Option<usize>) -> Result<Vec<TrainingSlice>> {
    let mut indices = Vec::new();
    for index in 0..volume.dims().extent(axis) {
        if labels.extract_slice(axis, index)?.data.iter().any(|&l| l > 0) {
            indices.push(index);
        }
    }
    if let Some(limit) = limit {
        if limit < indices.len() {
            let n = indices.len();
            indices = (0..limit).map(|k| indices[(2 * k + 1) * n / (2 * limit)]).collect();
        }
    }
    indices
        .into_iter()
        .map(|index| {
            Ok(TrainingSlice {
                slice: volume.extract_slice(axis, index)?,
                labels: labels.extract_slice(axis, index)?,
            })
        })
        .collect()
}

/// Class-balanced patches from all cases, `per_class` in total per class.
pub fn collect_patches(cases: &[Case], per_class: usize, geometry: PatchGeometry, axis: Axis, seed: u64) -> Result<PatchBatch> {
    let mut batch = PatchBatch::default();
    let n = cases.len();
    for (k, case) in cases.iter().enumerate() {
        let share = per_class / n + usize::from(k < per_class % n);
        if share == 0 {
            continue;
        }
        let case_seed = seed.wrapping_add((k as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        let b = sample_training_patches(&case.volume, &case.labels, share, geometry, axis, case_seed)
            .map_err(|e| e.in_stage(format!("patches {}", case.name)))?;
        batch.extend(b);
    }
    Ok(batch)
}

/// Models and per-epoch losses produced by training one view.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedView {
    pub axis: Axis,
    pub fcnn: NetworkParameters,
    pub crf: CrfParameters,
    /// Loss traces of the steps that ran, keyed by step number.
    pub losses: BTreeMap<u8, Vec<f64>>,
}

/// Runs the enabled training steps for one view on normalized cases.
/// `fcnn` provides the starting network when step 1 is skipped, `crf`
/// the starting CRF when step 2 is skipped.
pub fn train_view(
    cases: &[Case],
    axis: Axis,
    cfg: &PipelineConfig,
    fcnn: Option<NetworkParameters>,
    crf: Option<CrfParameters>,
) -> Result<TrainedView> {
    let seed = cfg.view_seed(axis);
    let steps = &cfg.training_steps;
    let mut losses = BTreeMap::new();
    let mut fcnn = match fcnn {
        Some(f) => f,
        None => {
            let mut f = NetworkParameters::new(cfg.architecture(), seed).stage("train-fcnn")?;
            f.axis = Some(axis);
            f
        }
    };
    let mut crf = crf.unwrap_or_else(|| cfg.crf.clone());

    if steps.contains(&1) {
        let batch = collect_patches(cases, cfg.patches_per_class, PatchGeometry::of(&fcnn), axis, seed).stage("train-fcnn")?;
        let schedule = TrainingSchedule {
            seed,
            ..cfg.step1.clone()
        };
        let (mut trained, trace) = train_step1(&fcnn, &batch, &schedule).stage("train-fcnn")?;
        trained.round_to_f32();
        fcnn = trained;
        losses.insert(1, trace);
    }

    let needs_slices = steps.contains(&2) || steps.contains(&3);
    let slices = if needs_slices {
        let mut all = Vec::new();
        for case in cases {
            all.extend(training_slices(&case.volume, &case.labels, axis, cfg.crf_slices_per_volume)?);
        }
        all
    } else {
        Vec::new()
    };

    if steps.contains(&2) {
        let schedule = SliceSchedule {
            seed,
            ..cfg.step2.clone()
        };
        let (trained, trace) = train_step2(&fcnn, &crf, &slices, &schedule).stage("train-crf")?;
        crf = trained;
        losses.insert(2, trace);
    }

    if steps.contains(&3) {
        let schedule = SliceSchedule {
            seed,
            ..cfg.step3.clone()
        };
        let (mut f, c, trace) = finetune_step3(&fcnn, &crf, &slices, &schedule).stage("finetune")?;
        f.round_to_f32();
        fcnn = f;
        crf = c;
        losses.insert(3, trace);
    }

    Ok(TrainedView { axis, fcnn, crf, losses })
}

/// Normalizes every case as configured.
pub fn preprocess_cases(cases: Vec<Case>, cfg: &PipelineConfig) -> Result<Vec<Case>> {
    cases
        .into_iter()
        .map(|c| {
            let volume = preprocess_volume(&c.volume, cfg).map_err(|e| e.in_stage(format!("preprocess {}", c.name)))?;
            Ok(Case { volume, ..c })
        })
        .collect()
}

/// Trains every requested view from `cfg.data_dir` and writes models and
/// loss traces into `cfg.model_dir`. Returns the files written.
pub fn run_train(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    cfg.validate().stage("config")?;
    let data_dir = cfg
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no data directory".into()))
        .stage("config")?;
    let model_dir = cfg
        .model_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no model directory".into()))
        .stage("config")?;
    fs::create_dir_all(model_dir).map_err(Error::from).stage("write models")?;
    let cases = preprocess_cases(load_dataset(data_dir).stage("load data")?, cfg)?;

    let mut written = Vec::new();
    for &axis in &cfg.views {
        let (fcnn_path, crf_path) = cfg.model_paths(axis)?;
        let crf_path = crf_path.unwrap_or_else(|| model_dir.join(format!("{axis}.crf")));
        let start_fcnn = if cfg.training_steps.contains(&1) {
            None
        } else {
            Some(NetworkParameters::load(&fcnn_path).stage("load models")?)
        };
        let start_crf = if !cfg.training_steps.contains(&2) && cfg.training_steps.contains(&3) && crf_path.exists() {
            Some(CrfParameters::load(&crf_path).stage("load models")?)
        } else {
            None
        };
        let trained = train_view(&cases, axis, cfg, start_fcnn, start_crf)?;
        let write = |written: &mut Vec<PathBuf>| -> Result<()> {
            if cfg.training_steps.contains(&1) || cfg.training_steps.contains(&3) {
                trained.fcnn.save(&fcnn_path)?;
                written.push(fcnn_path.clone());
            }
            if cfg.training_steps.contains(&2) || cfg.training_steps.contains(&3) {
                trained.crf.save(&crf_path)?;
                written.push(crf_path.clone());
            }
            for (step, trace) in &trained.losses {
                let p = model_dir.join(format!("{axis}_step{step}_loss.json"));
                fs::write(&p, serde_json::to_string_pretty(trace)? + "\n")?;
                written.push(p);
            }
            Ok(())
        };
        write(&mut written).stage("write models")?;
    }
    Ok(written)
}
