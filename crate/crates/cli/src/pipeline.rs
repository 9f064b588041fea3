//! End-to-end transfer experiment on synthetic subjects: train a patch
//! regressor on source signals interpolated to the target scheme, apply it
//! to target acquisitions of held-out subjects and compare it with a
//! per-voxel dictionary fit of the same target data.

use std::fmt;

use qxfer_core::baseline::{DictionaryBaseline, DictionarySpec};
use qxfer_core::eval::{mean_abs_error, paired_t_test, summarize, ErrorTable, Summary, TTest};
use qxfer_core::learn::{predict_volume, train, MlpModel, TrainConfig, TrainHistory, DEFAULT_HIDDEN};
use qxfer_core::patches::{eligible_centers, extract_qdl, extract_sr, PatchGeometry, SampleSet};
use qxfer_core::resample::{block_upsample_scalar, downsample_dwi, downsample_mask, normalize_b0, resample_qspace};
use qxfer_core::synth::{default_source_scheme, default_target_scheme, generate, Phantom, PhantomConfig, MEASURE_NAMES};
use qxfer_core::volume::linear_index;
use qxfer_core::{Error, GradientScheme, Result, ScalarVolume, ShoreBasisSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Qdl,
    SrQdl,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Qdl => "qdl",
            Mode::SrQdl => "srqdl",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "qdl" => Ok(Mode::Qdl),
            "srqdl" => Ok(Mode::SrQdl),
            _ => Err(format!("unknown mode '{s}' (expected qdl or srqdl)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub gamma: usize,
    /// Template for every subject; the seed field is replaced per subject.
    pub phantom: PhantomConfig,
    pub seed: u64,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub basis: ShoreBasisSpec,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    pub stride: usize,
    pub source_scheme: GradientScheme,
    pub target_scheme: GradientScheme,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Qdl,
            gamma: 2,
            phantom: PhantomConfig::default(),
            seed: 0,
            train_subjects: 2,
            test_subjects: 10,
            basis: ShoreBasisSpec::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            train: TrainConfig::default(),
            stride: 1,
            source_scheme: default_source_scheme(),
            target_scheme: default_target_scheme(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_subjects < 1 {
            return Err(Error::Invalid("at least one training subject is required".into()));
        }
        if self.test_subjects < 1 {
            return Err(Error::Invalid("at least one test subject is required".into()));
        }
        if self.stride < 1 {
            return Err(Error::Invalid("stride must be >= 1".into()));
        }
        if self.mode == Mode::SrQdl {
            if self.gamma < 2 {
                return Err(Error::Invalid(format!("srqdl needs gamma >= 2, got {}", self.gamma)));
            }
            if let Some(d) = self.phantom.dims.iter().find(|&&d| d % self.gamma != 0) {
                return Err(Error::Invalid(format!("phantom extent {d} is not a multiple of gamma {}", self.gamma)));
            }
        }
        self.basis.validate()?;
        self.train.validate()
    }

    fn subject(&self, seed: u64) -> PhantomConfig {
        PhantomConfig { seed, ..self.phantom.clone() }
    }

    pub fn train_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_add(i as u64)
    }

    pub fn test_seed(&self, j: usize) -> u64 {
        self.seed.wrapping_add(1000 + j as u64)
    }

    pub fn geometry(&self) -> PatchGeometry {
        let n_signals = self.target_scheme.without_b0().len();
        match self.mode {
            Mode::Qdl => PatchGeometry::qdl(n_signals, MEASURE_NAMES.len()),
            Mode::SrQdl => PatchGeometry::sr(self.gamma, n_signals, MEASURE_NAMES.len()),
        }
    }
}

/// Training samples from one source subject: source signals (downsampled
/// first in SR mode) are b0-normalized and interpolated onto the target
/// scheme.
pub fn training_samples(cfg: &PipelineConfig, phantom: &Phantom) -> Result<SampleSet> {
    let geometry = cfg.geometry();
    match cfg.mode {
        Mode::Qdl => {
            let norm = normalize_b0(&phantom.source)?;
            let signals = resample_qspace(&norm.dwi, &phantom.mask, &cfg.basis, &cfg.target_scheme)?;
            extract_qdl(&signals, &phantom.measures, &phantom.mask, geometry.in_size, geometry.out_size)
        }
        Mode::SrQdl => {
            let lr = downsample_dwi(&phantom.source, cfg.gamma)?;
            let lr_mask = downsample_mask(&phantom.mask, cfg.gamma)?;
            let norm = normalize_b0(&lr)?;
            let signals = resample_qspace(&norm.dwi, &lr_mask, &cfg.basis, &cfg.target_scheme)?;
            extract_sr(&signals, &phantom.measures, &lr_mask, cfg.gamma, geometry.in_size, geometry.out_size)
        }
    }
}

/// Trains on the concatenated samples of every training subject.
pub fn train_model(cfg: &PipelineConfig) -> Result<(MlpModel, TrainHistory, usize)> {
    cfg.validate()?;
    let geometry = cfg.geometry();
    let mut all = SampleSet { geometry, samples: Vec::new() };
    for i in 0..cfg.train_subjects {
        let phantom = generate(&cfg.subject(cfg.train_seed(i)), &cfg.source_scheme, &cfg.target_scheme)?;
        all.samples.extend(training_samples(cfg, &phantom)?.samples);
    }
    log::info!("{} training samples from {} subjects", all.len(), cfg.train_subjects);
    let mut sizes = vec![geometry.input_len()];
    sizes.extend(&cfg.hidden);
    sizes.push(geometry.target_len());
    let model = MlpModel::init(&sizes, cfg.seed)?;
    let n = all.len();
    let (model, history) = train(&model, &all, &cfg.train)?;
    Ok((model, history, n))
}

/// Learned and baseline estimates for one held-out subject, with the mask
/// the errors are averaged over.
#[derive(Debug, Clone)]
pub struct SubjectResult {
    pub learned: Vec<ScalarVolume>,
    pub baseline: Vec<ScalarVolume>,
    pub gold: Vec<ScalarVolume>,
    pub eval_mask: ScalarVolume,
}

impl SubjectResult {
    /// `[learned, baseline]` mean absolute error per measure.
    pub fn errors(&self) -> Result<Vec<[f64; 2]>> {
        (0..self.gold.len())
            .map(|k| {
                Ok([
                    mean_abs_error(&self.learned[k], &self.gold[k], &self.eval_mask)?,
                    mean_abs_error(&self.baseline[k], &self.gold[k], &self.eval_mask)?,
                ])
            })
            .collect()
    }
}

/// Brain voxels that are not CSF-dominated and whose prediction patch is
/// complete.
fn evaluation_mask(phantom: &Phantom, covered: impl Fn([usize; 3]) -> bool) -> ScalarVolume {
    let dims = phantom.mask.dims();
    let f_iso = &phantom.measures[1];
    ScalarVolume::mask_from(dims, phantom.mask.header.voxel_size, |p| {
        phantom.mask.get(p) != 0.0 && f_iso.get(p) < 0.9 && covered(p)
    })
}

pub fn evaluate_subject(
    cfg: &PipelineConfig,
    model: &MlpModel,
    baseline: &DictionaryBaseline,
    seed: u64,
) -> Result<SubjectResult> {
    let phantom = generate(&cfg.subject(seed), &cfg.source_scheme, &cfg.target_scheme)?;
    let geometry = cfg.geometry();
    let (learned, base, eval_mask) = match cfg.mode {
        Mode::Qdl => {
            let norm = normalize_b0(&phantom.target)?.dwi.masked(&phantom.mask)?;
            let learned = predict_volume(model, &norm, &phantom.mask, &geometry, cfg.stride)?;
            let base = baseline.estimate_volume(&norm, &phantom.mask)?;
            let centers = eligible_centers(&phantom.mask, geometry.in_size, cfg.stride);
            let dims = phantom.mask.dims();
            let mut covered = vec![false; dims.iter().product()];
            for c in centers {
                covered[linear_index(dims, c)] = true;
            }
            let mask = evaluation_mask(&phantom, |p| covered[linear_index(dims, p)]);
            (learned, base, mask)
        }
        Mode::SrQdl => {
            let g = cfg.gamma;
            let lr = downsample_dwi(&phantom.target, g)?;
            let lr_mask = downsample_mask(&phantom.mask, g)?;
            let norm = normalize_b0(&lr)?.dwi.masked(&lr_mask)?;
            let learned = predict_volume(model, &norm, &lr_mask, &geometry, cfg.stride)?;
            // Fitting block-replicated signals gives block-replicated
            // estimates, so fit on the coarse grid and replicate the maps.
            let base = baseline
                .estimate_volume(&norm, &lr_mask)?
                .iter()
                .map(|m| block_upsample_scalar(m, g))
                .collect::<Result<Vec<_>>>()?;
            let lr_dims = lr_mask.dims();
            let mut covered = vec![false; lr_dims.iter().product()];
            for c in eligible_centers(&lr_mask, geometry.in_size, cfg.stride) {
                covered[linear_index(lr_dims, c)] = true;
            }
            let mask = evaluation_mask(&phantom, |p| {
                covered[linear_index(lr_dims, p.map(|c| c / g))]
            });
            (learned, base, mask)
        }
    };
    if eval_mask.count_nonzero() == 0 {
        return Err(Error::Invalid(format!("subject {seed} has an empty evaluation mask")));
    }
    Ok(SubjectResult { learned, baseline: base, gold: phantom.measures, eval_mask })
}

#[derive(Debug, Clone)]
pub struct PipelineReport {
    pub mode: Mode,
    pub training_samples: usize,
    pub history: TrainHistory,
    /// Columns `<measure>.learned` and `<measure>.baseline`, one row per
    /// test subject.
    pub table: ErrorTable,
    pub summary: Summary,
    /// Paired test of learned against baseline errors per measure.
    pub tests: Vec<(String, TTest)>,
    /// Maps of the first test subject.
    pub example: SubjectResult,
}

impl PipelineReport {
    /// `key = value` metrics: summary statistics and test results.
    pub fn metrics(&self) -> String {
        let mut s = format!("mode = {}\ntraining_samples = {}\n", self.mode, self.training_samples);
        s.push_str(&format!("best_epoch = {}\n", self.history.best_epoch));
        s.push_str(&self.summary.to_key_value());
        for (name, t) in &self.tests {
            s.push_str(&format!("{name}.t = {:.6}\n{name}.p = {:.6e}\n", t.t, t.p_two_sided));
        }
        s
    }
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineReport> {
    let (model, history, training_samples) = train_model(cfg)?;
    let baseline = DictionaryBaseline::new(&cfg.target_scheme, &DictionarySpec::default())?;
    let mut columns = Vec::new();
    for m in MEASURE_NAMES {
        columns.push(format!("{m}.learned"));
        columns.push(format!("{m}.baseline"));
    }
    let mut table = ErrorTable::new(columns);
    let mut example = None;
    for j in 0..cfg.test_subjects {
        let r = evaluate_subject(cfg, &model, &baseline, cfg.test_seed(j))?;
        table.push(r.errors()?.into_iter().flatten().collect())?;
        if example.is_none() {
            example = Some(r);
        }
    }
    let summary = summarize(&table)?;
    let mut tests = Vec::new();
    if cfg.test_subjects >= 2 {
        for m in MEASURE_NAMES {
            let a = table.column(&format!("{m}.learned")).expect("column");
            let b = table.column(&format!("{m}.baseline")).expect("column");
            match paired_t_test(&a, &b) {
                Ok(t) => tests.push((m.to_string(), t)),
                Err(e) => log::warn!("no t-test for {m}: {e}"),
            }
        }
    }
    Ok(PipelineReport {
        mode: cfg.mode,
        training_samples,
        history,
        table,
        summary,
        tests,
        example: example.expect("at least one test subject"),
    })
}
