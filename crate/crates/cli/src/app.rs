//! Argument definitions and subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use qxfer_core::eval::{mean_abs_error, paired_t_test, summarize, ErrorTable};
use qxfer_core::learn::{predict_volume, train, Checkpoint, MlpModel, TrainConfig, DEFAULT_HIDDEN};
use qxfer_core::patches::{extract_qdl, extract_sr, SampleSet};
use qxfer_core::resample::{
    downsample_dwi, downsample_mask, downsample_scalar, fit_volume, normalize_b0, resample_qspace_with,
    ResampleOptions,
};
use qxfer_core::shore::index_sidecar;
use qxfer_core::synth::{
    default_source_scheme, default_target_scheme, generate, manifest as phantom_manifest, PhantomConfig,
    MEASURE_NAMES,
};
use qxfer_core::{
    parse_fsl_gradients, Datatype, DwiVolume, Error, Result, ScalarVolume, ShoreBasisSpec, VolumeHeader,
};

use crate::pipeline::{run_pipeline, Mode, PipelineConfig};

#[derive(Debug, Parser)]
#[command(name = "qxfer", version, about = "q-space knowledge transfer for diffusion-MRI microstructure estimation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` file supplying defaults for any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (default: QXFER_THREADS, else all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ShoreArgs {
    #[arg(long, default_value_t = 6)]
    pub radial_order: u32,
    #[arg(long, default_value_t = 700.0)]
    pub zeta: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub lambda_l: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub lambda_n: f64,
}

impl ShoreArgs {
    fn spec(&self) -> ShoreBasisSpec {
        ShoreBasisSpec {
            radial_order: self.radial_order,
            zeta: self.zeta,
            lambda_l: self.lambda_l,
            lambda_n: self.lambda_n,
            ..ShoreBasisSpec::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct DwiInput {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub bvals: PathBuf,
    #[arg(long)]
    pub bvecs: PathBuf,
    /// Binary mask; defaults to voxels with a positive b0 mean.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.1)]
    pub validation_fraction: f64,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HIDDEN.to_vec())]
    pub hidden: Vec<usize>,
}

impl TrainArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            validation_fraction: self.validation_fraction,
            seed,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom subject on the default source and target schemes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Extents as `n` or `nx,ny,nz`.
        #[arg(long, value_delimiter = ',', default_values_t = vec![24])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 1.25)]
        voxel_size: f64,
        #[arg(long, default_value_t = 0.02)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 100.0)]
        s0: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Fit SHORE coefficients to every masked voxel.
    FitShore {
        #[command(flatten)]
        dwi: DwiInput,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shore: ShoreArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Interpolate b0-normalized signals onto another gradient scheme.
    Resample {
        #[command(flatten)]
        dwi: DwiInput,
        #[arg(long)]
        target_bvals: PathBuf,
        #[arg(long)]
        target_bvecs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clamp interpolated values to [0, clip-max].
        #[arg(long)]
        clip_max: Option<f64>,
        #[command(flatten)]
        shore: ShoreArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Block-mean spatial downsampling of a series, map or mask.
    Downsample {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, requires = "bvecs")]
        bvals: Option<PathBuf>,
        #[arg(long, requires = "bvals")]
        bvecs: Option<PathBuf>,
        #[arg(long)]
        gamma: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Cut training samples from signals and measure maps.
    Extract {
        #[command(flatten)]
        dwi: DwiInput,
        /// Measure maps, comma separated (high resolution in srqdl mode).
        #[arg(long, value_delimiter = ',', required = true)]
        measures: Vec<PathBuf>,
        #[arg(long, default_value = "qdl")]
        mode: Mode,
        #[arg(long)]
        gamma: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train a regressor on a sample file.
    Train {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Apply a trained model to a series.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        dwi: DwiInput,
        /// Output prefix; maps are written to `<out>_<measure>.nii`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Masked mean absolute errors, or summary and paired t-test of an
    /// error table.
    Evaluate {
        #[arg(long, value_delimiter = ',', conflicts_with = "table")]
        estimate: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', conflicts_with = "table")]
        gold: Vec<PathBuf>,
        #[arg(long, conflicts_with = "table")]
        mask: Option<PathBuf>,
        /// Tab-separated table of per-subject errors.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Two table columns to compare, `a,b`.
        #[arg(long, value_delimiter = ',', requires = "table")]
        pair: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// End-to-end transfer experiment on phantom subjects.
    Pipeline {
        #[arg(long, default_value = "qdl")]
        mode: Mode,
        #[arg(long)]
        gamma: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![24])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.02)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 2)]
        train_subjects: usize,
        #[arg(long, default_value_t = 10)]
        test_subjects: usize,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        shore: ShoreArgs,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common, .. }
            | Command::FitShore { common, .. }
            | Command::Resample { common, .. }
            | Command::Downsample { common, .. }
            | Command::Extract { common, .. }
            | Command::Train { common, .. }
            | Command::Predict { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Pipeline { common, .. } => common,
        }
    }
}

/// Failure of a command with its exit status.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.into())
    }
}

pub fn command() -> clap::Command {
    Cli::command().mut_subcommands(|s| s.args_override_self(true))
}

pub fn parse(argv: &[String]) -> std::result::Result<(Cli, ArgMatches), clap::Error> {
    let matches = command().try_get_matches_from(argv)?;
    let cli = Cli::from_arg_matches(&matches)?;
    Ok((cli, matches))
}

/// Threads from the flag, else `QXFER_THREADS`, else all cores.
pub fn thread_count(flag: Option<usize>) -> usize {
    flag.or_else(|| std::env::var("QXFER_THREADS").ok().and_then(|v| v.parse().ok()))
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `path` with its extension replaced (`.nii` → `.bval`).
pub fn with_extension(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.txt")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest.txt");
        PathBuf::from(s)
    }
}

/// Resolved parameters (flags, file entries and defaults) of a run.
pub fn run_manifest(argv: &[String], matches: &ArgMatches, threads: usize) -> String {
    let mut s = String::from("# qxfer run manifest\n");
    s.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
    s.push_str(&format!("argv = {}\n", argv.join(" ")));
    s.push_str(&format!("threads = {threads}\n"));
    if let Some((name, sub)) = matches.subcommand() {
        s.push_str(&format!("command = {name}\n"));
        let mut ids: Vec<&str> = sub.ids().map(|i| i.as_str()).filter(|i| !i.starts_with(char::is_uppercase)).collect();
        ids.sort_unstable();
        for id in ids {
            if let Ok(Some(values)) = sub.try_get_raw(id) {
                let v: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
                s.push_str(&format!("{id} = {}\n", v.join(",")));
            }
        }
    }
    s
}

fn dims3(v: &[usize]) -> std::result::Result<[usize; 3], Failure> {
    match v {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(Failure::Usage(format!("--dims takes 1 or 3 values, got {}", v.len()))),
    }
}

fn load_dwi(d: &DwiInput) -> Result<DwiVolume> {
    DwiVolume::load(&d.input, &d.bvals, &d.bvecs)
}

/// b0-normalized diffusion-weighted signals (unchanged when the scheme has
/// no b0) and the mask to use.
fn normalized_input(d: &DwiInput) -> Result<(DwiVolume, ScalarVolume)> {
    let dwi = load_dwi(d)?;
    let (signals, auto_mask) = if dwi.scheme.b0_count() > 0 {
        let norm = normalize_b0(&dwi)?;
        let auto = ScalarVolume::mask_from(dwi.dims(), dwi.header.voxel_size, |p| norm.b0_map.get(p) > 0.0);
        (norm.dwi, auto)
    } else {
        let auto = ScalarVolume::mask_from(dwi.dims(), dwi.header.voxel_size, |_| true);
        (dwi, auto)
    };
    let mask = match &d.mask {
        Some(p) => {
            let m = ScalarVolume::load(p)?;
            m.require_binary()?;
            m
        }
        None => auto_mask,
    };
    let signals = signals.masked(&mask)?;
    Ok((signals, mask))
}

fn save_dwi(dwi: &DwiVolume, out: &Path) -> Result<()> {
    dwi.save(out, with_extension(out, "bval"), with_extension(out, "bvec"))
}

fn measure_names(n: usize) -> Vec<String> {
    if n == MEASURE_NAMES.len() {
        MEASURE_NAMES.iter().map(|s| s.to_string()).collect()
    } else {
        (0..n).map(|k| format!("m{k}")).collect()
    }
}

fn prefixed(prefix: &Path, name: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(format!("_{name}.nii"));
    PathBuf::from(s)
}

fn resolve_gamma(mode: Mode, gamma: Option<usize>) -> std::result::Result<usize, Failure> {
    match (mode, gamma) {
        (Mode::Qdl, None | Some(1)) => Ok(1),
        (Mode::Qdl, Some(g)) => Err(Failure::Usage(format!("--gamma {g} conflicts with --mode qdl"))),
        (Mode::SrQdl, None) => Ok(2),
        (Mode::SrQdl, Some(g)) if g >= 2 => Ok(g),
        (Mode::SrQdl, Some(g)) => Err(Failure::Usage(format!("--mode srqdl needs --gamma >= 2, got {g}"))),
    }
}

/// Executes a parsed command; `manifest` is written next to the outputs.
pub fn execute(cli: &Cli, manifest: &str) -> std::result::Result<(), Failure> {
    match &cli.command {
        Command::Synth { out, dims, voxel_size, noise_sigma, s0, common } => {
            let cfg = PhantomConfig {
                dims: dims3(dims)?,
                voxel_size: [*voxel_size; 3],
                noise_sigma: *noise_sigma,
                s0: *s0,
                seed: common.seed,
                ..PhantomConfig::default()
            };
            let (src, tgt) = (default_source_scheme(), default_target_scheme());
            let p = generate(&cfg, &src, &tgt)?;
            fs::create_dir_all(out)?;
            save_dwi(&p.source, &out.join("source.nii"))?;
            save_dwi(&p.target, &out.join("target.nii"))?;
            p.mask.save(out.join("mask.nii"))?;
            for (name, m) in MEASURE_NAMES.iter().zip(&p.measures) {
                m.save(out.join(format!("{name}.nii")))?;
            }
            fs::write(out.join("phantom.txt"), phantom_manifest(&cfg, &src, &tgt))?;
            fs::write(manifest_path(out, true), manifest)?;
        }
        Command::FitShore { dwi, out, shore, .. } => {
            let (signals, mask) = normalized_input(dwi)?;
            let spec = shore.spec();
            let (rows, fitter) = fit_volume(&signals, &mask, &spec)?;
            let k = fitter.design().cols();
            let dims = signals.dims();
            let header = VolumeHeader::new(&[dims[0], dims[1], dims[2], k], signals.header.voxel_size, Datatype::F64);
            let nvox = signals.n_voxels();
            let mut data = vec![0.0; rows.len()];
            for v in 0..nvox {
                for c in 0..k {
                    data[v + c * nvox] = rows[v * k + c];
                }
            }
            let mut header = header;
            header.affine = signals.header.affine;
            fs::write(out, qxfer_core::write_nifti(&header, &data)?)?;
            fs::write(with_extension(out, "index.txt"), index_sidecar(&spec, &fitter.design().index_set))?;
            fs::write(manifest_path(out, false), manifest)?;
        }
        Command::Resample { dwi, target_bvals, target_bvecs, out, clip_max, shore, .. } => {
            let (signals, mask) = normalized_input(dwi)?;
            let target = parse_fsl_gradients(&fs::read_to_string(target_bvals)?, &fs::read_to_string(target_bvecs)?)?;
            let opts = ResampleOptions { clip_max: *clip_max };
            let r = resample_qspace_with(&signals, &mask, &shore.spec(), &target, opts)?;
            save_dwi(&r, out)?;
            fs::write(manifest_path(out, false), manifest)?;
        }
        Command::Downsample { input, bvals, bvecs, gamma, out, .. } => {
            match (bvals, bvecs) {
                (Some(bv), Some(bc)) => {
                    let dwi = DwiVolume::load(input, bv, bc)?;
                    save_dwi(&downsample_dwi(&dwi, *gamma)?, out)?;
                }
                _ => {
                    let vol = ScalarVolume::load(input)?;
                    let low = if vol.header.datatype == Datatype::U8 && vol.is_binary() {
                        downsample_mask(&vol, *gamma)?
                    } else {
                        downsample_scalar(&vol, *gamma)?
                    };
                    low.save(out)?;
                }
            }
            fs::write(manifest_path(out, false), manifest)?;
        }
        Command::Extract { dwi, measures, mode, gamma, out, .. } => {
            let gamma = resolve_gamma(*mode, *gamma)?;
            let (signals, mask) = normalized_input(dwi)?;
            let maps = measures.iter().map(ScalarVolume::load).collect::<Result<Vec<_>>>()?;
            let set = match mode {
                Mode::Qdl => extract_qdl(&signals, &maps, &mask, 3, 1)?,
                Mode::SrQdl => extract_sr(&signals, &maps, &mask, gamma, 5, gamma)?,
            };
            log::info!("{} samples", set.len());
            fs::write(out, set.to_bytes())?;
            fs::write(manifest_path(out, false), manifest)?;
        }
        Command::Train { input, out, train: t, common } => {
            let set = SampleSet::from_bytes(&fs::read(input)?)?;
            let g = set.geometry;
            let mut sizes = vec![g.input_len()];
            sizes.extend(&t.hidden);
            sizes.push(g.target_len());
            let model = MlpModel::init(&sizes, common.seed)?;
            let cfg = t.config(common.seed);
            let (model, history) = train(&model, &set, &cfg)?;
            fs::write(out, Checkpoint { model, config: cfg, geometry: g }.to_bytes())?;
            let mut tsv = String::from("epoch\ttrain_loss\tval_loss\n");
            for (e, (a, b)) in history.train_loss.iter().zip(&history.val_loss).enumerate() {
                tsv.push_str(&format!("{e}\t{a:.8e}\t{b:.8e}\n"));
            }
            fs::write(with_extension(out, "history.tsv"), tsv)?;
            let mut m = manifest.to_string();
            m.push_str(&format!("best_epoch = {}\n", history.best_epoch));
            fs::write(manifest_path(out, false), m)?;
        }
        Command::Predict { model, dwi, out, stride, .. } => {
            let ck = Checkpoint::from_bytes(&fs::read(model)?)?;
            let (signals, mask) = normalized_input(dwi)?;
            let maps = predict_volume(&ck.model, &signals, &mask, &ck.geometry, *stride)?;
            for (name, m) in measure_names(maps.len()).iter().zip(&maps) {
                m.save(prefixed(out, name))?;
            }
            fs::write(manifest_path(out, false), manifest)?;
        }
        Command::Evaluate { estimate, gold, mask, table, pair, out, .. } => {
            let mut s = String::new();
            if let Some(table) = table {
                let t = read_table(&fs::read_to_string(table)?)?;
                let summary = summarize(&t)?;
                s.push_str(&summary.to_key_value());
                if !pair.is_empty() {
                    if pair.len() != 2 {
                        return Err(Failure::Usage("--pair takes exactly two column names".into()));
                    }
                    let col = |n: &str| {
                        t.column(n).ok_or_else(|| Error::Invalid(format!("no column '{n}' in the table")))
                    };
                    let r = paired_t_test(&col(&pair[0])?, &col(&pair[1])?)?;
                    s.push_str(&format!("t = {:.6}\ndof = {}\np = {:.6e}\n", r.t, r.dof, r.p_two_sided));
                }
            } else {
                let Some(mask) = mask else {
                    return Err(Failure::Usage("--mask is required with --estimate/--gold".into()));
                };
                if estimate.is_empty() || estimate.len() != gold.len() {
                    return Err(Failure::Usage("--estimate and --gold need the same non-zero number of maps".into()));
                }
                let mask = ScalarVolume::load(mask)?;
                for (e, g) in estimate.iter().zip(gold) {
                    let mae = mean_abs_error(&ScalarVolume::load(e)?, &ScalarVolume::load(g)?, &mask)?;
                    let name = e.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
                    s.push_str(&format!("{name}.mae = {mae:.8e}\n"));
                }
            }
            fs::write(out, s)?;
            fs::write(manifest_path(out, false), manifest)?;
        }
        Command::Pipeline {
            mode,
            gamma,
            out,
            dims,
            noise_sigma,
            train_subjects,
            test_subjects,
            stride,
            train: t,
            shore,
            common,
        } => {
            let gamma = resolve_gamma(*mode, *gamma)?;
            let cfg = PipelineConfig {
                mode: *mode,
                gamma: gamma.max(1),
                phantom: PhantomConfig {
                    dims: dims3(dims)?,
                    noise_sigma: *noise_sigma,
                    ..PhantomConfig::default()
                },
                seed: common.seed,
                train_subjects: *train_subjects,
                test_subjects: *test_subjects,
                basis: shore.spec(),
                hidden: t.hidden.clone(),
                train: t.config(common.seed),
                stride: *stride,
                ..PipelineConfig::default()
            };
            let report = run_pipeline(&cfg)?;
            fs::create_dir_all(out)?;
            let ex = &report.example;
            for (k, name) in MEASURE_NAMES.iter().enumerate() {
                ex.learned[k].save(out.join(format!("learned_{name}.nii")))?;
                ex.baseline[k].save(out.join(format!("baseline_{name}.nii")))?;
                ex.gold[k].save(out.join(format!("gold_{name}.nii")))?;
            }
            ex.eval_mask.save(out.join("eval_mask.nii"))?;
            fs::write(out.join("errors.tsv"), report.table.to_tsv())?;
            fs::write(out.join("metrics.txt"), report.metrics())?;
            fs::write(manifest_path(out, true), manifest)?;
        }
    }
    Ok(())
}

/// Reads a table written by [`ErrorTable::to_tsv`].
pub fn read_table(text: &str) -> Result<ErrorTable> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty table".into()))?;
    let columns: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    let mut t = ErrorTable::new(columns);
    for (n, line) in lines.enumerate() {
        let row = line
            .split('\t')
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Parse(format!("table row {}: bad number '{v}'", n + 1))))
            .collect::<Result<Vec<_>>>()?;
        t.push(row)?;
    }
    Ok(t)
}

pub fn threads_of(cli: &Cli) -> usize {
    thread_count(cli.command.common().threads)
}
