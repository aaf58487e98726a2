//! The `dpose` command line: `train`, `finetune`, `scan`, `eval`.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error, 3 data or geometry error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::data::{self, oracle, ClusterSpec, DataError, LjTable, MorseParams, Oracle};
use crate::digest::Digest;
use crate::geometry::{self, GeometryError, Structure};
use crate::model::{self, init_params, Hyper, ModelError, ModelParams};
use crate::training::{self, TrainConfig, TrainError, TrainReport};
use crate::uqeval::{self, DomainTag, EvalRecord, UqError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

pub const SEED_ENV: &str = "DPOSE_SEED";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

const SYNTHETIC_HELP: &str = "\
Synthetic datasets (--synthetic NAME:key=val,key=val,...):
  lj-dimer       n=200 species=10 rmin=<0.95 r_eq> rmax=<1.05 r_eq> cutoff=5
  morse-dimer    n=200 rmin=<0.95 r_e> rmax=<1.05 r_e> de=1 a=2 re=1.2 cutoff=5
  lj-cluster     n=200 atoms=6 species=10 spread=0.15 temperature=1 seed=<run seed> cutoff=5
  morse-cluster  n=200 atoms=6 spread=0.15 temperature=1 seed=<run seed> de=1 a=2 re=1.2 cutoff=5
LJ species: 10 (eps 1 eV, sigma 1 A) and 18 (eps 2 eV, sigma 1.3 A).
Example: --synthetic lj-dimer:n=200,rmin=0.9,rmax=1.3

Config files hold one key=value per line ('#' starts a comment). Keys:
  learning_rate batch_size epochs split_fraction seed loss(nll|mse) freeze_trunk
  variance_floor adam_beta1 adam_beta2 adam_eps normalize_per_atom
  z_max embed_dim readout_dim n_interactions n_heads n_rbf cutoff rbf_gamma unbiased_variance
Seed precedence: --seed, then the config file, then $DPOSE_SEED, then 0.

Exit codes: 0 ok, 1 runtime failure, 2 usage/config error, 3 data/geometry error.";

#[derive(Debug, Parser)]
#[command(name = "dpose", version, about = "Shallow-ensemble interatomic potential with energy uncertainty", after_help = SYNTHETIC_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from scratch.
    Train(TrainArgs),
    /// Continue training a checkpoint, optionally with the trunk frozen.
    Finetune(FinetuneArgs),
    /// Bond-length or volume scan of one structure.
    Scan(ScanArgs),
    /// Accuracy and uncertainty analysis on labeled data.
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
#[group(id = "source", required = true, multiple = false, args = ["data", "synthetic"])]
pub struct DataSource {
    /// Extended-XYZ file with `energy=` labels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generated dataset, e.g. `lj-dimer:n=200`.
    #[arg(long)]
    pub synthetic: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Train only the head weights and biases.
    #[arg(long)]
    pub freeze_trunk: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub source: DataSource,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScanMode {
    Bond,
    Volume,
}

#[derive(Debug, Clone, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ScanMode,
    /// Extended-XYZ file; the first frame is scanned.
    #[arg(long)]
    pub structure: PathBuf,
    /// `A:B:N` multiples of the starting bond length (bond) or volume (volume).
    /// Defaults: 0.7:1.6:37 (bond), 0.8:1.2:21 (volume).
    #[arg(long)]
    pub range: Option<String>,
    /// `i,j` atom indices of the bond to stretch (bond mode).
    #[arg(long)]
    pub atoms: Option<String>,
    /// Output directory; scan.csv is written here. Defaults to the current directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Labeled extended-XYZ file; repeat for several datasets.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Domain tag (`in` or `out`): once for all files, or once per `--data`.
    #[arg(long, value_parser = parse_tag)]
    pub tag: Vec<DomainTag>,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_tag(s: &str) -> Result<DomainTag, String> {
    s.parse()
}

/// A failed command, with its exit code.
#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Data(_) => EXIT_DATA,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) | CliError::Data(m) => m,
        }
    }

    /// Prefixes the message, keeping the exit code.
    pub fn context(self, ctx: &str) -> Self {
        match self {
            CliError::Usage(m) => CliError::Usage(format!("{ctx}: {m}")),
            CliError::Runtime(m) => CliError::Runtime(format!("{ctx}: {m}")),
            CliError::Data(m) => CliError::Data(format!("{ctx}: {m}")),
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidArgument(m) => CliError::Usage(m),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<GeometryError> for CliError {
    fn from(e: GeometryError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidHyper(m) => CliError::Usage(format!("invalid hyperparameters: {m}")),
            ModelError::UnknownSpecies { .. } | ModelError::Geometry(_) => CliError::Data(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            TrainError::MissingLabel(_) | TrainError::EmptyDataset => CliError::Data(e.to_string()),
            TrainError::Model(m) => m.into(),
        }
    }
}

impl From<UqError> for CliError {
    fn from(e: UqError) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parses `args` (including the program name) and runs the command.
/// Diagnostics go to stderr; the return value is the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a).map(|_| ()),
        Command::Finetune(a) => cmd_finetune(a).map(|_| ()),
        Command::Scan(a) => cmd_scan(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error (exit {}): {}", e.exit_code(), e.message());
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// Values read from a flat `key=value` config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: Vec<(String, String)>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut entries = Vec::new();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected key=value, got '{line}'", k + 1)))?;
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        Ok(ConfigFile { entries })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn has(&self, key: &str) -> bool {
        self.entries.iter().any(|(k, _)| k == key)
    }

    /// Applies every entry; unknown keys are a usage error.
    pub fn apply(&self, config: &mut TrainConfig, mut hyper: Option<&mut Hyper>) -> CliResult<()> {
        for (key, value) in &self.entries {
            if config.set_kv(key, value).map_err(CliError::Usage)? {
                continue;
            }
            let known = match hyper.as_deref_mut() {
                Some(h) => h.set_kv(key, value).map_err(CliError::Usage)?,
                None => Hyper::default().set_kv(key, value).map_err(CliError::Usage)?,
            };
            if !known {
                return Err(CliError::Usage(format!("unknown config key '{key}'")));
            }
            if hyper.is_none() {
                return Err(CliError::Usage(format!("'{key}' is fixed by the checkpoint and cannot be changed")));
            }
        }
        Ok(())
    }
}

fn env_seed() -> CliResult<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn resolve_seed(flag: Option<u64>, file: &ConfigFile, config: &mut TrainConfig) -> CliResult<()> {
    if let Some(s) = flag {
        config.seed = s;
    } else if !file.has("seed") {
        if let Some(s) = env_seed()? {
            config.seed = s;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic datasets

/// A parsed `name:key=val,...` dataset description.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub name: String,
    pub params: Vec<(String, String)>,
}

const DIMER_KEYS: &[&str] = &["n", "species", "rmin", "rmax", "cutoff", "de", "a", "re"];
const CLUSTER_KEYS: &[&str] = &["n", "atoms", "species", "spread", "temperature", "seed", "cutoff", "de", "a", "re"];

impl SyntheticSpec {
    pub fn parse(s: &str) -> CliResult<Self> {
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let allowed = match name {
            "lj-dimer" | "morse-dimer" => DIMER_KEYS,
            "lj-cluster" | "morse-cluster" => CLUSTER_KEYS,
            _ => return Err(CliError::Usage(format!("unknown synthetic dataset '{name}' (see --help)"))),
        };
        let mut params = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("synthetic spec item '{item}' is not key=val")))?;
            if !allowed.contains(&k) {
                return Err(CliError::Usage(format!("'{k}' is not a parameter of {name}")));
            }
            params.push((k.to_string(), v.to_string()));
        }
        Ok(SyntheticSpec { name: name.to_string(), params })
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> CliResult<Option<T>> {
        match self.params.iter().rev().find(|(k, _)| k == key) {
            Some((_, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Usage(format!("bad value '{v}' for {key} in {}", self.name))),
            None => Ok(None),
        }
    }

    fn is_lj(&self) -> bool {
        self.name.starts_with("lj-")
    }

    /// The labeling oracle this dataset uses.
    pub fn oracle(&self) -> CliResult<Oracle> {
        let cutoff = self.get("cutoff")?.unwrap_or(5.0);
        if self.is_lj() {
            Ok(Oracle::LennardJones { table: LjTable::two_species(), cutoff })
        } else {
            let d = MorseParams::default();
            let params = MorseParams {
                d_e: self.get("de")?.unwrap_or(d.d_e),
                a: self.get("a")?.unwrap_or(d.a),
                r_e: self.get("re")?.unwrap_or(d.r_e),
            };
            Ok(Oracle::Morse { params, cutoff })
        }
    }

    pub fn generate(&self, run_seed: u64) -> CliResult<Vec<Structure>> {
        let oracle = self.oracle()?;
        let species = self.get("species")?.unwrap_or(oracle::SPECIES_A);
        let n: usize = self.get("n")?.unwrap_or(200);
        if self.name.ends_with("-dimer") {
            let r_eq = oracle.r_eq(species)?;
            let r_min = self.get("rmin")?.unwrap_or(0.95 * r_eq);
            let r_max = self.get("rmax")?.unwrap_or(1.05 * r_eq);
            Ok(data::gen_dimer_scan_dataset(species, r_min, r_max, n, &oracle)?)
        } else {
            let d = ClusterSpec::default();
            let spec = ClusterSpec {
                n_atoms: self.get("atoms")?.unwrap_or(d.n_atoms),
                species,
                spread: self.get("spread")?.unwrap_or(d.spread),
                temperature: self.get("temperature")?.unwrap_or(d.temperature),
                count: n,
                seed: self.get("seed")?.unwrap_or(run_seed),
            };
            Ok(data::gen_boltzmann_cluster_dataset(&spec, &oracle)?)
        }
    }
}

struct Dataset {
    structures: Vec<Structure>,
    description: String,
    digest: Digest,
    synthetic: Option<String>,
}

fn read_extxyz(path: &Path) -> CliResult<(Vec<Structure>, Digest)> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let text = String::from_utf8(bytes)
        .map_err(|_| CliError::Data(format!("{} is not valid UTF-8", path.display())))?;
    let structures = data::parse_extxyz(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok((structures, Digest::of_bytes(text.as_bytes())))
}

fn load_dataset(source: &DataSource, seed: u64) -> CliResult<Dataset> {
    match (&source.data, &source.synthetic) {
        (Some(path), None) => {
            let (structures, digest) = read_extxyz(path)?;
            Ok(Dataset { structures, description: format!("file:{}", path.display()), digest, synthetic: None })
        }
        (None, Some(spec)) => {
            let structures = SyntheticSpec::parse(spec)?.generate(seed)?;
            let digest = Digest::of_bytes(data::write_extxyz(&structures)?.as_bytes());
            Ok(Dataset { structures, description: format!("synthetic:{spec}"), digest, synthetic: Some(spec.clone()) })
        }
        _ => Err(CliError::Usage("exactly one of --data or --synthetic is required".into())),
    }
}

fn check_labels(structures: &[Structure]) -> CliResult<()> {
    if structures.is_empty() {
        return Err(CliError::Data("dataset is empty".into()));
    }
    if let Some(k) = structures.iter().position(|s| s.ref_energy.is_none()) {
        return Err(CliError::Data(format!("structure {k} has no energy= label")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Output helpers

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn report_csv(report: &TrainReport) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    writeln!(out, "0,{},{}", report.initial_train_loss, report.initial_val_loss).unwrap();
    for (k, (t, v)) in report.train_loss.iter().zip(&report.val_loss).enumerate() {
        writeln!(out, "{},{t},{v}", k + 1).unwrap();
    }
    out
}

/// Outcome of `train` or `finetune`.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub digest: Digest,
    pub report: TrainReport,
}

#[allow(clippy::too_many_arguments)]
fn finish_training(
    command: &str,
    out: &Path,
    params: &ModelParams,
    config: &TrainConfig,
    report: TrainReport,
    dataset: &Dataset,
    extra_manifest: &[(String, String)],
    mut meta: Vec<(String, String)>,
) -> CliResult<TrainOutcome> {
    create_dir(out)?;
    if let Some(spec) = &dataset.synthetic {
        meta.push(("synthetic".into(), spec.clone()));
    }
    meta.push(("command".into(), command.into()));
    let ckpt = out.join(CHECKPOINT_FILE);
    let digest = data::save_checkpoint(&ckpt, params, config, &meta).map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(&out.join("train_report.csv"), &report_csv(&report))?;

    let mut m = String::new();
    writeln!(m, "command={command}").unwrap();
    writeln!(m, "seed={}", config.seed).unwrap();
    writeln!(m, "data={}", dataset.description).unwrap();
    writeln!(m, "data_digest={}", dataset.digest).unwrap();
    writeln!(m, "n_structures={}", dataset.structures.len()).unwrap();
    for (k, v) in extra_manifest {
        writeln!(m, "{k}={v}").unwrap();
    }
    for (k, v) in config.to_kv() {
        writeln!(m, "config.{k}={v}").unwrap();
    }
    for (k, v) in params.hyper.to_kv() {
        writeln!(m, "hyper.{k}={v}").unwrap();
    }
    writeln!(m, "freeze_mask={}", report.freeze_summary).unwrap();
    writeln!(m, "n_train={}", report.n_train).unwrap();
    writeln!(m, "n_val={}", report.n_val).unwrap();
    writeln!(m, "checkpoint={CHECKPOINT_FILE}").unwrap();
    writeln!(m, "checkpoint_digest={digest}").unwrap();
    write_file(&out.join("manifest.txt"), &m)?;

    let last = |v: &[f64], init: f64| v.last().copied().unwrap_or(init);
    println!(
        "{command}: {} epochs, train loss {} -> {}, val loss {} -> {}",
        config.epochs,
        report.initial_train_loss,
        last(&report.train_loss, report.initial_train_loss),
        report.initial_val_loss,
        last(&report.val_loss, report.initial_val_loss)
    );
    println!("checkpoint {} (sha256 {digest})", ckpt.display());
    Ok(TrainOutcome { checkpoint: ckpt, digest, report })
}

// ---------------------------------------------------------------------------
// Commands

pub fn cmd_train(args: &TrainArgs) -> CliResult<TrainOutcome> {
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut config = TrainConfig::default();
    let mut hyper = Hyper::default();
    file.apply(&mut config, Some(&mut hyper))?;
    resolve_seed(args.seed, &file, &mut config)?;
    config.validate()?;
    hyper.validate()?;

    let dataset = load_dataset(&args.source, config.seed)?;
    check_labels(&dataset.structures)?;
    if !file.has("normalize_per_atom") {
        config.normalize_per_atom = dataset.structures.iter().any(Structure::is_periodic);
    }
    let mut params = init_params(&hyper, config.seed)?;
    training::set_energy_offset(&mut params, training::mean_energy_per_atom(&dataset.structures)?);
    let (trained, report) = training::train(&params, &dataset.structures, &config)?;
    if !trained.is_finite() {
        return Err(CliError::Runtime("training diverged (non-finite parameters)".into()));
    }
    finish_training("train", &args.out, &trained, &config, report, &dataset, &[], Vec::new())
}

pub fn cmd_finetune(args: &FinetuneArgs) -> CliResult<TrainOutcome> {
    let bytes = fs::read(&args.checkpoint)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", args.checkpoint.display())))?;
    let ckpt = data::checkpoint::decode(&bytes)?;
    let file = match &args.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let mut config = ckpt.config.clone();
    file.apply(&mut config, None)?;
    resolve_seed(args.seed, &file, &mut config)?;
    config.freeze_trunk = args.freeze_trunk || (file.has("freeze_trunk") && config.freeze_trunk);
    config.validate()?;

    let dataset = load_dataset(&args.source, config.seed)?;
    check_labels(&dataset.structures)?;
    if !file.has("normalize_per_atom") {
        config.normalize_per_atom = dataset.structures.iter().any(Structure::is_periodic);
    }
    let (tuned, report) = training::train(&ckpt.params, &dataset.structures, &config)?;
    if !tuned.is_finite() {
        return Err(CliError::Runtime("fine-tuning diverged (non-finite parameters)".into()));
    }
    let extra = vec![
        ("base_checkpoint".to_string(), args.checkpoint.display().to_string()),
        ("base_checkpoint_digest".to_string(), ckpt.digest.to_hex()),
        ("base_trunk_digest".to_string(), ckpt.params.trunk_digest().to_hex()),
        ("trunk_digest".to_string(), tuned.trunk_digest().to_hex()),
    ];
    let meta = vec![("base_checkpoint_digest".to_string(), ckpt.digest.to_hex())];
    finish_training("finetune", &args.out, &tuned, &config, report, &dataset, &extra, meta)
}

/// `A:B:N` with `N >= 1` points.
pub fn parse_range(s: &str) -> CliResult<(f64, f64, usize)> {
    let bad = || CliError::Usage(format!("--range expects A:B:N, got '{s}'"));
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts.as_slice() else { return Err(bad()) };
    let a: f64 = a.trim().parse().map_err(|_| bad())?;
    let b: f64 = b.trim().parse().map_err(|_| bad())?;
    let n: usize = n.trim().parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() || a <= 0.0 || b <= 0.0 {
        return Err(CliError::Usage(format!("--range needs positive A, B and N >= 1, got '{s}'")));
    }
    Ok((a, b, n))
}

fn range_points(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    (0..n).map(|k| if k == n - 1 { b } else { a + (b - a) * k as f64 / (n - 1) as f64 }).collect()
}

fn parse_atoms(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("--atoms expects i,j, got '{s}'"));
    let (i, j) = s.split_once(',').ok_or_else(bad)?;
    Ok((i.trim().parse().map_err(|_| bad())?, j.trim().parse().map_err(|_| bad())?))
}

/// One row of scan.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    /// Bond length (Å) or volume per atom (Å³).
    pub coordinate: f64,
    pub mean_energy: f64,
    pub sigma: f64,
    pub sigma_per_atom: f64,
    pub oracle_energy: Option<f64>,
}

/// Scans `structure` and evaluates the model (and oracle, if given) at each point.
pub fn scan_structure(
    params: &ModelParams,
    structure: &Structure,
    mode: ScanMode,
    factors: &[f64],
    atoms: Option<(usize, usize)>,
    oracle: Option<&Oracle>,
) -> CliResult<Vec<ScanRow>> {
    let frames: Vec<(f64, Structure)> = match mode {
        ScanMode::Bond => {
            let (i, j) = atoms.ok_or_else(|| CliError::Usage("bond mode requires --atoms i,j".into()))?;
            let d0 = structure.distance(i, j)?;
            factors
                .iter()
                .map(|f| Ok((f * d0, geometry::stretch_bond(structure, i, j, f * d0)?)))
                .collect::<CliResult<_>>()?
        }
        ScanMode::Volume => factors
            .iter()
            .map(|&f| {
                let s = geometry::scale_volume(structure, f)?;
                Ok((s.volume_per_atom().unwrap_or(f64::NAN), s))
            })
            .collect::<CliResult<_>>()?,
    };
    frames
        .par_iter()
        .map(|(x, s)| {
            let pred = model::predict(params, s)?;
            let oracle_energy = oracle.map(|o| o.energy(s)).transpose()?;
            Ok(ScanRow {
                coordinate: *x,
                mean_energy: pred.mean,
                sigma: pred.sigma(),
                sigma_per_atom: pred.sigma_per_atom,
                oracle_energy,
            })
        })
        .collect()
}

pub fn scan_csv(rows: &[ScanRow]) -> String {
    let with_oracle = rows.iter().all(|r| r.oracle_energy.is_some()) && !rows.is_empty();
    let mut out = String::from("coordinate,mean_energy_eV,sigma_eV,sigma_per_atom_eV");
    if with_oracle {
        out.push_str(",oracle_energy_eV,relative_energy_eV");
    }
    out.push('\n');
    for r in rows {
        write!(out, "{},{},{},{}", r.coordinate, r.mean_energy, r.sigma, r.sigma_per_atom).unwrap();
        if let (true, Some(e)) = (with_oracle, r.oracle_energy) {
            write!(out, ",{e},{}", r.mean_energy - e).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn cmd_scan(args: &ScanArgs) -> CliResult<()> {
    let range = match (&args.range, args.mode) {
        (Some(r), _) => parse_range(r)?,
        (None, ScanMode::Bond) => (0.7, 1.6, 37),
        (None, ScanMode::Volume) => (0.8, 1.2, 21),
    };
    let atoms = match (&args.atoms, args.mode) {
        (Some(a), _) => Some(parse_atoms(a)?),
        (None, ScanMode::Bond) => return Err(CliError::Usage("bond mode requires --atoms i,j".into())),
        (None, ScanMode::Volume) => None,
    };
    let ckpt = data::load_checkpoint(&args.checkpoint)?;
    let (frames, _) = read_extxyz(&args.structure)?;
    let structure = frames
        .into_iter()
        .next()
        .ok_or_else(|| CliError::Data(format!("{} holds no structures", args.structure.display())))?;
    if args.mode == ScanMode::Volume && !structure.is_fully_periodic() {
        return Err(GeometryError::NotPeriodic.into());
    }
    let oracle = ckpt.meta("synthetic").map(|s| SyntheticSpec::parse(s)?.oracle()).transpose()?;
    let rows = scan_structure(&ckpt.params, &structure, args.mode, &range_points(range.0, range.1, range.2), atoms, oracle.as_ref())?;
    create_dir(&args.out)?;
    let path = args.out.join("scan.csv");
    write_file(&path, &scan_csv(&rows))?;
    println!("scan: {} points written to {}", rows.len(), path.display());
    Ok(())
}

/// Evaluates labeled structures; ids are `<label>#<index>`.
pub fn evaluate(params: &ModelParams, structures: &[Structure], label: &str, tag: DomainTag) -> CliResult<Vec<EvalRecord>> {
    check_labels(structures)?;
    structures
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let pred = model::predict(params, s)?;
            Ok(EvalRecord::new(format!("{label}#{k}"), &pred, s.ref_energy.unwrap_or(f64::NAN), tag))
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NaN".to_string(), |x| x.to_string())
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(
        "id,n_atoms,true_energy_eV,predicted_mean_eV,variance_eV2,sigma_per_atom_eV,abs_error_eV,domain_tag\n",
    );
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.id, r.n_atoms, r.true_energy, r.predicted_mean, r.variance, r.sigma_per_atom, r.abs_error, r.domain_tag
        )
        .unwrap();
    }
    out
}

pub fn metrics_csv(records: &[EvalRecord]) -> CliResult<String> {
    let mut out = String::from("tag,n,r2,rmse_eV,mae_eV\n");
    let mut tags: Vec<DomainTag> = records.iter().map(|r| r.domain_tag).collect();
    tags.sort();
    tags.dedup();
    let mut groups: Vec<(String, Vec<EvalRecord>)> = tags
        .iter()
        .map(|t| (t.to_string(), records.iter().filter(|r| r.domain_tag == *t).cloned().collect()))
        .collect();
    if tags.len() > 1 {
        groups.push(("all".into(), records.to_vec()));
    }
    for (name, rs) in groups {
        if rs.len() < 2 {
            let e = rs.first().map(|r| r.abs_error).unwrap_or(f64::NAN);
            writeln!(out, "{name},{},NaN,{e},{e}", rs.len()).unwrap();
            continue;
        }
        let m = uqeval::parity_metrics(&rs)?;
        writeln!(out, "{name},{},{},{},{}", rs.len(), opt(m.r2), m.rmse, m.mae).unwrap();
    }
    Ok(out)
}

pub fn variance_summary_csv(records: &[EvalRecord]) -> CliResult<String> {
    let mut out = String::from("tag,count");
    for q in ["min", "q1", "median", "q3", "max", "mean"] {
        write!(out, ",sigma_per_atom_{q}_eV").unwrap();
    }
    for q in ["min", "q1", "median", "q3", "max", "mean"] {
        write!(out, ",variance_{q}_eV2").unwrap();
    }
    out.push('\n');
    for (tag, g) in uqeval::variance_summary(records)? {
        let s = g.sigma_per_atom;
        let v = g.variance;
        writeln!(
            out,
            "{tag},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            g.count, s.min, s.q1, s.median, s.q3, s.max, s.mean, v.min, v.q1, v.median, v.q3, v.max, v.mean
        )
        .unwrap();
    }
    Ok(out)
}

pub fn profile_csv(bins: &[uqeval::ProfileBin]) -> String {
    let mut out = String::from("bin,count,mean_energy_eV,mean_variance_eV2,mean_abs_error_eV\n");
    for b in bins {
        writeln!(out, "{},{},{},{},{}", b.bin, b.count, b.mean_energy, b.mean_variance, b.mean_abs_error).unwrap();
    }
    out
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let tags: Vec<DomainTag> = match args.tag.len() {
        0 => vec![DomainTag::Unlabeled; args.data.len()],
        1 => vec![args.tag[0]; args.data.len()],
        n if n == args.data.len() => args.tag.clone(),
        n => return Err(CliError::Usage(format!("{n} --tag values for {} --data files", args.data.len()))),
    };
    if args.bins == 0 {
        return Err(CliError::Usage("--bins must be >= 1".into()));
    }
    let ckpt = data::load_checkpoint(&args.checkpoint)?;
    let mut records = Vec::new();
    for (path, tag) in args.data.iter().zip(&tags) {
        let (structures, _) = read_extxyz(path)?;
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        records.extend(
            evaluate(&ckpt.params, &structures, &label, *tag)
                .map_err(|e| e.context(&path.display().to_string()))?,
        );
    }
    let profile = uqeval::energy_sorted_profile(&records, args.bins)?;

    create_dir(&args.out)?;
    write_file(&args.out.join("records.csv"), &records_csv(&records))?;
    write_file(&args.out.join("metrics.csv"), &metrics_csv(&records)?)?;
    write_file(&args.out.join("variance_summary.csv"), &variance_summary_csv(&records)?)?;
    write_file(&args.out.join("profile.csv"), &profile_csv(&profile))?;

    println!("eval: {} structures, outputs in {}", records.len(), args.out.display());
    if profile.len() >= 3 {
        let idx: Vec<f64> = profile.iter().map(|b| b.bin as f64).collect();
        let var: Vec<f64> = profile.iter().map(|b| b.mean_variance).collect();
        let mae: Vec<f64> = profile.iter().map(|b| b.mean_abs_error).collect();
        let show = |r: Result<f64, UqError>| r.map_or_else(|e| e.to_string(), |v| v.to_string());
        println!(
            "rank correlation with energy bin: variance {}, abs error {}",
            show(uqeval::rank_correlation(&idx, &var)),
            show(uqeval::rank_correlation(&idx, &mae))
        );
    }
    Ok(())
}
