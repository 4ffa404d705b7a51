use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tpnb::canonical;
use tpnb::dataset::{load_fragment_csv, partition_vertical, write_fragment_csv, LabelColumn};
use tpnb::envelope::{Scheme, MIN_RSA_BITS};
use tpnb::harness::{
    format_baseline_table, format_report_table, format_sweep_table, load_table, run_baseline,
    run_experiment, sweep_noise, ExperimentConfig, HarnessError,
};
use tpnb::perturb::{NoiseFamily, NoiseMode};
use tpnb::protocol::{Coordinator, CoordinatorConfig, Party, PartyConfig, UploadMode};
use tpnb::session::{run_party_tcp, serve_coordinator, TransportKind};
use tpnb::transport::tcp_listen;

#[derive(Parser)]
#[command(
    name = "tpnb",
    version,
    about = "Gaussian naive Bayes over vertically partitioned, noise-perturbed data"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a full experiment: distributed perturbed model vs plaintext baseline.
    Run(ExperimentArgs),
    /// Run the experiment once per noise ratio on identical splits.
    Sweep(SweepArgs),
    /// Evaluate the centralized plaintext model only.
    Baseline(ExperimentArgs),
    /// Serve one session as the coordinator over TCP.
    Coordinator(CoordinatorArgs),
    /// Join a coordinator over TCP with one fragment.
    Party(PartyArgs),
    /// Split a dataset into per-site fragment files.
    Partition(PartitionArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Uniform,
}

impl From<FamilyArg> for NoiseFamily {
    fn from(a: FamilyArg) -> Self {
        match a {
            FamilyArg::Gaussian => NoiseFamily::Gaussian,
            FamilyArg::Uniform => NoiseFamily::Uniform,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Tcp,
}

impl From<TransportArg> for TransportKind {
    fn from(a: TransportArg) -> Self {
        match a {
            TransportArg::InProcess => TransportKind::InProcess,
            TransportArg::Tcp => TransportKind::TcpLoopback,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvelopeArg {
    Rsa,
    /// No encryption or signatures. Testing only.
    Null,
}

impl From<EnvelopeArg> for Scheme {
    fn from(a: EnvelopeArg) -> Self {
        match a {
            EnvelopeArg::Rsa => Scheme::Rsa,
            EnvelopeArg::Null => Scheme::Null,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum UploadArg {
    Statistics,
    Records,
}

impl From<UploadArg> for UploadMode {
    fn from(a: UploadArg) -> Self {
        match a {
            UploadArg::Statistics => UploadMode::Statistics,
            UploadArg::Records => UploadMode::Records,
        }
    }
}

#[derive(Args)]
struct NoiseArgs {
    /// Noise variance as a fraction of each column's sample variance.
    #[arg(long, conflicts_with = "noise_variance")]
    noise_ratio: Option<f64>,
    /// Absolute noise variance for every column.
    #[arg(long)]
    noise_variance: Option<f64>,
    #[arg(long, value_enum)]
    noise_family: Option<FamilyArg>,
}

impl NoiseArgs {
    fn mode(&self) -> Option<NoiseMode> {
        match (self.noise_ratio, self.noise_variance) {
            (Some(r), _) => Some(NoiseMode::RatioOfSampleVariance(r)),
            (_, Some(v)) => Some(NoiseMode::Absolute(v)),
            _ => None,
        }
    }
}

#[derive(Args)]
struct SplitArgs {
    /// Seed of the train/test splits.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Use k-fold cross-validation within each repeat.
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label column, by header name or zero-based index.
    #[arg(long)]
    label: Option<LabelColumn>,
    #[arg(long)]
    sites: Option<usize>,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Seed of the sites' noise streams.
    #[arg(long)]
    noise_seed: Option<u64>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    #[arg(long, value_enum)]
    envelope: Option<EnvelopeArg>,
    #[arg(long, value_enum)]
    upload: Option<UploadArg>,
    /// Add site noise to test instances before classifying them.
    #[arg(long)]
    perturbed_test: bool,
    /// Write the JSON report here and print the table to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leave wall-clock timings out of the report.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    experiment: ExperimentArgs,
    /// Noise ratios to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.25,0.5,1")]
    ratios: Vec<f64>,
}

#[derive(Args)]
struct CoordinatorArgs {
    /// Address to listen on, e.g. 127.0.0.1:7000.
    #[arg(long)]
    listen: String,
    /// Sites to wait for before starting.
    #[arg(long, default_value_t = 3)]
    sites: usize,
    #[arg(long, default_value = "session-0")]
    session_id: String,
    #[command(flatten)]
    split: SplitArgs,
    /// Which split of the plan to train on.
    #[arg(long, default_value_t = 0)]
    split_index: usize,
    #[command(flatten)]
    noise: NoiseArgs,
    #[arg(long, value_enum, default_value = "rsa")]
    envelope: EnvelopeArg,
    #[arg(long, value_enum, default_value = "statistics")]
    upload: UploadArg,
    /// Per-phase deadline.
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Write the model JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PartyArgs {
    #[arg(long)]
    connect: String,
    /// Fragment CSV with header `row_id,<attributes...>,<label>`.
    #[arg(long)]
    fragment: PathBuf,
    #[arg(long, default_value_t = 0)]
    site_id: u32,
    /// Position of the fragment's first attribute in the full table.
    #[arg(long, default_value_t = 0)]
    first_attribute: usize,
    /// Seed of this site's noise streams.
    #[arg(long, default_value_t = 1)]
    noise_seed: u64,
    #[arg(long, value_enum, default_value = "rsa")]
    envelope: EnvelopeArg,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Write the received model JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PartitionArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    label: LabelColumn,
    #[arg(long, default_value_t = 3)]
    sites: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    fn protocol(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Self {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Coordinator(a) => cmd_coordinator(a),
        Command::Party(a) => cmd_party(a),
        Command::Partition(a) => cmd_partition(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn build_config(a: &ExperimentArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| Failure::usage(e.to_string()))?
        }
        None => {
            let (Some(dataset), Some(label)) = (&a.dataset, &a.label) else {
                return Err(Failure::usage("either --config or both --dataset and --label are required"));
            };
            ExperimentConfig::new(dataset.clone(), label.clone())
        }
    };
    if let Some(d) = &a.dataset {
        cfg.dataset_path = d.clone();
    }
    if let Some(l) = &a.label {
        cfg.label_column = l.clone();
    }
    if let Some(s) = a.sites {
        cfg.num_sites = s;
    }
    apply_split(&mut cfg.split_plan, &a.split);
    if let Some(m) = a.noise.mode() {
        cfg.noise_mode = m;
    }
    if let Some(f) = a.noise.noise_family {
        cfg.noise_family = f.into();
    }
    if let Some(s) = a.noise_seed {
        cfg.noise_seed = s;
    }
    if let Some(t) = a.transport {
        cfg.transport = t.into();
    }
    if let Some(e) = a.envelope {
        cfg.envelope = e.into();
    }
    if let Some(u) = a.upload {
        cfg.upload = u.into();
    }
    if a.perturbed_test {
        cfg.perturbed_test = true;
    }
    if let Some(o) = &a.out {
        cfg.output_path = Some(o.clone());
    }
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn apply_split(plan: &mut tpnb::dataset::SplitPlan, a: &SplitArgs) {
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Some(f) = a.train_fraction {
        plan.train_fraction = f;
    }
    if let Some(r) = a.repeats {
        plan.repeats = r;
    }
    if a.folds.is_some() {
        plan.folds = a.folds;
    }
}

/// Sends `json` to `out` (table to stdout) or to stdout (table to stderr).
fn emit(json: &str, table: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => {
            std::fs::write(path, format!("{json}\n"))
                .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display())))?;
            print!("{table}");
        }
        None => {
            eprint!("{table}");
            println!("{json}");
        }
    }
    Ok(())
}

fn cmd_run(a: ExperimentArgs) -> CliResult {
    let cfg = build_config(&a)?;
    let mut report = run_experiment(&cfg)?;
    if a.no_timing {
        report = report.without_timing();
    }
    emit(&report.to_json(), &format_report_table(&report), a.out.as_deref())
}

fn cmd_sweep(a: SweepArgs) -> CliResult {
    let cfg = build_config(&a.experiment)?;
    let mut reports = sweep_noise(&cfg, &a.ratios)?;
    if a.experiment.no_timing {
        reports = reports.iter().map(|r| r.without_timing()).collect();
    }
    emit(&canonical::to_string(&reports), &format_sweep_table(&reports), a.experiment.out.as_deref())
}

fn cmd_baseline(a: ExperimentArgs) -> CliResult {
    let cfg = build_config(&a)?;
    let report = run_baseline(&cfg)?;
    emit(&canonical::to_string(&report), &format_baseline_table(&report), a.out.as_deref())
}

fn write_model(json: &str, out: Option<&Path>) -> CliResult {
    match out {
        Some(path) => std::fs::write(path, format!("{json}\n"))
            .map_err(|e| Failure::data(format!("cannot write {}: {e}", path.display()))),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

fn cmd_coordinator(a: CoordinatorArgs) -> CliResult {
    let mut config = CoordinatorConfig {
        session_id: a.session_id.clone(),
        min_sites: a.sites,
        split_index: a.split_index,
        scheme: a.envelope.into(),
        upload: a.upload.into(),
        key_bits: MIN_RSA_BITS,
        ..CoordinatorConfig::default()
    };
    apply_split(&mut config.split_plan, &a.split);
    if let Some(m) = a.noise.mode() {
        config.noise_mode = m;
    }
    if let Some(f) = a.noise.noise_family {
        config.noise_family = f.into();
    }
    let coordinator = Coordinator::new(config).map_err(|e| Failure::protocol(e.to_string()))?;
    let listener = tcp_listen(a.listen.as_str()).map_err(|e| Failure::usage(e.to_string()))?;
    let local = listener.local_addr().map_err(|e| Failure::usage(e.to_string()))?;
    eprintln!("listening on {local}");
    let outcome = serve_coordinator(listener, coordinator, Duration::from_secs(a.timeout_secs))
        .map_err(|e| Failure::protocol(e.to_string()))?;
    write_model(&outcome.model_json, a.out.as_deref())
}

fn resolve(addr: &str) -> Result<SocketAddr, Failure> {
    addr.to_socket_addrs()
        .map_err(|e| Failure::usage(format!("bad address `{addr}`: {e}")))?
        .next()
        .ok_or_else(|| Failure::usage(format!("address `{addr}` resolves to nothing")))
}

fn cmd_party(a: PartyArgs) -> CliResult {
    let addr = resolve(&a.connect)?;
    let fragment = load_fragment_csv(&a.fragment, a.site_id, a.first_attribute)
        .map_err(|e| Failure::data(e.to_string()))?;
    let party = Party::new(
        Arc::new(fragment),
        PartyConfig {
            scheme: a.envelope.into(),
            key_bits: MIN_RSA_BITS,
            noise_seed: a.noise_seed,
        },
    );
    let party = run_party_tcp(addr, party, Duration::from_secs(a.timeout_secs))
        .map_err(|e| Failure::protocol(e.to_string()))?;
    let model = party
        .model()
        .ok_or_else(|| Failure::protocol("session ended without a model"))?;
    write_model(&model.to_canonical_json(), a.out.as_deref())
}

fn cmd_partition(a: PartitionArgs) -> CliResult {
    let cfg = ExperimentConfig::new(a.dataset.clone(), a.label.clone());
    let table = load_table(&cfg)?;
    let fragments = partition_vertical(&table, a.sites).map_err(|e| Failure::data(e.to_string()))?;
    std::fs::create_dir_all(&a.out_dir)
        .map_err(|e| Failure::data(format!("cannot create {}: {e}", a.out_dir.display())))?;
    for f in &fragments {
        let path = a.out_dir.join(format!("site-{}.csv", f.site_id));
        write_fragment_csv(f, &path).map_err(|e| Failure::data(e.to_string()))?;
        println!(
            "{}\tsite {}\tfirst attribute {}\t{}",
            path.display(),
            f.site_id,
            f.attribute_indices[0],
            f.attribute_names.join(",")
        );
    }
    Ok(())
}
