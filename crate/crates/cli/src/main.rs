use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bjq_core::data_model::TrialDataset;
use bjq_core::ingest::{self, CsvSchema};
use bjq_core::q_learning::{
    backward_induction, optimal_decision, q_values, CvSettings, Method, Mode, Policy, QConfig,
};
use bjq_core::simulation::{self, RunConfig};
use clap::{Args, Parser, Subcommand};
use tempfile::NamedTempFile;

#[derive(Parser)]
#[command(name = "bjq", version, about = "Buckley-James boosting Q-learning for censored treatment regimes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run replicated simulation experiments and summarize decision accuracy.
    Simulate(SimulateArgs),
    /// Fit a treatment policy to a trial CSV and write it as JSON.
    Fit(FitArgs),
    /// Apply a fitted policy to a trial CSV.
    Evaluate(EvaluateArgs),
    /// Split single-stage follow-up into two stages at a random cutoff.
    SplitStages(SplitArgs),
    /// Summarize a raw results CSV.
    Report(ReportArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Boosting iterations.
    #[arg(long)]
    iterations: Option<usize>,
    /// Boosting learning rate.
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Tree depth for bj-tree.
    #[arg(long)]
    max_depth: Option<usize>,
    /// Minimum leaf size for bj-tree.
    #[arg(long)]
    min_leaf: Option<usize>,
    /// Fit earlier stages on pseudo-outcomes carrying the best next-stage value.
    #[arg(long, conflicts_with = "additive")]
    backward: bool,
    /// Fit every stage on its own outcomes and add stage values (default).
    #[arg(long)]
    additive: bool,
}

impl ModelArgs {
    fn mode(&self) -> Mode {
        if self.backward {
            Mode::Backward
        } else {
            Mode::Additive
        }
    }

    fn q_config(&self) -> QConfig {
        let mut q = QConfig::default();
        for cfg in [&mut q.tree, &mut q.componentwise] {
            if let Some(m) = self.iterations {
                cfg.iterations = m;
            }
            if let Some(nu) = self.learning_rate {
                cfg.learning_rate = nu;
            }
        }
        if let Some(d) = self.max_depth {
            q.tree.max_depth = d;
        }
        if let Some(l) = self.min_leaf {
            q.tree.min_leaf = l;
        }
        q
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stages: u8,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    reps: usize,
    /// Comma-separated methods from bj, bj-ls, bj-tree, cox.
    #[arg(long, value_delimiter = ',', default_value = "bj,bj-ls,bj-tree,cox")]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Raw results CSV. The summary goes next to it as `<stem>_summary.csv`.
    #[arg(long)]
    out: PathBuf,
    /// Censor each stage against the censoring time directly.
    #[arg(long)]
    literal_censoring: bool,
    /// Also write per-subject true and estimated Q-values as `<stem>_q.csv`.
    #[arg(long)]
    dump_q: bool,
    /// Worker threads (default: all processors).
    #[arg(long, env = "BJQ_JOBS")]
    jobs: Option<usize>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct InputArgs {
    /// Trial CSV.
    #[arg(long)]
    input: PathBuf,
    /// Input is in the long stage-per-row format.
    #[arg(long)]
    long: bool,
    /// Time column of a wide CSV.
    #[arg(long)]
    time: Option<String>,
    /// Event column (1 = event, 0 = censored).
    #[arg(long)]
    event: Option<String>,
    /// Treatment column.
    #[arg(long)]
    treatment: Option<String>,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Subject id column.
    #[arg(long)]
    id: Option<String>,
    /// Treatment code mapping such as `1=0,3=1`.
    #[arg(long, value_delimiter = ',')]
    arm_map: Vec<String>,
    /// Treatment codes whose rows are skipped.
    #[arg(long, value_delimiter = ',')]
    drop_codes: Vec<String>,
    /// Mean-impute missing covariates instead of failing.
    #[arg(long)]
    impute_missing: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value = "bj-tree")]
    method: Method,
    /// Tune iterations by K-fold cross-validation.
    #[arg(long)]
    cv_folds: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Policy JSON.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    policy: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    /// Decisions CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 120.0)]
    cutoff_low: f64,
    #[arg(long, default_value_t = 180.0)]
    cutoff_high: f64,
    #[arg(long, default_value_t = 0.7)]
    keep_prob: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Long-format two-stage CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Raw results CSV.
    #[arg(long)]
    input: PathBuf,
    /// Summary CSV.
    #[arg(long)]
    out: PathBuf,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    fn runtime(context: impl std::fmt::Display, e: impl std::fmt::Display) -> Self {
        CliError::Runtime(format!("{context}: {e}"))
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SplitStages(a) => split_stages(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

/// Output files staged next to their targets and renamed into place together,
/// so a failed command leaves no partial files behind.
struct Outputs {
    staged: Vec<(NamedTempFile, PathBuf)>,
}

impl Outputs {
    fn new() -> Self {
        Self { staged: Vec::new() }
    }

    fn add<F>(&mut self, path: &Path, write: F) -> CliResult<()>
    where
        F: FnOnce(&mut dyn Write) -> Result<(), String>,
    {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp =
            NamedTempFile::new_in(dir).map_err(|e| CliError::runtime(path.display(), e))?;
        {
            let mut w = io::BufWriter::new(tmp.as_file_mut());
            write(&mut w).map_err(|e| CliError::runtime(path.display(), e))?;
            w.flush().map_err(|e| CliError::runtime(path.display(), e))?;
        }
        self.staged.push((tmp, path.to_path_buf()));
        Ok(())
    }

    fn commit(self) -> CliResult<()> {
        for (tmp, path) in self.staged {
            tmp.persist(&path)
                .map_err(|e| CliError::runtime(path.display(), e.error))?;
        }
        Ok(())
    }
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "results".into());
    path.with_file_name(format!("{stem}_{suffix}.csv"))
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::runtime(path.display(), e))
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    if a.n < 10 {
        return Err(CliError::Usage("--n must be at least 10".into()));
    }
    if a.jobs == Some(0) {
        return Err(CliError::Usage("--jobs must be positive".into()));
    }
    let mut cfg = RunConfig::new(a.methods.clone(), a.n, a.stages as usize, a.reps, a.seed);
    cfg.dgp.literal_censoring = a.literal_censoring;
    cfg.mode = a.model.mode();
    cfg.q = a.model.q_config();
    cfg.jobs = a.jobs;
    cfg.dump_q = a.dump_q;

    let out = simulation::run_replications(&cfg).map_err(|e| CliError::runtime("simulate", e))?;
    for row in out.results.failures() {
        eprintln!(
            "warning: rep {} {} failed: {}",
            row.rep,
            row.method,
            row.reason.as_deref().unwrap_or("unknown")
        );
    }
    let summary = simulation::summarize(&out.results);

    let mut outputs = Outputs::new();
    outputs.add(&a.out, |w| {
        simulation::write_results_csv(w, &out.results).map_err(|e| e.to_string())
    })?;
    outputs.add(&sibling(&a.out, "summary"), |w| {
        simulation::write_summary_csv(w, &summary).map_err(|e| e.to_string())
    })?;
    if a.dump_q {
        outputs.add(&sibling(&a.out, "q"), |w| {
            simulation::write_qdump_csv(w, &out.q_dump).map_err(|e| e.to_string())
        })?;
    }
    outputs.commit()?;
    print!("{}", simulation::format_summary(&summary));
    Ok(())
}

fn parse_arm_map(entries: &[String]) -> CliResult<Option<BTreeMap<String, u32>>> {
    if entries.is_empty() {
        return Ok(None);
    }
    entries
        .iter()
        .map(|e| {
            let (code, action) = e
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--arm-map entry `{e}` is not CODE=ACTION")))?;
            let action = action
                .trim()
                .parse::<u32>()
                .map_err(|_| CliError::Usage(format!("--arm-map action in `{e}` is not an integer")))?;
            Ok((code.trim().to_string(), action))
        })
        .collect::<CliResult<_>>()
        .map(Some)
}

fn load_dataset(input: &InputArgs) -> CliResult<TrialDataset> {
    let context = input.input.display();
    if input.long {
        return ingest::read_long_csv(open(&input.input)?).map_err(|e| CliError::runtime(context, e));
    }
    let (Some(time), Some(event), Some(treatment)) =
        (&input.time, &input.event, &input.treatment)
    else {
        return Err(CliError::Usage(
            "a wide CSV needs --time, --event and --treatment (or pass --long)".into(),
        ));
    };
    if input.covariates.is_empty() {
        return Err(CliError::Usage("--covariates must name at least one column".into()));
    }
    let schema = CsvSchema {
        time: time.clone(),
        event: event.clone(),
        treatment: treatment.clone(),
        covariates: input.covariates.clone(),
        id: input.id.clone(),
        arm_codes: parse_arm_map(&input.arm_map)?,
        drop_codes: input.drop_codes.clone(),
        impute_missing: input.impute_missing,
    };
    ingest::read_trial_csv(open(&input.input)?, &schema).map_err(|e| CliError::runtime(context, e))
}

fn fit(a: FitArgs) -> CliResult<()> {
    let dataset = load_dataset(&a.input)?;
    let report = bjq_core::data_model::validate_dataset(&dataset);
    for stage in &report.stages {
        for w in &stage.warnings {
            eprintln!("warning: stage {}: {w}", stage.stage);
        }
    }
    if !report.is_valid() {
        let msgs: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        return Err(CliError::Runtime(format!("invalid dataset: {}", msgs.join("; "))));
    }
    let mut q = a.model.q_config();
    if let Some(folds) = a.cv_folds {
        if folds < 2 {
            return Err(CliError::Usage("--cv-folds must be at least 2".into()));
        }
        q.cv = Some(CvSettings {
            folds,
            seed: a.seed,
            iterations: vec![50, 100, 250, 500],
            learning_rates: vec![q.tree.learning_rate],
        });
    }
    let policy = backward_induction(&dataset, a.method, &q, a.model.mode())
        .map_err(|e| CliError::runtime("fit", e))?;
    let mut outputs = Outputs::new();
    outputs.add(&a.out, |w| {
        w.write_all(policy.to_json().as_bytes()).map_err(|e| e.to_string())?;
        w.write_all(b"\n").map_err(|e| e.to_string())
    })?;
    outputs.commit()
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let text = std::fs::read_to_string(&a.policy)
        .map_err(|e| CliError::runtime(a.policy.display(), e))?;
    let policy = Policy::from_json(&text).map_err(|e| CliError::runtime(a.policy.display(), e))?;
    let dataset = load_dataset(&a.input)?;

    let mut rows = Vec::with_capacity(dataset.subjects.len());
    for s in &dataset.subjects {
        let q = q_values(&policy, s).map_err(|e| CliError::runtime(&s.id, e))?;
        let decision = optimal_decision(&q).map_err(|e| CliError::runtime(&s.id, e))?;
        rows.push((s.id.clone(), decision, q));
    }
    let mut columns: Vec<_> = rows.iter().flat_map(|(_, _, q)| q.keys().cloned()).collect();
    columns.sort_by(|x, y| x.len().cmp(&y.len()).then_with(|| x.cmp(y)));
    columns.dedup();

    let mut outputs = Outputs::new();
    outputs.add(&a.out, |w| {
        let mut line = String::from("id,decision");
        for c in &columns {
            line.push_str(&format!(",q_{c}"));
        }
        writeln!(w, "{line}").map_err(|e| e.to_string())?;
        for (id, decision, q) in &rows {
            let mut line = format!("{id},{decision}");
            for c in &columns {
                line.push(',');
                if let Some(v) = q.get(c) {
                    line.push_str(&v.to_string());
                }
            }
            writeln!(w, "{line}").map_err(|e| e.to_string())?;
        }
        Ok(())
    })?;
    outputs.commit()
}

fn split_stages(a: SplitArgs) -> CliResult<()> {
    let dataset = load_dataset(&a.input)?;
    let split = ingest::synthetic_two_stage_split(
        &dataset,
        a.cutoff_low,
        a.cutoff_high,
        a.keep_prob,
        a.seed,
    )
    .map_err(|e| match e {
        ingest::IngestError::InvalidSplit(msg) => CliError::Usage(msg),
        other => CliError::runtime("split-stages", other),
    })?;
    let mut outputs = Outputs::new();
    outputs.add(&a.out, |w| {
        ingest::write_long_csv(w, &split).map_err(|e| e.to_string())
    })?;
    outputs.commit()
}

fn report(a: ReportArgs) -> CliResult<()> {
    let results = simulation::read_results_csv(open(&a.input)?)
        .map_err(|e| CliError::runtime(a.input.display(), e))?;
    let summary = simulation::summarize(&results);
    let mut outputs = Outputs::new();
    outputs.add(&a.out, |w| {
        simulation::write_summary_csv(w, &summary).map_err(|e| e.to_string())
    })?;
    outputs.commit()?;
    print!("{}", simulation::format_summary(&summary));
    Ok(())
}
