//! Command-line front end. [`run`] returns the process exit code:
//! 0 on success, 1 on runtime failure, 2 on usage errors.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::decision_log::{
    context_from_json, join_logs, read_decisions_file, read_rewards_file, write_log_files,
    DecisionRecord,
};
use crate::learner::{
    default_labels, ips_value, make_fixed_policy, train_policy, TrainConfig, DEFAULT_WEIGHT_CAP,
};
use crate::sim::{compare_arms, run_loop, LoopConfig, ScenarioName, ScenarioSpec, SimError};
use crate::{bandit_model, Policy};

#[derive(Debug, Parser)]
#[command(
    name = "resonance",
    version,
    about = "Contextual bandits in place of hard-coded constants"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the fixed-vs-learned comparison on a synthetic scenario.
    Simulate(SimulateArgs),
    /// Train a policy from decision and reward logs.
    Train(TrainArgs),
    /// Estimate a policy's value on logged data.
    Eval(EvalArgs),
    /// Score one context with a saved policy.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// jb_hysteresis, screenshare_encoding or network_reconnect.
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 200_000)]
    rounds: usize,
    #[arg(long, default_value_t = bandit_model::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Seeds both the scenario and the loop.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5_000)]
    model_update_interval: usize,
    #[arg(long, default_value_t = 20)]
    replications: usize,
    /// Control arm constant; defaults to the best fixed action.
    #[arg(long)]
    fixed_action: Option<usize>,
    #[arg(long, default_value_t = bandit_model::DEFAULT_HASH_BITS)]
    hash_bits: u32,
    /// Report JSON.
    #[arg(long)]
    out: PathBuf,
    /// Per-round CSV of the seed's learning run; defaults to the report path with a .csv extension.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write decisions.jsonl and rewards.jsonl of that run here.
    #[arg(long)]
    log_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    rewards: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = bandit_model::DEFAULT_HASH_BITS)]
    hash_bits: u32,
    #[arg(long, default_value_t = bandit_model::DEFAULT_EPSILON)]
    epsilon_out: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.05)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    passes: u32,
    #[arg(long, default_value_t = DEFAULT_WEIGHT_CAP)]
    weight_cap: f64,
    /// Reward for decisions without a reward record.
    #[arg(long, default_value_t = 0.0)]
    default_reward: f64,
    #[arg(long, default_value = "trained")]
    model_id: String,
    /// Comma-separated action labels; inferred from the log when absent.
    #[arg(long, value_delimiter = ',')]
    actions: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    decisions: PathBuf,
    #[arg(long)]
    rewards: PathBuf,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// K IDX: constant policy over K actions.
    #[arg(long, num_args = 2, value_names = ["K", "IDX"])]
    fixed_action: Option<Vec<usize>>,
    #[arg(long, default_value_t = DEFAULT_WEIGHT_CAP)]
    weight_cap: f64,
    #[arg(long, default_value_t = 0.0)]
    default_reward: f64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// JSON array of {"ns","name","kind","value"} objects.
    #[arg(long)]
    context: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::UnknownScenario(_) | SimError::ConfigInvalid(_) => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.into()),
        }
    }
}

type Outcome = Result<(), Failure>;

/// Parse `args` (including the program name) and dispatch.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let rendered = e.render().to_string();
            return if e.use_stderr() {
                let _ = write!(err, "{rendered}");
                2
            } else {
                let _ = write!(out, "{rendered}");
                0
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Predict(a) => cmd_predict(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_simulate(a: SimulateArgs, out: &mut dyn Write) -> Outcome {
    let name = ScenarioName::parse(&a.scenario)?;
    let spec = ScenarioSpec::by_name(name.as_str(), a.seed)?;
    let cfg = LoopConfig {
        rounds: a.rounds,
        epsilon: a.epsilon,
        model_update_interval: a.model_update_interval,
        seed: a.seed,
        hash_bits: a.hash_bits,
        ..LoopConfig::default()
    };
    cfg.validate()?;
    if !(1..=bandit_model::MAX_HASH_BITS).contains(&a.hash_bits) {
        return Err(Failure::Usage(format!(
            "hash bits {} outside 1..=32",
            a.hash_bits
        )));
    }
    let fixed = match a.fixed_action {
        Some(i) if i >= spec.num_actions() => {
            return Err(Failure::Usage(format!(
                "fixed action {i} out of range for {} actions",
                spec.num_actions()
            )))
        }
        Some(i) => i,
        None => spec.best_fixed_action().0,
    };
    if a.replications < 2 {
        return Err(Failure::Usage(format!(
            "need at least 2 replications, got {}",
            a.replications
        )));
    }

    let report = compare_arms(&spec, fixed, &cfg, a.replications)?;
    let mut json = serde_json::to_vec_pretty(&report).context("cannot serialize report")?;
    json.push(b'\n');
    write_file(&a.out, &json)?;

    let run = run_loop(&spec, &cfg)?;
    let csv_path = a.csv.unwrap_or_else(|| a.out.with_extension("csv"));
    let file = fs::File::create(&csv_path)
        .with_context(|| format!("cannot write {}", csv_path.display()))?;
    run.write_csv(&spec, BufWriter::new(file))
        .with_context(|| format!("cannot write {}", csv_path.display()))?;
    if let Some(dir) = &a.log_dir {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_log_files(
            &run.logs.decisions,
            &run.logs.rewards,
            &dir.join("decisions.jsonl"),
            &dir.join("rewards.jsonl"),
        )
        .map_err(anyhow::Error::from)?;
    }

    writeln!(
        out,
        "{}: control action {} mean {:.4}, learned mean {:.4}, lift {:+.2}%, p={:.3e} over {} replications; wrote {} and {}",
        report.scenario,
        report.control_action,
        report.mean_reward_control,
        report.mean_reward_treatment,
        report.lift_percent,
        report.p_value,
        report.replications,
        a.out.display(),
        csv_path.display()
    )
    .context("cannot write to stdout")?;
    Ok(())
}

fn load_examples(
    decisions: &Path,
    rewards: &Path,
    default_reward: f64,
) -> anyhow::Result<(Vec<DecisionRecord>, Vec<crate::decision_log::JoinedExample>)> {
    let d = read_decisions_file(decisions)?;
    let r = read_rewards_file(rewards)?;
    let (examples, _) = join_logs(&d, &r, default_reward);
    Ok((d, examples))
}

/// Labels by action index as seen in the log; gaps get `action{i}`.
fn labels_from_log(decisions: &[DecisionRecord]) -> Vec<String> {
    let k = decisions
        .iter()
        .map(|d| d.action_index + 1)
        .max()
        .unwrap_or(0);
    let mut labels = default_labels(k);
    let mut seen = vec![false; k];
    for d in decisions {
        if !seen[d.action_index] {
            seen[d.action_index] = true;
            labels[d.action_index] = d.action_label.clone();
        }
    }
    labels
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Outcome {
    if !a.default_reward.is_finite() {
        return Err(Failure::Usage("default reward must be finite".into()));
    }
    let cfg = TrainConfig {
        learning_rate: a.learning_rate,
        passes: a.passes,
        weight_cap: a.weight_cap,
        hash_bits: a.hash_bits,
        epsilon_out: a.epsilon_out,
        seed: a.seed,
        model_id: a.model_id,
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    if !(1..=bandit_model::MAX_HASH_BITS).contains(&a.hash_bits) {
        return Err(Failure::Usage(format!(
            "hash bits {} outside 1..=32",
            a.hash_bits
        )));
    }
    let (decisions, examples) = load_examples(&a.decisions, &a.rewards, a.default_reward)?;
    let actions = match a.actions {
        Some(labels) => labels,
        None => labels_from_log(&decisions),
    };
    let policy = train_policy::<f64>(&examples, &actions, &cfg).context("training failed")?;
    write_file(&a.out, &policy.to_bytes())?;
    writeln!(
        out,
        "trained {} on {} examples: {} actions, {} nonzero weights; wrote {}",
        policy.model_id(),
        examples.len(),
        policy.num_actions(),
        policy.nonzero_weights(),
        a.out.display()
    )
    .context("cannot write to stdout")?;
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> Outcome {
    let policy: Policy = match (&a.policy, &a.fixed_action) {
        (Some(_), Some(_)) | (None, None) => {
            return Err(Failure::Usage(
                "pass exactly one of --policy and --fixed-action".into(),
            ))
        }
        (Some(path), None) => {
            let bytes =
                fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
            Policy::from_bytes(&bytes).with_context(|| format!("cannot load {}", path.display()))?
        }
        (None, Some(ki)) => {
            let (k, idx) = (ki[0], ki[1]);
            if k < 2 {
                return Err(Failure::Usage(format!(
                    "fixed policy needs at least 2 actions, got {k}"
                )));
            }
            make_fixed_policy(&default_labels(k), idx, bandit_model::DEFAULT_HASH_BITS)
                .map_err(|e| Failure::Usage(e.to_string()))?
        }
    };
    let (_, examples) = load_examples(&a.decisions, &a.rewards, a.default_reward)?;
    let report = ips_value(&examples, &policy, a.weight_cap).context("evaluation failed")?;
    let json = serde_json::to_string(&report).context("cannot serialize report")?;
    writeln!(out, "{json}").context("cannot write to stdout")?;
    Ok(())
}

fn cmd_predict(a: PredictArgs, out: &mut dyn Write) -> Outcome {
    let value: serde_json::Value = serde_json::from_str(&a.context)
        .map_err(|e| Failure::Usage(format!("malformed context JSON: {e}")))?;
    let context =
        context_from_json(&value).map_err(|e| Failure::Usage(format!("malformed context: {e}")))?;
    let bytes = fs::read(&a.model).with_context(|| format!("cannot read {}", a.model.display()))?;
    let policy =
        Policy::from_bytes(&bytes).with_context(|| format!("cannot load {}", a.model.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let prediction = policy
        .select_action(&policy.encode(&context), &mut rng)
        .context("prediction failed")?;
    let json = serde_json::to_string(&prediction).context("cannot serialize prediction")?;
    writeln!(out, "{json}").context("cannot write to stdout")?;
    Ok(())
}
