use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Flow-based multi-target retrieval over text-attributed knowledge graphs.
#[derive(Debug, Parser)]
#[command(name = "graphflow", version)]
pub struct Cli {
    /// Global RNG seed. Falls back to FLOWGRAPH_SEED, then to the config file, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Flat key=value configuration file; explicit flags win over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Also write the run manifest to this path.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark.
    Gen(GenArgs),
    /// Train a policy/flow model.
    Train(TrainArgs),
    /// Sample retrieval results with a trained model.
    Retrieve(RetrieveArgs),
    /// Score retrieval results against query targets.
    Eval(EvalArgs),
    /// Enumerate a small graph exactly and dump flows and the target law.
    Oracle(OracleArgs),
    /// Finite-difference check of every objective's gradients on a fixture.
    Gradcheck(GradcheckArgs),
    /// Rank nodes by text similarity only.
    BaselineDense(BaselineArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TraversalArg {
    Bidirectional,
    Directed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

/// A graph plus query set, either from files or a built-in fixture.
#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct DataArgs {
    /// Graph JSONL file.
    #[arg(long, requires = "queries", conflicts_with = "fixture")]
    pub graph: Option<PathBuf>,

    /// Query JSONL file.
    #[arg(long, requires = "graph")]
    pub queries: Option<PathBuf>,

    /// Use a built-in fixture instead of files.
    #[arg(long)]
    pub fixture: Option<String>,

    /// Whether edges may be walked backwards (file graphs only).
    #[arg(long, value_enum, default_value = "bidirectional")]
    pub traversal: TraversalArg,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct GenArgs {
    /// Output directory for graph.jsonl, queries.jsonl and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Write a built-in fixture (graph, queries, oracle.json) instead of a benchmark.
    #[arg(long)]
    pub fixture: Option<String>,
    #[arg(long)]
    pub num_queries: Option<String>,
    #[arg(long)]
    pub num_papers: Option<String>,
    #[arg(long)]
    pub num_authors: Option<String>,
    #[arg(long)]
    pub num_venues: Option<String>,
    #[arg(long)]
    pub vocab_size: Option<String>,
    #[arg(long)]
    pub tokens_per_doc: Option<String>,
    #[arg(long)]
    pub decoys_per_query: Option<String>,
    #[arg(long)]
    pub depth_cutoff: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    /// Four comma-separated bin shares summing to 1.
    #[arg(long)]
    pub bin_weights: Option<String>,
}

impl GenArgs {
    pub fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("num_queries", &self.num_queries),
            ("num_papers", &self.num_papers),
            ("num_authors", &self.num_authors),
            ("num_venues", &self.num_venues),
            ("vocab_size", &self.vocab_size),
            ("tokens_per_doc", &self.tokens_per_doc),
            ("decoys_per_query", &self.decoys_per_query),
            ("depth_cutoff", &self.depth_cutoff),
            ("dim", &self.dim),
            ("bin_weights", &self.bin_weights),
        ]
    }
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to the checkpoint path with `.log.csv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// dble, tb, subtb, sft or prm.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub num_exploration: Option<String>,
    #[arg(long)]
    pub depth_cutoff: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub accumulation_steps: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long, alias = "epochs")]
    pub n_epochs: Option<String>,
    #[arg(long)]
    pub eval_ratio: Option<String>,
    #[arg(long)]
    pub eval_step: Option<String>,
    #[arg(long)]
    pub boundary_const: Option<String>,
    #[arg(long)]
    pub learn_initial_flow: Option<String>,
    #[arg(long)]
    pub reward_floor: Option<String>,
    #[arg(long)]
    pub init_seed: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub ngram_orders: Option<String>,
    #[arg(long)]
    pub doc_cutoff: Option<String>,
    #[arg(long)]
    pub window_size: Option<String>,
    #[arg(long)]
    pub hash_seed: Option<String>,
    /// Comma-separated hidden layer widths; empty for a linear scorer.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub activation: Option<String>,
    /// binary or table.
    #[arg(long)]
    pub reward: Option<String>,
    /// Per-node rewards as `id:value,...`.
    #[arg(long)]
    pub reward_table: Option<String>,
    #[arg(long)]
    pub max_steps: Option<String>,
    #[arg(long)]
    pub stop_loss: Option<String>,
}

impl TrainArgs {
    pub fn overrides(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("objective", &self.objective),
            ("num_exploration", &self.num_exploration),
            ("depth_cutoff", &self.depth_cutoff),
            ("batch_size", &self.batch_size),
            ("accumulation_steps", &self.accumulation_steps),
            ("lr", &self.lr),
            ("n_epochs", &self.n_epochs),
            ("eval_ratio", &self.eval_ratio),
            ("eval_step", &self.eval_step),
            ("boundary_const", &self.boundary_const),
            ("learn_initial_flow", &self.learn_initial_flow),
            ("reward_floor", &self.reward_floor),
            ("init_seed", &self.init_seed),
            ("dim", &self.dim),
            ("ngram_orders", &self.ngram_orders),
            ("doc_cutoff", &self.doc_cutoff),
            ("window_size", &self.window_size),
            ("hash_seed", &self.hash_seed),
            ("hidden", &self.hidden),
            ("activation", &self.activation),
            ("reward", &self.reward),
            ("reward_table", &self.reward_table),
            ("max_steps", &self.max_steps),
            ("stop_loss", &self.stop_loss),
        ]
    }
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct RetrieveArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    /// Results JSONL output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Trajectories sampled per query.
    #[arg(long)]
    pub n: Option<String>,
    #[arg(long, value_enum)]
    pub rerank: Option<OnOff>,
    /// Defaults to the cutoff the model was trained with.
    #[arg(long)]
    pub depth_cutoff: Option<String>,
    #[arg(long)]
    pub temperature: Option<String>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub jobs: Option<String>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct EvalArgs {
    #[arg(long)]
    pub results: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    /// Report CSV output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional JSON copy of the report.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Comma-separated lower edges of the difficulty bins.
    #[arg(long)]
    pub bins: Option<String>,
    /// Cutoff for the recall metrics.
    #[arg(long)]
    pub recall_k: Option<String>,
    /// Worker threads over queries.
    #[arg(long)]
    pub jobs: Option<String>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct OracleArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Query to enumerate; defaults to the first one.
    #[arg(long)]
    pub qid: Option<String>,
    /// Oracle dump JSON output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Results JSONL whose samples are compared with the exact terminal law.
    #[arg(long)]
    pub results: Option<PathBuf>,
    #[arg(long)]
    pub depth_cutoff: Option<String>,
    #[arg(long)]
    pub reward_table: Option<String>,
    /// Maximum number of enumerated states.
    #[arg(long)]
    pub budget: Option<String>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct GradcheckArgs {
    #[arg(long, default_value = "chain-3")]
    pub fixture: String,
    /// One objective, or `all`.
    #[arg(long, default_value = "all")]
    pub objective: String,
    #[arg(long, default_value_t = 1e-5)]
    pub h: f64,
    /// Parameters probed per objective.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub hidden: Option<String>,
}

#[derive(Debug, Args)]
#[command(rename_all = "snake_case")]
pub struct BaselineArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Results JSONL output path.
    #[arg(long)]
    pub out: PathBuf,
    /// Nodes returned per query.
    #[arg(long)]
    pub k: Option<String>,
    #[arg(long)]
    pub dim: Option<String>,
    #[arg(long)]
    pub ngram_orders: Option<String>,
    #[arg(long)]
    pub doc_cutoff: Option<String>,
    #[arg(long)]
    pub hash_seed: Option<String>,
}
