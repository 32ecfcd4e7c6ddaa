use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vulaug_core::clustering::DEFAULT_GROUPS;
use vulaug_core::embedding::DEFAULT_HASH_DIM;
use vulaug_core::formulator::Strategy;
use vulaug_core::retrieval::Direction;
use vulaug_core::verifier::DEFAULT_ERROR_THRESHOLD;

/// Seed used by every randomized stage unless `--seed` is given.
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(name = "vulaug", version, about = "Augment vulnerability-detection corpora with LLM-generated vulnerable functions")]
pub struct Cli {
    /// `key=value` file supplying defaults for the subcommand's flags
    /// (keys are long flag names; explicit flags win).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize a raw JSONL corpus into the canonical schema.
    Ingest(IngestArgs),
    /// Embed corpus samples.
    Embed(EmbedArgs),
    /// Cluster embeddings with cosine k-means.
    Cluster(ClusterArgs),
    /// Retrieve (clean, vulnerable) pairs with clustered BM25 search.
    Pair(PairArgs),
    /// Render prompts from samples or pairs.
    Render(RenderArgs),
    /// Send prompts to a chat-completions endpoint.
    Generate(GenerateArgs),
    /// Filter generated code with the lenient C checker.
    Verify(VerifyArgs),
    /// Draw a seeded subset of vulnerable samples.
    Sample(SampleArgs),
    /// Merge base, generated and ratio-restoring clean samples.
    Assemble(AssembleArgs),
    /// Diversity entropy of a corpus or embedding file.
    Entropy(EntropyArgs),
    /// Summary statistics of a generation run.
    Stats(StatsArgs),
    /// Serve a deterministic chat/embedding mock for dry runs.
    MockLlm(MockArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Where to write `{"line", "defect"}` for rejected input lines.
    #[arg(long)]
    pub rejected: Option<PathBuf>,
    #[arg(long, default_value = "id")]
    pub id_field: String,
    #[arg(long, default_value = "func")]
    pub code_field: String,
    #[arg(long, default_value = "target")]
    pub label_field: String,
    #[arg(long, default_value = "vul_lines")]
    pub lines_field: String,
    #[arg(long, default_value = "project")]
    pub project_field: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LabelFilter {
    All,
    Vulnerable,
    Clean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    /// Local feature hashing; no network.
    Hash,
    /// `POST <endpoint>/embed`.
    Remote,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value = "hash")]
    pub provider: ProviderKind,
    /// Hash embedding dimension.
    #[arg(long, default_value_t = DEFAULT_HASH_DIM)]
    pub dim: usize,
    #[arg(long = "embed-endpoint", env = "EMBED_ENDPOINT")]
    pub embed_endpoint: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub label: LabelFilter,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Number of clusters.
    #[arg(long, default_value_t = DEFAULT_GROUPS)]
    pub g: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PairArgs {
    /// Corpus holding both clean and vulnerable samples.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Number of pairs.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_GROUPS)]
    pub g: usize,
    #[arg(long, default_value = "injection")]
    pub direction: Direction,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Precomputed cluster assignments; clustered inline when absent.
    #[arg(long, conflicts_with_all = ["random_match", "no_clustering"])]
    pub assignments: Option<PathBuf>,
    /// Pair each query with a random document instead of retrieving.
    #[arg(long, conflicts_with = "no_clustering")]
    pub random_match: bool,
    /// Search the whole corpus as one cluster.
    #[arg(long)]
    pub no_clustering: bool,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value = "injection")]
    pub strategy: Strategy,
    /// Pair file; required for injection and extension.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Directory with mutation.txt, injection.txt and extension.txt.
    #[arg(long)]
    pub templates: Option<PathBuf>,
    /// One mutation rule per line.
    #[arg(long)]
    pub rules: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompts: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Send only the first N prompts.
    #[arg(long)]
    pub target: Option<usize>,
    #[arg(long, env = "LLM_ENDPOINT", default_value = "https://api.openai.com")]
    pub endpoint: String,
    #[arg(long, default_value = "gpt-3.5-turbo")]
    pub model: String,
    #[arg(long, default_value_t = 0.5)]
    pub temperature: f64,
    #[arg(long, default_value_t = 4096)]
    pub max_tokens: u32,
    #[arg(long, default_value_t = 3)]
    pub max_attempts: u32,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    /// Append-only record log; prompts already in it are not re-sent.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// USD per 1K prompt tokens.
    #[arg(long, default_value_t = 0.0)]
    pub price_in: f64,
    /// USD per 1K completion tokens.
    #[arg(long, default_value_t = 0.0)]
    pub price_out: f64,
    /// First retry delay in milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub backoff_ms: u64,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub records: PathBuf,
    /// Accepted samples in the corpus schema.
    #[arg(long)]
    pub output: PathBuf,
    /// `{"prompt_id", "reasons", "error_count"}` per rejected record.
    #[arg(long)]
    pub rejected: Option<PathBuf>,
    /// Tolerated recoverable errors per 100 lines.
    #[arg(long, default_value_t = DEFAULT_ERROR_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[arg(long)]
    pub base: PathBuf,
    #[arg(long)]
    pub generated: PathBuf,
    /// Clean samples to draw from; may be the base corpus itself.
    #[arg(long)]
    pub clean_pool: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EntropyArgs {
    /// Corpus JSONL (embedded with the chosen provider) or embedding JSONL.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long, default_value_t = 3)]
    pub dims: usize,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ERROR_THRESHOLD)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct MockArgs {
    #[arg(long, default_value_t = 8089)]
    pub port: u16,
    /// Share of replies (by prompt hash) with a dropped closing brace.
    #[arg(long, default_value_t = 3)]
    pub malformed_percent: u64,
}
