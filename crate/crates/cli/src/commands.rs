use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::runtime::Runtime;
use vulaug_core::clustering::{kmeans_cosine, AssignmentRecord, ClusterAssignment};
use vulaug_core::corpus::{assemble_augmented, ingest_jsonl, sample_vulnerable, write_samples, CodeSample, CorpusStore, FieldMap};
use vulaug_core::embedding::{embed_batch, EmbeddingProvider, EmbeddingVector};
use vulaug_core::formulator::{Formulator, PromptInstance, RuleSet, Strategy, Templates};
use vulaug_core::generator::{estimate_cost, run_batch, GenerationConfig, GenerationRecord, GenerationStatus, HttpChatClient, Journal, Pricing, API_KEY_ENV};
use vulaug_core::metrics::{diversity_entropy, run_stats};
use vulaug_core::retrieval::{random_pairs, retrieve_pairs, Direction, RetrievalRequest, RetrievedPair};
use vulaug_core::verifier::Verifier;
use vulaug_testkit::{ChatBehavior, MockServer};

use crate::args::*;
use crate::jsonl;
use crate::usage;

type Outcome = anyhow::Result<()>;

/// One line of an embedding file.
#[derive(Debug, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub vector: EmbeddingVector,
}

fn require(path: &Path) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("input file {} does not exist", path.display())))
    }
}

fn load_store(path: &Path, fields: &FieldMap) -> anyhow::Result<CorpusStore> {
    let ingested = ingest_jsonl(path, fields)?;
    if !ingested.rejected.is_empty() {
        tracing::warn!(
            file = %path.display(),
            rejected = ingested.rejected.len(),
            first_line = ingested.rejected[0].line,
            defect = %ingested.rejected[0].defect,
            "skipped invalid corpus lines"
        );
    }
    Ok(ingested.store)
}

fn load_corpus(path: &Path) -> anyhow::Result<CorpusStore> {
    load_store(path, &FieldMap::default())
}

fn provider(args: &ProviderArgs) -> anyhow::Result<EmbeddingProvider> {
    match args.provider {
        ProviderKind::Hash => EmbeddingProvider::hash(args.dim).map_err(|e| usage(e.to_string())),
        ProviderKind::Remote => {
            let endpoint = args
                .embed_endpoint
                .clone()
                .ok_or_else(|| usage("--provider remote needs --embed-endpoint or EMBED_ENDPOINT"))?;
            EmbeddingProvider::remote(endpoint).map_err(|e| usage(e.to_string()))
        }
    }
}

fn embed_samples(rt: &Runtime, provider: &EmbeddingProvider, samples: &[&CodeSample]) -> anyhow::Result<Vec<(String, EmbeddingVector)>> {
    let codes: Vec<String> = samples.iter().map(|s| s.code.clone()).collect();
    let vectors = rt.block_on(embed_batch(provider, &codes))?;
    Ok(samples.iter().map(|s| s.id.clone()).zip(vectors).collect())
}

fn print_json(value: &impl Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

pub fn ingest(a: &IngestArgs) -> Outcome {
    require(&a.input)?;
    let fields = FieldMap {
        id: a.id_field.clone(),
        code: a.code_field.clone(),
        label: a.label_field.clone(),
        vul_lines: a.lines_field.clone(),
        project: a.project_field.clone(),
    };
    let ingested = ingest_jsonl(&a.input, &fields)?;
    jsonl::write_with(&a.output, |w| Ok(ingested.store.write_jsonl(w)?))?;
    if let Some(path) = &a.rejected {
        let rows: Vec<_> = ingested
            .rejected
            .iter()
            .map(|r| json!({"line": r.line, "defect": r.defect.to_string()}))
            .collect();
        jsonl::write(path, &rows)?;
    }
    print_json(&json!({
        "samples": ingested.store.len(),
        "vulnerable": ingested.store.vulnerable_count(),
        "clean": ingested.store.clean_count(),
        "rejected": ingested.rejected.len(),
    }))?;
    Ok(())
}

pub fn embed(rt: &Runtime, a: &EmbedArgs) -> Outcome {
    require(&a.corpus)?;
    let provider = provider(&a.provider)?;
    let store = load_corpus(&a.corpus)?;
    let selected: Vec<&CodeSample> = store
        .samples()
        .iter()
        .filter(|s| match a.label {
            LabelFilter::All => true,
            LabelFilter::Vulnerable => s.is_vulnerable(),
            LabelFilter::Clean => !s.is_vulnerable(),
        })
        .collect();
    if selected.is_empty() {
        return Err(anyhow!("no samples match --label {:?}", a.label));
    }
    let embedded = embed_samples(rt, &provider, &selected)?;
    let records: Vec<EmbeddingRecord> = embedded.into_iter().map(|(id, vector)| EmbeddingRecord { id, vector }).collect();
    jsonl::write(&a.output, &records)?;
    tracing::info!(count = records.len(), output = %a.output.display(), "wrote embeddings");
    Ok(())
}

pub fn cluster(a: &ClusterArgs) -> Outcome {
    require(&a.embeddings)?;
    let records: Vec<EmbeddingRecord> = jsonl::read(&a.embeddings)?;
    let points: Vec<(String, EmbeddingVector)> = records.into_iter().map(|r| (r.id, r.vector)).collect();
    let assignment = kmeans_cosine(&points, a.g, a.seed)?;
    let rows: Vec<AssignmentRecord> = assignment.records().collect();
    jsonl::write(&a.output, &rows)?;
    print_json(&json!({
        "groups": assignment.groups,
        "sizes": assignment.cluster_sizes(),
        "iterations": assignment.iterations_run,
    }))?;
    Ok(())
}

pub fn pair(rt: &Runtime, a: &PairArgs) -> Outcome {
    require(&a.corpus)?;
    if let Some(p) = &a.assignments {
        require(p)?;
    }
    if a.n == 0 || a.g == 0 {
        return Err(usage("--n and --g must be positive"));
    }
    let store = load_corpus(&a.corpus)?;
    // Only vulnerable samples with known vulnerable lines can seed a prompt.
    let vulnerable: Vec<&CodeSample> = store.vulnerable().filter(|s| !s.vul_lines().is_empty()).collect();
    let skipped = store.vulnerable_count() - vulnerable.len();
    if skipped > 0 {
        tracing::warn!(skipped, "vulnerable samples without vul_lines are not paired");
    }
    let clean: Vec<&CodeSample> = store.clean().collect();
    let (queries, corpus) = match a.direction {
        Direction::Injection => (clean, vulnerable),
        Direction::Extension => (vulnerable, clean),
    };
    if queries.is_empty() || corpus.is_empty() {
        return Err(anyhow!("{} needs both clean and annotated vulnerable samples", a.direction));
    }

    let pairs: Vec<RetrievedPair> = if a.random_match {
        random_pairs(&queries, &corpus, a.n, a.direction, a.seed)?
    } else {
        let assignment = if a.no_clustering {
            ClusterAssignment::single_cluster(corpus.iter().map(|s| s.id.as_str()))
        } else if let Some(path) = &a.assignments {
            let rows: Vec<AssignmentRecord> = jsonl::read(path)?;
            let mut assignment = ClusterAssignment::from_records(rows)?;
            if assignment.groups > a.g {
                return Err(anyhow!("{} uses {} clusters but --g is {}", path.display(), assignment.groups, a.g));
            }
            // Trailing clusters may be empty in the file.
            assignment.groups = a.g;
            assignment
        } else {
            let provider = provider(&a.provider)?;
            let points = embed_samples(rt, &provider, &corpus)?;
            kmeans_cosine(&points, a.g, a.seed)?
        };
        let req = RetrievalRequest {
            n: a.n,
            groups: assignment.groups,
            direction: a.direction,
            seed: a.seed,
        };
        let retrieved = retrieve_pairs(&queries, &corpus, &assignment, &req)?;
        if retrieved.self_pairs_skipped > 0 {
            tracing::info!(count = retrieved.self_pairs_skipped, "skipped self pairs");
        }
        retrieved.pairs
    };
    jsonl::write(&a.output, &pairs)?;
    tracing::info!(pairs = pairs.len(), output = %a.output.display(), "wrote pairs");
    Ok(())
}

pub fn render(a: &RenderArgs) -> Outcome {
    require(&a.corpus)?;
    for p in [&a.pairs, &a.templates, &a.rules].into_iter().flatten() {
        require(p)?;
    }
    let templates = match &a.templates {
        Some(dir) => Templates::from_dir(dir)?,
        None => Templates::default(),
    };
    let rules = match &a.rules {
        Some(path) => RuleSet::from_file(path)?,
        None => RuleSet::default(),
    };
    let formulator = Formulator::new(templates, rules);
    let store = load_corpus(&a.corpus)?;
    let mut prompts = Vec::new();
    match a.strategy {
        Strategy::Mutation => {
            if a.pairs.is_some() {
                return Err(usage("mutation renders every vulnerable sample; --pairs is not used"));
            }
            for s in store.vulnerable() {
                prompts.push(formulator.render_mutation(s)?);
            }
        }
        Strategy::Injection | Strategy::Extension => {
            let path = a
                .pairs
                .as_ref()
                .ok_or_else(|| usage(format!("--pairs is required for {:?} prompts", a.strategy)))?;
            let pairs: Vec<RetrievedPair> = jsonl::read(path)?;
            let mut seen = HashSet::new();
            for p in &pairs {
                let prompt = match a.strategy {
                    Strategy::Injection => formulator.render_injection(p, &store)?,
                    _ => formulator.render_extension(p, &store)?,
                };
                if seen.insert(prompt.id.clone()) {
                    prompts.push(prompt);
                } else {
                    tracing::warn!(id = %prompt.id, "duplicate pair skipped");
                }
            }
        }
    }
    jsonl::write(&a.output, &prompts)?;
    tracing::info!(prompts = prompts.len(), output = %a.output.display(), "wrote prompts");
    Ok(())
}

pub fn generate(rt: &Runtime, a: &GenerateArgs) -> Outcome {
    require(&a.prompts)?;
    let mut prompts: Vec<PromptInstance> = jsonl::read(&a.prompts)?;
    if let Some(target) = a.target {
        if target == 0 {
            return Err(usage("--target must be positive"));
        }
        if target > prompts.len() {
            tracing::warn!(target, available = prompts.len(), "fewer prompts than the target; sending all");
        }
        prompts.truncate(target);
    }
    let cfg = GenerationConfig {
        model: a.model.clone(),
        temperature: a.temperature,
        max_new_tokens: a.max_tokens,
        max_attempts: a.max_attempts,
        concurrency: a.concurrency,
        endpoint: a.endpoint.clone(),
        api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        pricing: Pricing {
            input_per_1k: a.price_in,
            output_per_1k: a.price_out,
        },
        backoff_base: Duration::from_millis(a.backoff_ms),
        request_timeout: Duration::from_secs(a.timeout_secs),
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let client = HttpChatClient::from_config(&cfg).map_err(|e| anyhow!(e))?;
    let journal = match &a.journal {
        Some(path) => Some(Journal::open(path).with_context(|| format!("cannot open journal {}", path.display()))?),
        None => None,
    };
    let outcome = rt.block_on(run_batch(&client, &prompts, &cfg, journal.as_ref()));
    jsonl::write(&a.output, &outcome.records)?;
    let cost = estimate_cost(&outcome.records, &cfg.pricing);
    let ok = outcome.records.iter().filter(|r| r.status == GenerationStatus::Ok).count();
    print_json(&json!({
        "prompts": prompts.len(),
        "ok": ok,
        "resumed": outcome.resumed,
        "cost": cost,
    }))?;
    match outcome.fatal {
        Some(e) => Err(anyhow!("generation aborted: {e}")),
        None => Ok(()),
    }
}

pub fn verify(a: &VerifyArgs) -> Outcome {
    require(&a.records)?;
    let records: Vec<GenerationRecord> = jsonl::read(&a.records)?;
    let outcome = Verifier::new(a.threshold).filter_generated(&records);
    jsonl::write_with(&a.output, |w| Ok(write_samples(&outcome.accepted, w, None)?))?;
    if let Some(path) = &a.rejected {
        jsonl::write_with(path, |w| Ok(outcome.write_rejected_jsonl(w)?))?;
    }
    print_json(&json!({
        "verified": outcome.verified,
        "accepted": outcome.accepted.len(),
        "rejected": outcome.rejected.len(),
        "rejection_rate": outcome.rejection_rate(),
    }))?;
    Ok(())
}

pub fn sample(a: &SampleArgs) -> Outcome {
    require(&a.input)?;
    if a.n == 0 {
        return Err(usage("--n must be positive"));
    }
    let store = load_corpus(&a.input)?;
    let picked = sample_vulnerable(&store, a.n, a.seed)?;
    jsonl::write_with(&a.output, |w| Ok(write_samples(picked.iter().copied(), w, None)?))?;
    tracing::info!(sampled = picked.len(), output = %a.output.display(), "wrote sample");
    Ok(())
}

pub fn assemble(a: &AssembleArgs) -> Outcome {
    for p in [&a.base, &a.generated, &a.clean_pool] {
        require(p)?;
    }
    let base = load_corpus(&a.base)?;
    let generated = load_corpus(&a.generated)?;
    let pool = load_corpus(&a.clean_pool)?;
    if let Some(clash) = generated.samples().iter().find(|s| base.get(&s.id).is_some()) {
        return Err(anyhow!("generated sample id `{}` also appears in the base corpus", clash.id));
    }
    let dataset = assemble_augmented(&base, generated.into_samples(), &pool, a.seed)?;
    jsonl::write_with(&a.output, |w| Ok(dataset.write_jsonl(w)?))?;
    print_json(&json!({
        "base_vulnerable": dataset.target_ratio.0,
        "base_clean": dataset.target_ratio.1,
        "generated": dataset.generated_vulnerable.len(),
        "added_clean": dataset.added_clean.len(),
        "vulnerable": dataset.vulnerable_count(),
        "clean": dataset.clean_count(),
    }))?;
    Ok(())
}

pub fn entropy(rt: &Runtime, a: &EntropyArgs) -> Outcome {
    require(&a.input)?;
    let rows: Vec<serde_json::Value> = jsonl::read(&a.input)?;
    if rows.is_empty() {
        return Err(anyhow!("{} contains no samples or vectors", a.input.display()));
    }
    let vectors: Vec<EmbeddingVector> = if rows[0].get("vector").is_some() {
        rows.into_iter()
            .map(|r| serde_json::from_value::<EmbeddingRecord>(r).map(|e| e.vector))
            .collect::<Result<_, _>>()
            .context("malformed embedding line")?
    } else {
        let provider = provider(&a.provider)?;
        let store = load_corpus(&a.input)?;
        let samples: Vec<&CodeSample> = store.samples().iter().collect();
        embed_samples(rt, &provider, &samples)?.into_iter().map(|(_, v)| v).collect()
    };
    let report = diversity_entropy(&vectors, a.bins, a.dims)?;
    print_json(&report)?;
    Ok(())
}

pub fn stats(a: &StatsArgs) -> Outcome {
    require(&a.records)?;
    let records: Vec<GenerationRecord> = jsonl::read(&a.records)?;
    let verifier = Verifier::new(a.threshold);
    let verdicts: Vec<_> = records
        .iter()
        .filter(|r| r.status == GenerationStatus::Ok)
        .map(|r| verifier.verify(r.extracted_code.as_deref().unwrap_or("")))
        .collect();
    print_json(&run_stats(&records, &verdicts))?;
    Ok(())
}

pub fn mock_llm(a: &MockArgs) -> Outcome {
    let server = MockServer::builder(ChatBehavior::Deterministic {
        malformed_percent: a.malformed_percent,
    })
    .port(a.port)
    .start();
    println!("{}", server.url());
    std::io::stdout().flush().ok();
    server.join();
    Ok(())
}
