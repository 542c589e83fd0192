use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use vqa_core::corpus::{load_transcripts, write_shard};
use vqa_core::qagen::{generate_triplets, GenerationConfig, GenerationPorts};

use crate::config::{load_profile, section};
use crate::input_err;
use crate::manifest::ManifestBuilder;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Ports {
    /// Rule-based punctuator, extractor and question generator.
    Stub,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Transcript file(s); each becomes one shard.
    #[arg(long, required = true, num_args = 1..)]
    transcripts: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "stub")]
    ports: Ports,
    #[arg(long)]
    max_answers: Option<usize>,
    #[arg(long)]
    max_sentence_tokens: Option<usize>,
    /// Recorded in the manifest; the stub ports are deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
}

pub fn run(a: GenerateArgs) -> Result<()> {
    let m = ManifestBuilder::start("generate");
    let profile = load_profile(a.config.as_deref())?;
    let mut cfg: GenerationConfig = section(&profile, "generation")?;
    if let Some(n) = a.max_answers {
        cfg.max_answers_per_sentence = n;
    }
    if let Some(n) = a.max_sentence_tokens {
        cfg.max_sentence_tokens = n;
    }
    cfg.validate()?;
    for p in &a.transcripts {
        if !p.is_file() {
            return Err(input_err!(
                "transcripts file {} does not exist",
                p.display()
            ));
        }
    }
    let ports = match a.ports {
        Ports::Stub => GenerationPorts::stubs(),
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut outputs = Vec::new();
    let mut total = 0;
    for (i, path) in a.transcripts.iter().enumerate() {
        let videos = load_transcripts(path)?;
        let mut triplets = Vec::new();
        for v in &videos {
            triplets.extend(generate_triplets(v, &ports, &cfg)?);
        }
        let shard = a.out.join(format!("part-{i:05}.jsonl"));
        total += write_shard(&shard, &triplets)?.count;
        outputs.push(shard);
    }
    println!("{total} triplets");
    let config =
        serde_json::json!({ "generation": cfg, "ports": format!("{:?}", a.ports).to_lowercase() });
    m.finish(
        &a.out.join("manifest.json"),
        config,
        &a.transcripts,
        &outputs,
        Some(a.seed),
    )
}
