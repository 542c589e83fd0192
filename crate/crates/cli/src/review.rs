use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vqa_core::corpus::read_shard_dir;

use crate::input_err;
use crate::manifest::{sidecar, ManifestBuilder};

#[derive(Args, Debug)]
pub struct ReviewArgs {
    #[arg(long)]
    shards: PathBuf,
    #[arg(long, default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn run(a: ReviewArgs) -> Result<()> {
    let m = ManifestBuilder::start("sample-review");
    if !a.shards.is_dir() {
        return Err(input_err!(
            "shard directory {} does not exist",
            a.shards.display()
        ));
    }
    let triplets = read_shard_dir(&a.shards)?;
    if a.n > triplets.len() {
        return Err(input_err!(
            "asked for {} samples but the shards hold {} triplets",
            a.n,
            triplets.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let picked = rand::seq::index::sample(&mut rng, triplets.len(), a.n);
    let mut w =
        csv::Writer::from_path(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    w.write_record(["video_id", "start", "end", "question", "answer", "judgment"])?;
    for i in picked.iter() {
        let t = &triplets[i];
        w.write_record([
            &t.video_id,
            &t.start_s.to_string(),
            &t.end_s.to_string(),
            &t.question,
            &t.answer,
            "",
        ])?;
    }
    w.flush()?;
    let config = serde_json::json!({ "n": a.n });
    m.finish(
        &sidecar(&a.out),
        config,
        std::slice::from_ref(&a.shards),
        std::slice::from_ref(&a.out),
        Some(a.seed),
    )
}
