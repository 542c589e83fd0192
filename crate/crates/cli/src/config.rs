//! Profile files and flag merging. Flags override the profile, which
//! overrides the built-in defaults.

use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use vqa_core::model::VqaTConfig;
use vqa_core::qagen::GenerationConfig;
use vqa_core::train::{Phase, TrainConfig};

use crate::{input_err, CommonTrainArgs};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NarrationConfig {
    pub min_duration_s: f64,
    pub min_words: usize,
}

impl Default for NarrationConfig {
    fn default() -> Self {
        Self {
            min_duration_s: 10.0,
            min_words: 10,
        }
    }
}

/// Sections of a profile file.
pub const SECTIONS: [&str; 6] = [
    "model",
    "generation",
    "narration",
    "pretrain",
    "finetune",
    "matching_pretrain",
];

/// The built-in profile, equal to `profiles/paper.json`.
pub fn builtin() -> Value {
    let mut model = serde_json::to_value(VqaTConfig::paper(0)).expect("config serializes");
    let obj = model.as_object_mut().expect("object");
    obj.remove("vocab_size");
    obj.remove("d_v");
    obj.remove("qa_t");
    obj.remove("init_seed");
    let train = |p| {
        let mut v = serde_json::to_value(TrainConfig::defaults(p)).expect("config serializes");
        v.as_object_mut().expect("object").remove("phase");
        v
    };
    json!({
        "model": model,
        "generation": GenerationConfig::default(),
        "narration": NarrationConfig::default(),
        "pretrain": train(Phase::Pretrain),
        "finetune": train(Phase::Finetune),
        "matching_pretrain": train(Phase::MatchingPretrain),
    })
}

/// Recursively overlays objects; other values are replaced.
pub fn merge(base: &mut Value, overlay: &Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

pub fn load_profile(path: Option<&Path>) -> Result<Value> {
    let mut base = builtin();
    if let Some(p) = path {
        let text = std::fs::read_to_string(p)
            .map_err(|e| input_err!("cannot read profile {}: {e}", p.display()))?;
        let overlay: Value =
            serde_json::from_str(&text).map_err(|e| input_err!("profile {}: {e}", p.display()))?;
        let Value::Object(map) = &overlay else {
            return Err(input_err!("profile {} is not a JSON object", p.display()));
        };
        if let Some(k) = map.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(input_err!("profile {}: unknown section {k:?}", p.display()));
        }
        merge(&mut base, &overlay);
    }
    Ok(base)
}

pub fn section<T: DeserializeOwned>(profile: &Value, key: &str) -> Result<T> {
    let v = profile
        .get(key)
        .cloned()
        .unwrap_or(Value::Object(Default::default()));
    serde_json::from_value(v)
        .map_err(|e| input_err!("profile section {key}: {e}"))
        .context("loading profile")
}

fn phase_key(phase: Phase) -> &'static str {
    match phase {
        Phase::Pretrain => "pretrain",
        Phase::Finetune => "finetune",
        Phase::MatchingPretrain => "matching_pretrain",
    }
}

/// Training configuration for `phase` after applying the profile and flags.
pub fn train_config(profile: &Value, phase: Phase, a: &CommonTrainArgs) -> Result<TrainConfig> {
    let mut v = serde_json::to_value(TrainConfig::defaults(phase))?;
    if let Some(sec) = profile.get(phase_key(phase)) {
        merge(&mut v, sec);
    }
    v["phase"] = serde_json::to_value(phase)?;
    let mut cfg: TrainConfig = serde_json::from_value(v)
        .map_err(|e| input_err!("profile section {}: {e}", phase_key(phase)))?;
    if let Some(x) = a.lr {
        cfg.initial_lr = x;
    }
    if let Some(x) = a.epochs {
        cfg.epochs = x;
    }
    if let Some(x) = a.batch_clips {
        cfg.batch_clips = x;
    }
    if let Some(x) = a.videos_per_batch {
        cfg.videos_per_batch = x;
    }
    if let Some(x) = a.seed {
        cfg.seed = x;
    }
    if let Some(x) = a.data_fraction {
        cfg.data_fraction = x;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if a.no_mlm {
        cfg.mlm = false;
    }
    if a.no_dedup {
        cfg.dedup = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Model configuration from the profile, sized for the data.
pub fn model_config(
    profile: &Value,
    vocab_size: usize,
    d_v: usize,
    qa_t: bool,
    seed: u64,
) -> Result<VqaTConfig> {
    let mut v = serde_json::to_value(VqaTConfig::paper(vocab_size))?;
    if let Some(sec) = profile.get("model") {
        merge(&mut v, sec);
    }
    let mut cfg: VqaTConfig =
        serde_json::from_value(v).map_err(|e| input_err!("profile section model: {e}"))?;
    cfg.vocab_size = vocab_size;
    cfg.d_v = d_v;
    cfg.qa_t = qa_t;
    cfg.init_seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_overlays_nested_objects() {
        let mut base = json!({"a": {"x": 1, "y": 2}, "b": 3});
        merge(&mut base, &json!({"a": {"y": 5}, "c": [1]}));
        assert_eq!(base, json!({"a": {"x": 1, "y": 5}, "b": 3, "c": [1]}));
    }

    #[test]
    fn shipped_paper_profile_matches_builtin_defaults() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../profiles/paper.json");
        let text = std::fs::read_to_string(path).unwrap();
        let file: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(file, builtin());
    }

    #[test]
    fn desk_profile_loads() {
        let path = Path::new(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../profiles/desk.json"
        ));
        let p = load_profile(Some(path)).unwrap();
        let m = model_config(&p, 50, 7, false, 3).unwrap();
        assert_eq!((m.vocab_size, m.d_v, m.init_seed), (50, 7, 3));
        assert!(m.d < 512);
        let _: GenerationConfig = section(&p, "generation").unwrap();
    }
}
