use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use vqa_core::evaluate::{build_vocab, AnswerVocabulary, EvalSample, GroundTruth, VocabRule};

use crate::input_err;

/// Parsed `--vocab` argument.
#[derive(Debug, Clone, PartialEq)]
pub enum VocabSpec {
    Rule(VocabRule),
    File(PathBuf),
}

impl std::str::FromStr for VocabSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|e| format!("bad count in {s:?}: {e}"))
        };
        if let Some(v) = s.strip_prefix("top_k:") {
            return Ok(VocabSpec::Rule(VocabRule::TopK(num(v)?)));
        }
        if let Some(v) = s.strip_prefix("min_count:") {
            return Ok(VocabSpec::Rule(VocabRule::MinCount(num(v)?)));
        }
        Ok(VocabSpec::File(PathBuf::from(s)))
    }
}

/// Answers a training split contributes to vocabulary counts.
pub fn training_answers(samples: &[EvalSample]) -> Vec<&str> {
    samples
        .iter()
        .filter(|s| !matches!(s.ground_truth, GroundTruth::MultipleChoice { .. }))
        .map(|s| s.ground_truth.primary())
        .collect()
}

/// Reads either a JSON list of answers or a saved vocabulary object.
pub fn read_vocab_file(path: &Path) -> Result<AnswerVocabulary> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| input_err!("cannot read vocabulary {}: {e}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| input_err!("vocabulary {}: {e}", path.display()))?;
    let vocab = if value.is_array() {
        let list: Vec<String> = serde_json::from_value(value)
            .map_err(|e| input_err!("vocabulary {}: {e}", path.display()))?;
        AnswerVocabulary::from_list(list)?
    } else {
        let v: AnswerVocabulary = serde_json::from_value(value)
            .map_err(|e| input_err!("vocabulary {}: {e}", path.display()))?;
        v.reindex()?
    };
    Ok(vocab)
}

pub fn resolve(spec: &VocabSpec, train: Option<&[EvalSample]>) -> Result<AnswerVocabulary> {
    match spec {
        VocabSpec::File(p) => read_vocab_file(p),
        VocabSpec::Rule(rule) => {
            let train = train.ok_or_else(|| {
                input_err!("--vocab {rule:?} needs a training split to count answers")
            })?;
            build_vocab(training_answers(train), rule.clone())
                .context("building the answer vocabulary")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_vocab_arguments() {
        assert_eq!(
            "top_k:4000".parse::<VocabSpec>().unwrap(),
            VocabSpec::Rule(VocabRule::TopK(4000))
        );
        assert_eq!(
            "min_count:2".parse::<VocabSpec>().unwrap(),
            VocabSpec::Rule(VocabRule::MinCount(2))
        );
        assert_eq!(
            "v.json".parse::<VocabSpec>().unwrap(),
            VocabSpec::File("v.json".into())
        );
        assert!("top_k:x".parse::<VocabSpec>().is_err());
    }

    #[test]
    fn reads_both_file_forms() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("list.json");
        std::fs::write(&list, r#"["a", "b"]"#).unwrap();
        let v = read_vocab_file(&list).unwrap();
        assert_eq!(v.answers(), ["a", "b"]);
        let obj = dir.path().join("obj.json");
        std::fs::write(&obj, serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(read_vocab_file(&obj).unwrap().get("b"), Some(1));
    }
}
