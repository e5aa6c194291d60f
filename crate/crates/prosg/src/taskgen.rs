//! Synthetic multi-stage-instruction tasks with machine-checkable
//! compliance, plus the byte tokenizer and JSONL dataset I/O.
//!
//! Three task kinds probe prompt memory:
//! - recall: recite a digit payload after a long filler spacer;
//! - multi-part: answer 2–3 ordered sub-instructions;
//! - count-then-use: list exactly N items, then reference at least
//!   half of them.
//!
//! Compliance is decided by string procedures over the generated text
//! alone, so accuracy scoring needs no external judge.

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

// ── tokenizer ───────────────────────────────────────────────────────

/// Byte-level tokenizer: ids 0–255 are raw bytes, then BOS/EOS/PAD.
#[derive(Debug, Clone, Copy, Default)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Decode, stripping the special ids.
    pub fn decode(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn encode_prompt(&self, text: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        out.extend(self.encode(text));
        out
    }

    pub fn encode_response(&self, text: &str) -> Vec<u32> {
        let mut out = self.encode(text);
        out.push(EOS);
        out
    }
}

// ── task specs and samples ──────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Recall,
    MultiPart,
    CountThenUse,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Recall => "recall",
            TaskKind::MultiPart => "multi-part",
            TaskKind::CountThenUse => "count-then-use",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub payload_len: usize,
    pub spacer_len: usize,
    pub seed: u64,
}

/// Compliance predicate, evaluable from output text alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Checker {
    Recall { payload: String },
    MultiPart { sections: Vec<String> },
    CountThenUse { items: Vec<String>, min_refs: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub prompt: String,
    pub response: String,
    pub prompt_len: usize,
    pub checker: Checker,
}

impl Sample {
    pub fn prompt_tokens(&self) -> Vec<u32> {
        Tokenizer.encode_prompt(&self.prompt)
    }

    pub fn response_tokens(&self) -> Vec<u32> {
        Tokenizer.encode_response(&self.response)
    }

    /// prompt ++ response ++ EOS, the training sequence.
    pub fn full_tokens(&self) -> Vec<u32> {
        let mut t = self.prompt_tokens();
        t.extend(self.response_tokens());
        t
    }

    pub fn kind_name(&self) -> &'static str {
        match self.checker {
            Checker::Recall { .. } => "recall",
            Checker::MultiPart { .. } => "multi-part",
            Checker::CountThenUse { .. } => "count-then-use",
        }
    }
}

const WORDS: &[&str] = &[
    "time", "year", "people", "way", "day", "man", "thing", "woman", "life", "child", "world",
    "school", "state", "family", "student", "group", "country", "problem", "hand", "part", "place",
    "case", "week", "company", "system", "program", "question", "work", "number", "night", "point",
    "home", "water", "room", "mother", "area", "money", "story", "fact", "month",
];

fn filler_text(len: usize, rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    while s.len() < len {
        if !s.is_empty() {
            s.push(' ');
        }
        s.push_str(WORDS[rng.gen_range(0..WORDS.len())]);
    }
    s.truncate(len);
    s
}

/// Deterministically generate one sample from a spec.
pub fn gen_task(spec: &TaskSpec, context_cap: usize) -> Result<Sample> {
    if spec.payload_len < 1 {
        return Err(Error::precondition("gen_task: payload_len must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sample = match spec.kind {
        TaskKind::Recall => {
            let digits: Vec<String> = (0..spec.payload_len)
                .map(|_| rng.gen_range(0..10u8).to_string())
                .collect();
            let payload = digits.join(" ");
            let mut prompt = format!("SEQ: {payload}.");
            if spec.spacer_len > 0 {
                let filler = filler_text(spec.spacer_len, &mut rng);
                prompt.push_str(&format!(" FILLER: {filler}."));
            }
            prompt.push_str(" RECITE:");
            Sample {
                id: format!("recall-{:08x}", spec.seed),
                prompt_len: prompt.len() + 1,
                prompt,
                response: payload.clone(),
                checker: Checker::Recall { payload },
            }
        }
        TaskKind::MultiPart => {
            let s = rng.gen_range(2..=3usize);
            let phrases: Vec<String> = (0..s)
                .map(|_| {
                    format!(
                        "{} {}",
                        WORDS[rng.gen_range(0..WORDS.len())],
                        WORDS[rng.gen_range(0..WORDS.len())]
                    )
                })
                .collect();
            let mut prompt = String::from("TASKS:");
            for (i, ph) in phrases.iter().enumerate() {
                prompt.push_str(&format!(" {}) say {ph}.", i + 1));
            }
            prompt.push_str(" GO:");
            let sections: Vec<String> = (0..s).map(|i| format!("PART{}:", i + 1)).collect();
            let response = phrases
                .iter()
                .enumerate()
                .map(|(i, ph)| format!("PART{}: {ph}", i + 1))
                .collect::<Vec<_>>()
                .join(" ");
            Sample {
                id: format!("multi-{:08x}", spec.seed),
                prompt_len: prompt.len() + 1,
                prompt,
                response,
                checker: Checker::MultiPart { sections },
            }
        }
        TaskKind::CountThenUse => {
            let n = rng.gen_range(3..=6usize);
            let mut items: Vec<String> = Vec::new();
            while items.len() < n {
                let w = WORDS[rng.gen_range(0..WORDS.len())].to_string();
                if !items.contains(&w) {
                    items.push(w);
                }
            }
            let min_refs = n.div_ceil(2);
            let prompt = format!(
                "ITEMS: {}. LIST ALL {n} THEN USE {min_refs}. GO:",
                items.join(" ")
            );
            let listed = items
                .iter()
                .enumerate()
                .map(|(i, w)| format!("{}. {w}", i + 1))
                .collect::<Vec<_>>()
                .join(" ");
            let used = items[..min_refs].join(" ");
            let response = format!("{listed} USING: {used}");
            Sample {
                id: format!("count-{:08x}", spec.seed),
                prompt_len: prompt.len() + 1,
                prompt,
                response,
                checker: Checker::CountThenUse { items, min_refs },
            }
        }
    };
    if sample.prompt_len + sample.response.len() + 1 > context_cap {
        return Err(Error::precondition(format!(
            "gen_task: sample length {} exceeds context cap {context_cap}",
            sample.prompt_len + sample.response.len() + 1
        )));
    }
    Ok(sample)
}

// ── compliance ──────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Compliance {
    Pass,
    Fail(String),
}

impl Compliance {
    pub fn passed(&self) -> bool {
        matches!(self, Compliance::Pass)
    }
}

/// Binary scoring: all sub-instructions honored, or zero.
pub fn check_compliance(sample: &Sample, output: &str) -> Compliance {
    match &sample.checker {
        Checker::Recall { payload } => {
            if output.contains(payload.as_str()) {
                Compliance::Pass
            } else {
                Compliance::Fail("payload mismatch".into())
            }
        }
        Checker::MultiPart { sections } => {
            let mut pos = 0usize;
            for (i, tag) in sections.iter().enumerate() {
                match output[pos..].find(tag.as_str()) {
                    Some(off) => pos += off + tag.len(),
                    None => {
                        return Compliance::Fail(format!("missing sub-instruction {}", i + 1));
                    }
                }
            }
            Compliance::Pass
        }
        Checker::CountThenUse { items, min_refs } => {
            let n = items.len();
            let mut pos = 0usize;
            for i in 1..=n {
                let marker = format!("{i}.");
                match output[pos..].find(&marker) {
                    Some(off) => pos += off + marker.len(),
                    None => return Compliance::Fail(format!("missing item {i}")),
                }
            }
            let extra = format!("{}.", n + 1);
            if output.contains(&extra) {
                return Compliance::Fail(format!("more than {n} items listed"));
            }
            let Some(use_pos) = output.find("USING:") else {
                return Compliance::Fail("missing USING section".into());
            };
            let tail = &output[use_pos + "USING:".len()..];
            let refs = items.iter().filter(|w| tail.contains(w.as_str())).count();
            if refs < *min_refs {
                return Compliance::Fail(format!(
                    "only {refs} of {min_refs} required item references"
                ));
            }
            Compliance::Pass
        }
    }
}

// ── dataset generation and I/O ──────────────────────────────────────

/// Mixed-kind dataset: 50% recall, 30% multi-part, 20% count-then-use.
pub fn gen_dataset(
    kind: Option<TaskKind>,
    count: usize,
    payload_len: usize,
    spacer_len: usize,
    seed: u64,
    context_cap: usize,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let k = match kind {
            Some(k) => k,
            None => match i % 10 {
                0..=4 => TaskKind::Recall,
                5..=7 => TaskKind::MultiPart,
                _ => TaskKind::CountThenUse,
            },
        };
        let spec = TaskSpec {
            kind: k,
            payload_len,
            spacer_len,
            seed: seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(i as u64),
        };
        let mut s = gen_task(&spec, context_cap)?;
        s.id = format!("{}-{i:06}", k.name());
        out.push(s);
    }
    Ok(out)
}

pub fn write_dataset(samples: &[Sample], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        serde_json::to_writer(&mut f, s)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Sample>> {
    let f = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Dataset {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if s.prompt_len != s.prompt.len() + 1 {
            return Err(Error::Dataset {
                line: i + 1,
                detail: format!(
                    "prompt_len {} inconsistent with prompt text length {}",
                    s.prompt_len,
                    s.prompt.len()
                ),
            });
        }
        out.push(s);
    }
    Ok(out)
}

/// PAD id re-exported for batching code.
pub const PAD_TOKEN: u32 = PAD;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_recall_sample() {
        let spec = TaskSpec {
            kind: TaskKind::Recall,
            payload_len: 1,
            spacer_len: 0,
            seed: 7,
        };
        let s = gen_task(&spec, 1024).unwrap();
        assert!(s.prompt.ends_with("RECITE:"));
        assert_eq!(s.response.len(), 1);
        assert!(s.response.chars().all(|c| c.is_ascii_digit()));
    }

    #[test]
    fn determinism() {
        let spec = TaskSpec {
            kind: TaskKind::MultiPart,
            payload_len: 1,
            spacer_len: 16,
            seed: 42,
        };
        assert_eq!(gen_task(&spec, 1024).unwrap(), gen_task(&spec, 1024).unwrap());
    }

    #[test]
    fn gold_self_compliance_all_kinds() {
        for kind in [TaskKind::Recall, TaskKind::MultiPart, TaskKind::CountThenUse] {
            for seed in 0..1000u64 {
                let spec = TaskSpec {
                    kind,
                    payload_len: 4,
                    spacer_len: 8,
                    seed,
                };
                let s = gen_task(&spec, 4096).unwrap();
                assert_eq!(
                    check_compliance(&s, &s.response),
                    Compliance::Pass,
                    "kind {kind:?} seed {seed}"
                );
            }
        }
    }

    #[test]
    fn recall_corruption_always_fails() {
        for seed in 0..100u64 {
            let spec = TaskSpec {
                kind: TaskKind::Recall,
                payload_len: 6,
                spacer_len: 0,
                seed,
            };
            let s = gen_task(&spec, 4096).unwrap();
            let mut bytes = s.response.clone().into_bytes();
            // flip the first digit
            bytes[0] = if bytes[0] == b'9' { b'0' } else { bytes[0] + 1 };
            let corrupted = String::from_utf8(bytes).unwrap();
            assert!(!check_compliance(&s, &corrupted).passed(), "seed {seed}");
        }
    }

    #[test]
    fn multipart_missing_last_section_fails() {
        let spec = TaskSpec {
            kind: TaskKind::MultiPart,
            payload_len: 1,
            spacer_len: 0,
            seed: 5,
        };
        let s = gen_task(&spec, 1024).unwrap();
        let Checker::MultiPart { sections } = &s.checker else {
            unreachable!()
        };
        let last = sections.last().unwrap();
        let truncated = s.response[..s.response.find(last.as_str()).unwrap()].to_string();
        let v = check_compliance(&s, &truncated);
        assert_eq!(
            v,
            Compliance::Fail(format!("missing sub-instruction {}", sections.len()))
        );
    }

    #[test]
    fn dataset_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let samples = gen_dataset(None, 100, 4, 8, 3, 4096).unwrap();
        write_dataset(&samples, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(samples, back);

        // empty file is an empty dataset
        let empty = dir.path().join("empty.jsonl");
        std::fs::write(&empty, "").unwrap();
        assert!(read_dataset(&empty).unwrap().is_empty());

        // truncated final line names the line
        let bad = dir.path().join("bad.jsonl");
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.truncate(text.len() - 40);
        std::fs::write(&bad, text).unwrap();
        match read_dataset(&bad) {
            Err(Error::Dataset { line, .. }) => assert_eq!(line, 100),
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn tokenizer_specials() {
        let t = Tokenizer;
        let p = t.encode_prompt("hi");
        assert_eq!(p, vec![BOS, b'h' as u32, b'i' as u32]);
        let r = t.encode_response("ok");
        assert_eq!(*r.last().unwrap(), EOS);
        assert_eq!(t.decode(&p), "hi");
    }
}
