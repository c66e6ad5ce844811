//! Prompt-leakage probe: caption an image while the encoder sees its own
//! caption, no caption, or another image's caption, and compare scores.

mod metrics;

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::CaptionRecord;
use crate::error::{Error, Result};

pub use metrics::{
    bleu4, caption_score, cider_d, corpus_bleu4, rouge_l, tokenize, CaptionScore, CiderResult, BLEU_EPSILON, ROUGE_BETA,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SettingKind {
    Matched,
    NoCaption,
    Mismatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub kind: SettingKind,
    /// Shuffle seed; only used by `Mismatched`.
    pub seed: u64,
}

/// A permutation with no fixed points, by seeded rejection sampling.
pub fn derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("no derangement of {n} items")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(&mut rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitItem {
    pub image_id: String,
    pub image: PathBuf,
    /// Text given to the diffusion encoder; empty for no caption.
    pub prompt: String,
    /// Ground truth of this image, whatever the prompt.
    pub references: Vec<String>,
}

pub fn build_eval_split(records: &[CaptionRecord], setting: EvalSetting) -> Result<Vec<SplitItem>> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("empty caption dataset".into()));
    }
    let source: Vec<usize> = match setting.kind {
        SettingKind::Matched | SettingKind::NoCaption => (0..records.len()).collect(),
        SettingKind::Mismatched => derangement(records.len(), setting.seed)?,
    };
    Ok(records
        .iter()
        .zip(source)
        .map(|(r, src)| SplitItem {
            image_id: r.image_id.clone(),
            image: r.image.clone(),
            prompt: match setting.kind {
                SettingKind::NoCaption => String::new(),
                _ => records[src].references[0].clone(),
            },
            references: r.references.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub probability: f64,
    pub seed: u64,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            probability: 0.3,
            seed: 0,
        }
    }
}

/// Empty with probability `p`; each `draw_index` reads its own ChaCha stream.
pub fn apply_caption_dropout(prompt: &str, policy: &DropoutPolicy, draw_index: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    rng.set_stream(draw_index);
    if rng.gen::<f64>() < policy.probability {
        String::new()
    } else {
        prompt.to_string()
    }
}

/// Produces a caption from an image and the encoder prompt.
pub trait Captioner {
    fn caption(&mut self, image: &Path, prompt: &str) -> Result<String>;
}

impl<F: FnMut(&Path, &str) -> Result<String>> Captioner for F {
    fn caption(&mut self, image: &Path, prompt: &str) -> Result<String> {
        self(image, prompt)
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    image: &'a Path,
    prompt: &'a str,
}

#[derive(Deserialize)]
struct CaptionReply {
    caption: String,
}

/// Long-lived child process speaking JSON lines: `{"image", "prompt"}` in,
/// `{"caption"}` out.
pub struct SubprocessCaptioner {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl SubprocessCaptioner {
    /// Runs `command` through `sh -c`.
    pub fn spawn(command: &str) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Captioner(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }
}

impl Captioner for SubprocessCaptioner {
    fn caption(&mut self, image: &Path, prompt: &str) -> Result<String> {
        let line = serde_json::to_string(&CaptionRequest { image, prompt })?;
        writeln!(self.stdin, "{line}")
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Captioner(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Captioner(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Captioner("captioner exited before replying".into()));
        }
        let parsed: CaptionReply = serde_json::from_str(reply.trim())
            .map_err(|e| Error::Captioner(format!("bad reply `{}`: {e}", reply.trim())))?;
        Ok(parsed.caption)
    }
}

impl Drop for SubprocessCaptioner {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub setting: SettingKind,
    pub score: CaptionScore,
    pub captions: Vec<(String, String)>,
}

pub fn evaluate_split<C: Captioner + ?Sized>(captioner: &mut C, split: &[SplitItem], kind: SettingKind) -> Result<SplitResult> {
    let mut captions = Vec::with_capacity(split.len());
    for item in split {
        captions.push(captioner.caption(&item.image, &item.prompt)?);
    }
    let refs: Vec<Vec<String>> = split.iter().map(|i| i.references.clone()).collect();
    Ok(SplitResult {
        setting: kind,
        score: caption_score(&captions, &refs)?,
        captions: split.iter().map(|i| i.image_id.clone()).zip(captions).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub matched: CaptionScore,
    pub no_caption: CaptionScore,
    pub mismatched: CaptionScore,
    /// Mismatched minus no-caption CIDEr-D; positive suggests leakage.
    pub index: f64,
    pub index_bleu4: f64,
    pub index_rouge_l: f64,
}

impl LeakageReport {
    pub fn from_scores(matched: CaptionScore, no_caption: CaptionScore, mismatched: CaptionScore) -> Self {
        Self {
            index: mismatched.cider_d - no_caption.cider_d,
            index_bleu4: mismatched.bleu4 - no_caption.bleu4,
            index_rouge_l: mismatched.rouge_l - no_caption.rouge_l,
            matched,
            no_caption,
            mismatched,
        }
    }
}

pub fn leakage_index<C: Captioner + ?Sized>(captioner: &mut C, records: &[CaptionRecord], seed: u64) -> Result<LeakageReport> {
    let run = |c: &mut C, kind| {
        let split = build_eval_split(records, EvalSetting { kind, seed })?;
        evaluate_split(c, &split, kind).map(|r| r.score)
    };
    let matched = run(captioner, SettingKind::Matched)?;
    let no_caption = run(captioner, SettingKind::NoCaption)?;
    let mismatched = run(captioner, SettingKind::Mismatched)?;
    Ok(LeakageReport::from_scores(matched, no_caption, mismatched))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn records(n: usize) -> Vec<CaptionRecord> {
        let subjects = ["cat", "dog", "horse", "bird", "car", "boat", "tree", "house"];
        (0..n)
            .map(|i| CaptionRecord {
                image_id: format!("{i:05}"),
                image: PathBuf::from(format!("img{i}.png")),
                references: vec![
                    format!("a {} number {i} near a {} wall", subjects[i % 8], subjects[(i + 3) % 8]),
                    format!("the {} {i} and the {} outside", subjects[i % 8], subjects[(i + 5) % 8]),
                ],
            })
            .collect()
    }

    #[test]
    fn splits() {
        let rs = records(2);
        let nc = build_eval_split(&rs, EvalSetting { kind: SettingKind::NoCaption, seed: 0 }).unwrap();
        assert!(nc.iter().all(|s| s.prompt.is_empty()));
        let m = build_eval_split(&rs, EvalSetting { kind: SettingKind::Matched, seed: 0 }).unwrap();
        assert_eq!(m[1].prompt, rs[1].references[0]);
        let mm = build_eval_split(&rs, EvalSetting { kind: SettingKind::Mismatched, seed: 9 }).unwrap();
        assert_eq!(mm[0].prompt, rs[1].references[0]);
        assert_eq!(mm[1].prompt, rs[0].references[0]);
        assert_eq!(mm[0].references, rs[0].references);
        assert!(build_eval_split(&rs[..1], EvalSetting { kind: SettingKind::Mismatched, seed: 0 }).is_err());
    }

    #[test]
    fn derangement_fixed_point_scan() {
        for n in [2, 3, 100, 10_000] {
            for seed in 0..3 {
                let p = derangement(n, seed).unwrap();
                let mut sorted = p.clone();
                sorted.sort_unstable();
                assert!(sorted.iter().enumerate().all(|(i, &v)| i == v));
                assert!(p.iter().enumerate().all(|(i, &v)| i != v));
                assert_eq!(p, derangement(n, seed).unwrap());
            }
        }
    }

    #[test]
    fn dropout_rates() {
        let p0 = DropoutPolicy { probability: 0.0, seed: 1 };
        let p1 = DropoutPolicy { probability: 1.0, seed: 1 };
        assert!((0..1000).all(|i| apply_caption_dropout("x", &p0, i) == "x"));
        assert!((0..1000).all(|i| apply_caption_dropout("x", &p1, i).is_empty()));
        let p = DropoutPolicy::default();
        let n = 100_000u64;
        let dropped = (0..n).filter(|&i| apply_caption_dropout("x", &p, i).is_empty()).count();
        assert!((dropped as f64 / n as f64 - 0.3).abs() <= 0.005);
        assert_eq!(apply_caption_dropout("x", &p, 17), apply_caption_dropout("x", &p, 17));
    }

    #[test]
    fn prompt_blind_and_echo_captioners() {
        let rs = records(12);
        let mut blind = |_: &Path, _: &str| Ok("a photo of something".to_string());
        let r = leakage_index(&mut blind, &rs, 4).unwrap();
        assert_eq!(r.mismatched, r.no_caption);
        assert_eq!(r.index, 0.0);

        let mut echo = |_: &Path, p: &str| Ok(p.to_string());
        let r = leakage_index(&mut echo, &rs, 4).unwrap();
        assert_eq!(r.no_caption.cider_d, 0.0);
        assert!(r.matched.cider_d > r.mismatched.cider_d);
        assert!(r.matched.bleu4 > 0.5);
    }

    #[test]
    fn subprocess_protocol() {
        let script = r#"while IFS= read -r line; do printf '{"caption": "echo %s"}\n' "${#line}"; done"#;
        let mut c = SubprocessCaptioner::spawn(script).unwrap();
        let a = c.caption(Path::new("a.png"), "hi").unwrap();
        assert!(a.starts_with("echo "));
        let b = c.caption(Path::new("a.png"), "hi").unwrap();
        assert_eq!(a, b);
        let mut dead = SubprocessCaptioner::spawn("exit 0").unwrap();
        assert!(matches!(dead.caption(Path::new("a"), "b"), Err(Error::Captioner(_))));
    }

    proptest! {
        #[test]
        fn derangement_any_seed(n in 2usize..200, seed in any::<u64>()) {
            let p = derangement(n, seed).unwrap();
            prop_assert!(p.iter().enumerate().all(|(i, &v)| i != v));
        }

        #[test]
        fn dropout_deterministic(seed in any::<u64>(), idx in any::<u64>()) {
            let p = DropoutPolicy { probability: 0.5, seed };
            prop_assert_eq!(apply_caption_dropout("q", &p, idx), apply_caption_dropout("q", &p, idx));
        }
    }
}
