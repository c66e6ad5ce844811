//! Caption metrics over a fixed tokenizer: lowercase, ASCII punctuation
//! removed, whitespace split.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to zero clipped n-gram counts.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionScore {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

type Gram<'a> = &'a [String];

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<Gram<'_>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

#[derive(Default)]
struct BleuStats {
    correct: [usize; MAX_N],
    guess: [usize; MAX_N],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add(&mut self, cand: &[String], refs: &[Vec<String>]) {
        self.cand_len += cand.len();
        // Closest reference length, shorter on ties.
        self.ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap_or(0);
        for n in 1..=MAX_N {
            let c = ngram_counts(cand, n);
            let mut max_ref: HashMap<Gram<'_>, usize> = HashMap::new();
            for r in refs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            self.guess[n - 1] += cand.len().saturating_sub(n - 1);
            self.correct[n - 1] += c.iter().map(|(g, k)| (*k).min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    fn score(&self) -> f64 {
        if self.cand_len == 0 {
            return 0.0;
        }
        let log_p: f64 = (0..MAX_N)
            .map(|i| {
                if self.guess[i] == 0 {
                    BLEU_EPSILON.ln()
                } else {
                    ((self.correct[i] as f64).max(BLEU_EPSILON) / self.guess[i] as f64).ln()
                }
            })
            .sum::<f64>()
            / MAX_N as f64;
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * log_p.exp()
    }
}

/// Sentence BLEU-4 of one candidate against its references.
pub fn bleu4(candidate: &str, references: &[String]) -> f64 {
    corpus_bleu4(&[candidate.to_string()], &[references.to_vec()])
}

/// Corpus BLEU-4: clipped counts and lengths are summed before the ratio.
pub fn corpus_bleu4(candidates: &[String], references: &[Vec<String>]) -> f64 {
    let mut stats = BleuStats::default();
    for (c, refs) in candidates.iter().zip(references) {
        let refs: Vec<Vec<String>> = refs.iter().map(|r| tokenize(r)).collect();
        stats.add(&tokenize(c), &refs);
    }
    stats.score()
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure, taking the best precision and best recall over references
/// separately.
pub fn rouge_l(candidate: &str, references: &[String]) -> f64 {
    let cand = tokenize(candidate);
    if cand.is_empty() {
        return 0.0;
    }
    let (mut p, mut r) = (0.0f64, 0.0f64);
    for reference in references {
        let rt = tokenize(reference);
        if rt.is_empty() {
            continue;
        }
        let l = lcs(&cand, &rt) as f64;
        p = p.max(l / cand.len() as f64);
        r = r.max(l / rt.len() as f64);
    }
    if p == 0.0 || r == 0.0 {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiderResult {
    pub per_candidate: Vec<f64>,
    pub mean: f64,
}

struct TfIdf<'a> {
    vec: [HashMap<Gram<'a>, f64>; MAX_N],
    norm: [f64; MAX_N],
    length: usize,
}

fn all_grams(tokens: &[String]) -> HashMap<Gram<'_>, usize> {
    (1..=MAX_N).flat_map(|n| ngram_counts(tokens, n)).collect()
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<Gram<'_>, f64>, log_n: f64) -> TfIdf<'a> {
    let mut out = TfIdf {
        vec: Default::default(),
        norm: [0.0; MAX_N],
        length: 0,
    };
    for (g, tf) in all_grams(tokens) {
        let n = g.len() - 1;
        let idf = log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
        let w = tf as f64 * idf;
        out.vec[n].insert(g, w);
        out.norm[n] += w * w;
        // Length follows the bigram term frequency, as in the reference scorer.
        if n == 1 {
            out.length += tf;
        }
    }
    for v in &mut out.norm {
        *v = v.sqrt();
    }
    out
}

/// CIDEr-D with document frequencies taken over the reference corpus.
pub fn cider_d(candidates: &[String], references: &[Vec<String>]) -> Result<CiderResult> {
    if references.is_empty() || references.iter().all(|r| r.is_empty()) {
        return Err(Error::InvalidArgument("CIDEr-D needs a non-empty reference corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} candidates for {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    let cand_tok: Vec<Vec<String>> = candidates.iter().map(|c| tokenize(c)).collect();
    let ref_tok: Vec<Vec<Vec<String>>> =
        references.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();

    let mut df: HashMap<Gram<'_>, f64> = HashMap::new();
    for refs in &ref_tok {
        let mut seen: Vec<Gram<'_>> = refs.iter().flat_map(|r| all_grams(r).into_keys()).collect();
        seen.sort_unstable();
        seen.dedup();
        for g in seen {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_n = (references.len() as f64).ln();
    let to_vec = |tokens| tfidf(tokens, &df, log_n);
    let sim = |h: &TfIdf<'_>, r: &TfIdf<'_>| -> f64 {
        let delta = h.length as f64 - r.length as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        (0..MAX_N)
            .map(|n| {
                let mut v: f64 = h.vec[n]
                    .iter()
                    .map(|(g, w)| {
                        let rw = r.vec[n].get(g).copied().unwrap_or(0.0);
                        w.min(rw) * rw
                    })
                    .sum();
                if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
                    v /= h.norm[n] * r.norm[n];
                }
                v * penalty
            })
            .sum::<f64>()
            / MAX_N as f64
    };
    let per_candidate: Vec<f64> = cand_tok
        .iter()
        .zip(&ref_tok)
        .map(|(c, refs)| {
            if refs.is_empty() {
                return 0.0;
            }
            let h = to_vec(c);
            10.0 * refs.iter().map(|r| sim(&h, &to_vec(r))).sum::<f64>() / refs.len() as f64
        })
        .collect();
    let mean = per_candidate.iter().sum::<f64>() / per_candidate.len() as f64;
    Ok(CiderResult { per_candidate, mean })
}

/// Corpus BLEU-4, mean ROUGE-L and mean CIDEr-D.
pub fn caption_score(candidates: &[String], references: &[Vec<String>]) -> Result<CaptionScore> {
    let cider = cider_d(candidates, references)?;
    let rouge = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / candidates.len() as f64;
    Ok(CaptionScore {
        bleu4: corpus_bleu4(candidates, references),
        rouge_l: rouge,
        cider_d: cider.mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("A Dog's  ball, red!"), s(&["a", "dogs", "ball", "red"]));
        assert!(tokenize(" ... ").is_empty());
    }

    #[test]
    fn bleu_identity_disjoint_empty() {
        let r = s(&["a man rides a red horse"]);
        assert!((bleu4("A man rides a red horse.", &r) - 1.0).abs() < 1e-12);
        assert!(bleu4("the quick brown fox jumps", &r) <= 1e-6);
        assert_eq!(bleu4("", &r), 0.0);
    }

    #[test]
    fn bleu_hand_computed_corpus() {
        // cand 1 "the cat sat on the mat" vs refs "the cat is on the mat" / "a cat sat on a mat"
        //   1-grams: the x2 (max ref 2), cat, sat, on, mat -> 6/6
        //   2-grams: the cat, cat sat, sat on, on the, the mat -> 5/5
        //   3-grams: the cat sat(no), cat sat on(yes), sat on the(no), on the mat(yes) -> 2/4
        //   4-grams: the cat sat on(no), cat sat on the(no), sat on the mat(no) -> 0/3
        //   ref len 6
        // cand 2 "a dog runs" vs "a dog runs fast": 3/3, 2/2, 1/1, 0/0; closest ref len 4
        // cand 3 "green tree" vs "green trees here": 1/2, 0/1, 0/0, 0/0; ref len 3
        // totals: 1-gram 10/11, 2-gram 7/8, 3-gram 3/5, 4-gram 0/3; c=11, r=13
        let cands = s(&["the cat sat on the mat", "a dog runs", "green tree"]);
        let refs = vec![
            s(&["the cat is on the mat", "a cat sat on a mat"]),
            s(&["a dog runs fast"]),
            s(&["green trees here"]),
        ];
        let p = [10.0 / 11.0, 7.0 / 8.0, 3.0 / 5.0, 1e-9 / 3.0];
        let geo = (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
        let want = (1.0 - 13.0 / 11.0f64).exp() * geo;
        let got = corpus_bleu4(&cands, &refs);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn rouge_cases() {
        let r = s(&["police killed the gunman"]);
        assert!((rouge_l("police killed the gunman", &r) - 1.0).abs() < 1e-15);
        assert_eq!(rouge_l("a b c", &r), 0.0);
        assert_eq!(rouge_l("", &r), 0.0);
        // LCS("the gunman kill police", ref) = 2 ("the gunman"): P = 2/4, R = 2/4.
        let got = rouge_l("the gunman kill police", &r);
        let (p, rr, b2) = (0.5, 0.5, 1.44);
        assert_eq!(got, (1.0 + b2) * p * rr / (rr + b2 * p));
    }

    /// Dynamic-programming-free LCS oracle: exhaustive subsequence search.
    fn brute_lcs(a: &[String], b: &[String]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|w| it.any(|x| x == *w)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    #[test]
    fn cider_disjoint_and_errors() {
        let refs = vec![s(&["a cat on a mat"]), s(&["a dog in the park"]), s(&["two birds fly"])];
        let c = cider_d(&s(&["zebra xylophone", "quantum entropy", "violet kettle"]), &refs).unwrap();
        assert!(c.per_candidate.iter().all(|&v| v == 0.0));
        assert!(cider_d(&[], &[]).is_err());
        assert!(cider_d(&s(&["a"]), &refs).is_err());
    }

    #[test]
    fn cider_matches_reference_snapshot() {
        // Reference values from the pycocoevalcap 1.2 CIDEr-D scorer run on the
        // same pre-tokenized corpus.
        let refs = vec![
            s(&["a man riding a horse on a beach", "a person rides a brown horse near the sea"]),
            s(&["two dogs play with a ball in the grass", "dogs playing fetch on a lawn"]),
            s(&["a red car parked on the street", "a small red car beside the road"]),
            s(&["a plate of food with broccoli and rice", "rice and vegetables on a white plate"]),
        ];
        let cands = s(&[
            "a man riding a horse on the beach",
            "two dogs playing in the grass",
            "a red car on a street",
            "a plate with rice and broccoli",
        ]);
        let got = cider_d(&cands, &refs).unwrap();
        let want = [CIDER_SNAPSHOT[0], CIDER_SNAPSHOT[1], CIDER_SNAPSHOT[2], CIDER_SNAPSHOT[3]];
        for (g, w) in got.per_candidate.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{g} vs {w}");
        }
        assert!((got.mean - CIDER_SNAPSHOT[4]).abs() < 1e-9);

        let ident: Vec<String> = refs.iter().map(|r| r[0].clone()).collect();
        let sole: Vec<Vec<String>> = ident.iter().map(|r| vec![r.clone()]).collect();
        let c = cider_d(&ident, &sole).unwrap();
        assert!((c.mean - CIDER_SNAPSHOT[5]).abs() < 1e-9, "{}", c.mean);
    }

    const CIDER_SNAPSHOT: [f64; 6] = [
        4.047750830040456,
        2.358058248753112,
        2.722299409380078,
        2.2227088119381504,
        2.837704325027949,
        10.0,
    ];

    #[test]
    fn cider_order_independent() {
        let refs = vec![s(&["a cat on a mat"]), s(&["a dog in the park"]), s(&["two birds fly high"])];
        let cands = s(&["a cat on the mat", "dog in a park", "birds fly"]);
        let base = cider_d(&cands, &refs).unwrap();
        let perm = [2usize, 0, 1];
        let c2: Vec<String> = perm.iter().map(|&i| cands[i].clone()).collect();
        let r2: Vec<Vec<String>> = perm.iter().map(|&i| refs[i].clone()).collect();
        let shuffled = cider_d(&c2, &r2).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert!((shuffled.per_candidate[k] - base.per_candidate[i]).abs() < 1e-12);
        }
    }

    fn words() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "cat", "dog", "on", "the", "mat", "red", "runs"]), 4..9)
            .prop_map(|v| v.into_iter().map(str::to_string).collect())
    }

    proptest! {
        #[test]
        fn identity_and_reference_order(c in words(), r1 in words(), r2 in words()) {
            let cand = c.join(" ");
            prop_assert!((bleu4(&cand, std::slice::from_ref(&cand)) - 1.0).abs() < 1e-12);
            prop_assert!((rouge_l(&cand, std::slice::from_ref(&cand)) - 1.0).abs() < 1e-12);
            let refs = vec![r1.join(" "), r2.join(" ")];
            let rev = vec![refs[1].clone(), refs[0].clone()];
            prop_assert_eq!(bleu4(&cand, &refs), bleu4(&cand, &rev));
            prop_assert_eq!(rouge_l(&cand, &refs), rouge_l(&cand, &rev));
            let b = bleu4(&cand, &refs);
            let r = rouge_l(&cand, &refs);
            prop_assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&r));
        }

        #[test]
        fn lcs_matches_brute_force(a in words(), b in words()) {
            prop_assert_eq!(lcs(&a, &b), brute_lcs(&a, &b));
        }
    }
}
