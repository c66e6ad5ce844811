use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{aggregate_attention, lse_pool, score_mmvp_vlm, score_winoground, Ensemble, ItmConfig, ItmScore, WinogroundDecision};
use crate::backbone::{CrossAttnStack, DenoiserBackend, ExtractionRequest, Extractor, ExtractorOptions, ImageInput};
use crate::datasets::{Benchmark, PairRecord, MMVP_CATEGORIES};
use crate::error::{Error, Result};

/// Anything that scores an (image, text) pair; higher means a better match.
pub trait TextImageScorer {
    fn score(&mut self, image: &Path, text: &str) -> Result<ItmScore>;
}

/// Cross-attention scorer over a diffusion backbone.
pub struct DiffusionScorer<B> {
    extractor: Extractor<B>,
    config: ItmConfig,
}

impl<B: DenoiserBackend> DiffusionScorer<B> {
    pub fn new(backend: B, config: ItmConfig) -> Result<Self> {
        config.validate()?;
        let options = ExtractorOptions {
            attention_resolution: config.resolution,
            ..ExtractorOptions::default()
        };
        Ok(Self {
            extractor: Extractor::with_options(backend, options),
            config,
        })
    }

    pub fn config(&self) -> &ItmConfig {
        &self.config
    }

    pub fn extractor_mut(&mut self) -> &mut Extractor<B> {
        &mut self.extractor
    }
}

impl<B: DenoiserBackend> TextImageScorer for DiffusionScorer<B> {
    fn score(&mut self, image: &Path, text: &str) -> Result<ItmScore> {
        let id = image.to_string_lossy().into_owned();
        itm_score(&mut self.extractor, &id, &ImageInput::Path(image.to_path_buf()), text, &self.config)
    }
}

fn pooled(stacks: &[&CrossAttnStack], config: &ItmConfig) -> Result<f64> {
    let owned: Vec<CrossAttnStack> = stacks.iter().map(|s| (*s).clone()).collect();
    let map = aggregate_attention(&owned, config.resolution, config.token_policy)?;
    lse_pool(map.view(), config.temperature)
}

/// Scores one pair. Trial `k` uses noise seed `base_seed + k`.
pub fn itm_score<B: DenoiserBackend>(
    extractor: &mut Extractor<B>,
    image_id: &str,
    image: &ImageInput,
    text: &str,
    config: &ItmConfig,
) -> Result<ItmScore> {
    config.validate()?;
    if extractor.options().attention_resolution != config.resolution {
        return Err(Error::InvalidArgument(format!(
            "extractor admits {0}x{0} attention but the ITM config asks for {1}x{1}",
            extractor.options().attention_resolution,
            config.resolution
        )));
    }
    if text.trim().is_empty() {
        return Err(Error::InvalidArgument("ITM text must be non-empty".into()));
    }
    let request = ExtractionRequest {
        image_id: image_id.to_string(),
        prompt: text.to_string(),
        timesteps: config.timesteps.clone(),
        guidance_scale: 0.0,
        taps: Vec::new(),
        trials: config.trials,
        base_seed: config.base_seed,
        capture_cross_attn: true,
    };
    let stacks = extractor.capture_attention(&request, image)?;
    score_stacks(&stacks, config)
}

/// Reduces captured stacks to a score according to `config.ensemble`.
pub fn score_stacks(stacks: &[CrossAttnStack], config: &ItmConfig) -> Result<ItmScore> {
    let seeds: Vec<u64> = (0..config.trials as u64).map(|k| config.base_seed + k).collect();
    let find = |seed: u64, t: usize| {
        stacks
            .iter()
            .find(|s| s.seed == seed && s.timestep == t)
            .ok_or_else(|| Error::InvalidArgument(format!("no attention for seed {seed} at timestep {t}")))
    };
    let mut per_timestep = BTreeMap::new();
    let mut per_trial = Vec::with_capacity(seeds.len());
    match config.ensemble {
        Ensemble::MeanOfScores => {
            let mut grid = vec![vec![0.0; config.timesteps.len()]; seeds.len()];
            for (k, &seed) in seeds.iter().enumerate() {
                for (i, &t) in config.timesteps.iter().enumerate() {
                    grid[k][i] = pooled(&[find(seed, t)?], config)?;
                }
                per_trial.push(grid[k].iter().sum::<f64>() / grid[k].len() as f64);
            }
            for (i, &t) in config.timesteps.iter().enumerate() {
                per_timestep.insert(t, grid.iter().map(|row| row[i]).sum::<f64>() / seeds.len() as f64);
            }
        }
        Ensemble::SumBeforePool => {
            for &seed in &seeds {
                let trial: Vec<&CrossAttnStack> =
                    config.timesteps.iter().map(|&t| find(seed, t)).collect::<Result<_>>()?;
                per_trial.push(pooled(&trial, config)?);
            }
        }
    }
    let value = per_trial.iter().sum::<f64>() / per_trial.len() as f64;
    Ok(ItmScore {
        value,
        per_timestep,
        per_trial,
        config_hash: config.config_hash(),
    })
}

/// Mean and sample standard deviation over trials, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub per_trial: Vec<f64>,
}

impl Summary {
    pub fn from_trials(per_trial: Vec<f64>) -> Self {
        let n = per_trial.len() as f64;
        let mean = per_trial.iter().sum::<f64>() / n;
        let std = if per_trial.len() < 2 {
            0.0
        } else {
            (per_trial.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std, per_trial }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub record_id: String,
    pub category: String,
    /// `scores[i][j]`: image `i` with text `j`, averaged over trials.
    pub scores: [[f64; 2]; 2],
    pub trial_scores: Vec<[[f64; 2]; 2]>,
    /// MMVP-VLM pair decision per trial.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_correct: Option<Vec<bool>>,
    /// Winoground decisions per trial.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub winoground: Option<Vec<WinogroundDecision>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub benchmark: Benchmark,
    pub config: ItmConfig,
    pub config_hash: String,
    /// MMVP-VLM: one entry per category.
    pub per_category: BTreeMap<String, Summary>,
    /// MMVP-VLM: `average`. Winoground: `text`, `image`, `group`.
    pub overall: BTreeMap<String, Summary>,
    pub per_record: Vec<RecordOutcome>,
}

fn score_record<S: TextImageScorer>(scorer: &mut S, record: &PairRecord, trials: usize) -> Result<RecordOutcome> {
    let mut grid: [[Option<ItmScore>; 2]; 2] = Default::default();
    for (i, image) in record.images.iter().enumerate() {
        for (j, text) in record.texts.iter().enumerate() {
            let s = scorer.score(image, text).map_err(|e| match e {
                Error::Extraction { .. } => e,
                other => Error::Extraction {
                    image_id: record.record_id.clone(),
                    prompt_hash: crate::hashing::prompt_hash(text),
                    source: Box::new(other),
                },
            })?;
            if s.per_trial.len() != trials {
                return Err(Error::InvalidArgument(format!(
                    "scorer returned {} trials, expected {trials}",
                    s.per_trial.len()
                )));
            }
            grid[i][j] = Some(s);
        }
    }
    let get = |i: usize, j: usize| grid[i][j].as_ref().unwrap();
    let scores = [[get(0, 0).value, get(0, 1).value], [get(1, 0).value, get(1, 1).value]];
    let trial_scores: Vec<[[f64; 2]; 2]> = (0..trials)
        .map(|k| {
            [
                [get(0, 0).per_trial[k], get(0, 1).per_trial[k]],
                [get(1, 0).per_trial[k], get(1, 1).per_trial[k]],
            ]
        })
        .collect();
    let (pair_correct, winoground) = match record.benchmark {
        Benchmark::MmvpVlm => (
            Some(trial_scores.iter().map(|s| score_mmvp_vlm(s[0][0], s[0][1], s[1][0], s[1][1])).collect()),
            None,
        ),
        _ => (
            None,
            Some(trial_scores.iter().map(|s| score_winoground(s[0][0], s[0][1], s[1][0], s[1][1])).collect()),
        ),
    };
    Ok(RecordOutcome {
        record_id: record.record_id.clone(),
        category: record.category.clone(),
        scores,
        trial_scores,
        pair_correct,
        winoground,
    })
}

fn percent(hits: impl Iterator<Item = bool>) -> f64 {
    let (mut n, mut k) = (0usize, 0usize);
    for h in hits {
        n += 1;
        k += usize::from(h);
    }
    100.0 * k as f64 / n as f64
}

/// Scores every record with the given scorers, one worker thread per scorer.
/// Records are assigned round-robin, so results do not depend on the number
/// of workers as long as each scorer is deterministic.
pub fn evaluate_benchmark<S: TextImageScorer + Send>(
    benchmark: Benchmark,
    records: &[PairRecord],
    scorers: &mut [S],
    config: &ItmConfig,
) -> Result<BenchmarkResult> {
    config.validate()?;
    if benchmark == Benchmark::CocoCaptions {
        return Err(Error::InvalidArgument("COCO captions is not an ITM benchmark".into()));
    }
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to evaluate".into()));
    }
    if scorers.is_empty() {
        return Err(Error::InvalidArgument("at least one scorer is required".into()));
    }
    if let Some(r) = records.iter().find(|r| r.benchmark != benchmark) {
        return Err(Error::InvalidArgument(format!("record {} is not from {benchmark:?}", r.record_id)));
    }
    if benchmark == Benchmark::MmvpVlm {
        let missing: Vec<String> = MMVP_CATEGORIES
            .iter()
            .filter(|c| !records.iter().any(|r| r.category == **c))
            .map(|c| c.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingCategories(missing));
        }
    }

    let workers = scorers.len();
    let trials = config.trials;
    let mut slots: Vec<Option<Result<RecordOutcome>>> = (0..records.len()).map(|_| None).collect();
    if workers == 1 {
        for (slot, r) in slots.iter_mut().zip(records) {
            *slot = Some(score_record(&mut scorers[0], r, trials));
        }
    } else {
        let results: Vec<Vec<(usize, Result<RecordOutcome>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = scorers
                .iter_mut()
                .enumerate()
                .map(|(w, scorer)| {
                    scope.spawn(move || {
                        (w..records.len())
                            .step_by(workers)
                            .map(|i| (i, score_record(scorer, &records[i], trials)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("ITM worker panicked")).collect()
        });
        for (i, r) in results.into_iter().flatten() {
            slots[i] = Some(r);
        }
    }
    let per_record: Vec<RecordOutcome> = slots.into_iter().map(|s| s.expect("every record scored")).collect::<Result<_>>()?;

    let mut per_category = BTreeMap::new();
    let mut overall = BTreeMap::new();
    match benchmark {
        Benchmark::MmvpVlm => {
            let mut cat_trials: Vec<Vec<f64>> = Vec::new();
            for c in MMVP_CATEGORIES {
                let rows: Vec<&RecordOutcome> = per_record.iter().filter(|r| r.category == c).collect();
                let acc: Vec<f64> = (0..trials)
                    .map(|k| percent(rows.iter().map(|r| r.pair_correct.as_ref().unwrap()[k])))
                    .collect();
                cat_trials.push(acc.clone());
                per_category.insert(c.to_string(), Summary::from_trials(acc));
            }
            let avg: Vec<f64> = (0..trials)
                .map(|k| cat_trials.iter().map(|a| a[k]).sum::<f64>() / cat_trials.len() as f64)
                .collect();
            overall.insert("average".to_string(), Summary::from_trials(avg));
        }
        _ => {
            type Pick = fn(&WinogroundDecision) -> bool;
            let metrics: [(&str, Pick); 3] = [
                ("text", |d| d.text_correct),
                ("image", |d| d.image_correct),
                ("group", |d| d.group_correct),
            ];
            for (name, pick) in metrics {
                let acc: Vec<f64> = (0..trials)
                    .map(|k| percent(per_record.iter().map(|r| pick(&r.winoground.as_ref().unwrap()[k]))))
                    .collect();
                overall.insert(name.to_string(), Summary::from_trials(acc));
            }
        }
    }
    Ok(BenchmarkResult {
        benchmark,
        config: config.clone(),
        config_hash: config.config_hash(),
        per_category,
        overall,
        per_record,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::AttentionLayer;
    use ndarray::Array4;
    use std::path::PathBuf;

    /// Scores by a fixed table keyed on (image, text).
    struct Table {
        scores: BTreeMap<(String, String), Vec<f64>>,
        calls: usize,
    }

    impl TextImageScorer for Table {
        fn score(&mut self, image: &Path, text: &str) -> Result<ItmScore> {
            self.calls += 1;
            let per_trial = self.scores[&(image.to_string_lossy().into_owned(), text.to_string())].clone();
            Ok(ItmScore {
                value: per_trial.iter().sum::<f64>() / per_trial.len() as f64,
                per_timestep: BTreeMap::new(),
                per_trial,
                config_hash: String::new(),
            })
        }
    }

    fn record(benchmark: Benchmark, id: usize, category: &str) -> PairRecord {
        PairRecord {
            benchmark,
            record_id: format!("r{id:03}"),
            images: [PathBuf::from(format!("{id}a")), PathBuf::from(format!("{id}b"))],
            texts: [format!("text {id}a"), format!("text {id}b")],
            category: category.to_string(),
        }
    }

    /// Record `id` is correct in trial `k` iff bit `k` of `pattern(id)` is set.
    fn table(records: &[PairRecord], trials: usize, pattern: impl Fn(usize) -> u32) -> Table {
        let mut scores = BTreeMap::new();
        for (n, r) in records.iter().enumerate() {
            for i in 0..2 {
                for j in 0..2 {
                    let v: Vec<f64> = (0..trials)
                        .map(|k| {
                            let good = pattern(n) >> k & 1 == 1;
                            match (i == j, good) {
                                (true, true) | (false, false) => 2.0,
                                _ => 1.0,
                            }
                        })
                        .collect();
                    scores.insert((r.images[i].to_string_lossy().into_owned(), r.texts[j].clone()), v);
                }
            }
        }
        Table { scores, calls: 0 }
    }

    #[test]
    fn mmvp_accuracy_oracle() {
        let records: Vec<PairRecord> = (0..18).map(|i| record(Benchmark::MmvpVlm, i, MMVP_CATEGORIES[i / 2])).collect();
        // Record 0 correct in all trials, record 1 in trial 0 only, others never.
        let pattern = |n: usize| match n {
            0 => 0b111,
            1 => 0b001,
            _ => 0,
        };
        let config = ItmConfig { trials: 3, ..ItmConfig::default() };
        let mut scorers = vec![table(&records, 3, pattern)];
        let res = evaluate_benchmark(Benchmark::MmvpVlm, &records, &mut scorers, &config).unwrap();
        assert_eq!(scorers[0].calls, 18 * 4);
        let first = &res.per_category[MMVP_CATEGORIES[0]];
        assert_eq!(first.per_trial, vec![100.0, 50.0, 50.0]);
        let std = (((100.0f64 / 3.0).powi(2) + 2.0 * (50.0f64 / 3.0).powi(2)) / 2.0).sqrt();
        assert!((first.mean - 200.0 / 3.0).abs() < 1e-12);
        assert!((first.std - std).abs() < 1e-12);
        assert_eq!(res.overall["average"].per_trial, vec![100.0 / 9.0, 50.0 / 9.0, 50.0 / 9.0]);

        let mut pool: Vec<Table> = (0..3).map(|_| table(&records, 3, pattern)).collect();
        let par = evaluate_benchmark(Benchmark::MmvpVlm, &records, &mut pool, &config).unwrap();
        assert_eq!(par, res);
    }

    #[test]
    fn missing_category_is_named() {
        let records: Vec<PairRecord> = (0..8).map(|i| record(Benchmark::MmvpVlm, i, MMVP_CATEGORIES[i])).collect();
        let mut scorers = vec![table(&records, 1, |_| 0)];
        match evaluate_benchmark(Benchmark::MmvpVlm, &records, &mut scorers, &ItmConfig::default()) {
            Err(Error::MissingCategories(m)) => assert_eq!(m, vec![MMVP_CATEGORIES[8].to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn winoground_metrics_single_trial() {
        let records: Vec<PairRecord> = (0..4).map(|i| record(Benchmark::Winoground, i, "")).collect();
        let config = ItmConfig { trials: 1, ..ItmConfig::default() };
        let mut scorers = vec![table(&records, 1, |n| u32::from(n == 2))];
        let res = evaluate_benchmark(Benchmark::Winoground, &records, &mut scorers, &config).unwrap();
        for m in ["text", "image", "group"] {
            assert_eq!(res.overall[m].mean, 25.0);
            assert_eq!(res.overall[m].std, 0.0);
        }
        assert!(res.per_category.is_empty());
    }

    fn stack(seed: u64, t: usize, value: f32) -> CrossAttnStack {
        let mut probs = Array4::<f32>::zeros((1, 2, 2, 3));
        probs[[0, 0, 0, 1]] = value;
        CrossAttnStack {
            image_id: "i".into(),
            prompt_hash: "p".into(),
            timestep: t,
            seed,
            token_mask: vec![false, true, false],
            layers: vec![AttentionLayer { id: "a".into(), probs }],
        }
    }

    #[test]
    fn ensembles() {
        let mut config = ItmConfig {
            timesteps: vec![10, 20],
            trials: 2,
            base_seed: 5,
            resolution: 2,
            ..ItmConfig::default()
        };
        let stacks = vec![stack(5, 10, 1.0), stack(5, 20, 2.0), stack(6, 10, 3.0), stack(6, 20, 4.0)];
        let lse = |v: f64| (v.exp() + 3.0).ln();
        let s = score_stacks(&stacks, &config).unwrap();
        assert!((s.per_trial[0] - (lse(1.0) + lse(2.0)) / 2.0).abs() < 1e-12);
        assert!((s.per_timestep[&20] - (lse(2.0) + lse(4.0)) / 2.0).abs() < 1e-12);
        assert!((s.value - (lse(1.0) + lse(2.0) + lse(3.0) + lse(4.0)) / 4.0).abs() < 1e-12);

        config.ensemble = Ensemble::SumBeforePool;
        let s = score_stacks(&stacks, &config).unwrap();
        assert!((s.per_trial[1] - lse(7.0)).abs() < 1e-12);
        assert!(s.per_timestep.is_empty());

        assert!(score_stacks(&stacks[..3], &config).is_err());
    }
}
