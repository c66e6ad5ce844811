use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use difftap::analysis::{
    blockwise_cka_matrix, flatten_features, guidance_cka_curve, joint_pca_rgb, pair_cosine_similarity, CosinePooling,
    PcaMap,
};
use difftap::backbone::sd::{SdOptions, StableDiffusion};
use difftap::backbone::{parse_block_address, ExtractionRequest, Extractor, ExtractorOptions, FeatureTensor, ImageInput};
use difftap::config::RunConfig;
use difftap::datasets::{ingest_coco_captions, ingest_pairs, subset, Benchmark, Ingested, Record};
use difftap::fusion::run_checks;
use difftap::guidance::{amplified_sweep_pca, delta_pca_map, GuidancePair};
use difftap::hashing::prompt_hash;
use difftap::itm::{evaluate_benchmark, DiffusionScorer, Ensemble};
use difftap::leakage::{build_eval_split, evaluate_split, EvalSetting, LeakageReport, SettingKind, SplitResult,
    SubprocessCaptioner};
use difftap::store::{FeatureStore, RecordFilter, RecordKey, RecordKind, TensorRecord};
use difftap::Error;
use ndarray::{Array2, Axis};
use serde::Serialize;
use serde_json::json;

use crate::args::{
    CkaArgs, CkaPooling, DatasetsAction, DeltaArgs, ExtractArgs, ItmArgs, LeakageArgs, PcaArgs, Selection, SettingArg,
    StoreAction,
};
use crate::output::Artifacts;
use crate::{CmdResult, Failure};

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Core(Error::InvalidArgument(msg.into()))
}

fn load_backend(cfg: &RunConfig) -> CmdResult<StableDiffusion> {
    let opts = SdOptions {
        root: cfg.run.model_dir.clone(),
        device: cfg.run.device.clone(),
        image_size: None,
        backend_id: (!cfg.run.backend_id.is_empty()).then(|| cfg.run.backend_id.clone()),
    };
    Ok(StableDiffusion::load(&opts)?)
}

fn filter(sel: &Selection, kind: Option<RecordKind>) -> CmdResult<RecordFilter> {
    let block = match &sel.block {
        // Attention records are keyed by layer id, which is not an address.
        Some(b) if kind != Some(RecordKind::Attention) => match parse_block_address(b) {
            Ok(a) => Some(a.to_string()),
            Err(_) if kind.is_none() => Some(b.clone()),
            Err(e) => return Err(e.into()),
        },
        other => other.clone(),
    };
    Ok(RecordFilter {
        image_id: sel.image_id.clone(),
        block,
        timestep: sel.timestep,
        guidance_scale: sel.scale,
        prompt_hash: sel.prompt.as_deref().map(prompt_hash).or_else(|| sel.prompt_hash.clone()),
        seed: sel.record_seed,
        kind,
    })
}

fn selected_keys(store: &FeatureStore, f: &RecordFilter) -> CmdResult<Vec<RecordKey>> {
    let keys: Vec<RecordKey> = store.query(f).into_iter().map(|r| r.key.clone()).collect();
    if keys.is_empty() {
        return Err(invalid("selection matched no stored records"));
    }
    Ok(keys)
}

/// Conditional records matched by `sel` (scale 1 unless given), each paired
/// with its stored unconditional twin.
fn guidance_pairs(store: &FeatureStore, sel: &Selection) -> CmdResult<Vec<GuidancePair>> {
    let mut f = filter(sel, Some(RecordKind::Feature))?;
    f.guidance_scale.get_or_insert(1.0);
    let empty = prompt_hash("");
    let mut pairs = Vec::new();
    for key in selected_keys(store, &f)? {
        if key.prompt_hash == empty {
            continue;
        }
        let uncond_key = RecordKey {
            guidance_scale: 0.0,
            prompt_hash: empty.clone(),
            ..key.clone()
        };
        let cond = store.get_feature::<f32>(&key)?;
        let uncond = store.get_feature::<f32>(&uncond_key)?;
        pairs.push(GuidancePair::new(uncond, cond)?);
    }
    if pairs.is_empty() {
        return Err(invalid("selection matched no conditional records with a prompt"));
    }
    Ok(pairs)
}

#[derive(Serialize)]
struct MapOut<'a> {
    png: String,
    #[serde(flatten)]
    map: &'a PcaMap,
}

fn add_maps<'a>(art: &mut Artifacts, prefix: &str, maps: &'a [PcaMap]) -> CmdResult<Vec<MapOut<'a>>> {
    maps.iter()
        .enumerate()
        .map(|(i, map)| {
            let png = format!("{prefix}_{i:03}.png");
            art.png(&png, &map.rgb)?;
            Ok(MapOut { png, map })
        })
        .collect()
}

fn done(art: Artifacts, cfg: &RunConfig) -> CmdResult {
    let dir = art.commit(cfg)?;
    println!("artifacts written to {}", dir.display());
    Ok(())
}

pub fn extract(cfg: &mut RunConfig, a: &ExtractArgs) -> CmdResult {
    let ex = &mut cfg.extraction;
    if let Some(taps) = &a.taps {
        ex.taps = taps.iter().map(|t| parse_block_address(t)).collect::<difftap::Result<_>>()?;
    }
    if let Some(t) = &a.timesteps {
        ex.timesteps = t.clone();
    }
    if let Some(n) = a.trials {
        ex.trials = n;
    }
    if let Some(s) = a.guidance_scale {
        ex.guidance_scale = s;
    }
    ex.capture_cross_attn |= a.capture_attention;
    cfg.validate()?;

    let image_id = match &a.image_id {
        Some(id) => id.clone(),
        None => a
            .image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| invalid(format!("cannot derive an image id from {}", a.image.display())))?,
    };
    let request = ExtractionRequest {
        image_id: image_id.clone(),
        prompt: a.prompt.clone(),
        timesteps: cfg.extraction.timesteps.clone(),
        guidance_scale: cfg.extraction.guidance_scale,
        taps: cfg.extraction.taps.clone(),
        trials: cfg.extraction.trials,
        base_seed: cfg.substream("extraction"),
        capture_cross_attn: cfg.extraction.capture_cross_attn,
    };
    request.validate()?;

    let backend = load_backend(cfg)?;
    let backend_id = difftap::backbone::DenoiserBackend::backend_id(&backend).to_string();
    let options = ExtractorOptions {
        attention_resolution: cfg.extraction.attention_resolution,
        ..Default::default()
    };
    let mut extractor = Extractor::with_options(backend, options);
    let out = extractor.extract(&request, &ImageInput::Path(a.image.clone()))?;

    let mut store = FeatureStore::open_or_create(&cfg.run.store_path, &backend_id)?;
    let mut records: Vec<TensorRecord> = Vec::new();
    for f in out.features.iter().chain(&out.unconditional) {
        records.push(store.put_feature(f, a.overwrite)?);
    }
    for stack in &out.attention {
        records.extend(store.put_attention(stack, a.overwrite)?);
    }
    for r in &records {
        println!("{}\t{:?}\t{:?}", r.key, r.dtype, r.shape);
    }

    let mut art = Artifacts::default();
    art.json(
        "extract.json",
        &json!({
            "backend_id": backend_id,
            "request": request,
            "prompt_hash": prompt_hash(&request.prompt),
            "store": cfg.run.store_path,
            "records": records,
        }),
    )?;
    done(art, cfg)
}

pub fn pca(cfg: &RunConfig, a: &PcaArgs) -> CmdResult {
    let store = FeatureStore::open(&cfg.run.store_path)?;
    let keys = selected_keys(&store, &filter(&a.selection, Some(RecordKind::Feature))?)?;
    let features: Vec<FeatureTensor> = keys.iter().map(|k| store.get_feature(k)).collect::<difftap::Result<_>>()?;
    let fit = joint_pca_rgb(&features, a.components)?;
    if fit.degenerate() {
        eprintln!("warning: only {} of {} components carry variance", fit.rank, a.components);
    }

    let mut art = Artifacts::default();
    let maps = add_maps(&mut art, "pca", &fit.maps)?;
    art.json(
        "pca.json",
        &json!({
            "components": a.components,
            "rank": fit.rank,
            "degenerate": fit.degenerate(),
            "explained_variance": fit.explained_variance,
            "maps": maps,
        }),
    )?;
    done(art, cfg)
}

pub fn delta(cfg: &RunConfig, a: &DeltaArgs) -> CmdResult {
    let store = FeatureStore::open(&cfg.run.store_path)?;
    let pairs = guidance_pairs(&store, &a.selection)?;
    let delta = delta_pca_map(&pairs, a.components)?;

    let mut art = Artifacts::default();
    let delta_maps = add_maps(&mut art, "delta", &delta.maps)?;
    let sweeps: Vec<_> = pairs
        .iter()
        .map(|p| amplified_sweep_pca(p, &a.scales, a.components))
        .collect::<difftap::Result<_>>()?;
    let mut sweep_out = Vec::new();
    for (i, (pair, sweep)) in pairs.iter().zip(&sweeps).enumerate() {
        let cosine = pair_cosine_similarity(pair.uncond(), pair.cond(), CosinePooling::PerPosition)?;
        sweep_out.push(json!({
            "source": pair.cond().provenance.to_string(),
            "cosine_uncond_cond": cosine.value,
            "explained_variance": sweep.explained_variance,
            "maps": add_maps(&mut art, &format!("sweep_{i:03}"), &sweep.maps)?,
        }));
    }
    art.json(
        "delta.json",
        &json!({
            "scales": a.scales,
            "components": a.components,
            "delta": {
                "rank": delta.rank,
                "explained_variance": delta.explained_variance,
                "maps": delta_maps,
            },
            "sweeps": sweep_out,
        }),
    )?;
    done(art, cfg)
}

/// Sample identity shared across blocks.
type SampleId = (String, usize, u64, String, u64);

fn sample_id(k: &RecordKey) -> SampleId {
    (k.image_id.clone(), k.timestep, k.guidance_scale.to_bits(), k.prompt_hash.clone(), k.seed)
}

fn mean_pooled(features: &[FeatureTensor]) -> Array2<f64> {
    let rows: Vec<_> = features
        .iter()
        .map(|f| f.values.mapv(f64::from).mean_axis(Axis(0)).unwrap().mean_axis(Axis(0)).unwrap())
        .collect();
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal channel counts checked by caller")
}

pub fn cka(cfg: &RunConfig, a: &CkaArgs) -> CmdResult {
    let store = FeatureStore::open(&cfg.run.store_path)?;
    if let Some(scales) = &a.guidance_scales {
        return cka_guidance(cfg, &store, a, scales);
    }
    if a.blocks.len() < 2 {
        return Err(invalid("--blocks needs at least two block addresses"));
    }
    let mut per_block: Vec<(String, BTreeMap<SampleId, RecordKey>)> = Vec::new();
    for b in &a.blocks {
        let sel = Selection {
            block: Some(b.clone()),
            ..a.selection.clone()
        };
        let keys = selected_keys(&store, &filter(&sel, Some(RecordKind::Feature))?)?;
        let block = keys[0].block.clone();
        per_block.push((block, keys.into_iter().map(|k| (sample_id(&k), k)).collect()));
    }
    let common: BTreeSet<&SampleId> = per_block[0].1.keys().collect();
    for (block, samples) in &per_block {
        let here: BTreeSet<&SampleId> = samples.keys().collect();
        if here != common {
            return Err(invalid(format!(
                "block {block} has {} samples, {} shared with {}; every block needs the same samples",
                here.len(),
                here.intersection(&common).count(),
                per_block[0].0
            )));
        }
    }

    let mut sets = Vec::new();
    for (block, samples) in &per_block {
        let features: Vec<FeatureTensor> =
            samples.values().map(|k| store.get_feature(k)).collect::<difftap::Result<_>>()?;
        let channels: BTreeSet<usize> = features.iter().map(|f| f.dims().2).collect();
        if channels.len() > 1 {
            return Err(Error::Shape(format!("block {block} mixes channel counts {channels:?}")).into());
        }
        let x = match a.pooling {
            CkaPooling::Mean => mean_pooled(&features),
            CkaPooling::Flatten => flatten_features(&features)?,
        };
        sets.push((block.clone(), x));
    }
    let matrix = blockwise_cka_matrix(&sets, None)?;
    println!("{}", matrix.to_csv().trim_end());

    let mut art = Artifacts::default();
    art.text("cka.csv", matrix.to_csv());
    art.json(
        "cka.json",
        &json!({
            "pooling": format!("{:?}", a.pooling).to_lowercase(),
            "n_records_per_block": common.len(),
            "n_samples": sets[0].1.nrows(),
            "blocks": matrix.blocks,
            "values": matrix.values.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
        }),
    )?;
    done(art, cfg)
}

fn cka_guidance(cfg: &RunConfig, store: &FeatureStore, a: &CkaArgs, scales: &[f64]) -> CmdResult {
    if a.selection.block.is_none() {
        return Err(invalid("guidance-curve CKA needs --block"));
    }
    let pairs = guidance_pairs(store, &a.selection)?;
    let curve = guidance_cka_curve(&pairs, scales)?;
    let mut csv = String::from("scale,cka\n");
    for (s, r) in &curve {
        csv.push_str(&format!("{s},{}\n", r.value));
    }
    print!("{csv}");

    let mut art = Artifacts::default();
    art.text("cka_guidance.csv", csv);
    art.json(
        "cka_guidance.json",
        &json!({
            "block": pairs[0].cond().provenance.block.to_string(),
            "n_pairs": pairs.len(),
            "curve": curve.iter().map(|(s, r)| json!({"scale": s, "cka": r})).collect::<Vec<_>>(),
        }),
    )?;
    done(art, cfg)
}

fn dataset_root(cfg: &RunConfig, benchmark: Benchmark, root: &Option<PathBuf>) -> PathBuf {
    root.clone().unwrap_or_else(|| match benchmark {
        Benchmark::MmvpVlm => cfg.datasets.mmvp_vlm.clone(),
        Benchmark::Winoground => cfg.datasets.winoground.clone(),
        Benchmark::CocoCaptions => cfg.datasets.coco_captions.clone(),
    })
}

fn warn_all<T>(ingested: &Ingested<T>) {
    for w in &ingested.warnings {
        eprintln!("warning: {w}");
    }
}

fn take_subset<T: Record + Clone>(records: Vec<T>, n: Option<usize>, cfg: &RunConfig) -> CmdResult<Vec<T>> {
    Ok(match n {
        Some(n) => subset(&records, n, cfg.substream("subset"))?,
        None => records,
    })
}

pub fn itm_eval(cfg: &mut RunConfig, a: &ItmArgs) -> CmdResult {
    let benchmark: Benchmark = a.benchmark.parse()?;
    if benchmark == Benchmark::CocoCaptions {
        return Err(invalid("itm-eval supports mmvp-vlm and winoground"));
    }
    if let Some(t) = &a.timesteps {
        cfg.itm.timesteps = t.clone();
    }
    if let Some(n) = a.trials {
        cfg.itm.trials = n;
    }
    if a.sum_before_pool {
        cfg.itm.ensemble = Ensemble::SumBeforePool;
    }
    if let Some(w) = a.workers {
        cfg.run.workers = w;
    }
    cfg.validate()?;
    cfg.itm.base_seed = cfg.substream("trials");

    let ingested = ingest_pairs(benchmark, &dataset_root(cfg, benchmark, &a.root))?;
    warn_all(&ingested);
    let records = take_subset(ingested.records, a.subset, cfg)?;

    let workers = cfg.run.workers.min(records.len()).max(1);
    let mut scorers = (0..workers)
        .map(|_| DiffusionScorer::new(load_backend(cfg)?, cfg.itm.clone()).map_err(Failure::from))
        .collect::<CmdResult<Vec<_>>>()?;
    let result = evaluate_benchmark(benchmark, &records, &mut scorers, &cfg.itm)?;

    for (name, s) in result.per_category.iter().chain(&result.overall) {
        println!("{name:<36} {:6.2} ± {:.2}", s.mean, s.std);
    }
    let mut art = Artifacts::default();
    art.json(&format!("itm_{benchmark}.json"), &result)?;
    done(art, cfg)
}

#[derive(Serialize)]
struct LeakageOut {
    dataset: &'static str,
    n_images: usize,
    captioner_cmd: String,
    splits: Vec<SplitResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<LeakageReport>,
}

pub fn leakage_probe(cfg: &mut RunConfig, a: &LeakageArgs) -> CmdResult {
    let benchmark: Benchmark = a.dataset.parse()?;
    if benchmark != Benchmark::CocoCaptions {
        return Err(invalid(format!("leakage-probe needs a caption dataset, got `{}`", a.dataset)));
    }
    if let Some(cmd) = &a.captioner_cmd {
        cfg.leakage.captioner_cmd = cmd.clone();
    }
    if cfg.leakage.captioner_cmd.trim().is_empty() {
        return Err(Error::Config("no captioner: pass --captioner-cmd or set leakage.captioner_cmd".into()).into());
    }
    let ingested = ingest_coco_captions(&dataset_root(cfg, benchmark, &a.root))?;
    warn_all(&ingested);
    let records = take_subset(ingested.records, a.subset, cfg)?;

    let kinds = match a.setting {
        SettingArg::Matched => vec![SettingKind::Matched],
        SettingArg::Nocap => vec![SettingKind::NoCaption],
        SettingArg::Mismatched => vec![SettingKind::Mismatched],
        SettingArg::All => vec![SettingKind::Matched, SettingKind::NoCaption, SettingKind::Mismatched],
    };
    let seed = cfg.substream("mismatch");
    let mut captioner = SubprocessCaptioner::spawn(&cfg.leakage.captioner_cmd)?;
    let mut splits = Vec::new();
    for kind in kinds {
        let split = build_eval_split(&records, EvalSetting { kind, seed })?;
        splits.push(evaluate_split(&mut captioner, &split, kind)?);
    }
    drop(captioner);

    println!("{:<12} {:>8} {:>8} {:>8}", "setting", "BLEU-4", "ROUGE-L", "CIDEr-D");
    for s in &splits {
        let name = serde_json::to_value(s.setting).map_err(Error::from)?;
        let sc = &s.score;
        println!("{:<12} {:8.4} {:8.4} {:8.4}", name.as_str().unwrap_or(""), sc.bleu4, sc.rouge_l, sc.cider_d);
    }
    let report = match splits.as_slice() {
        [m, n, x] => Some(LeakageReport::from_scores(m.score, n.score, x.score)),
        _ => None,
    };
    if let Some(r) = &report {
        println!("leakage index (CIDEr-D, mismatched - no caption): {:.4}", r.index);
    }

    let mut art = Artifacts::default();
    art.json(
        "leakage.json",
        &LeakageOut {
            dataset: benchmark.as_str(),
            n_images: records.len(),
            captioner_cmd: cfg.leakage.captioner_cmd.clone(),
            splits,
            report,
        },
    )?;
    done(art, cfg)
}

pub fn fuse_check(cfg: &RunConfig) -> CmdResult {
    let checks = run_checks(cfg.substream("fusion"))?;
    println!("{:<52} {:>12} {:>12}  result", "check", "value", "tolerance");
    for c in &checks {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        println!("{:<52} {:>12.3e} {:>12.3e}  {verdict}", c.name, c.value, c.tolerance);
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(Failure::Check(format!("fusion checks failed: {}", failed.join(", "))));
    }
    let mut art = Artifacts::default();
    art.json("fuse_check.json", &checks)?;
    done(art, cfg)
}

pub fn store(cfg: &RunConfig, action: StoreAction) -> CmdResult {
    let path = &cfg.run.store_path;
    let mut store = FeatureStore::open(path)?;
    match action {
        StoreAction::Ls { selection, attention } => {
            let kind = attention.then_some(RecordKind::Attention);
            for r in store.query(&filter(&selection, kind)?) {
                println!("{}\t{:?}\t{:?}", r.key, r.dtype, r.shape);
            }
        }
        StoreAction::Verify => {
            let report = store.verify()?;
            println!("checked {} records", report.checked);
            for (label, items) in [("missing", &report.missing), ("corrupt", &report.corrupt), ("orphan", &report.orphans)] {
                for item in items {
                    println!("{label}\t{item}");
                }
            }
            if !report.is_ok() {
                return Err(Failure::Check(format!(
                    "store {} failed verification: {} missing, {} corrupt",
                    path.display(),
                    report.missing.len(),
                    report.corrupt.len()
                )));
            }
        }
        StoreAction::Compact => {
            let removed = store.compact()?;
            for r in &removed {
                println!("removed\t{r}");
            }
            println!("{} orphan payloads removed", removed.len());
        }
    }
    Ok(())
}

pub fn datasets(cfg: &RunConfig, action: DatasetsAction) -> CmdResult {
    let DatasetsAction::Validate { benchmark, root } = action;
    let benchmark: Benchmark = benchmark.parse()?;
    let root = dataset_root(cfg, benchmark, &root);
    let (n, categories, warnings) = match benchmark {
        Benchmark::CocoCaptions => summarize(ingest_coco_captions(&root)?),
        b => summarize(ingest_pairs(b, &root)?),
    };
    println!("{benchmark}: {n} records from {}", root.display());
    for (c, count) in categories {
        println!("  {c:<36} {count}");
    }
    for w in warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn summarize<T: Record>(ingested: Ingested<T>) -> (usize, BTreeMap<String, usize>, Vec<String>) {
    let mut categories = BTreeMap::new();
    for r in &ingested.records {
        *categories.entry(r.category().to_string()).or_insert(0) += 1;
    }
    (ingested.records.len(), categories, ingested.warnings)
}
