//! Two-stage training, evaluation and the edge-cut sweep.
//!
//! Stage 1 embeds the knowledge graph. Stage 2 freezes those embeddings and
//! trains the visual model with the fused losses, keeping the weights that
//! score best on a validation slice of the training prescriptions.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, resize, AugmentConfig};
use crate::embed::{derive_seed, random_walks, train_embeddings, NodeEmbeddingMatrix, WalkConfig};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss_from_logits, combine_losses, linkage_loss, total_loss, LossConfig, LossReport,
};
use crate::metrics::EvalReport;
use crate::mkg::{build_graph, prune_edges, EdgeWeighting, MedicalKnowledgeGraph};
use crate::model::{ModelConfig, PillNet, Variant};
use crate::synth::{Dataset, IntakeSample, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Target crops per batch; whole photos are packed until it is reached.
    pub batch_size: usize,
    /// Upper bound on epochs.
    pub epochs: usize,
    /// Stop after this many consecutive epochs whose validation macro-F1 is
    /// below the best so far.
    pub patience: usize,
    /// Share of training prescriptions held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Side length crops are resized to before entering the backbone.
    pub image_size: usize,
    pub augmentation: AugmentConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
            epochs: 100,
            patience: 10,
            validation_fraction: 0.1,
            image_size: 64,
            augmentation: AugmentConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        if self.image_size < 4 {
            return Err(Error::Config("image_size must be at least 4".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub stage1: WalkConfig,
    pub stage2: Stage2Config,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.loss.validate()
    }
}

/// Stage 1: random walks plus skip-gram on the (possibly pruned) graph.
pub fn train_stage1(graph: &MedicalKnowledgeGraph, cfg: &WalkConfig) -> Result<NodeEmbeddingMatrix> {
    let walks = random_walks(graph, cfg)?;
    Ok(train_embeddings(graph, &walks, cfg)?.embeddings)
}

/// A packed batch of whole photos.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `(M, 3, S, S)`
    pub crops: Tensor,
    pub groups: Vec<usize>,
    pub labels: Vec<usize>,
    pub sample_ids: Vec<String>,
}

/// Packs sample indices (in the given order) into batches of roughly
/// `batch_size` crops without splitting a photo. A trailing batch with fewer
/// than two crops joins the previous one.
pub fn pack_batches(samples: &[&IntakeSample], order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current = Vec::new();
    let mut crops = 0;
    for &i in order {
        let m = samples[i].num_crops();
        if !current.is_empty() && crops + m > batch_size {
            batches.push(std::mem::take(&mut current));
            crops = 0;
        }
        current.push(i);
        crops += m;
    }
    if !current.is_empty() {
        match batches.last_mut() {
            Some(prev) if crops < 2 => prev.extend(current),
            _ => batches.push(current),
        }
    }
    batches
}

fn assemble(
    samples: &[&IntakeSample],
    members: &[usize],
    image_size: usize,
    mut aug: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
) -> Result<Batch> {
    let mut data = Vec::new();
    let mut groups = Vec::with_capacity(members.len());
    let mut labels = Vec::new();
    let mut sample_ids = Vec::with_capacity(members.len());
    for &i in members {
        let s = samples[i];
        groups.push(s.num_crops());
        labels.extend_from_slice(&s.labels);
        sample_ids.push(s.sample_id.clone());
        for crop in &s.crops {
            let resized = resize(crop, s.crop_size, image_size);
            match aug.as_mut() {
                Some((cfg, rng)) => data.extend(augment(&resized, image_size, cfg, &mut **rng)),
                None => data.extend(resized),
            }
        }
    }
    let m = labels.len();
    let crops = Tensor::from_vec(data, (m, CHANNELS, image_size, image_size), &Device::Cpu)?;
    Ok(Batch {
        crops,
        groups,
        labels,
        sample_ids,
    })
}

/// Holds out about `fraction` of the prescriptions while keeping every class
/// of the full training set present in the remainder. Returns
/// `(train, validation)` sample indices.
pub fn validation_split(samples: &[IntakeSample], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut by_rx: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_rx.entry(s.prescription_id.as_str()).or_default().push(i);
    }
    let target = (by_rx.len() as f64 * fraction).round() as usize;
    let mut class_count: BTreeMap<usize, usize> = BTreeMap::new();
    for s in samples {
        for &l in &s.labels {
            *class_count.entry(l).or_default() += 1;
        }
    }
    let mut ids: Vec<&str> = by_rx.keys().copied().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5a1, 0)));
    let mut held = BTreeSet::new();
    for id in ids {
        if held.len() >= target {
            break;
        }
        let mut removed: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in &by_rx[id] {
            for &l in &samples[i].labels {
                *removed.entry(l).or_default() += 1;
            }
        }
        if removed.iter().all(|(c, k)| class_count[c] > *k) {
            for (c, k) in removed {
                *class_count.get_mut(&c).expect("counted") -= k;
            }
            held.insert(id);
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if held.contains(s.prescription_id.as_str()) {
            val.push(i);
        } else {
            train.push(i);
        }
    }
    (train, val)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lc: f64,
    pub ll: f64,
    pub total: f64,
    pub pseudo_term: f64,
}

impl StepLog {
    pub fn report(&self) -> LossReport {
        LossReport {
            classification: self.lc,
            linkage: self.ll,
            total: self.total,
            pseudo_term: self.pseudo_term,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Stage2Outcome {
    pub steps: Vec<StepLog>,
    /// Validation macro-F1 after each epoch (empty without a validation slice).
    pub validation_f1: Vec<f64>,
    /// Epoch whose weights were kept (1-based).
    pub best_epoch: usize,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Loss of one batch as a differentiable tensor plus its logged values.
fn batch_loss(
    model: &PillNet,
    embeddings: Option<&Tensor>,
    batch: &Batch,
    loss: &LossConfig,
) -> Result<(Tensor, LossReport)> {
    let out = model.forward(&batch.crops, &batch.groups, embeddings)?;
    let variant = model.variant();
    let pseudo = if variant.has_pseudo_loss() {
        out.pseudo_logits.as_ref()
    } else {
        None
    };
    let (lc, pseudo_term) =
        classification_loss_from_logits(&out.final_logits, pseudo, &batch.labels, loss.beta_loose)?;
    let ll = match (&out.projected, embeddings) {
        (Some(projected), Some(u)) => {
            let idx: Vec<u32> = batch.labels.iter().map(|&l| l as u32).collect();
            let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
            let points = u.index_select(&idx, 0)?.to_dtype(projected.dtype())?;
            Some(linkage_loss(projected, &points, loss.kernel_temperature)?)
        }
        _ => None,
    };
    let total = combine_losses(&lc, ll.as_ref(), loss.alpha)?;
    let lc_v = scalar(&lc)?;
    let ll_v = ll.as_ref().map(scalar).transpose()?.unwrap_or(0.0);
    let report = LossReport {
        classification: lc_v,
        linkage: ll_v,
        total: total_loss(lc_v, ll_v, loss.alpha)?,
        pseudo_term: pseudo_term.as_ref().map(scalar).transpose()?.unwrap_or(0.0),
    };
    Ok((total, report))
}

/// Stage 2. `embeddings` is the frozen `N x H` matrix (ignored by the
/// baseline). The model ends up holding the best-validation weights. Each
/// step is appended to `log` as one JSON line when given.
pub fn train_stage2(
    model: &PillNet,
    embeddings: Option<&NodeEmbeddingMatrix>,
    train: &[IntakeSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let s2 = &cfg.stage2;
    if train.is_empty() {
        return Err(Error::Domain("no training samples".into()));
    }
    let dtype = model.params().vars().first().map_or(DType::F32, |v| v.dtype());
    let u = match (model.variant().uses_graph(), embeddings) {
        (true, Some(e)) => Some(e.to_tensor(dtype, &Device::Cpu)?),
        (true, None) => return Err(Error::Config("graph variants need stage-1 embeddings".into())),
        (false, _) => None,
    };
    let (train_idx, val_idx) = validation_split(train, s2.validation_fraction, cfg.seed);
    let fit: Vec<&IntakeSample> = train_idx.iter().map(|&i| &train[i]).collect();
    let held: Vec<&IntakeSample> = val_idx.iter().map(|&i| &train[i]).collect();
    let num_classes = model.num_classes();
    let names: Vec<String> = (0..num_classes).map(|c| c.to_string()).collect();

    let mut opt = AdamW::new(
        model.params().vars(),
        ParamsAdamW {
            lr: s2.learning_rate,
            weight_decay: s2.weight_decay,
            ..Default::default()
        },
    )?;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x0de, 0));
    let mut aug_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xa06, 0));
    let mut outcome = Stage2Outcome::default();
    let mut best: Option<(f64, Vec<Tensor>)> = None;
    let mut stale = 0;
    let mut step = 0;
    for epoch in 1..=s2.epochs {
        let mut order: Vec<usize> = (0..fit.len()).collect();
        order.shuffle(&mut order_rng);
        for members in pack_batches(&fit, &order, s2.batch_size) {
            let batch = assemble(&fit, &members, s2.image_size, Some((&s2.augmentation, &mut aug_rng)))?;
            let (total, report) = batch_loss(model, u.as_ref(), &batch, &cfg.loss)?;
            step += 1;
            if !report.total.is_finite() || !scalar(&total)?.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    samples: batch.sample_ids.join(","),
                });
            }
            opt.backward_step(&total)?;
            let line = StepLog {
                step,
                epoch,
                lc: report.classification,
                ll: report.linkage,
                total: report.total,
                pseudo_term: report.pseudo_term,
            };
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&line)?)
                    .map_err(|e| Error::io("training log", e))?;
            }
            outcome.steps.push(line);
        }
        if held.is_empty() {
            outcome.best_epoch = epoch;
            continue;
        }
        let f1 = evaluate_refs(model, embeddings, &held, &names, s2)?.macro_avg.f1;
        outcome.validation_f1.push(f1);
        log::debug!("epoch {epoch}: validation macro-F1 {f1:.4}");
        // Ties keep training: the slice is small and plateaus are common.
        if best.as_ref().is_none_or(|(b, _)| f1 >= *b) {
            best = Some((f1, model.params().snapshot()?));
            outcome.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= s2.patience {
                break;
            }
        }
    }
    if let Some((_, weights)) = best {
        model.params().restore(&weights)?;
    }
    Ok(outcome)
}

fn evaluate_refs(
    model: &PillNet,
    embeddings: Option<&NodeEmbeddingMatrix>,
    samples: &[&IntakeSample],
    class_names: &[String],
    s2: &Stage2Config,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty test set".into()));
    }
    let dtype = model.params().vars().first().map_or(DType::F32, |v| v.dtype());
    let u = match embeddings {
        Some(e) if model.variant().uses_graph() => Some(e.to_tensor(dtype, &Device::Cpu)?),
        _ => None,
    };
    let order: Vec<usize> = (0..samples.len()).collect();
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for members in pack_batches(samples, &order, s2.batch_size.max(64)) {
        let batch = assemble(samples, &members, s2.image_size, None)?;
        let crops = batch.crops.to_dtype(dtype)?;
        predicted.extend(model.predict(&crops, &batch.groups, u.as_ref())?);
        truth.extend(batch.labels);
    }
    EvalReport::from_predictions(&truth, &predicted, class_names)
}

/// Per-crop argmax over the final logits on `samples`, scored against their
/// labels.
pub fn evaluate(
    model: &PillNet,
    embeddings: Option<&NodeEmbeddingMatrix>,
    samples: &[IntakeSample],
    class_names: &[String],
    s2: &Stage2Config,
) -> Result<EvalReport> {
    let refs: Vec<&IntakeSample> = samples.iter().collect();
    evaluate_refs(model, embeddings, &refs, class_names, s2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub weighting: EdgeWeighting,
    /// Share of lowest-weight edges removed before embedding.
    pub cut_ratio: f64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            weighting: EdgeWeighting::SharedOnly,
            cut_ratio: 0.0,
        }
    }
}

pub struct PipelineOutcome {
    pub graph: MedicalKnowledgeGraph,
    pub embeddings: Option<NodeEmbeddingMatrix>,
    pub model: PillNet,
    pub stage2: Stage2Outcome,
    pub report: EvalReport,
}

/// Freshly initialised f32 model whose weights depend only on `cfg.seed`.
pub fn new_model(cfg: &TrainConfig, num_classes: usize, embed_dim: usize) -> Result<PillNet> {
    PillNet::new(&cfg.model, num_classes, embed_dim, derive_seed(cfg.seed, 0x30de1, 0), DType::F32)
}

/// Graph, stage 1, stage 2 and test evaluation on an in-memory dataset.
pub fn run_pipeline(
    data: &Dataset,
    graph_cfg: &GraphConfig,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let graph = prune_edges(&build_graph(&data.corpus, graph_cfg.weighting), graph_cfg.cut_ratio)?;
    let variant = cfg.model.variant;
    let embeddings = if variant.uses_graph() {
        Some(train_stage1(&graph, &cfg.stage1)?)
    } else {
        None
    };
    let model = new_model(cfg, data.corpus.num_classes(), cfg.stage1.embedding_dim)?;
    let stage2 = train_stage2(&model, embeddings.as_ref(), &data.train, cfg, log)?;
    let names = data.corpus.dictionary().names().to_vec();
    let report = evaluate(&model, embeddings.as_ref(), &data.test, &names, &cfg.stage2)?
        .with_tag(variant.as_str());
    Ok(PipelineOutcome {
        graph,
        embeddings,
        model,
        stage2,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub edges: usize,
    pub macro_f1: f64,
}

/// Sorts and deduplicates sweep ratios, warning about repeats.
pub fn normalize_ratios(ratios: &[f64]) -> Result<Vec<f64>> {
    let mut out: Vec<f64> = Vec::with_capacity(ratios.len());
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("cut ratio {r} outside [0, 1]")));
        }
        if out.contains(&r) {
            log::warn!("duplicate cut ratio {r} ignored");
        } else {
            out.push(r);
        }
    }
    out.sort_by(f64::total_cmp);
    Ok(out)
}

/// One full pipeline run per cut ratio with the same seed and config.
pub fn run_edge_cut_sweep(
    data: &Dataset,
    ratios: &[f64],
    graph_cfg: &GraphConfig,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRow>> {
    if cfg.model.variant == Variant::Baseline {
        return Err(Error::Config("the edge-cut sweep needs a graph variant".into()));
    }
    let mut rows = Vec::new();
    for ratio in normalize_ratios(ratios)? {
        let g = GraphConfig {
            cut_ratio: ratio,
            ..graph_cfg.clone()
        };
        let out = run_pipeline(data, &g, cfg, None)?;
        log::info!("cut ratio {ratio}: macro-F1 {:.4}", out.report.macro_avg.f1);
        rows.push(SweepRow {
            ratio,
            edges: out.graph.num_edges(),
            macro_f1: out.report.macro_avg.f1,
        });
    }
    Ok(rows)
}

/// CSV with header `ratio,edges,macro_f1`.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("ratio,edges,macro_f1\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.ratio, r.edges, r.macro_f1));
    }
    s
}

pub fn sweep_from_csv(text: &str) -> Result<Vec<SweepRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ratio,edges,macro_f1") {
        return Err(Error::Validation("sweep CSV must start with `ratio,edges,macro_f1`".into()));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let bad = || Error::Validation(format!("malformed sweep CSV row {}", k + 2));
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push(SweepRow {
            ratio: f[0].parse().map_err(|_| bad())?,
            edges: f[1].parse().map_err(|_| bad())?,
            macro_f1: f[2].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::fusion::ProjectionConfig;
    use crate::synth::{generate_dataset, SynthConfig};

    fn sample(id: &str, rx: &str, labels: &[usize]) -> IntakeSample {
        IntakeSample {
            sample_id: id.into(),
            prescription_id: rx.into(),
            crop_size: 8,
            crops: labels.iter().map(|_| vec![0.5; CHANNELS * 64]).collect(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn packing_keeps_photos_whole() {
        let s: Vec<IntakeSample> = [3usize, 4, 2, 5, 1]
            .iter()
            .enumerate()
            .map(|(i, &m)| sample(&format!("s{i}"), "rx", &vec![0; m]))
            .collect();
        let refs: Vec<&IntakeSample> = s.iter().collect();
        let order: Vec<usize> = (0..5).collect();
        assert_eq!(pack_batches(&refs, &order, 8), vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(pack_batches(&refs, &order, 7), vec![vec![0, 1], vec![2, 3, 4]]);
        assert_eq!(pack_batches(&refs, &order, 2), vec![vec![0], vec![1], vec![2], vec![3, 4]]);
    }

    #[test]
    fn validation_keeps_class_coverage() {
        let s = vec![
            sample("a0", "A", &[0, 1]),
            sample("a1", "A", &[0]),
            sample("b0", "B", &[1, 2]),
            sample("c0", "C", &[2]),
            sample("d0", "D", &[3, 0]),
        ];
        for seed in 0..20 {
            let (train, val) = validation_split(&s, 0.5, seed);
            let classes: BTreeSet<usize> = train.iter().flat_map(|&i| s[i].labels.clone()).collect();
            assert_eq!(classes, BTreeSet::from([0, 1, 2, 3]));
            assert!(!val.iter().any(|&i| s[i].prescription_id == "D"));
            let train_rx: BTreeSet<&str> = train.iter().map(|&i| s[i].prescription_id.as_str()).collect();
            assert!(val.iter().all(|&i| !train_rx.contains(s[i].prescription_id.as_str())));
        }
        let (train, val) = validation_split(&s, 0.0, 0);
        assert_eq!((train.len(), val.len()), (5, 0));
    }

    #[test]
    fn ratios_are_deduplicated() {
        assert_eq!(normalize_ratios(&[0.2, 0.0, 0.2, 0.75]).unwrap(), vec![0.0, 0.2, 0.75]);
        assert!(normalize_ratios(&[1.5]).is_err());
    }

    #[test]
    fn sweep_csv_round_trip() {
        let rows = vec![
            SweepRow { ratio: 0.0, edges: 10, macro_f1: 0.5 },
            SweepRow { ratio: 0.75, edges: 3, macro_f1: 0.25 },
        ];
        assert_eq!(sweep_from_csv(&sweep_to_csv(&rows)).unwrap(), rows);
        assert!(sweep_from_csv("x,y\n").is_err());
    }

    fn tiny_setup(variant: Variant) -> (Dataset, TrainConfig) {
        let data = generate_dataset(&SynthConfig {
            num_classes: 6,
            num_prescriptions: 16,
            images_per_prescription: 3,
            crop_size: 8,
            confusable_pairs: vec![(0, 1)],
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            seed: 1,
            stage1: WalkConfig {
                embedding_dim: 8,
                epochs: 5,
                walks_per_node: 5,
                ..WalkConfig::default()
            },
            stage2: Stage2Config {
                epochs: 12,
                batch_size: 12,
                image_size: 8,
                patience: 100,
                ..Stage2Config::default()
            },
            loss: LossConfig::default(),
            model: ModelConfig {
                variant,
                backbone: BackboneConfig {
                    base_width: 4,
                    feature_dim: 16,
                    ..BackboneConfig::default()
                },
                projection: ProjectionConfig { layer_dims: vec![16, 8] },
                ..ModelConfig::default()
            },
        };
        (data, cfg)
    }

    #[test]
    fn training_reduces_loss_and_freezes_embeddings() {
        let (data, cfg) = tiny_setup(Variant::Full);
        let graph = build_graph(&data.corpus, EdgeWeighting::SharedOnly);
        let emb = train_stage1(&graph, &cfg.stage1).unwrap();
        let before = emb.content_hash();
        let model = PillNet::new(&cfg.model, 6, 8, 0, DType::F32).unwrap();
        let mut log = Vec::new();
        let out = train_stage2(&model, Some(&emb), &data.train, &cfg, Some(&mut log)).unwrap();
        assert_eq!(emb.content_hash(), before);
        let steps = &out.steps;
        assert!(steps.len() >= 40, "only {} steps", steps.len());
        let w = (steps.len() / 4).min(50);
        let head: f64 = steps[..w].iter().map(|s| s.total).sum::<f64>() / w as f64;
        let tail: f64 = steps[steps.len() - w..].iter().map(|s| s.total).sum::<f64>() / w as f64;
        assert!(tail < head, "loss went from {head} to {tail}");
        for s in steps {
            let r = s.report();
            assert!((r.total - (0.9 * r.classification + 0.1 * r.linkage)).abs() < 1e-6);
            assert!(r.pseudo_term > 0.0 && r.linkage >= 0.0);
        }
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), steps.len());
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        for key in ["step", "lc", "ll", "total", "pseudo_term"] {
            assert!(first.get(key).is_some(), "{key}");
        }
        assert!(out.best_epoch >= 1);
    }

    #[test]
    fn trained_backbone_separates_blank_from_prototype() {
        let (data, cfg) = tiny_setup(Variant::Baseline);
        let out = run_pipeline(&data, &GraphConfig::default(), &cfg, None).unwrap();
        let proto = crate::synth::class_prototypes(&SynthConfig {
            num_classes: 6,
            crop_size: 8,
            confusable_pairs: vec![(0, 1)],
            seed: 3,
            ..SynthConfig::default()
        });
        let mut v = vec![0f32; CHANNELS * 64];
        v.extend_from_slice(&proto[2]);
        let crops = Tensor::from_vec(v, (2, CHANNELS, 8, 8), &Device::Cpu).unwrap();
        let f = out.model.backbone().features(&crops).unwrap().to_vec2::<f32>().unwrap();
        assert_ne!(f[0], f[1]);
    }

    #[test]
    fn variant_losses_follow_their_definitions() {
        for variant in [Variant::Baseline, Variant::NoPseudo, Variant::NoProjectionAttention] {
            let (data, mut cfg) = tiny_setup(variant);
            cfg.stage2.epochs = 1;
            let out = run_pipeline(&data, &GraphConfig::default(), &cfg, None).unwrap();
            for s in &out.stage2.steps {
                assert_eq!(s.pseudo_term > 0.0, variant.has_pseudo_loss(), "{variant}");
                assert_eq!(s.ll > 0.0, variant.has_projection(), "{variant}");
            }
            assert_eq!(out.report.tag.as_deref(), Some(variant.as_str()));
        }
    }

    #[test]
    fn full_cut_completes() {
        let (data, mut cfg) = tiny_setup(Variant::Full);
        cfg.stage2.epochs = 1;
        let rows = run_edge_cut_sweep(&data, &[1.0, 0.0, 1.0], &GraphConfig::default(), &cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].edges, 0);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let (data, mut cfg) = tiny_setup(Variant::Full);
        cfg.stage2.epochs = 2;
        let a = run_pipeline(&data, &GraphConfig::default(), &cfg, None).unwrap();
        let b = run_pipeline(&data, &GraphConfig::default(), &cfg, None).unwrap();
        assert_eq!(a.report.to_json().unwrap(), b.report.to_json().unwrap());
    }

    #[test]
    fn stage1_is_deterministic() {
        let (data, cfg) = tiny_setup(Variant::Full);
        let graph = build_graph(&data.corpus, EdgeWeighting::SharedOnly);
        let a = train_stage1(&graph, &cfg.stage1).unwrap();
        let b = train_stage1(&graph, &cfg.stage1).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }
}
