use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pillgraph::embed::NodeEmbeddingMatrix;
use pillgraph::manifest::{hash_path, manifest_path, verify_artifact, RunManifest};
use pillgraph::mkg::{build_graph as build, prune_edges, EdgeWeighting, MedicalKnowledgeGraph};
use pillgraph::plot::{report_svg, sweep_svg};
use pillgraph::rx::{load_corpus, load_corpus_with_dictionary};
use pillgraph::synth::{generate_dataset, load_dataset, write_dataset, CORPUS_FILE, DICTIONARY_FILE};
use pillgraph::train::{
    evaluate, new_model, run_edge_cut_sweep, run_pipeline, sweep_from_csv, sweep_to_csv, train_stage1, train_stage2,
};
use pillgraph::{Error, EvalReport, ExperimentConfig, PillNet, Result, Variant};

use crate::ConfigArgs;

const MODEL_FILE: &str = "model.safetensors";
const LOG_FILE: &str = "train_log.jsonl";
const RUN_CONFIG_FILE: &str = "config.toml";

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    Ok(match args.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_macro(report: &EvalReport) {
    let m = &report.macro_avg;
    println!(
        "macro precision {:.4}  recall {:.4}  F1 {:.4}",
        m.precision, m.recall, m.f1
    );
}

pub fn gen_data(args: &ConfigArgs, out: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    let data = generate_dataset(&cfg.synth)?;
    write_dataset(out, &data)?;
    let mut m = RunManifest::new("gen-data", &cfg.synth, cfg.synth.seed)?;
    if let Some(p) = &args.config {
        m.add_input(p)?;
    }
    m.add_output(out)?;
    m.finish(started, out)?;
    let crops = |s: &[pillgraph::IntakeSample]| s.iter().map(|x| x.crops.len()).sum::<usize>();
    println!(
        "{} classes, {} prescriptions; train {} photos / {} crops, test {} photos / {} crops",
        data.corpus.num_classes(),
        data.corpus.records().len(),
        data.train.len(),
        crops(&data.train),
        data.test.len(),
        crops(&data.test)
    );
    Ok(())
}

pub fn build_graph(
    corpus: &Path,
    dictionary: Option<&Path>,
    cut_ratio: f64,
    weighting: EdgeWeighting,
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    if !(0.0..=1.0).contains(&cut_ratio) {
        return Err(Error::Config(format!("cut ratio {cut_ratio} outside [0, 1]")));
    }
    verify_artifact(corpus)?;
    let sibling = corpus.with_file_name(DICTIONARY_FILE);
    let dictionary = dictionary
        .map(Path::to_path_buf)
        .or_else(|| sibling.exists().then_some(sibling));
    let c = match &dictionary {
        Some(d) => load_corpus_with_dictionary(corpus, d)?,
        None => load_corpus(corpus)?,
    };
    let graph = prune_edges(&build(&c, weighting), cut_ratio)?;
    graph.save(out)?;
    let mut m = RunManifest::new(
        "build-graph",
        &serde_json::json!({ "cut_ratio": cut_ratio, "weighting": weighting }),
        0,
    )?;
    m.add_input(corpus)?;
    if let Some(d) = &dictionary {
        m.add_input(d)?;
    }
    m.add_output(out)?;
    m.finish(started, out)?;
    println!("{} nodes, {} edges", graph.num_nodes(), graph.num_edges());
    Ok(())
}

/// Corpus hash for the embedding header: the given corpus, or the corpus
/// recorded as an input in the graph's manifest.
fn corpus_hash_for(graph: &Path, corpus: Option<&Path>) -> Result<String> {
    if let Some(c) = corpus {
        return verify_artifact(c);
    }
    let mpath = manifest_path(graph);
    if mpath.exists() {
        let m = RunManifest::load(&mpath)?;
        if let Some((_, h)) = m.inputs.iter().find(|(p, _)| p.ends_with(".json") && !p.ends_with(DICTIONARY_FILE)) {
            return Ok(h.clone());
        }
    }
    Err(Error::Config(
        "cannot tell which corpus the graph came from; pass --corpus".into(),
    ))
}

pub fn embed_graph(graph: &Path, corpus: Option<&Path>, args: &ConfigArgs, out: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    verify_artifact(graph)?;
    let corpus_hash = corpus_hash_for(graph, corpus)?;
    let g = MedicalKnowledgeGraph::load(graph)?;
    let walk = &cfg.train.stage1;
    let emb = train_stage1(&g, walk)?;
    emb.save(out, walk.seed, &corpus_hash)?;
    let mut m = RunManifest::new("embed-graph", walk, walk.seed)?;
    m.add_input(graph)?;
    if let Some(c) = corpus {
        m.add_input(c)?;
    }
    m.add_output(out)?;
    m.finish(started, out)?;
    println!("{} x {} embedding matrix", emb.num_nodes(), emb.dim());
    Ok(())
}

/// Loads embeddings for a dataset and checks they were built from its corpus.
fn load_embeddings(path: &Path, data_dir: &Path, num_classes: usize) -> Result<NodeEmbeddingMatrix> {
    verify_artifact(path)?;
    let (emb, header) = NodeEmbeddingMatrix::load(path, num_classes)?;
    let corpus = data_dir.join(CORPUS_FILE);
    let expected = hash_path(&corpus)?;
    if header.corpus_hash != expected {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: format!(
                "built from corpus {} but {} hashes to {expected}",
                header.corpus_hash,
                corpus.display()
            ),
        });
    }
    Ok(emb)
}

pub fn train(
    data_dir: &Path,
    embeddings: Option<&Path>,
    args: &ConfigArgs,
    variant: Option<&str>,
    out: &Path,
) -> Result<()> {
    let started = Instant::now();
    let mut cfg = load_config(args)?;
    if let Some(v) = variant {
        cfg.train.model.variant = v.parse()?;
    }
    cfg.validate()?;
    verify_artifact(data_dir)?;
    let data = load_dataset(data_dir)?;
    let n = data.corpus.num_classes();
    let v = cfg.train.model.variant;
    let emb = match (v.uses_graph(), embeddings) {
        (true, Some(p)) => Some(load_embeddings(p, data_dir, n)?),
        (true, None) => return Err(Error::Config(format!("variant {v} needs --embeddings"))),
        (false, _) => None,
    };
    let h = emb.as_ref().map_or(cfg.train.stage1.embedding_dim, |e| e.dim());
    if v.has_projection() && cfg.train.model.projection.layer_dims.last() != Some(&h) {
        return Err(Error::Config(format!(
            "embeddings are {h}-dimensional but the projection ends at {:?}",
            cfg.train.model.projection.layer_dims.last()
        )));
    }
    create_dir(out)?;
    let model = new_model(&cfg.train, n, h)?;
    let log_path = out.join(LOG_FILE);
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let outcome = train_stage2(&model, emb.as_ref(), &data.train, &cfg.train, Some(&mut log))?;
    model.save(&out.join(MODEL_FILE))?;
    write(&out.join(RUN_CONFIG_FILE), &cfg.to_toml_string()?)?;
    let mut m = RunManifest::new("train", &cfg, cfg.train.seed)?;
    m.add_input(data_dir)?;
    if let Some(p) = embeddings {
        m.add_input(p)?;
    }
    for f in [MODEL_FILE, LOG_FILE, RUN_CONFIG_FILE] {
        m.add_output(&out.join(f))?;
    }
    m.finish(started, out)?;
    println!(
        "{v}: {} steps, kept epoch {} of {}",
        outcome.steps.len(),
        outcome.best_epoch,
        outcome.validation_f1.len().max(outcome.best_epoch)
    );
    Ok(())
}

pub fn eval(data_dir: &Path, run: &Path, embeddings: Option<&Path>, split: &str, out: &Path) -> Result<()> {
    let started = Instant::now();
    verify_artifact(run)?;
    let run_manifest = manifest_path(run);
    if !run_manifest.exists() {
        return Err(Error::MissingArtifact {
            path: run_manifest,
            reason: "not a training run directory".into(),
        });
    }
    let trained = RunManifest::load(&run_manifest)?;
    let cfg = ExperimentConfig::load(&run.join(RUN_CONFIG_FILE))?;
    verify_artifact(data_dir)?;
    let data = load_dataset(data_dir)?;
    let n = data.corpus.num_classes();
    let emb = match embeddings {
        Some(p) => {
            let e = load_embeddings(p, data_dir, n)?;
            let h = hash_path(p)?;
            if !trained.inputs.values().any(|x| *x == h) {
                return Err(Error::MissingArtifact {
                    path: p.to_path_buf(),
                    reason: format!("embeddings {h} were not the ones used to train {}", run.display()),
                });
            }
            Some(e)
        }
        None => None,
    };
    let model = PillNet::load(&run.join(MODEL_FILE), n, emb.as_ref().map_or(0, |e| e.dim()))?;
    if model.variant().uses_graph() && emb.is_none() {
        return Err(Error::Config(format!("variant {} needs --embeddings", model.variant())));
    }
    let samples = match split {
        "test" => &data.test,
        "train" => &data.train,
        other => return Err(Error::Config(format!("unknown split `{other}` (expected test or train)"))),
    };
    let names = data.corpus.dictionary().names().to_vec();
    let report = evaluate(&model, emb.as_ref(), samples, &names, &cfg.train.stage2)?
        .with_tag(model.variant().as_str());
    report.save(out)?;
    let mut m = RunManifest::new("eval", &serde_json::json!({ "split": split }), cfg.train.seed)?;
    m.add_input(data_dir)?;
    m.add_input(run)?;
    if let Some(p) = embeddings {
        m.add_input(p)?;
    }
    m.add_output(out)?;
    m.finish(started, out)?;
    print_macro(&report);
    Ok(())
}

fn parse_modes(mode: &str) -> Result<Vec<Variant>> {
    if mode == "all" {
        Ok(Variant::ALL.to_vec())
    } else {
        Ok(vec![mode.parse()?])
    }
}

pub fn ablate(data_dir: &Path, args: &ConfigArgs, mode: &str, cut_ratio: Option<f64>, out: &Path) -> Result<()> {
    let started = Instant::now();
    let mut cfg = load_config(args)?;
    if let Some(r) = cut_ratio {
        cfg.graph.cut_ratio = r;
    }
    let modes = parse_modes(mode)?;
    cfg.validate()?;
    verify_artifact(data_dir)?;
    let data = load_dataset(data_dir)?;
    create_dir(out)?;
    let mut m = RunManifest::new("ablate", &cfg, cfg.train.seed)?;
    m.add_input(data_dir)?;
    let mut table = String::from("mode,cut_ratio,macro_precision,macro_recall,macro_f1\n");
    for v in modes {
        let mut c = cfg.train.clone();
        c.model.variant = v;
        let tag = if cfg.graph.cut_ratio > 0.0 && v.uses_graph() {
            format!("{v}+edge-cut-{}", cfg.graph.cut_ratio)
        } else {
            v.to_string()
        };
        let result = run_pipeline(&data, &cfg.graph, &c, None)?;
        let report = result.report.with_tag(tag.clone());
        let path = out.join(format!("report-{tag}.json"));
        report.save(&path)?;
        m.add_output(&path)?;
        let a = &report.macro_avg;
        table.push_str(&format!("{tag},{},{},{},{}\n", cfg.graph.cut_ratio, a.precision, a.recall, a.f1));
        print!("{tag}: ");
        print_macro(&report);
    }
    let table_path = out.join("ablation.csv");
    write(&table_path, &table)?;
    m.add_output(&table_path)?;
    m.finish(started, out)?;
    Ok(())
}

pub fn sweep_edges(data_dir: &Path, args: &ConfigArgs, ratios: &[f64], out: &Path) -> Result<()> {
    let started = Instant::now();
    let cfg = load_config(args)?;
    cfg.validate()?;
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Config("cut ratios must lie in [0, 1]".into()));
    }
    verify_artifact(data_dir)?;
    let data = load_dataset(data_dir)?;
    let rows = run_edge_cut_sweep(&data, ratios, &cfg.graph, &cfg.train)?;
    create_dir(out)?;
    let csv: PathBuf = out.join("sweep.csv");
    let svg: PathBuf = out.join("sweep.svg");
    write(&csv, &sweep_to_csv(&rows))?;
    write(&svg, &sweep_svg(&rows))?;
    let mut m = RunManifest::new("sweep-edges", &cfg, cfg.train.seed)?;
    m.add_input(data_dir)?;
    m.add_output(&csv)?;
    m.add_output(&svg)?;
    m.finish(started, out)?;
    for r in &rows {
        println!("cut {:<5} edges {:<4} macro F1 {:.4}", r.ratio, r.edges, r.macro_f1);
    }
    Ok(())
}

pub fn plot(report: &Path, out: &Path) -> Result<()> {
    let started = Instant::now();
    verify_artifact(report)?;
    let svg = if report.extension().is_some_and(|e| e == "csv") {
        let text = fs::read_to_string(report).map_err(|e| Error::io(report, e))?;
        sweep_svg(&sweep_from_csv(&text)?)
    } else {
        report_svg(&EvalReport::load(report)?)
    };
    write(out, &svg)?;
    let mut m = RunManifest::new("plot", &serde_json::json!({}), 0)?;
    m.add_input(report)?;
    m.add_output(out)?;
    m.finish(started, out)?;
    println!("wrote {}", out.display());
    Ok(())
}
