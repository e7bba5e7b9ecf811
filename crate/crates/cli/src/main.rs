use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use colocate::align::{
    fit_orthogonal, merge, read_pairs, read_triplets, sample_triplets, triplet_refine,
    ProjectionMap, TripletParams, TripletSet,
};
use colocate::assoc::{associate, AssocMatrix, AssocParams, Measure};
use colocate::cooc::{build_oo, build_wo, build_ww, CoocMatrix, MatrixKind, Window};
use colocate::corpus::{
    build_vocab, ingest_corpus, ingest_object_features, IngestOptions, VocabKind, Vocabulary,
};
use colocate::embedding::EmbeddingMatrix;
use colocate::factor::{embed, EmbedParams, SvdOptions};
use colocate::pipeline::{parse_weights, run_pipeline, synth_corpus, Config, SynthSpec};
use colocate::query::{
    analogy, eval_object_pairs, eval_word_pairs, nearest, read_groups_file, read_pairs_file,
    Metric, Query, QueryResult,
};
use serde::Serialize;

const WORDS_VOCAB: &str = "words.vocab";
const OBJECTS_VOCAB: &str = "objects.vocab";
const FEATURES_STORE: &str = "features.store";

/// Joint word/object embeddings from co-location counts.
#[derive(Parser)]
#[command(name = "colocate", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read a JSONL corpus and write word and object vocabularies (and the
    /// object feature store when --features is given).
    Ingest(IngestArgs),
    /// Build one co-occurrence matrix.
    Cooc(CoocArgs),
    /// Turn counts into association values.
    Assoc(AssocArgs),
    /// Factor an association matrix into embeddings.
    Embed(EmbedArgs),
    /// Fit or refine an orthogonal map between two spaces.
    #[command(subcommand)]
    Align(AlignCommand),
    /// Weighted merge of v_oo, v_wo and v_wor.
    Merge(MergeArgs),
    /// Nearest-neighbour and analogy queries.
    #[command(subcommand)]
    Query(QueryCommand),
    /// Intrinsic evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Re-export an embedding file, optionally without metadata lines.
    Convert(ConvertArgs),
    /// Run every stage from a config file.
    Run(RunArgs),
    /// Write a planted-cluster synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_count_words: u64,
    #[arg(long, default_value_t = 1)]
    min_count_objects: u64,
    /// Object feature rows (`#dim D` header, then `image idx name f1..fD`).
    #[arg(long)]
    features: Option<PathBuf>,
    /// Fraction of malformed lines tolerated before aborting.
    #[arg(long, default_value_t = 0.01)]
    error_threshold: f64,
    /// Keep token case instead of lowercasing.
    #[arg(long)]
    keep_case: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CoocArgs {
    #[arg(long)]
    kind: MatrixKind,
    #[arg(long)]
    corpus: PathBuf,
    /// Directory holding the vocabularies written by `ingest`.
    #[arg(long)]
    vocab: PathBuf,
    /// Word-word window; 0 means the whole caption.
    #[arg(long, default_value = "0")]
    window: Window,
    /// Count object pairs by instance product instead of presence.
    #[arg(long)]
    multiplicity: bool,
    #[arg(long)]
    keep_case: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AssocArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "sppmi_cds")]
    measure: Measure,
    #[arg(long, default_value_t = 5.0)]
    k: f64,
    #[arg(long, default_value_t = 0.75)]
    alpha: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Vocabulary directory naming the rows; defaults to the directory of
    /// the input matrix.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 300)]
    dim: usize,
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum AlignCommand {
    /// Orthogonal Procrustes over anchor pairs.
    Fit(FitArgs),
    /// Triplet-loss refinement of a fitted map.
    Refine(RefineArgs),
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// `source_token target_token` per line; defaults to shared tokens.
    #[arg(long)]
    anchors: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the source embedding mapped through the fitted map.
    #[arg(long)]
    projected: Option<PathBuf>,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    proj: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    /// `anchor positive negative` per line; sampled from the map's anchors
    /// when absent.
    #[arg(long)]
    triplets: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    step_size: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Defaults to overwriting --proj.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MergeArgs {
    #[arg(long)]
    voo: PathBuf,
    #[arg(long)]
    vwo: PathBuf,
    #[arg(long)]
    vwor: PathBuf,
    #[arg(long, default_value = "10,10,80")]
    weights: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum QueryCommand {
    Nearest(NearestArgs),
    Analogy(AnalogyArgs),
}

#[derive(Args)]
struct NearestArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    token: String,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AnalogyArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[arg(long)]
    c: String,
    #[arg(long, default_value_t = 1)]
    k: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Mean distance over `token1 token2` lines.
    Pairs(PairsArgs),
    /// Mean pairwise distance within each line's group.
    Groups(GroupsArgs),
}

#[derive(Args)]
struct PairsArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GroupsArgs {
    #[arg(long)]
    emb: PathBuf,
    #[arg(long)]
    groups: PathBuf,
    #[arg(long, default_value = "euclidean")]
    metric: Metric,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    strip_metadata: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out.dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5)]
    clusters: usize,
    #[arg(long, default_value_t = 40)]
    words_per_cluster: usize,
    #[arg(long, default_value_t = 10)]
    objects_per_cluster: usize,
    #[arg(long, default_value_t = 1000)]
    documents: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Err(e) = dispatch(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Cooc(a) => cooc(a),
        Command::Assoc(a) => assoc(a),
        Command::Embed(a) => embed_cmd(a),
        Command::Align(AlignCommand::Fit(a)) => align_fit(a),
        Command::Align(AlignCommand::Refine(a)) => align_refine(a),
        Command::Merge(a) => merge_cmd(a),
        Command::Query(QueryCommand::Nearest(a)) => query_nearest(a),
        Command::Query(QueryCommand::Analogy(a)) => query_analogy(a),
        Command::Eval(EvalCommand::Pairs(a)) => eval_pairs(a),
        Command::Eval(EvalCommand::Groups(a)) => eval_groups(a),
        Command::Convert(a) => convert(a),
        Command::Run(a) => run(a),
        Command::Synth(a) => synth(a),
    }
}

fn ingest_options(keep_case: bool, error_threshold: f64) -> IngestOptions {
    IngestOptions {
        lowercase: !keep_case,
        error_threshold,
    }
}

fn ingest(a: IngestArgs) -> Result<()> {
    let corpus = ingest_corpus(&a.corpus, &ingest_options(a.keep_case, a.error_threshold))?;
    for e in &corpus.errors {
        log::warn!("{e}");
    }
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let words = build_vocab(&corpus.records, VocabKind::Word, a.min_count_words);
    let objects = build_vocab(&corpus.records, VocabKind::Object, a.min_count_objects);
    words.save(a.out.join(WORDS_VOCAB))?;
    objects.save(a.out.join(OBJECTS_VOCAB))?;
    println!(
        "{} documents ({} malformed lines), {} words, {} objects",
        corpus.records.len(),
        corpus.errors.len(),
        words.len(),
        objects.len()
    );
    if let Some(features) = &a.features {
        let f = ingest_object_features(features, &objects, !a.keep_case)?;
        f.store.save(a.out.join(FEATURES_STORE))?;
        println!(
            "{} object feature means (dimension {}), {} rows with unknown objects skipped",
            f.store.len(),
            f.store.dim(),
            f.skipped_unknown
        );
    }
    Ok(())
}

fn cooc(a: CoocArgs) -> Result<()> {
    let corpus = ingest_corpus(&a.corpus, &ingest_options(a.keep_case, 1.0))?;
    let m = match a.kind {
        MatrixKind::Oo => {
            let objects = Vocabulary::load(a.vocab.join(OBJECTS_VOCAB))?;
            build_oo(&corpus.records, &objects, a.multiplicity)
        }
        MatrixKind::Wo => {
            let words = Vocabulary::load(a.vocab.join(WORDS_VOCAB))?;
            let objects = Vocabulary::load(a.vocab.join(OBJECTS_VOCAB))?;
            build_wo(&corpus.records, &words, &objects)
        }
        MatrixKind::Ww => {
            let words = Vocabulary::load(a.vocab.join(WORDS_VOCAB))?;
            build_ww(&corpus.records, &words, a.window)
        }
    };
    m.save(&a.out)?;
    println!(
        "{} {}x{} matrix, {} stored cells, total {}",
        a.kind,
        m.rows(),
        m.cols(),
        m.nnz(),
        m.total()
    );
    Ok(())
}

fn assoc(a: AssocArgs) -> Result<()> {
    let m = CoocMatrix::load(&a.input)?;
    let params = AssocParams {
        measure: a.measure,
        k: a.k,
        alpha: a.alpha,
    };
    let out = associate(&m, params)?;
    out.save(&a.out)?;
    println!(
        "{} over {} stored cells (k={}, alpha={})",
        a.measure,
        out.nnz(),
        a.k,
        a.alpha
    );
    Ok(())
}

fn embed_cmd(a: EmbedArgs) -> Result<()> {
    let m = AssocMatrix::load(&a.input)?;
    let dir = match &a.vocab {
        Some(d) => d.clone(),
        None => a.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let vocab_file = match m.kind() {
        MatrixKind::Oo => OBJECTS_VOCAB,
        MatrixKind::Wo | MatrixKind::Ww => WORDS_VOCAB,
    };
    let vocab = Vocabulary::load(dir.join(vocab_file))?;
    if vocab.len() != m.rows() {
        bail!(
            "{} has {} tokens but the matrix has {} rows",
            dir.join(vocab_file).display(),
            vocab.len(),
            m.rows()
        );
    }
    let params = EmbedParams {
        dim: a.dim,
        p: a.p,
        seed: a.seed,
        svd: SvdOptions::default(),
    };
    let e = embed(&m, vocab.tokens(), &params)?;
    e.export(&a.out)?;
    println!(
        "{} vectors of dimension {} ({})",
        e.len(),
        e.dim(),
        e.provenance
    );
    Ok(())
}

fn align_fit(a: FitArgs) -> Result<()> {
    let source = EmbeddingMatrix::import(&a.source)?;
    let target = EmbeddingMatrix::import(&a.target)?;
    let anchors = match &a.anchors {
        Some(p) => read_pairs(p)?,
        None => colocate::align::lexical_anchors(&source, &target),
    };
    let pm = fit_orthogonal(&source, &target, &anchors)?;
    pm.save(&a.out)?;
    if let Some(p) = &a.projected {
        pm.project(&source)?.export(p)?;
    }
    println!(
        "fitted over {} anchors, residual {:.6}, orthogonality error {:.2e}",
        pm.anchors().len(),
        pm.fit_residual(),
        pm.orthogonality_error()
    );
    Ok(())
}

fn align_refine(a: RefineArgs) -> Result<()> {
    let pm = ProjectionMap::load(&a.proj)?;
    let source = EmbeddingMatrix::import(&a.source)?;
    let target = EmbeddingMatrix::import(&a.target)?;
    let triplets = match &a.triplets {
        Some(p) => read_triplets(p)?,
        None => sample_triplets(pm.anchors(), &target, a.seed)?,
    };
    let set = TripletSet::resolve(&source, &target, &triplets, a.margin)?;
    let params = TripletParams {
        margin: a.margin,
        step_size: a.step_size,
        epochs: a.epochs,
    };
    let (refined, report) = triplet_refine(&pm, &set, &params)?;
    refined.save(a.out.as_ref().unwrap_or(&a.proj))?;
    let first = report.losses.first().copied().unwrap_or(f64::NAN);
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "{} triplets, loss {first:.6} -> {last:.6} over {} epochs{}",
        set.len(),
        report.losses.len() - 1,
        if report.converged { "" } else { " (stalled)" }
    );
    Ok(())
}

fn merge_cmd(a: MergeArgs) -> Result<()> {
    let weights = parse_weights(&a.weights)?;
    let voo = EmbeddingMatrix::import(&a.voo)?;
    let vwo = EmbeddingMatrix::import(&a.vwo)?;
    let vwor = EmbeddingMatrix::import(&a.vwor)?;
    let merged = merge(&voo, &vwo, &vwor, weights)?;
    merged.embedding.export(&a.out)?;
    println!(
        "{} merged vectors, weights {:?}",
        merged.embedding.len(),
        merged.weights
    );
    Ok(())
}

/// Left-aligned text columns separated by two spaces.
fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    for row in rows {
        line(row);
    }
    out
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn print_hits(r: &QueryResult, json: bool) -> Result<()> {
    if json {
        return print_json(r);
    }
    let score = match r.metric {
        Metric::Cosine => "cosine",
        Metric::Euclidean => "distance",
    };
    let rows: Vec<Vec<String>> = r
        .hits
        .iter()
        .enumerate()
        .map(|(i, (t, s))| vec![(i + 1).to_string(), t.clone(), format!("{s:.6}")])
        .collect();
    println!("query: {}", r.query);
    print!("{}", table(&["rank", "token", score], &rows));
    Ok(())
}

fn query_nearest(a: NearestArgs) -> Result<()> {
    let e = EmbeddingMatrix::import(&a.emb)?;
    let exclude: HashSet<&str> = [a.token.as_str()].into_iter().collect();
    let r = nearest(&e, Query::Token(&a.token), a.k, a.metric, &exclude)?;
    print_hits(&r, a.json)
}

fn query_analogy(a: AnalogyArgs) -> Result<()> {
    let e = EmbeddingMatrix::import(&a.emb)?;
    let r = analogy(&e, &a.a, &a.b, &a.c, a.k)?;
    print_hits(&r, a.json)
}

fn eval_pairs(a: PairsArgs) -> Result<()> {
    let e = EmbeddingMatrix::import(&a.emb)?;
    let pairs = read_pairs_file(&a.pairs)?;
    let r = eval_word_pairs(&e, &pairs, a.metric)?;
    if a.json {
        return print_json(&r);
    }
    let rows = vec![vec![
        r.metric.to_string(),
        format!("{:.6}", r.mean_distance),
        r.retained.to_string(),
        r.skipped.to_string(),
    ]];
    print!(
        "{}",
        table(&["metric", "mean_distance", "retained", "skipped"], &rows)
    );
    Ok(())
}

fn eval_groups(a: GroupsArgs) -> Result<()> {
    let e = EmbeddingMatrix::import(&a.emb)?;
    let groups = read_groups_file(&a.groups)?;
    let r = eval_object_pairs(&e, &groups, a.metric)?;
    if a.json {
        return print_json(&r);
    }
    let rows = vec![vec![
        r.metric.to_string(),
        format!("{:.6}", r.mean_distance),
        r.pairs.to_string(),
        r.groups_used.to_string(),
        r.groups_skipped.to_string(),
        r.oov_tokens.to_string(),
    ]];
    print!(
        "{}",
        table(
            &[
                "metric",
                "mean_distance",
                "pairs",
                "groups_used",
                "groups_skipped",
                "oov_tokens"
            ],
            &rows
        )
    );
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let e = EmbeddingMatrix::import(&a.input)?;
    e.export_with(&a.out, !a.strip_metadata)?;
    println!("{} vectors of dimension {}", e.len(), e.dim());
    Ok(())
}

fn run(a: RunArgs) -> Result<()> {
    let mut cfg = Config::load(&a.config)?;
    for kv in &a.overrides {
        let Some((k, v)) = kv.split_once('=') else {
            bail!("override {kv:?} is not KEY=VALUE");
        };
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(out) = a.out {
        cfg.out_dir = out;
    }
    let manifest = run_pipeline(&cfg)?;
    let rows: Vec<Vec<String>> = manifest
        .timings
        .iter()
        .map(|(stage, secs)| vec![stage.clone(), format!("{secs:.3}")])
        .collect();
    print!("{}", table(&["stage", "seconds"], &rows));
    println!("outputs in {}", cfg.out_dir.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        clusters: a.clusters,
        words_per_cluster: a.words_per_cluster,
        objects_per_cluster: a.objects_per_cluster,
        documents: a.documents,
        noise: a.noise,
        seed: a.seed,
        ..SynthSpec::default()
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let s = synth_corpus(&spec, &a.out)?;
    println!(
        "wrote {}, {} and {}",
        s.corpus_path.display(),
        s.features_path.display(),
        s.labels_path.display()
    );
    Ok(())
}
