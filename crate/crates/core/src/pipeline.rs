//! End-to-end orchestration from corpus to merged embeddings, the run
//! manifest, and a planted-cluster corpus generator for testing.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::align::{
    compose_vwor, fit_orthogonal, lexical_anchors, merge, read_pairs, read_triplets,
    reduce_object_features, sample_triplets, triplet_refine, TripletParams, TripletSet,
};
use crate::assoc::{associate, AssocParams, Measure};
use crate::cooc::{build_oo, build_wo, build_ww, Window};
use crate::corpus::{build_vocab, ingest_corpus, ingest_object_features, IngestOptions, VocabKind};
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::factor::{embed, EmbedParams, SvdOptions};
use crate::util::sha256_file;

pub const THREADS_ENV: &str = "COLOCATE_THREADS";

/// Every stage parameter of a full run.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub corpus_path: PathBuf,
    pub corpus_lowercase: bool,
    pub corpus_error_threshold: f64,
    pub features_path: PathBuf,
    pub min_count_words: u64,
    pub min_count_objects: u64,
    pub window: Window,
    pub oo_multiplicity: bool,
    pub assoc: AssocParams,
    pub dim: usize,
    pub p: f64,
    pub svd: SvdOptions,
    pub anchors_path: Option<PathBuf>,
    pub lambda: f64,
    pub refine: bool,
    pub triplets_path: Option<PathBuf>,
    pub triplet: TripletParams,
    pub weights: [f64; 3],
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            corpus_path: PathBuf::new(),
            corpus_lowercase: true,
            corpus_error_threshold: 0.01,
            features_path: PathBuf::new(),
            min_count_words: 5,
            min_count_objects: 1,
            window: Window::WholeCaption,
            oo_multiplicity: false,
            assoc: AssocParams::default(),
            dim: 300,
            p: 0.5,
            svd: SvdOptions::default(),
            anchors_path: None,
            lambda: 0.5,
            refine: true,
            triplets_path: None,
            triplet: TripletParams::default(),
            weights: [10.0, 10.0, 80.0],
            out_dir: PathBuf::from("out"),
            seed: 42,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

/// Parse `a,b,c` into three weights.
pub fn parse_weights(value: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad weights {value:?}")))?;
    <[f64; 3]>::try_from(parts).map_err(|_| {
        Error::Config(format!(
            "expected three comma-separated weights, got {value:?}"
        ))
    })
}

impl Config {
    /// Parse the `key = value` grammar. Blank lines and `#` comments are
    /// ignored; values may be wrapped in double quotes.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let value = value.trim();
            let value = match value.strip_prefix('"').and_then(|v| v.strip_suffix('"')) {
                Some(quoted) => quoted,
                // Unquoted values end at a whitespace-preceded `#`.
                None => value
                    .find(" #")
                    .or_else(|| value.find("\t#"))
                    .map_or(value, |cut| value[..cut].trim_end()),
            };
            cfg.set(key.trim(), value)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // Relative input paths resolve against the config file's directory.
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.corpus_path,
            &mut cfg.features_path,
            &mut cfg.out_dir,
        ] {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        }
        for p in [&mut cfg.anchors_path, &mut cfg.triplets_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus.path" => self.corpus_path = value.into(),
            "corpus.lowercase" => self.corpus_lowercase = parse_bool(key, value)?,
            "corpus.error_threshold" => self.corpus_error_threshold = parse_value(key, value)?,
            "features.path" => self.features_path = value.into(),
            "vocab.min_count_words" => self.min_count_words = parse_value(key, value)?,
            "vocab.min_count_objects" => self.min_count_objects = parse_value(key, value)?,
            "cooc.window" => self.window = value.parse()?,
            "cooc.oo_multiplicity" => self.oo_multiplicity = parse_bool(key, value)?,
            "assoc.measure" => self.assoc.measure = value.parse::<Measure>()?,
            "assoc.k" => self.assoc.k = parse_value(key, value)?,
            "assoc.alpha" => self.assoc.alpha = parse_value(key, value)?,
            "embed.dim" => self.dim = parse_value(key, value)?,
            "embed.p" => self.p = parse_value(key, value)?,
            "embed.oversample" => self.svd.oversample = parse_value(key, value)?,
            "embed.power_iters" => self.svd.power_iters = parse_value(key, value)?,
            "embed.max_iters" => self.svd.max_iters = parse_value(key, value)?,
            "embed.tol" => self.svd.tol = parse_value(key, value)?,
            "align.anchors" => self.anchors_path = optional_path(value),
            "align.lambda" => self.lambda = parse_value(key, value)?,
            "align.refine" => self.refine = parse_bool(key, value)?,
            "align.triplets" => self.triplets_path = optional_path(value),
            "align.margin" => self.triplet.margin = parse_value(key, value)?,
            "align.step_size" => self.triplet.step_size = parse_value(key, value)?,
            "align.epochs" => self.triplet.epochs = parse_value(key, value)?,
            "merge.weights" => self.weights = parse_weights(value)?,
            "out.dir" => self.out_dir = value.into(),
            "seed" => self.seed = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Flat key → value view, used for the manifest.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into())
        };
        let window = match self.window {
            Window::WholeCaption => "whole".to_string(),
            Window::Size(n) => n.to_string(),
        };
        [
            ("corpus.path", self.corpus_path.display().to_string()),
            ("corpus.lowercase", self.corpus_lowercase.to_string()),
            (
                "corpus.error_threshold",
                self.corpus_error_threshold.to_string(),
            ),
            ("features.path", self.features_path.display().to_string()),
            ("vocab.min_count_words", self.min_count_words.to_string()),
            (
                "vocab.min_count_objects",
                self.min_count_objects.to_string(),
            ),
            ("cooc.window", window),
            ("cooc.oo_multiplicity", self.oo_multiplicity.to_string()),
            ("assoc.measure", self.assoc.measure.to_string()),
            ("assoc.k", self.assoc.k.to_string()),
            ("assoc.alpha", self.assoc.alpha.to_string()),
            ("embed.dim", self.dim.to_string()),
            ("embed.p", self.p.to_string()),
            ("embed.oversample", self.svd.oversample.to_string()),
            ("embed.power_iters", self.svd.power_iters.to_string()),
            ("embed.max_iters", self.svd.max_iters.to_string()),
            ("embed.tol", self.svd.tol.to_string()),
            ("align.anchors", path(&self.anchors_path)),
            ("align.lambda", self.lambda.to_string()),
            ("align.refine", self.refine.to_string()),
            ("align.triplets", path(&self.triplets_path)),
            ("align.margin", self.triplet.margin.to_string()),
            ("align.step_size", self.triplet.step_size.to_string()),
            ("align.epochs", self.triplet.epochs.to_string()),
            (
                "merge.weights",
                self.weights.map(|w| w.to_string()).join(","),
            ),
            ("out.dir", self.out_dir.display().to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }

    fn validate(&self) -> Result<()> {
        self.assoc.validate()?;
        if self.dim == 0 {
            return Err(Error::Config("embed.dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config("embed.p must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("align.lambda must lie in [0, 1]".into()));
        }
        if self.corpus_path.as_os_str().is_empty() || self.features_path.as_os_str().is_empty() {
            return Err(Error::Config(
                "corpus.path and features.path are required".into(),
            ));
        }
        Ok(())
    }
}

/// Record of one run: parameters, input/output digests and stage timings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Input role → SHA-256 of the file.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the output directory) → SHA-256.
    pub outputs: BTreeMap<String, String>,
    /// (stage, seconds) in execution order.
    pub timings: Vec<(String, f64)>,
    pub stats: BTreeMap<String, String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
    }

    /// Check every listed output exists in `dir` and matches its digest.
    pub fn verify(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, digest) in &self.outputs {
            let path = dir.join(name);
            let actual = sha256_file(&path)?;
            if &actual != digest {
                return Err(Error::Checksum {
                    path,
                    reason: format!("digest {actual} does not match manifest {digest}"),
                });
            }
        }
        Ok(())
    }
}

/// Derive an independent stream seed per stage from the run seed.
fn stage_seed(seed: u64, stage: &str) -> u64 {
    // FNV-1a over the stage name, folded into the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Run<'a> {
    cfg: &'a Config,
    manifest: RunManifest,
    stage: &'static str,
    started: Instant,
}

impl Run<'_> {
    fn begin(&mut self, stage: &'static str) {
        self.stage = stage;
        self.started = Instant::now();
        log::info!("stage {stage}");
    }

    fn end(&mut self) {
        self.manifest
            .timings
            .push((self.stage.to_owned(), self.started.elapsed().as_secs_f64()));
    }

    fn output(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.insert(name.to_owned(), String::new());
        self.cfg.out_dir.join(name)
    }

    fn stat(&mut self, key: &str, value: impl ToString) {
        self.manifest
            .stats
            .insert(key.to_owned(), value.to_string());
    }
}

/// Execute every stage and write `manifest.json` last. On failure the output
/// directory is renamed with a `.quarantine` suffix and the error names the
/// failing stage.
pub fn run_pipeline(cfg: &Config) -> Result<RunManifest> {
    cfg.validate()?;
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;

    let mut run = Run {
        cfg,
        manifest: RunManifest {
            toolkit_version: env!("CARGO_PKG_VERSION").to_owned(),
            seed: cfg.seed,
            config: cfg.snapshot(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings: Vec::new(),
            stats: BTreeMap::new(),
        },
        stage: "setup",
        started: Instant::now(),
    };
    match pool.install(|| run_stages(&mut run)) {
        Ok(()) => Ok(run.manifest),
        Err(source) => {
            let stage = run.stage.to_owned();
            quarantine(&cfg.out_dir);
            Err(Error::Stage {
                stage,
                source: Box::new(source),
            })
        }
    }
}

fn quarantine(dir: &Path) {
    let mut target = dir.as_os_str().to_owned();
    target.push(".quarantine");
    let target = PathBuf::from(target);
    if target.exists() {
        let _ = fs::remove_dir_all(&target);
    }
    match fs::rename(dir, &target) {
        Ok(()) => log::warn!("partial outputs kept in {}", target.display()),
        Err(e) => log::warn!("could not quarantine {}: {e}", dir.display()),
    }
}

fn run_stages(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.cfg;

    run.begin("ingest");
    run.manifest
        .inputs
        .insert("corpus".into(), sha256_file(&cfg.corpus_path)?);
    run.manifest
        .inputs
        .insert("features".into(), sha256_file(&cfg.features_path)?);
    for (role, p) in [
        ("anchors", &cfg.anchors_path),
        ("triplets", &cfg.triplets_path),
    ] {
        if let Some(p) = p {
            run.manifest.inputs.insert(role.into(), sha256_file(p)?);
        }
    }
    let corpus = ingest_corpus(
        &cfg.corpus_path,
        &IngestOptions {
            lowercase: cfg.corpus_lowercase,
            error_threshold: cfg.corpus_error_threshold,
        },
    )?;
    let docs = corpus.records;
    run.stat("documents", docs.len());
    run.stat("malformed_lines", corpus.errors.len());
    run.end();

    run.begin("vocab");
    let words = build_vocab(&docs, VocabKind::Word, cfg.min_count_words);
    let objects = build_vocab(&docs, VocabKind::Object, cfg.min_count_objects);
    words.save(run.output("words.vocab"))?;
    objects.save(run.output("objects.vocab"))?;
    run.stat("words", words.len());
    run.stat("objects", objects.len());
    run.end();

    run.begin("features");
    let features = ingest_object_features(&cfg.features_path, &objects, cfg.corpus_lowercase)?;
    features.store.save(run.output("features.store"))?;
    run.stat("feature_rows_skipped", features.skipped_unknown);
    run.end();

    run.begin("cooc");
    let oo = build_oo(&docs, &objects, cfg.oo_multiplicity);
    let wo = build_wo(&docs, &words, &objects);
    let ww = build_ww(&docs, &words, cfg.window);
    for m in [&oo, &wo, &ww] {
        m.save(run.output(&format!("{}.cooc", m.kind())))?;
    }
    run.end();

    run.begin("assoc");
    let assocs = [&oo, &wo, &ww]
        .into_iter()
        .map(|m| associate(m, cfg.assoc))
        .collect::<Result<Vec<_>>>()?;
    for a in &assocs {
        a.save(run.output(&format!("{}.assoc", a.kind())))?;
    }
    run.end();

    run.begin("embed");
    let mut embedded = Vec::new();
    for (a, tokens) in assocs
        .iter()
        .zip([objects.tokens(), words.tokens(), words.tokens()])
    {
        let params = EmbedParams {
            dim: cfg.dim,
            p: cfg.p,
            seed: stage_seed(cfg.seed, &format!("embed.{}", a.kind())),
            svd: cfg.svd,
        };
        let mut e = embed(a, tokens, &params)?;
        e.meta.seed = Some(cfg.seed);
        e.export(run.output(&format!("{}.vec", e.provenance)))?;
        embedded.push(e);
    }
    let word_space = embedded.pop().expect("three embeddings");
    let vwo = embedded.pop().expect("three embeddings");
    let voo = embedded.pop().expect("three embeddings");
    run.end();

    run.begin("reduce");
    let mut reduced = reduce_object_features(
        &features.store,
        cfg.dim,
        stage_seed(cfg.seed, "reduce"),
        &cfg.svd,
    )?;
    reduced.meta.seed = Some(cfg.seed);
    reduced.export(run.output("objects_reduced.vec"))?;
    run.end();

    run.begin("align");
    let anchors = match &cfg.anchors_path {
        Some(p) => read_pairs(p)?,
        None => lexical_anchors(&reduced, &word_space),
    };
    let mut projection = fit_orthogonal(&reduced, &word_space, &anchors)?;
    run.stat("anchors", anchors.len());
    run.stat("fit_residual", projection.fit_residual());
    run.end();

    if cfg.refine {
        run.begin("refine");
        let triplets = match &cfg.triplets_path {
            Some(p) => read_triplets(p)?,
            None => sample_triplets(&anchors, &word_space, stage_seed(cfg.seed, "triplets"))?,
        };
        let set = TripletSet::resolve(&reduced, &word_space, &triplets, cfg.triplet.margin)?;
        let (refined, report) = triplet_refine(&projection, &set, &cfg.triplet)?;
        run.stat("triplets", triplets.len());
        run.stat("triplet_loss_initial", report.losses[0]);
        run.stat(
            "triplet_loss_final",
            report.losses.last().copied().unwrap_or(f64::NAN),
        );
        run.stat("triplet_converged", report.converged);
        projection = refined;
        run.end();
    }
    projection.save(run.output("projection.proj"))?;

    run.begin("compose");
    let projected = projection.project(&reduced)?;
    projected.export(run.output("objects_projected.vec"))?;
    let composition = compose_vwor(&word_space, &projected, cfg.lambda)?;
    let mut vwor = composition.embedding;
    vwor.meta.seed = Some(cfg.seed);
    vwor.export(run.output("v_wor.vec"))?;
    run.end();

    run.begin("merge");
    let merged = merge(&voo, &vwo, &vwor, cfg.weights)?;
    merged.embedding.export(run.output("merged.vec"))?;
    run.stat("merged_tokens", merged.embedding.len());
    run.end();

    run.begin("manifest");
    let names: Vec<String> = run.manifest.outputs.keys().cloned().collect();
    for name in names {
        let digest = sha256_file(cfg.out_dir.join(&name))?;
        run.manifest.outputs.insert(name, digest);
    }
    run.end();
    let path = cfg.out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&run.manifest)
        .map_err(|e| Error::Config(format!("manifest serialization: {e}")))?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Import the final merged embedding of a finished run.
pub fn load_merged(out_dir: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::import(out_dir.as_ref().join("merged.vec"))
}

/// Planted-cluster corpus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    /// Word types per cluster, including one word naming each of the
    /// cluster's objects.
    pub words_per_cluster: usize,
    pub objects_per_cluster: usize,
    pub documents: usize,
    /// Probability that a drawn token comes from the whole inventory instead
    /// of the document's cluster.
    pub noise: f64,
    pub seed: u64,
    pub objects_per_doc: usize,
    pub captions_per_doc: usize,
    pub caption_len: usize,
    pub feature_dim: usize,
    /// Standard deviation of per-instance feature noise around the object's
    /// mean; cluster means are drawn with unit spread.
    pub feature_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            clusters: 5,
            words_per_cluster: 40,
            objects_per_cluster: 10,
            documents: 1000,
            noise: 0.05,
            seed: 7,
            objects_per_doc: 3,
            captions_per_doc: 2,
            caption_len: 8,
            feature_dim: 64,
            feature_noise: 0.3,
        }
    }
}

/// Files written by [`synth_corpus`] plus the ground truth.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus_path: PathBuf,
    pub features_path: PathBuf,
    pub labels_path: PathBuf,
    /// Token → cluster for every word and object token.
    pub labels: HashMap<String, usize>,
}

pub fn synth_object_name(cluster: usize, i: usize) -> String {
    format!("obj{cluster}_{i}")
}

pub fn synth_word_name(cluster: usize, i: usize) -> String {
    format!("w{cluster}_{i}")
}

/// Write `corpus.jsonl`, `features.txt` and `labels.tsv` into `dir`.
///
/// Each document draws one cluster; objects and caption words come from that
/// cluster's inventory with probability `1 − noise`, otherwise uniformly from
/// all clusters. The first `objects_per_cluster` words of a cluster are the
/// object names themselves so that lexical anchors exist. Object features are
/// Gaussian around cluster-specific means.
pub fn synth_corpus(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<SynthCorpus> {
    if spec.clusters == 0
        || spec.words_per_cluster == 0
        || spec.objects_per_cluster == 0
        || spec.documents == 0
        || spec.feature_dim == 0
    {
        return Err(Error::InvalidParam(
            "synthetic corpus counts must be positive".into(),
        ));
    }
    if spec.objects_per_cluster > spec.words_per_cluster {
        return Err(Error::InvalidParam(
            "objects_per_cluster cannot exceed words_per_cluster".into(),
        ));
    }
    if !(0.0..1.0).contains(&spec.noise) {
        return Err(Error::InvalidParam("noise must lie in [0, 1)".into()));
    }
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let jitter = Normal::new(0.0, spec.feature_noise.max(0.0)).expect("valid normal");

    let (c, nw, no) = (
        spec.clusters,
        spec.words_per_cluster,
        spec.objects_per_cluster,
    );
    let word = |k: usize, i: usize| {
        if i < no {
            synth_object_name(k, i)
        } else {
            synth_word_name(k, i)
        }
    };
    let mut labels = HashMap::new();
    for k in 0..c {
        for i in 0..nw {
            labels.insert(word(k, i), k);
        }
    }

    // Object feature means: cluster centre plus a small per-object offset.
    let centres: Vec<Vec<f64>> = (0..c)
        .map(|_| {
            (0..spec.feature_dim)
                .map(|_| 3.0 * unit.sample(&mut rng))
                .collect()
        })
        .collect();
    let object_means: Vec<Vec<Vec<f64>>> = centres
        .iter()
        .map(|centre| {
            (0..no)
                .map(|_| {
                    centre
                        .iter()
                        .map(|m| m + 0.5 * unit.sample(&mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();

    let mut corpus = String::new();
    let mut features = format!("#dim {}\n", spec.feature_dim);
    for doc in 0..spec.documents {
        let k = rng.random_range(0..c);
        let draw = |inventory: usize, rng: &mut ChaCha8Rng| -> (usize, usize) {
            if rng.random::<f64>() < spec.noise {
                (rng.random_range(0..c), rng.random_range(0..inventory))
            } else {
                (k, rng.random_range(0..inventory))
            }
        };
        let objects: Vec<(usize, usize)> = (0..spec.objects_per_doc)
            .map(|_| draw(no, &mut rng))
            .collect();
        let captions: Vec<Vec<String>> = (0..spec.captions_per_doc)
            .map(|_| {
                (0..spec.caption_len)
                    .map(|_| {
                        let (kk, i) = draw(nw, &mut rng);
                        word(kk, i)
                    })
                    .collect()
            })
            .collect();
        let image_id = format!("img{doc:06}");
        let record = serde_json::json!({
            "image_id": image_id,
            "objects": objects.iter().map(|&(kk, i)| synth_object_name(kk, i)).collect::<Vec<_>>(),
            "captions": captions,
        });
        corpus.push_str(&record.to_string());
        corpus.push('\n');
        for (inst, &(kk, i)) in objects.iter().enumerate() {
            let _ = write!(features, "{image_id} {inst} {}", synth_object_name(kk, i));
            for m in &object_means[kk][i] {
                let _ = write!(features, " {}", m + jitter.sample(&mut rng));
            }
            features.push('\n');
        }
    }

    let corpus_path = dir.join("corpus.jsonl");
    let features_path = dir.join("features.txt");
    let labels_path = dir.join("labels.tsv");
    fs::write(&corpus_path, corpus).map_err(|e| Error::io(&corpus_path, e))?;
    fs::write(&features_path, features).map_err(|e| Error::io(&features_path, e))?;
    let mut sorted: Vec<(&String, &usize)> = labels.iter().collect();
    sorted.sort();
    let labels_text: String = sorted.iter().map(|(t, k)| format!("{t}\t{k}\n")).collect();
    fs::write(&labels_path, labels_text).map_err(|e| Error::io(&labels_path, e))?;
    Ok(SynthCorpus {
        corpus_path,
        features_path,
        labels_path,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ingest_corpus;

    #[test]
    fn config_grammar() {
        let cfg = Config::parse(
            "# comment\ncorpus.path = data/c.jsonl\nfeatures.path = \"f.txt\"\nembed.dim = 50\n\
             assoc.k = 1\nmerge.weights = 1, 1, 8\ncooc.window = 3\nalign.refine = false\n",
        )
        .unwrap();
        assert_eq!(cfg.corpus_path, PathBuf::from("data/c.jsonl"));
        assert_eq!(cfg.features_path, PathBuf::from("f.txt"));
        assert_eq!(cfg.dim, 50);
        assert_eq!(cfg.assoc.k, 1.0);
        assert_eq!(cfg.weights, [1.0, 1.0, 8.0]);
        assert_eq!(cfg.window, Window::Size(3));
        assert!(!cfg.refine);
        assert!(Config::parse("nope = 1").is_err());
        assert!(Config::parse("embed.dim").is_err());
        assert!(Config::parse("embed.dim = x").is_err());
    }

    #[test]
    fn trailing_comments_are_stripped_from_unquoted_values() {
        let cfg = Config::parse("cooc.window = 0   # whole caption\nout.dir = \"a #b\"\n").unwrap();
        assert_eq!(cfg.window, Window::WholeCaption);
        assert_eq!(cfg.out_dir, PathBuf::from("a #b"));
    }

    #[test]
    fn snapshot_round_trips_through_set() {
        let cfg = Config {
            corpus_path: "c".into(),
            features_path: "f".into(),
            window: Window::Size(4),
            triplets_path: Some("t".into()),
            ..Config::default()
        };
        let mut back = Config::default();
        for (k, v) in cfg.snapshot() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "a"), stage_seed(1, "b"));
        assert_ne!(stage_seed(1, "a"), stage_seed(2, "a"));
        assert_eq!(stage_seed(3, "x"), stage_seed(3, "x"));
    }

    #[test]
    fn synth_is_seeded_and_noise_free_is_separated() {
        let spec = SynthSpec {
            clusters: 2,
            documents: 50,
            noise: 0.0,
            words_per_cluster: 6,
            objects_per_cluster: 3,
            feature_dim: 4,
            ..Default::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = synth_corpus(&spec, a.path()).unwrap();
        let sb = synth_corpus(&spec, b.path()).unwrap();
        assert_eq!(
            fs::read(&sa.corpus_path).unwrap(),
            fs::read(&sb.corpus_path).unwrap()
        );
        assert_eq!(
            fs::read(&sa.features_path).unwrap(),
            fs::read(&sb.features_path).unwrap()
        );
        let docs = ingest_corpus(&sa.corpus_path, &IngestOptions::default())
            .unwrap()
            .records;
        let objects = build_vocab(&docs, VocabKind::Object, 1);
        let oo = build_oo(&docs, &objects, false);
        for &(r, c, _) in oo.entries() {
            let (r, c) = (
                objects.token(r as usize).unwrap(),
                objects.token(c as usize).unwrap(),
            );
            assert_eq!(sa.labels[r], sa.labels[c]);
        }
        assert!(oo.nnz() > 0);
    }

    #[test]
    fn synth_rejects_bad_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let bad = SynthSpec {
            noise: 1.0,
            ..Default::default()
        };
        assert!(synth_corpus(&bad, dir.path()).is_err());
        let bad = SynthSpec {
            clusters: 0,
            ..Default::default()
        };
        assert!(synth_corpus(&bad, dir.path()).is_err());
    }
}
