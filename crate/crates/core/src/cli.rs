//! Batch command line front end.
//!
//! Config-driven stages read and write fixed file names inside the output
//! directory, so running them one by one is the same as `pipeline`:
//!
//! | stage            | reads                                  | writes                          |
//! |------------------|----------------------------------------|---------------------------------|
//! | train-desc-pca   | train manifest                         | `desc_pca_{i}.mvpj`             |
//! | train-vocab      | train manifest, projections            | `vocab_{i}.mvvc`                |
//! | encode           | manifests, vocabularies, projections   | `bow_{train,db,queries}.mvbw`   |
//! | train-reduction  | `bow_train.mvbw`                       | `reduction.mvrd`                |
//! | reduce           | `bow_db.mvbw`, `bow_queries.mvbw`      | `short_{db,queries}.mvbw`       |
//! | index            | `short_db.mvbw`                        | `index.mvbw`                    |
//! | search           | index, ground truth                    | `results.tsv`                   |
//! | eval             | `results.tsv`, ground truth            | `eval.tsv`                      |

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::bow::{quantization_complexity, BowMatrix};
use crate::config::{PipelineConfig, VocabEntry, ROOTSIFT_POWERS};
use crate::descriptors::{load_descriptors, save_descriptors, ChannelManifest, DescriptorProjection};
use crate::error::{Error, Result};
use crate::pipeline::{self, BundleEncoder, StageTimer};
use crate::reduction::{reduce_matrix, train_reduction_from_bow, ReductionModel, ReductionOptions};
use crate::search::{average_precision, format_results, parse_results, GroundTruth, Index, Ranking};
use crate::synth::{generate_synthetic, SynthSpec, DB_MANIFEST, GROUND_TRUTH, TRAIN_MANIFEST};
use crate::vocabulary::Vocabulary;

#[derive(Debug, Parser)]
#[command(name = "mvocab", version, about = "Multi-vocabulary BOW short-vector image search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config's base seed (or the synthetic spec's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps internal parallelism. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply a power law and/or projection to one descriptor file.
    Transform {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        power: Option<f64>,
        #[arg(long)]
        projection: Option<PathBuf>,
    },
    /// Learn descriptor projections for entries with `pca_dim`.
    TrainDescPca,
    /// Train one k-means vocabulary per config entry.
    TrainVocab,
    /// Encode training, database and query images as bundle BOW vectors.
    Encode,
    /// Learn the joint PCA + whitening model.
    TrainReduction,
    /// Reduce database and query BOW vectors to short vectors.
    Reduce,
    /// Validate short vectors and write the search index.
    Index,
    /// Rank the index for every ground-truth query.
    Search {
        /// Results per query (default: whole index).
        #[arg(long)]
        top: Option<usize>,
    },
    /// Average precision per query and mAP.
    Eval,
    /// Quantization complexity and product-vocabulary cell counts.
    Stats {
        /// Vocabulary sizes, instead of a config (e.g. 4096,2048,1024).
        #[arg(long, value_delimiter = ',')]
        ks: Vec<usize>,
    },
    /// Generate a planted synthetic benchmark plus a matching config.
    Synth {
        /// Synthetic spec (TOML); defaults to the shipped benchmark.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline,
}

/// Parses `args` (including the program name), runs, and returns the exit
/// status. Normal output goes to `out`; diagnostics go to stderr.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return 1;
        }
    };
    match pool.install(|| dispatch(&cli, out)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

struct Ctx {
    cfg: PipelineConfig,
    out: PathBuf,
}

impl Ctx {
    fn load(cli: &Cli) -> Result<Self> {
        let path = cli
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
        let mut cfg = PipelineConfig::load(path)?;
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        cfg.check_files()?;
        let out = match &cli.out {
            Some(o) => o.clone(),
            None => cfg.output_path(),
        };
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Ctx { cfg, out })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn projection_file(&self, i: usize) -> PathBuf {
        self.file(&format!("desc_pca_{i}.mvpj"))
    }

    fn vocab_file(&self, i: usize) -> PathBuf {
        self.file(&format!("vocab_{i}.mvvc"))
    }

    fn manifest(&self) -> Result<ChannelManifest> {
        ChannelManifest::load(&self.cfg.manifest_path())
    }

    fn train_manifest(&self) -> Result<ChannelManifest> {
        let m = ChannelManifest::load(&self.cfg.train_manifest_path())?;
        for v in &self.cfg.vocab {
            if !m.has_channel(&v.channel) {
                return Err(Error::Config(format!(
                    "training manifest has no channel {}",
                    v.channel
                )));
            }
        }
        Ok(m)
    }

    fn ground_truth(&self) -> Result<GroundTruth> {
        let p = self
            .cfg
            .ground_truth
            .as_ref()
            .ok_or_else(|| Error::Config("config has no ground_truth".into()))?;
        GroundTruth::load(&self.cfg.resolve(p))
    }

    fn projection(&self, i: usize) -> Result<Option<DescriptorProjection>> {
        let entry = &self.cfg.vocab[i];
        if entry.pca_dim.is_some() {
            return DescriptorProjection::load(&self.projection_file(i)).map(Some);
        }
        match &entry.projection {
            Some(p) => {
                let mut proj = DescriptorProjection::load(&self.cfg.resolve(p))?;
                proj.renormalize = entry.pca_renormalize;
                Ok(Some(proj))
            }
            None => Ok(None),
        }
    }

    fn encoder(&self, train: Option<&ChannelManifest>) -> Result<BundleEncoder> {
        let n = self.cfg.vocab.len();
        let projections = (0..n).map(|i| self.projection(i)).collect::<Result<Vec<_>>>()?;
        let vocabularies = (0..n)
            .map(|i| Vocabulary::load(&self.vocab_file(i)))
            .collect::<Result<Vec<_>>>()?;
        BundleEncoder::new(
            &self.cfg,
            vocabularies,
            projections,
            train.map(|t| t as &dyn pipeline::DescriptorSource),
        )
    }
}

fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    match &cli.command {
        Command::Transform {
            input,
            output,
            power,
            projection,
        } => transform_file(input, output, *power, projection.as_deref()),
        Command::Stats { ks } if !ks.is_empty() => {
            print(out, &format!("complexity\t{}\n", quantization_complexity(ks.iter().copied())))
        }
        Command::Synth { spec } => synth(cli, spec.as_deref(), out),
        command => {
            let ctx = Ctx::load(cli)?;
            match command {
                Command::TrainDescPca => train_desc_pca(&ctx),
                Command::TrainVocab => train_vocab(&ctx),
                Command::Encode => encode(&ctx),
                Command::TrainReduction => train_reduction(&ctx),
                Command::Reduce => reduce(&ctx),
                Command::Index => index(&ctx),
                Command::Search { top } => search(&ctx, *top),
                Command::Eval => eval(&ctx, out),
                Command::Stats { .. } => stats(&ctx, out),
                Command::Pipeline => {
                    let _t = StageTimer::new("pipeline");
                    train_desc_pca(&ctx)?;
                    train_vocab(&ctx)?;
                    encode(&ctx)?;
                    train_reduction(&ctx)?;
                    reduce(&ctx)?;
                    index(&ctx)?;
                    search(&ctx, None)?;
                    eval(&ctx, out)
                }
                Command::Transform { .. } | Command::Synth { .. } => unreachable!(),
            }
        }
    }
}

fn print(out: &mut dyn Write, s: &str) -> Result<()> {
    out.write_all(s.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

fn transform_file(input: &Path, output: &Path, power: Option<f64>, projection: Option<&Path>) -> Result<()> {
    let x = load_descriptors(input)?;
    let entry = VocabEntry {
        power,
        ..VocabEntry::new("", 1)
    };
    let proj = projection.map(DescriptorProjection::load).transpose()?;
    save_descriptors(output, &pipeline::transform(&x, &entry, proj.as_ref())?)
}

fn train_desc_pca(ctx: &Ctx) -> Result<()> {
    if ctx.cfg.vocab.iter().all(|v| v.pca_dim.is_none()) {
        return Ok(());
    }
    let train = ctx.train_manifest()?;
    for i in 0..ctx.cfg.vocab.len() {
        if let Some(p) = pipeline::train_projection(&ctx.cfg, i, &train)? {
            p.save(&ctx.projection_file(i))?;
        }
    }
    Ok(())
}

fn train_vocab(ctx: &Ctx) -> Result<()> {
    let train = ctx.train_manifest()?;
    for i in 0..ctx.cfg.vocab.len() {
        let proj = ctx.projection(i)?;
        pipeline::train_vocabulary(&ctx.cfg, i, &train, proj.as_ref())?.save(&ctx.vocab_file(i))?;
    }
    Ok(())
}

fn encode(ctx: &Ctx) -> Result<()> {
    let _t = StageTimer::new("encode");
    let train = ctx.train_manifest()?;
    let enc = ctx.encoder(Some(&train))?;
    enc.encode(&train)?.save(&ctx.file("bow_train.mvbw"))?;
    enc.encode(&ctx.manifest()?)?.save(&ctx.file("bow_db.mvbw"))?;
    if let Some(q) = &ctx.cfg.query_manifest {
        let queries = ChannelManifest::load(&ctx.cfg.resolve(q))?;
        enc.encode(&queries)?.save(&ctx.file("bow_queries.mvbw"))?;
    }
    Ok(())
}

fn train_reduction(ctx: &Ctx) -> Result<()> {
    let _t = StageTimer::new("train-reduction");
    let train = BowMatrix::load(&ctx.file("bow_train.mvbw"))?;
    let model = train_reduction_from_bow(&train, ctx.cfg.d_out, &ReductionOptions::default())?;
    if model.floored {
        info!("reduction model has floored eigenvalues");
    }
    model.save(&ctx.file("reduction.mvrd"))
}

fn reduce(ctx: &Ctx) -> Result<()> {
    let _t = StageTimer::new("reduce");
    let model = ReductionModel::load(&ctx.file("reduction.mvrd"))?;
    reduce_matrix(&BowMatrix::load(&ctx.file("bow_db.mvbw"))?, &model)?
        .save(&ctx.file("short_db.mvbw"))?;
    let queries = ctx.file("bow_queries.mvbw");
    if ctx.cfg.query_manifest.is_some() {
        reduce_matrix(&BowMatrix::load(&queries)?, &model)?.save(&ctx.file("short_queries.mvbw"))?;
    }
    Ok(())
}

fn index(ctx: &Ctx) -> Result<()> {
    let idx = Index::build(BowMatrix::load(&ctx.file("short_db.mvbw"))?)?;
    idx.vectors().save(&ctx.file("index.mvbw"))
}

fn search(ctx: &Ctx, top: Option<usize>) -> Result<()> {
    let _t = StageTimer::new("search");
    let idx = Index::build(BowMatrix::load(&ctx.file("index.mvbw"))?)?;
    let external = if ctx.cfg.query_manifest.is_some() {
        Some(Index::build(BowMatrix::load(&ctx.file("short_queries.mvbw"))?)?)
    } else {
        None
    };
    let gt = ctx.ground_truth()?;
    let top = top.unwrap_or(idx.len().max(1));
    let mut results: Vec<(String, Ranking)> = Vec::new();
    for q in &gt.queries {
        if results.iter().any(|(id, _)| id == &q.query_id) {
            continue;
        }
        let v = external
            .as_ref()
            .and_then(|e| e.vector(&q.query_id))
            .or_else(|| idx.vector(&q.query_id))
            .ok_or_else(|| Error::Data(format!("query {} has no vector", q.query_id)))?;
        results.push((q.query_id.clone(), idx.query(v, top)?));
    }
    let path = ctx.file("results.tsv");
    fs::write(&path, format_results(&results)).map_err(|e| Error::io(&path, e))
}

fn eval(ctx: &Ctx, out: &mut dyn Write) -> Result<()> {
    let gt = ctx.ground_truth()?;
    let path = ctx.file("results.tsv");
    let results = parse_results(&fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
    let mut report = String::new();
    let mut sum = 0.0;
    for q in &gt.queries {
        let ranked = results
            .iter()
            .find(|(id, _)| id == &q.query_id)
            .map(|(_, r)| r.iter().map(|(id, _)| id.as_str()).collect::<Vec<_>>())
            .ok_or_else(|| Error::Data(format!("no results for query {}", q.query_id)))?;
        let ap = average_precision(&ranked, q)?;
        sum += ap;
        report.push_str(&format!("{}\t{ap:.6}\n", q.query_id));
    }
    let map = sum / gt.queries.len() as f64;
    report.push_str(&format!("mAP\t{map:.6}\n"));
    let eval_path = ctx.file("eval.tsv");
    fs::write(&eval_path, &report).map_err(|e| Error::io(&eval_path, e))?;
    print(out, &report)
}

fn stats(ctx: &Ctx, out: &mut dyn Write) -> Result<()> {
    let mut report = format!("complexity\t{}\n", quantization_complexity(ctx.cfg.ks()));
    let have_vocabs = (0..ctx.cfg.vocab.len()).all(|i| ctx.vocab_file(i).is_file());
    if have_vocabs {
        let enc = ctx.encoder(None)?;
        let curve = pipeline::unique_assignment_curve(&enc, &ctx.manifest()?)?;
        for (v, count) in curve.iter().enumerate() {
            report.push_str(&format!("unique_assignments\t{}\t{count}\n", v + 1));
        }
    }
    print(out, &report)
}

fn synth(cli: &Cli, spec: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let dir = cli
        .out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for synth".into()))?;
    let mut spec = match spec {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            toml::from_str::<SynthSpec>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => SynthSpec::default(),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    let _t = StageTimer::new("synth");
    let data = generate_synthetic(&spec)?;
    data.write(&dir)?;
    let cfg = default_synthetic_config(&spec);
    let cfg_path = dir.join("pipeline.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    print(out, &format!("wrote {}\n", cfg_path.display()))
}

/// Four equal-size vocabularies over the power-law descriptor family, one
/// per exponent, with distinct seeds.
pub fn default_synthetic_config(spec: &SynthSpec) -> PipelineConfig {
    let channel = spec.channels.first().cloned().unwrap_or_else(|| "r1.00".into());
    let vocab = ROOTSIFT_POWERS
        .iter()
        .enumerate()
        .map(|(i, &p)| VocabEntry {
            seed: Some(101 + i as u64),
            power: Some(p),
            ..VocabEntry::new(&channel, 256)
        })
        .collect();
    let mut cfg = PipelineConfig::new(DB_MANIFEST, vocab);
    cfg.train_manifest = Some(TRAIN_MANIFEST.into());
    cfg.ground_truth = Some(GROUND_TRUTH.into());
    cfg.training_tag = "synthetic-train".into();
    cfg.seed = spec.seed;
    cfg
}
