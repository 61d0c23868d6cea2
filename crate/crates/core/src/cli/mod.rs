//! Command-line surface over the pipeline. Every command appends itself to a
//! [`RunManifest`], refuses inputs whose recorded hash no longer matches and
//! reports failures as one JSON line on stderr.

mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

pub use manifest::{ArtifactRecord, CommandEcho, RunManifest};

use crate::encoder::{EncoderConfig, FrozenEncoder, PretrainConfig, SiteAddress};
use crate::error::{PolarError, Result};
use crate::lora::{load_delta, load_merged, merge, save_delta, save_merged, ConceptDelta, MergeStrategy, WeightUpdate};
use crate::metrics::{evaluate, evaluate_base, DeltaStore, EvalOptions};
use crate::personalize::{fill_template, gradcheck, train_polar, GradCheckOptions, TrainConfig, TrainPair, TEMPLATES};
use crate::pipeline::{derive_seed, pretrained_encoder, train_config_for, world_for_seed};
use crate::retrieval::query;
use crate::sweep::{parse_grid, run_sweep, write_csv, Axis, Replicate, SweepSpec};
use crate::synth::{build_eval_suite, EvalSuite, SyntheticWorld, WorldConfig};

#[derive(Debug, Parser)]
#[command(name = "polar-kit", version, about = "Personalized text-to-image retrieval with regularized LoRA deltas")]
pub struct Cli {
    /// Global seed; defaults to the manifest's seed, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value = "manifest.json")]
    pub manifest: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world (and optionally its eval suite).
    GenWorld(GenWorldArgs),
    /// Initialize and pretrain the toy text encoder on a world's captions.
    Pretrain(PretrainArgs),
    /// Train concept deltas.
    Personalize(PersonalizeArgs),
    /// Merge several concept deltas into one file.
    Merge(MergeArgs),
    /// Rank the world's eval images for one text query.
    Query(QueryArgs),
    /// Score an eval suite and print the per-kind table.
    Evaluate(EvaluateArgs),
    /// Sweep one knob over a grid and seeds; writes CSV.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients of the loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Also write the eval suite here.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    #[arg(long)]
    pub concepts: Option<usize>,
    #[arg(long)]
    pub contexts: Option<usize>,
    #[arg(long)]
    pub d_out: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub train_per_concept: Option<usize>,
    /// Co-occurring concept pairs; defaults to as many of 6 as fit.
    #[arg(long)]
    pub multi_pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub world: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 0.35)]
    pub lambda: f64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub rank: usize,
    /// Comma list such as `4:V,3:Q`; default is V of the last layer.
    #[arg(long)]
    pub sites: Option<String>,
    /// Add the push-away term against other concepts' training images.
    #[arg(long)]
    pub negatives: bool,
}

impl TrainArgs {
    fn base(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            lambda: self.lambda,
            iterations: self.iters,
            learning_rate: self.lr,
            rank: self.rank,
            sites: match &self.sites {
                Some(s) => SiteAddress::parse_list(s)?,
                None => Vec::new(),
            },
            use_negatives: self.negatives,
            ..TrainConfig::default()
        })
    }
}

#[derive(Debug, Args)]
pub struct PersonalizeArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Output directory; one `<concept>.json` per concept.
    #[arg(long)]
    pub deltas: PathBuf,
    /// Concept id, or `all`.
    #[arg(long, default_value = "all")]
    pub concept: String,
    /// Freeze `A` to the concept's rows of a shared orthonormal basis.
    #[arg(long)]
    pub ortho: bool,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub deltas: PathBuf,
    /// Comma list of concept ids.
    #[arg(long)]
    pub concepts: String,
    #[arg(long, default_value = "add")]
    pub merge: MergeStrategy,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    #[arg(long)]
    pub text: String,
    /// Comma list of concepts whose deltas are active.
    #[arg(long)]
    pub concept: Option<String>,
    #[arg(long, default_value = "deltas")]
    pub deltas: PathBuf,
    /// A merged delta file to apply instead of `--concept`.
    #[arg(long, conflicts_with = "concept")]
    pub merged: Option<PathBuf>,
    #[arg(long, default_value = "add")]
    pub merge: MergeStrategy,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub world: PathBuf,
    #[arg(long)]
    pub encoder: PathBuf,
    /// Without it the suite is rebuilt from the world.
    #[arg(long)]
    pub suite: Option<PathBuf>,
    /// Without it every query runs on the base encoder.
    #[arg(long)]
    pub deltas: Option<PathBuf>,
    #[arg(long, default_value = "add")]
    pub merge: MergeStrategy,
    /// Report JSON to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// rank, layers, sites, lambda or merge.
    #[arg(long)]
    pub axis: Axis,
    /// Comma-separated values, e.g. `Q,K,V` or `0,0.35,2`.
    #[arg(long)]
    pub grid: String,
    /// Comma list of replicate seeds; default is the global seed.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Shared world; otherwise each seed generates its own.
    #[arg(long, requires = "encoder")]
    pub world: Option<PathBuf>,
    /// Shared encoder; otherwise each seed pretrains its own.
    #[arg(long, requires = "world")]
    pub encoder: Option<PathBuf>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// CSV to write; stdout if absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// World and encoder to check; without them a 16-wide, 2-layer toy is
    /// built from the seed.
    #[arg(long, requires = "encoder")]
    pub world: Option<PathBuf>,
    #[arg(long, requires = "world")]
    pub encoder: Option<PathBuf>,
    /// Defaults to the first concept.
    #[arg(long)]
    pub concept: Option<String>,
    #[arg(long, default_value_t = 0.35)]
    pub lambda: f64,
    /// Training steps taken before checking.
    #[arg(long, default_value_t = 0)]
    pub iters: usize,
    #[arg(long)]
    pub sites: Option<String>,
    #[arg(long)]
    pub negatives: bool,
    /// Keep activations in f64 instead of rounding them to f32.
    #[arg(long)]
    pub exact: bool,
    /// Defaults to 1e-3, or 1e-5 with --exact.
    #[arg(long)]
    pub step: Option<f64>,
    /// Defaults to 1e-3, or 1e-5 with --exact.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Test hook: offset added to every analytic gradient entry.
    #[arg(long, hide = true, default_value_t = 0.0)]
    pub corrupt: f64,
}

/// Parses `args`, runs the command and returns the process exit code.
/// Failures print `{"error":kind,"message":...}` on stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let message = e.to_string();
            let first = message
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return 2;
        }
    };
    let argv = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let stdout = std::io::stdout();
    match run(cli, argv, &mut stdout.lock()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            1
        }
    }
}

pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

struct Session {
    path: PathBuf,
    manifest: RunManifest,
    seed: u64,
}

impl Session {
    fn open(path: &Path, seed: Option<u64>, argv: Vec<String>) -> Result<Self> {
        let existing = RunManifest::load(path)?;
        let seed = seed.or(existing.as_ref().map(|m| m.seed)).unwrap_or(0);
        let mut manifest = existing.unwrap_or_else(|| RunManifest::new(seed));
        let unix_time = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        manifest.commands.push(CommandEcho { argv, unix_time });
        Ok(Self {
            path: path.to_path_buf(),
            manifest,
            seed,
        })
    }

    fn input(&self, path: &Path) -> Result<()> {
        self.manifest.verify(path)
    }

    fn output(&mut self, role: impl Into<String>, path: &Path, fingerprint: Option<&str>) -> Result<()> {
        self.manifest.record(role, path, fingerprint.map(str::to_string))
    }

    fn world(&self, path: &Path) -> Result<SyntheticWorld> {
        self.input(path)?;
        SyntheticWorld::load(path)
    }

    fn encoder(&self, path: &Path) -> Result<FrozenEncoder> {
        self.input(path)?;
        FrozenEncoder::load(path)
    }

    fn delta(&self, dir: &Path, concept: &str, enc: &FrozenEncoder) -> Result<ConceptDelta> {
        let path = delta_path(dir, concept);
        self.input(&path)?;
        load_delta(&path, Some(enc))
    }

    fn finish(self) -> Result<()> {
        self.manifest.save(&self.path)
    }
}

pub fn delta_path(dir: &Path, concept: &str) -> PathBuf {
    dir.join(format!("{concept}.json"))
}

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(str::to_string).collect()
}

fn io_err(e: std::io::Error) -> PolarError {
    PolarError::io("<stdout>", e)
}

/// Runs a parsed command, writing human output to `out`. Returns the exit
/// code for outcomes that are not errors but still fail (a gradient check
/// over tolerance).
pub fn run(cli: Cli, argv: Vec<String>, out: &mut dyn Write) -> Result<i32> {
    let mut s = Session::open(&cli.manifest, cli.seed, argv)?;
    let code = match cli.command {
        Command::GenWorld(a) => gen_world(&mut s, a, out)?,
        Command::Pretrain(a) => pretrain_cmd(&mut s, a, out)?,
        Command::Personalize(a) => personalize_cmd(&mut s, a, out)?,
        Command::Merge(a) => merge_cmd(&mut s, a, out)?,
        Command::Query(a) => query_cmd(&mut s, a, out)?,
        Command::Evaluate(a) => evaluate_cmd(&mut s, a, out)?,
        Command::Ablate(a) => ablate_cmd(&mut s, a, out)?,
        Command::Gradcheck(a) => gradcheck_cmd(&mut s, a, out)?,
    };
    s.finish()?;
    Ok(code)
}

fn gen_world(s: &mut Session, a: GenWorldArgs, out: &mut dyn Write) -> Result<i32> {
    let d = WorldConfig::default();
    let n_concepts = a.concepts.unwrap_or(d.n_concepts);
    let n_contexts = a.contexts.unwrap_or(d.n_contexts);
    let cfg = WorldConfig {
        n_concepts,
        n_contexts,
        multi_pairs: a
            .multi_pairs
            .unwrap_or(d.multi_pairs.min(n_concepts * n_concepts.saturating_sub(1) / 2)),
        multi_contexts: d.multi_contexts.min(n_contexts),
        d_out: a.d_out.unwrap_or(d.d_out),
        sigma: a.sigma.unwrap_or(d.sigma),
        alpha: a.alpha.unwrap_or(d.alpha),
        beta: a.beta.unwrap_or(d.beta),
        train_per_concept: a.train_per_concept.unwrap_or(d.train_per_concept),
        ..d
    };
    let world = world_for_seed(s.seed, &cfg)?;
    world.save(&a.world)?;
    s.output("world", &a.world, None)?;
    writeln!(
        out,
        "world: {} concepts, {} contexts, {} images -> {}",
        world.concepts.len(),
        world.contexts.len(),
        world.images.len(),
        a.world.display()
    )
    .map_err(io_err)?;
    if let Some(path) = &a.suite {
        let suite = build_eval_suite(&world);
        suite.save(path)?;
        s.output("suite", path, None)?;
        writeln!(out, "suite: {} queries -> {}", suite.queries.len(), path.display()).map_err(io_err)?;
    }
    Ok(0)
}

fn pretrain_cmd(s: &mut Session, a: PretrainArgs, out: &mut dyn Write) -> Result<i32> {
    let world = s.world(&a.world)?;
    let d = PretrainConfig::default();
    let cfg = PretrainConfig {
        steps: a.steps.unwrap_or(d.steps),
        learning_rate: a.lr.unwrap_or(d.learning_rate),
        batch_size: a.batch.unwrap_or(d.batch_size),
        ..d
    };
    let (enc, report) = pretrained_encoder(s.seed, &world, &cfg)?;
    enc.save(&a.encoder)?;
    s.output("encoder", &a.encoder, Some(enc.fingerprint()))?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    writeln!(
        out,
        "encoder {} after {} steps (final loss {last:.5}, {:.1} s) -> {}",
        enc.fingerprint(),
        cfg.steps,
        report.wall_seconds,
        a.encoder.display()
    )
    .map_err(io_err)?;
    Ok(0)
}

fn personalize_cmd(s: &mut Session, a: PersonalizeArgs, out: &mut dyn Write) -> Result<i32> {
    let world = s.world(&a.world)?;
    let enc = s.encoder(&a.encoder)?;
    let base = a.train.base()?;
    let targets: Vec<usize> = if a.concept == "all" {
        (0..world.concepts.len()).collect()
    } else {
        split_list(&a.concept)
            .iter()
            .map(|id| {
                world
                    .concepts
                    .iter()
                    .position(|c| &c.spec.concept_id == id)
                    .ok_or_else(|| PolarError::UnknownId(format!("concept {id}")))
            })
            .collect::<Result<_>>()?
    };
    std::fs::create_dir_all(&a.deltas).map_err(|e| PolarError::io(&a.deltas, e))?;
    let n = world.concepts.len();
    for i in targets {
        let spec = &world.concepts[i].spec;
        let cfg = train_config_for(s.seed, &base, a.ortho.then_some((i, n)));
        let (delta, report) = train_polar(&enc, spec, &world.images, &cfg)?;
        report.check()?;
        let path = delta_path(&a.deltas, &spec.concept_id);
        save_delta(&delta, &path)?;
        s.output(format!("delta/{}", spec.concept_id), &path, Some(enc.fingerprint()))?;
        let last = report.trace.last().map_or(f64::NAN, |r| r.total);
        writeln!(
            out,
            "{}\t{:.3} s\tloss {last:.5}\t-> {}",
            spec.concept_id,
            report.wall_seconds,
            path.display()
        )
        .map_err(io_err)?;
    }
    Ok(0)
}

fn merge_cmd(s: &mut Session, a: MergeArgs, out: &mut dyn Write) -> Result<i32> {
    let enc = s.encoder(&a.encoder)?;
    let ids = split_list(&a.concepts);
    let deltas = ids
        .iter()
        .map(|id| s.delta(&a.deltas, id, &enc))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ConceptDelta> = deltas.iter().collect();
    let merged = merge(&refs, a.merge)?;
    save_merged(&merged, &a.out)?;
    s.output("merged", &a.out, Some(enc.fingerprint()))?;
    writeln!(out, "{} merge of {} -> {}", a.merge, ids.join(","), a.out.display()).map_err(io_err)?;
    Ok(0)
}

fn query_cmd(s: &mut Session, a: QueryArgs, out: &mut dyn Write) -> Result<i32> {
    let world = s.world(&a.world)?;
    let enc = s.encoder(&a.encoder)?;
    let index = world.eval_index();
    let deltas: Vec<ConceptDelta> = match &a.concept {
        Some(list) => split_list(list)
            .iter()
            .map(|id| s.delta(&a.deltas, id, &enc))
            .collect::<Result<_>>()?,
        None => Vec::new(),
    };
    let merged = match (&a.merged, deltas.len()) {
        (Some(path), _) => {
            s.input(path)?;
            Some(load_merged(path, Some(&enc))?)
        }
        (None, n) if n > 1 => Some(merge(&deltas.iter().collect::<Vec<_>>(), a.merge)?),
        _ => None,
    };
    let active: Vec<&dyn WeightUpdate> = match &merged {
        Some(m) => vec![m],
        None => deltas.iter().map(|d| d as &dyn WeightUpdate).collect(),
    };
    let result = query(&enc, &index, &a.text, &active, a.k)?;
    for (rank, hit) in result.hits.iter().enumerate() {
        writeln!(out, "{}\t{}\t{:.6}", rank + 1, hit.id, hit.score).map_err(io_err)?;
    }
    Ok(0)
}

fn load_store(s: &Session, dir: &Path, enc: &FrozenEncoder, world: &SyntheticWorld) -> Result<DeltaStore> {
    let mut store = DeltaStore::new();
    for id in world.concept_ids() {
        if delta_path(dir, &id).exists() {
            store.insert(id.clone(), s.delta(dir, &id, enc)?);
        }
    }
    if store.is_empty() {
        return Err(PolarError::Empty(format!("no delta files in {}", dir.display())));
    }
    Ok(store)
}

fn evaluate_cmd(s: &mut Session, a: EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let world = s.world(&a.world)?;
    let enc = s.encoder(&a.encoder)?;
    let index = world.eval_index();
    let suite = match &a.suite {
        Some(path) => {
            s.input(path)?;
            EvalSuite::load(path)?
        }
        None => build_eval_suite(&world),
    };
    suite.check_against(&index)?;
    let opts = EvalOptions {
        merge: a.merge,
        ..EvalOptions::default()
    };
    let report = match &a.deltas {
        Some(dir) => evaluate(&enc, &index, &suite.queries, &load_store(s, dir, &enc, &world)?, &opts)?,
        None => evaluate_base(&enc, &index, &suite.queries, &opts)?,
    };
    write!(out, "{}", report.to_table()).map_err(io_err)?;
    if let Some(path) = &a.out {
        std::fs::write(path, report.to_json()?).map_err(|e| PolarError::io(path, e))?;
        s.output("report", path, Some(enc.fingerprint()))?;
    }
    Ok(0)
}

fn ablate_cmd(s: &mut Session, a: AblateArgs, out: &mut dyn Write) -> Result<i32> {
    let seeds: Vec<u64> = match &a.seeds {
        Some(list) => split_list(list)
            .iter()
            .map(|v| v.parse().map_err(|_| PolarError::Config(format!("bad seed '{v}'"))))
            .collect::<Result<_>>()?,
        None => vec![s.seed],
    };
    if seeds.is_empty() {
        return Err(PolarError::Empty("seed list".into()));
    }
    let mut owned: Vec<(u64, SyntheticWorld, FrozenEncoder)> = Vec::new();
    match (&a.world, &a.encoder) {
        (Some(w), Some(e)) => {
            let (world, enc) = (s.world(w)?, s.encoder(e)?);
            for &seed in &seeds {
                owned.push((seed, world.clone(), enc.clone()));
            }
        }
        _ => {
            let pretrain = PretrainConfig {
                steps: a.pretrain_steps.unwrap_or(PretrainConfig::default().steps),
                ..PretrainConfig::default()
            };
            for &seed in &seeds {
                let world = world_for_seed(seed, &WorldConfig::default())?;
                let (enc, _) = pretrained_encoder(seed, &world, &pretrain)?;
                owned.push((seed, world, enc));
            }
        }
    }
    let n_layers = owned[0].2.config().n_layers;
    let spec = SweepSpec {
        axis: a.axis,
        grid: parse_grid(a.axis, &a.grid, n_layers)?,
        train: a.train.base()?,
        eval: EvalOptions::default(),
    };
    let reps: Vec<Replicate<'_>> = owned
        .iter()
        .map(|(seed, world, encoder)| Replicate {
            seed: *seed,
            world,
            encoder,
        })
        .collect();
    let rows = run_sweep(&reps, &spec)?;
    match &a.out {
        Some(path) => {
            let file = std::fs::File::create(path).map_err(|e| PolarError::io(path, e))?;
            write_csv(a.axis, &rows, std::io::BufWriter::new(file))?;
            s.output("sweep", path, None)?;
            for r in &rows {
                writeln!(out, "{}={}\t{}", a.axis, r.point, r.status).map_err(io_err)?;
            }
        }
        None => write_csv(a.axis, &rows, &mut *out)?,
    }
    Ok(0)
}

/// Toy setup for gradient checks: a default world and a freshly initialized
/// 16-wide, 2-layer encoder over its vocabulary.
pub fn gradcheck_toy(seed: u64) -> Result<(SyntheticWorld, FrozenEncoder)> {
    let world = world_for_seed(seed, &WorldConfig::default())?;
    let cfg = EncoderConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        ..EncoderConfig::toy(world.vocab.clone(), derive_seed(seed, "encoder-init"))
    };
    let enc = FrozenEncoder::init(cfg)?;
    Ok((world, enc))
}

/// One pair per training image, cycling through the templates.
pub fn check_pairs(enc: &FrozenEncoder, world: &SyntheticWorld, concept: usize) -> Result<Vec<TrainPair>> {
    let spec = &world.concepts[concept].spec;
    spec.train_image_ids
        .iter()
        .zip(TEMPLATES.iter().cycle())
        .map(|(id, t)| TrainPair::new(enc.tokenize(&fill_template(t, &spec.placeholder()))?, world.images.embedding(id)?))
        .collect()
}

fn gradcheck_cmd(s: &mut Session, a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let (world, enc) = match (&a.world, &a.encoder) {
        (Some(w), Some(e)) => (s.world(w)?, s.encoder(e)?),
        _ => gradcheck_toy(s.seed)?,
    };
    let ci = match &a.concept {
        Some(id) => world
            .concepts
            .iter()
            .position(|c| &c.spec.concept_id == id)
            .ok_or_else(|| PolarError::UnknownId(format!("concept {id}")))?,
        None => 0,
    };
    let cfg = train_config_for(
        s.seed,
        &TrainConfig {
            lambda: a.lambda,
            iterations: a.iters,
            sites: match &a.sites {
                Some(list) => SiteAddress::parse_list(list)?,
                None => Vec::new(),
            },
            use_negatives: a.negatives,
            ..TrainConfig::default()
        },
        None,
    );
    let (delta, _) = train_polar(&enc, &world.concepts[ci].spec, &world.images, &cfg)?;
    let pairs = check_pairs(&enc, &world, ci)?;
    let negatives: Option<Vec<TrainPair>> = if a.negatives {
        let other = (ci + 1) % world.concepts.len();
        let negs = world.concepts[other]
            .spec
            .train_image_ids
            .iter()
            .zip(&pairs)
            .map(|(id, p)| TrainPair::new(p.tokens.clone(), world.images.embedding(id)?))
            .collect::<Result<_>>()?;
        Some(negs)
    } else {
        None
    };
    let base = if a.exact {
        GradCheckOptions::exact()
    } else {
        GradCheckOptions::default()
    };
    let opts = GradCheckOptions {
        step: a.step.unwrap_or(base.step),
        tolerance: a.tolerance.unwrap_or(base.tolerance),
        lambda: a.lambda,
        corrupt: a.corrupt,
        ..base
    };
    let report = gradcheck(&enc, &delta, &pairs, negatives.as_deref(), &opts)?;
    writeln!(out, "{:<12} {:>7} {:>12} {:>12}", "param", "entries", "rel_error", "max_abs").map_err(io_err)?;
    for p in &report.params {
        writeln!(out, "{:<12} {:>7} {:>12.3e} {:>12.3e}", p.name, p.entries, p.rel_error, p.max_abs_error)
            .map_err(io_err)?;
    }
    let verdict = if report.passed { "PASS" } else { "FAIL" };
    writeln!(
        out,
        "{verdict}: max relative error {:.3e} (tolerance {:.1e})",
        report.max_rel_error(),
        report.tolerance
    )
    .map_err(io_err)?;
    Ok(if report.passed { 0 } else { 3 })
}
