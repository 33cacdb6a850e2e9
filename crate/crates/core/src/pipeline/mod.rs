//! Stage orchestration: ingest, reverse pre-training, augmentation,
//! fine-tuning and evaluation.
//!
//! Every stage writes into `out/stages/<stage>-<key>/`, where the key hashes
//! the configuration fields the stage depends on together with the keys of
//! its inputs. A stage directory is sealed by a `CHECKSUMS` file written
//! last; a directory without a valid seal is rebuilt. Downstream stages
//! always read their inputs back from disk, so a resumed run sees exactly
//! what an uninterrupted one would.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use config::{DataFormat, Mode, PipelineConfig};
pub use manifest::{file_sha256, write_atomic, Artifact, RunManifest, StageRecord};

use crate::augmentation::{augment_corpus, read_augmented, write_augmented, AugmentedSequence};
use crate::checkpoint::{load_checkpoint_for, save_checkpoint};
use crate::dataset::{build_sequences, read_interactions, read_sequences, split_leave_one_out, write_sequences, Sequence, SplitCorpus, Vocabulary};
use crate::encoder::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_per_length_csv, write_report_csv, EvalReport, EvalSplit};
use crate::training::{train, write_epoch_log, Direction, TrainCorpus, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Pretrain,
    Augment,
    Finetune,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Pretrain => "pretrain",
            Stage::Augment => "augment",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
        }
    }
}

const SEAL: &str = "CHECKSUMS";
const VOCAB: &str = "vocab.tsv";
const SEQUENCES: &str = "sequences.tsv";
const HISTOGRAM: &str = "length_histogram.csv";
const PRETRAINED: &str = "pretrained.ckpt";
const AUGMENTED: &str = "augmented.tsv";
const MODEL: &str = "model.ckpt";
const EPOCH_LOG: &str = "epoch_log.csv";
const REPORT: &str = "report.csv";
const PER_LENGTH: &str = "per_length.csv";
const REPORT_JSON: &str = "report.json";
const LAST_GOOD: &str = "last_good.ckpt";

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub manifest: RunManifest,
    /// Present when the evaluate stage ran.
    pub report: Option<EvalReport>,
}

/// Runs every stage the mode calls for and writes the manifest and the
/// final report files into `config.out`.
pub fn run(config: &PipelineConfig) -> Result<(RunManifest, EvalReport)> {
    let out = run_until(config, Stage::Evaluate)?;
    Ok((out.manifest, out.report.expect("evaluate stage ran")))
}

/// Runs (or reuses) stages up to and including `last`. Stages the mode
/// skips are skipped here too.
pub fn run_until(config: &PipelineConfig, last: Stage) -> Result<RunOutput> {
    Runner::new(config).run_until(last)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub m: usize,
    pub report: EvalReport,
}

/// Full runs over the `(k, M)` grid. Runs share `config.out/stages`, so the
/// pre-trained checkpoint is built once. Each run's own outputs land in
/// `config.out/sweep/k<k>-m<m>/`; the grid summary goes to `config.out/sweep.csv`.
pub fn sweep(config: &PipelineConfig, ks: &[usize], ms: &[usize]) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || ms.is_empty() {
        return Err(Error::Config("sweep needs at least one k and one M".into()));
    }
    let mut rows = Vec::new();
    for &k in ks {
        for &m in ms {
            let cfg = PipelineConfig {
                k,
                m,
                out: config.out.join("sweep").join(format!("k{k}-m{m}")),
                ..config.clone()
            };
            let stages = config.out.join("stages");
            let out = Runner::with_stages(&cfg, stages).run_until(Stage::Evaluate)?;
            let report = out.report.expect("evaluate stage ran");
            info!("sweep k={k} M={m}: recall@5 {:.4}", report.overall.recall_at_5);
            rows.push(SweepRow { k, m, report });
        }
    }
    let mut csv = String::from("k,m,recall@5,ndcg@5,mrr\n");
    for r in &rows {
        let o = &r.report.overall;
        let _ = writeln!(csv, "{},{},{},{},{}", r.k, r.m, o.recall_at_5, o.ndcg_at_5, o.mrr);
    }
    write_atomic(&config.out.join("sweep.csv"), csv.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone)]
struct StageDir {
    key: String,
    dir: PathBuf,
}

struct Runner<'c> {
    config: &'c PipelineConfig,
    stages: PathBuf,
    records: Vec<StageRecord>,
    artifacts: Vec<Artifact>,
}

impl<'c> Runner<'c> {
    fn new(config: &'c PipelineConfig) -> Self {
        Self::with_stages(config, config.out.join("stages"))
    }

    fn with_stages(config: &'c PipelineConfig, stages: PathBuf) -> Self {
        Runner {
            config,
            stages,
            records: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    fn run_until(mut self, last: Stage) -> Result<RunOutput> {
        let config = self.config;
        config.validate()?;
        fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;

        let ingest = self.ingest()?;
        let mut pretrained = None;
        let mut augmented = None;
        if config.mode.augments() && last >= Stage::Pretrain {
            let p = self.pretrain(&ingest)?;
            if last >= Stage::Augment {
                augmented = Some(self.augment(&ingest, &p)?);
            }
            pretrained = Some(p);
        }
        let mut report = None;
        if last >= Stage::Finetune {
            let upstream = augmented.as_ref().unwrap_or(&ingest);
            let model = self.finetune(&ingest, upstream, pretrained.as_ref(), augmented.as_ref())?;
            if last >= Stage::Evaluate {
                let (eval, r) = self.evaluate(&ingest, &model, augmented.as_ref())?;
                for name in [REPORT, PER_LENGTH] {
                    copy_file(&eval.dir.join(name), &config.out.join(name))?;
                }
                report = Some(r);
            }
        }
        copy_file(&ingest.dir.join(HISTOGRAM), &config.out.join(HISTOGRAM))?;

        let manifest = RunManifest {
            config: config.clone(),
            stages: self.records,
            artifacts: self.artifacts,
        };
        write_atomic(&config.out.join("manifest.txt"), manifest.render().as_bytes())?;
        Ok(RunOutput { manifest, report })
    }

    /// Reuses a sealed stage directory or rebuilds it with `build`.
    fn stage(&mut self, stage: Stage, key: String, build: impl FnOnce(&Path) -> Result<()>) -> Result<StageDir> {
        let dir = self.stages.join(format!("{}-{key}", stage.name()));
        let started = Instant::now();
        let reused = is_sealed(&dir)?;
        if reused {
            info!("{}: reusing {}", stage.name(), dir.display());
        } else {
            if dir.exists() {
                warn!("{}: discarding incomplete {}", stage.name(), dir.display());
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            info!("{}: building {}", stage.name(), dir.display());
            build(&dir)?;
            seal(&dir)?;
        }
        self.records.push(StageRecord {
            name: stage.name(),
            key: key.clone(),
            seconds: started.elapsed().as_secs_f64(),
            reused,
        });
        Ok(StageDir { key, dir })
    }

    fn record(&mut self, name: &'static str, path: PathBuf) -> Result<()> {
        let sha256 = file_sha256(&path)?;
        self.artifacts.push(Artifact { name, path, sha256 });
        Ok(())
    }

    fn ingest(&mut self) -> Result<StageDir> {
        let c = self.config;
        let data_hash = file_sha256(&c.dataset)?;
        let key = stage_key(&[
            ("data", data_hash),
            ("format", format!("{:?}", c.input_format())),
        ]);
        let sd = self.stage(Stage::Ingest, key, |dir| {
            let parsed = read_interactions(&c.dataset, &c.input_format())?;
            if parsed.malformed > 0 {
                warn!("skipped {} malformed lines", parsed.malformed);
            }
            let (sequences, vocab) = build_sequences(&parsed.interactions)?;
            info!("{} users, {} items, {} interactions", sequences.len(), vocab.len(), parsed.interactions.len());
            write_with(&dir.join(VOCAB), |w| vocab.write_tsv(w))?;
            write_with(&dir.join(SEQUENCES), |w| write_sequences(&sequences, w))?;
            write_with(&dir.join(HISTOGRAM), |w| write_histogram(&sequences, w))
        })?;
        self.record("vocab", sd.dir.join(VOCAB))?;
        Ok(sd)
    }

    fn pretrain(&mut self, ingest: &StageDir) -> Result<StageDir> {
        let c = self.config;
        let key = stage_key(&[
            ("ingest", ingest.key.clone()),
            ("model", model_fields(c)),
            ("train", train_fields(c)),
            ("epochs", c.pretrain_epochs.to_string()),
        ]);
        let sd = self.stage(Stage::Pretrain, key, |dir| {
            let (vocab, corpus) = load_ingest(&ingest.dir)?;
            let params = fresh_params(c, &vocab)?;
            let train_cfg = c.train_config(Direction::Reverse, c.pretrain_epochs);
            let outcome = train_or_save_last_good(&TrainCorpus::from_sequences(&corpus.train), params, &train_cfg, None, dir)?;
            save_checkpoint(&outcome.params, &dir.join(PRETRAINED))?;
            write_with(&dir.join(EPOCH_LOG), |w| write_epoch_log(&outcome.log, w))
        })?;
        self.record("pretrained", sd.dir.join(PRETRAINED))?;
        Ok(sd)
    }

    fn augment(&mut self, ingest: &StageDir, pretrain: &StageDir) -> Result<StageDir> {
        let c = self.config;
        let key = stage_key(&[
            ("pretrain", pretrain.key.clone()),
            ("augment", format!("{:?}", c.augment_config())),
        ]);
        let sd = self.stage(Stage::Augment, key, |dir| {
            let (vocab, corpus) = load_ingest(&ingest.dir)?;
            let params = load_model(c, &pretrain.dir.join(PRETRAINED), &vocab)?;
            let augmented = augment_corpus(&params, &corpus.train, &c.augment_config())?;
            let grown = augmented.iter().filter(|a| a.prefix_len > 0).count();
            info!("augmented {grown} of {} sequences", augmented.len());
            write_with(&dir.join(AUGMENTED), |w| write_augmented(&augmented, w))
        })?;
        self.record("augmented", sd.dir.join(AUGMENTED))?;
        Ok(sd)
    }

    fn finetune(&mut self, ingest: &StageDir, upstream: &StageDir, pretrain: Option<&StageDir>, augment: Option<&StageDir>) -> Result<StageDir> {
        let c = self.config;
        let key = stage_key(&[
            ("mode", c.mode.to_string()),
            ("upstream", upstream.key.clone()),
            ("model", model_fields(c)),
            ("train", train_fields(c)),
            ("epochs", c.finetune_epochs.to_string()),
            ("stopping", format!("{} {}", c.early_stopping, c.patience)),
            ("exclude_pseudo_targets", c.exclude_pseudo_targets.to_string()),
            ("eval", eval_fields(c)),
        ]);
        let sd = self.stage(Stage::Finetune, key, |dir| {
            let (vocab, corpus) = load_ingest(&ingest.dir)?;
            let augmented = augment.map(|a| load_augmented(&a.dir, &corpus)).transpose()?;
            let params = match (c.mode, pretrain) {
                (Mode::Asrep, Some(p)) => load_model(c, &p.dir.join(PRETRAINED), &vocab)?,
                _ => fresh_params(c, &vocab)?,
            };
            let train_corpus = match &augmented {
                Some(a) => TrainCorpus::from_augmented(a),
                None => TrainCorpus::from_sequences(&corpus.train),
            };
            let contexts = augmented.as_deref().filter(|_| c.augment_inference);
            let eval_cfg = c.eval_config();
            let mut validate = |p: &ModelParams| -> Result<f64> {
                Ok(evaluate(p, EvalSplit::Valid, &corpus, contexts, vocab.len(), &eval_cfg)?.overall.recall_at_5)
            };
            let validator = c.early_stopping.then_some(&mut validate as _);
            let train_cfg = c.train_config(Direction::Forward, c.finetune_epochs);
            let outcome = train_or_save_last_good(&train_corpus, params, &train_cfg, validator, dir)?;
            info!("fine-tuning kept epoch {}", outcome.best_epoch);
            save_checkpoint(&outcome.params, &dir.join(MODEL))?;
            write_with(&dir.join(EPOCH_LOG), |w| write_epoch_log(&outcome.log, w))
        })?;
        self.record("model", sd.dir.join(MODEL))?;
        Ok(sd)
    }

    fn evaluate(&mut self, ingest: &StageDir, model: &StageDir, augment: Option<&StageDir>) -> Result<(StageDir, EvalReport)> {
        let c = self.config;
        let use_contexts = augment.is_some() && c.augment_inference;
        let key = stage_key(&[
            ("model", model.key.clone()),
            ("contexts", augment.filter(|_| use_contexts).map(|a| a.key.clone()).unwrap_or_default()),
            ("eval", eval_fields(c)),
        ]);
        let sd = self.stage(Stage::Evaluate, key, |dir| {
            let (vocab, corpus) = load_ingest(&ingest.dir)?;
            let params = load_model(c, &model.dir.join(MODEL), &vocab)?;
            let augmented = match augment {
                Some(a) if use_contexts => Some(load_augmented(&a.dir, &corpus)?),
                _ => None,
            };
            let report = evaluate(&params, EvalSplit::Test, &corpus, augmented.as_deref(), vocab.len(), &c.eval_config())?;
            let o = &report.overall;
            info!("test recall@5 {:.4} ndcg@5 {:.4} mrr {:.4} over {} users", o.recall_at_5, o.ndcg_at_5, o.mrr, o.cases);
            write_with(&dir.join(REPORT), |w| write_report_csv(&report, w))?;
            write_with(&dir.join(PER_LENGTH), |w| write_per_length_csv(&report, w))?;
            let json = serde_json::to_vec_pretty(&report).expect("report serializes");
            fs::write(dir.join(REPORT_JSON), json).map_err(|e| Error::io(dir.join(REPORT_JSON), e))
        })?;
        self.record("report", sd.dir.join(REPORT))?;
        let path = sd.dir.join(REPORT_JSON);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let report = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok((sd, report))
    }
}

fn stage_key(parts: &[(&str, String)]) -> String {
    let mut h = Sha256::new();
    for (name, value) in parts {
        h.update(name.as_bytes());
        h.update(b"=");
        h.update(value.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

fn model_fields(c: &PipelineConfig) -> String {
    format!("n={} d={} L={} h={} ffn={} init_std={:?}", c.max_len, c.hidden, c.layers, c.heads, c.ffn, c.init_std)
}

fn train_fields(c: &PipelineConfig) -> String {
    format!(
        "dropout={:?} lr={:?} batch={} negatives={} seed={}",
        c.dropout, c.learning_rate, c.batch_size, c.negatives_per_position, c.seed
    )
}

fn eval_fields(c: &PipelineConfig) -> String {
    format!("negatives={} seed={} augment_inference={}", c.num_negatives, c.eval_seed, c.augment_inference)
}

fn is_sealed(dir: &Path) -> Result<bool> {
    let seal_path = dir.join(SEAL);
    let Ok(text) = fs::read_to_string(&seal_path) else {
        return Ok(false);
    };
    for line in text.lines() {
        let Some((sum, name)) = line.split_once("  ") else {
            return Ok(false);
        };
        let path = dir.join(name);
        if !path.is_file() || file_sha256(&path)? != sum {
            return Ok(false);
        }
    }
    Ok(true)
}

fn seal(dir: &Path) -> Result<()> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != SEAL)
        .collect();
    names.sort();
    let mut text = String::new();
    for name in names {
        let _ = writeln!(text, "{}  {name}", file_sha256(&dir.join(&name))?);
    }
    write_atomic(&dir.join(SEAL), text.as_bytes())
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    let bytes = fs::read(from).map_err(|e| Error::io(from, e))?;
    write_atomic(to, &bytes)
}

fn write_histogram(sequences: &[Sequence], w: &mut impl Write) -> std::io::Result<()> {
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for s in sequences {
        *counts.entry(s.items.len()).or_default() += 1;
    }
    writeln!(w, "length,users")?;
    for (len, users) in counts {
        writeln!(w, "{len},{users}")?;
    }
    Ok(())
}

fn load_ingest(dir: &Path) -> Result<(Vocabulary, SplitCorpus)> {
    let vocab = Vocabulary::read_tsv(open(&dir.join(VOCAB))?)?;
    let sequences = read_sequences(open(&dir.join(SEQUENCES))?)?;
    let corpus = split_leave_one_out(&sequences);
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok((vocab, corpus))
}

fn load_augmented(dir: &Path, corpus: &SplitCorpus) -> Result<Vec<AugmentedSequence>> {
    let augmented = read_augmented(open(&dir.join(AUGMENTED))?)?;
    let matches = augmented.len() == corpus.len()
        && augmented
            .iter()
            .zip(&corpus.train)
            .all(|(a, s)| a.user_id == s.user_id && a.original() == s.items.as_slice());
    if !matches {
        return Err(Error::Shape("augmented corpus does not match the training sequences".into()));
    }
    Ok(augmented)
}

fn fresh_params(c: &PipelineConfig, vocab: &Vocabulary) -> Result<ModelParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    ModelParams::init(c.model_config(vocab.len())?, c.init_std, &mut rng)
}

/// Loads a checkpoint and insists its dimensions match the configuration.
fn load_model(c: &PipelineConfig, path: &Path, vocab: &Vocabulary) -> Result<ModelParams> {
    let params = load_checkpoint_for(path, vocab)?;
    let expected: ModelConfig = c.model_config(vocab.len())?;
    if *params.config() != expected {
        return Err(Error::Checkpoint(format!(
            "{} has dimensions {:?}, configuration expects {expected:?}",
            path.display(),
            params.config()
        )));
    }
    Ok(params)
}

fn train_or_save_last_good(
    corpus: &TrainCorpus<'_>,
    params: ModelParams,
    config: &crate::training::TrainConfig,
    validator: Option<crate::training::Validator<'_>>,
    dir: &Path,
) -> Result<TrainOutcome> {
    match train(corpus, params, config, validator) {
        Err(Error::Diverged { epoch, batch, last_good }) => {
            let path = dir.join(LAST_GOOD);
            save_checkpoint(&last_good, &path)?;
            warn!("diverged; last good parameters saved to {}", path.display());
            Err(Error::Diverged { epoch, batch, last_good })
        }
        other => other,
    }
}
