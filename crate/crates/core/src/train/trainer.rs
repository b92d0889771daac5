//! Mini-batch training with a deterministic, resumable batch order.
//!
//! Batch `k` of epoch `e` is fully determined by the seed and the global
//! update count, so a run restored from a checkpoint continues exactly where
//! an uninterrupted run would be.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_targets, Corpus, Sentence, TypeInventory};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{bce_from_logits, pad_grids, split_grids, Batch, InitOptions, ModelParams, SpanScorer};
use crate::tensor::{Graph, Mask, Scalar, Tensor};
use crate::train::archive::ModelArchive;
use crate::train::config::TrainConfig;
use crate::train::infer::Predictor;
use crate::train::optim::{clip_grad_norm, AdamW};
use crate::train::schedule::lr_schedule;
use crate::train::vocab::Vocab;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Stream offset keeping dropout draws apart from the shuffling streams.
const DROPOUT_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    /// Rate used by the last update of the epoch.
    pub lr: f64,
    pub train_loss: f64,
    /// Absent when there is no dev split.
    pub dev_f1: Option<f64>,
}

#[derive(Debug, Clone)]
struct Example<F> {
    ids: Vec<usize>,
    targets: Tensor<F>,
}

fn encode_examples<F: Scalar>(sentences: &[Sentence], vocab: &Vocab, types: &TypeInventory) -> Result<Vec<Example<F>>> {
    sentences
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| {
            Ok(Example {
                ids: vocab.ids(&s.tokens),
                targets: build_targets(s, types)?,
            })
        })
        .collect()
}

fn check_lengths(corpus: &Corpus, max_len: usize) -> Result<()> {
    for (split, sentences) in corpus.splits() {
        if let Some((i, s)) = sentences.iter().enumerate().find(|(_, s)| s.len() > max_len) {
            return Err(Error::Validation(format!(
                "{split} sentence {} has {} tokens, above the cap of {max_len}",
                i + 1,
                s.len()
            )));
        }
    }
    Ok(())
}

/// Per-sentence mean BCE, computed in consecutive batches of `batch_size`.
pub fn sentence_losses<F: Scalar>(
    scorer: &SpanScorer<F>,
    vocab: &Vocab,
    types: &TypeInventory,
    sentences: &[Sentence],
    batch_size: usize,
) -> Result<Vec<F>> {
    let examples: Vec<Example<F>> = encode_examples(sentences, vocab, types)?;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|e| e.ids.clone()).collect();
        let batch = Batch::from_token_ids(&ids);
        let mut g = Graph::new();
        let fwd = scorer.forward(&mut g, &batch, None)?;
        let logits = split_grids(g.value(fwd.logits), &batch.lens);
        for (z, e) in logits.iter().zip(chunk) {
            let n = e.ids.len();
            out.push(bce_from_logits(z, &e.targets, &Mask::all(&[n, n]))?);
        }
    }
    Ok(out)
}

pub struct Trainer<F: Scalar> {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub types: TypeInventory,
    pub model: SpanScorer<F>,
    pub optimizer: AdamW<F>,
    pub history: Vec<EpochLog>,
    train: Vec<Example<F>>,
    dev: Vec<Sentence>,
    order: Option<(usize, Vec<usize>)>,
    best: Option<(f64, ModelParams<F>, usize)>,
    out_dir: Option<PathBuf>,
}

impl<F: Scalar> Trainer<F> {
    /// Fresh model and optimizer. The vocabulary comes from the training
    /// split; the type inventory from every split.
    pub fn new(config: TrainConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        check_lengths(corpus, config.max_len)?;
        let vocab = Vocab::from_sentences(&corpus.train);
        let types = corpus.types.clone();
        if types.is_empty() {
            return Err(Error::Validation("the corpus has no entity types".into()));
        }
        let model_cfg = config.model_config(types.len(), vocab.len());
        let params = ModelParams::init(&model_cfg, config.seed, InitOptions { zero_head: config.zero_head })?;
        let model = SpanScorer::new(model_cfg, params)?;
        let optimizer = AdamW::new(
            model.params.named().into_iter().map(|(_, t)| t),
            config.weight_decay,
            (config.beta1, config.beta2),
            config.eps,
        );
        Self::assemble(config, corpus, vocab, types, model, optimizer)
    }

    /// Continues from an archive written with optimizer state.
    pub fn resume(archive: ModelArchive<F>, corpus: &Corpus) -> Result<Self> {
        let config = archive.header.train.clone();
        config.validate()?;
        archive.check_compatible(&config)?;
        check_lengths(corpus, config.max_len)?;
        let vocab = archive.vocab();
        if vocab != Vocab::from_sentences(&corpus.train) {
            return Err(Error::Version("training vocabulary differs from the checkpoint".into()));
        }
        let types = archive.types();
        if corpus.types.names().iter().any(|t| types.id(t).is_none()) {
            return Err(Error::Version("corpus has entity types unknown to the checkpoint".into()));
        }
        let model = archive.scorer()?;
        let optimizer = archive
            .optimizer
            .ok_or_else(|| Error::Format("checkpoint holds no optimizer state to resume from".into()))?;
        Self::assemble(config, corpus, vocab, types, model, optimizer)
    }

    fn assemble(
        config: TrainConfig,
        corpus: &Corpus,
        vocab: Vocab,
        types: TypeInventory,
        model: SpanScorer<F>,
        optimizer: AdamW<F>,
    ) -> Result<Self> {
        let train = encode_examples(&corpus.train, &vocab, &types)?;
        if train.is_empty() {
            return Err(Error::Validation("the training split has no non-empty sentences".into()));
        }
        Ok(Trainer {
            config,
            vocab,
            types,
            model,
            optimizer,
            history: Vec::new(),
            train,
            dev: corpus.dev.clone(),
            order: None,
            best: None,
            out_dir: None,
        })
    }

    /// Directory for the epoch log and checkpoints; created if missing.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.out_dir = Some(dir.to_path_buf());
        Ok(self)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    pub fn total_steps(&self) -> u64 {
        (self.steps_per_epoch() * self.config.epochs) as u64
    }

    pub fn global_step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn epoch(&self) -> usize {
        (self.global_step() / self.steps_per_epoch() as u64) as usize
    }

    pub fn is_finished(&self) -> bool {
        self.global_step() >= self.total_steps()
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch() as u64;
        let epoch = (step / spe) as usize;
        if self.order.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(epoch as u64);
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            order.shuffle(&mut rng);
            self.order = Some((epoch, order));
        }
        let order = &self.order.as_ref().expect("order cached").1;
        let k = (step % spe) as usize * self.config.batch_size;
        order[k..(k + self.config.batch_size).min(order.len())].to_vec()
    }

    /// One optimizer update; returns `(batch loss, learning rate)`.
    pub fn train_step(&mut self) -> Result<(f64, f64)> {
        let step = self.global_step();
        let total = self.total_steps();
        if step >= total {
            return Err(Error::Contract(format!("all {total} training steps are done")));
        }
        let idx = self.batch_indices(step);
        let ids: Vec<Vec<usize>> = idx.iter().map(|&i| self.train[i].ids.clone()).collect();
        let batch = Batch::from_token_ids(&ids);
        let grids: Vec<Tensor<F>> = idx.iter().map(|&i| self.train[i].targets.clone()).collect();
        let targets = pad_grids(&grids, batch.n, self.types.len())?;

        let mut g = Graph::new();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        drop_rng.set_stream(DROPOUT_STREAM + step);
        let dropout = (self.config.dropout > 0.0).then_some((self.config.dropout, &mut drop_rng));
        let fwd = self.model.forward(&mut g, &batch, dropout)?;
        let loss = self.model.loss(&mut g, &fwd, targets)?;
        g.backward(loss)?;
        let mut grads: Vec<Tensor<F>> = fwd.params.iter().map(|&v| g.grad_tensor(v)).collect();
        if self.config.grad_clip > 0.0 {
            clip_grad_norm(&mut grads, self.config.grad_clip);
        }
        let lr = lr_schedule(step, total, self.config.learning_rate, self.config.warmup_factor)?;
        self.optimizer.update(&mut self.model.params.tensors_mut(), &grads, lr)?;
        Ok((g.value(loss).item().to_f64().unwrap_or(f64::NAN), lr))
    }

    pub fn predictor(&self) -> Predictor<'_, F> {
        Predictor {
            scorer: &self.model,
            vocab: &self.vocab,
            types: &self.types,
        }
    }

    pub fn evaluate(&self, sentences: &[Sentence]) -> Result<MetricsReport> {
        self.predictor()
            .evaluate(sentences, self.config.threshold, self.config.label_mode, self.config.flatness)
    }

    /// Finishes the current epoch, evaluates on dev, logs, and updates the
    /// best snapshot and the output directory.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.epoch();
        let end = ((epoch + 1) * self.steps_per_epoch()) as u64;
        let (mut sum, mut count, mut lr) = (0.0, 0usize, 0.0);
        while self.global_step() < end.min(self.total_steps()) {
            let (loss, rate) = self.train_step()?;
            sum += loss;
            count += 1;
            lr = rate;
        }
        let dev_f1 = if self.dev.is_empty() { None } else { Some(self.evaluate(&self.dev)?.f1) };
        let log = EpochLog {
            epoch: epoch + 1,
            step: self.global_step(),
            lr,
            train_loss: if count == 0 { 0.0 } else { sum / count as f64 },
            dev_f1,
        };
        let line = serde_json::to_string(&log).expect("log serializes");
        log::info!("{line}");

        let score = dev_f1.unwrap_or(f64::NEG_INFINITY);
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| score > *b);
        if improved {
            self.best = Some((score, self.model.params.clone(), log.epoch));
        }
        if let Some(dir) = &self.out_dir {
            let path = dir.join(LOG_FILE);
            let mut file = if self.history.is_empty() && epoch == 0 {
                File::create(&path)
            } else {
                OpenOptions::new().create(true).append(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            writeln!(file, "{line}").map_err(|e| Error::io(&path, e))?;
            if improved {
                self.best_archive().save(&dir.join(BEST_CHECKPOINT))?;
            }
            self.archive().save(&dir.join(LAST_CHECKPOINT))?;
        }
        self.history.push(log.clone());
        Ok(log)
    }

    /// Runs every remaining epoch.
    pub fn fit(&mut self) -> Result<&[EpochLog]> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(&self.history)
    }

    /// Current parameters with optimizer state.
    pub fn archive(&self) -> ModelArchive<F> {
        ModelArchive::new(&self.model, &self.config, &self.vocab, &self.types, Some(&self.optimizer), self.epoch())
    }

    /// Best-dev parameters without optimizer state; the current ones before
    /// any epoch has finished.
    pub fn best_archive(&self) -> ModelArchive<F> {
        let mut a = ModelArchive::new(&self.model, &self.config, &self.vocab, &self.types, None, self.epoch());
        if let Some((_, params, epoch)) = &self.best {
            a.params = params.clone();
            a.header.epoch = *epoch;
        }
        a
    }

    pub fn best_model(&self) -> SpanScorer<F> {
        match &self.best {
            Some((_, params, _)) => SpanScorer {
                config: self.model.config.clone(),
                params: params.clone(),
            },
            None => self.model.clone(),
        }
    }
}
