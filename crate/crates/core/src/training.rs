//! Optimizer, clipping, MLE pretraining and the alternating adversarial loop.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::feature_net::{FeatureNetConfig, FeatureNetParams, SeqBatch};
use crate::generator::{generate_soft, GeneratorConfig, GeneratorParams, TokenSequence};
use crate::objectives::{
    discriminator_loss, fsa_from_features, generator_loss, mle_loss, relativistic_gap, LossReport,
};
use crate::params::Parameters;
use crate::rng::{restore_state, save_state, stream, Stream, StreamRng};
use crate::tensor::{Scalar, Tape, Tensor};

pub type GradMap<T = f32> = BTreeMap<String, Tensor<T>>;

/// Bias-corrected Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor<T>>,
    v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Adam<T> {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter of `params`. Each parameter
    /// must have a same-shaped gradient in `grads`.
    pub fn step<P: Parameters<T> + ?Sized>(&mut self, params: &mut P, grads: &GradMap<T>, lr: f64) -> Result<()> {
        let named = params.named_mut();
        for (name, p) in &named {
            match grads.get(name) {
                Some(g) if g.shape() == p.shape() => {}
                Some(g) => {
                    return Err(Error::InvalidArgument(format!(
                        "gradient for {name} has shape {:?}, parameter has {:?}",
                        g.shape(),
                        p.shape()
                    )))
                }
                None => return Err(Error::InvalidArgument(format!("no gradient for {name}"))),
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in named {
            let g = &grads[&name];
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name).or_insert_with(|| Tensor::zeros(p.shape()));
            let it = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &gi), (mi, vi)) in it {
                let gi = gi.as_f64();
                let m_new = self.beta1 * mi.as_f64() + (1.0 - self.beta1) * gi;
                let v_new = self.beta2 * vi.as_f64() + (1.0 - self.beta2) * gi * gi;
                *mi = T::of_f64(m_new);
                *vi = T::of_f64(v_new);
                let update = lr * (m_new / bc1) / ((v_new / bc2).sqrt() + self.eps);
                *w = T::of_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }

    fn save(&self, ckpt: &mut Checkpoint, prefix: &str) -> Result<()> {
        ckpt.put_u64(&format!("{prefix}.t"), self.t)?;
        for (name, m) in &self.m {
            ckpt.put_tensor(&format!("{prefix}.m.{name}"), m)?;
            ckpt.put_tensor(&format!("{prefix}.v.{name}"), &self.v[name])?;
        }
        Ok(())
    }

    fn load<P: Parameters<T>>(ckpt: &Checkpoint, prefix: &str, params: &P) -> Result<Self> {
        let mut adam = Self::new();
        adam.t = ckpt.u64(&format!("{prefix}.t"))?;
        for (name, p) in params.named() {
            let key = format!("{prefix}.m.{name}");
            if ckpt.contains(&key) {
                adam.m.insert(name.clone(), ckpt.tensor_shaped(&key, p.shape())?);
                adam.v.insert(name.clone(), ckpt.tensor_shaped(&format!("{prefix}.v.{name}"), p.shape())?);
            }
        }
        Ok(adam)
    }
}

/// L2 norm over all gradient tensors together.
pub fn global_norm<T: Scalar>(grads: &GradMap<T>) -> f64 {
    grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients by `threshold / N` when their global norm `N`
/// exceeds `threshold`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut GradMap<T>, threshold: f64) -> f64 {
    assert!(threshold > 0.0, "clip threshold must be positive");
    let norm = global_norm(grads);
    if norm > threshold {
        let k = T::of_f64(threshold / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Clips each gradient tensor to norm `threshold` independently.
pub fn clip_per_tensor<T: Scalar>(grads: &mut GradMap<T>, threshold: f64) {
    assert!(threshold > 0.0, "clip threshold must be positive");
    for g in grads.values_mut() {
        let norm = g.sum_sq().sqrt();
        if norm > threshold {
            let k = T::of_f64(threshold / norm);
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipMode {
    Global,
    PerTensor,
}

impl ClipMode {
    pub fn apply<T: Scalar>(self, grads: &mut GradMap<T>, threshold: f64) {
        match self {
            ClipMode::Global => {
                clip_global_norm(grads, threshold);
            }
            ClipMode::PerTensor => clip_per_tensor(grads, threshold),
        }
    }
}

/// What the generator is trained with after pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// Alternating adversarial training.
    Adversarial,
    /// Further MLE steps only, one per scheduled generator update.
    MleBaseline,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub g_steps: usize,
    pub d_steps: usize,
    pub pretrain_epochs: usize,
    pub tau: f64,
    /// Exponential temperature decay rate per iteration; 0 keeps `tau` fixed.
    pub tau_decay: f64,
    pub tau_min: f64,
    pub num_experts: usize,
    pub share_experts: bool,
    pub gen_embed_dim: usize,
    pub gen_hidden_dim: usize,
    pub disc_embed_dim: usize,
    pub disc_windows: Vec<usize>,
    pub disc_channels: usize,
    pub feature_dim: usize,
    pub batch_size: usize,
    pub lr_pretrain: f64,
    pub lr_gen_adv: f64,
    pub lr_disc: f64,
    pub clip_norm: f64,
    pub clip_mode: ClipMode,
    pub fsa_weight: f64,
    pub max_iterations: usize,
    pub eval_interval: usize,
    pub mode: TrainMode,
    /// Check the update-scope and frozen-encoder contracts every iteration.
    pub audit: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            g_steps: 1,
            d_steps: 5,
            pretrain_epochs: 50,
            tau: 1.0,
            tau_decay: 0.0,
            tau_min: 0.01,
            num_experts: 2,
            share_experts: false,
            gen_embed_dim: 32,
            gen_hidden_dim: 32,
            disc_embed_dim: 64,
            disc_windows: vec![2, 3, 4, 5],
            disc_channels: 300,
            feature_dim: 100,
            batch_size: 64,
            lr_pretrain: 1e-2,
            lr_gen_adv: 1e-4,
            lr_disc: 1e-4,
            clip_norm: 5.0,
            clip_mode: ClipMode::Global,
            fsa_weight: 1.0,
            max_iterations: 200,
            eval_interval: 10,
            mode: TrainMode::Adversarial,
            audit: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Checks the schedule invariants. Learning rates of zero are accepted
    /// so a run can be made a parameter no-op.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.g_steps == 0 || self.d_steps == 0 {
            return fail("g_steps and d_steps must be at least 1".into());
        }
        if !(self.tau > 0.0) || !(self.tau_min > 0.0) || !(self.tau_decay >= 0.0) {
            return fail("tau and tau_min must be positive and tau_decay non-negative".into());
        }
        for (name, lr) in [
            ("lr_pretrain", self.lr_pretrain),
            ("lr_gen_adv", self.lr_gen_adv),
            ("lr_disc", self.lr_disc),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return fail(format!("{name} must be a finite non-negative number"));
            }
        }
        if !(self.clip_norm > 0.0) {
            return fail("clip_norm must be positive".into());
        }
        if !(self.fsa_weight >= 0.0) {
            return fail("fsa_weight must be non-negative".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return fail("batch_size and eval_interval must be at least 1".into());
        }
        Ok(())
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            vocab_size,
            embed_dim: self.gen_embed_dim,
            hidden_dim: self.gen_hidden_dim,
            num_experts: self.num_experts,
            share_experts: self.share_experts,
        }
    }

    pub fn feature_net_config(&self, vocab_size: usize) -> FeatureNetConfig {
        FeatureNetConfig {
            vocab_size,
            embed_dim: self.disc_embed_dim,
            windows: self.disc_windows.clone(),
            channels: self.disc_channels,
            feature_dim: self.feature_dim,
        }
    }

    /// Temperature used at adversarial iteration `i` (1-based).
    pub fn tau_at(&self, i: usize) -> f64 {
        if self.tau_decay == 0.0 {
            self.tau
        } else {
            (self.tau * (-self.tau_decay * i.saturating_sub(1) as f64).exp()).max(self.tau_min)
        }
    }
}

/// Counters from the contract checks of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IterationAudit {
    pub checks: usize,
}

fn contract(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(what()))
    }
}

fn check_finite(value: f64, what: &'static str, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, iteration })
    }
}

fn check_grads_finite<T: Scalar>(grads: &GradMap<T>, what: &'static str, iteration: usize) -> Result<()> {
    if grads.values().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::NonFinite { what, iteration })
    }
}

/// Complete mutable training state.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub seq_len: usize,
    pub gen: GeneratorParams<f32>,
    pub disc: FeatureNetParams<f32>,
    pub gen_opt: Adam<f32>,
    pub disc_opt: Adam<f32>,
    pub shuffle_rng: StreamRng,
    pub gumbel_rng: StreamRng,
    /// Completed adversarial (or baseline) iterations.
    pub iteration: usize,
    pub pretrained: bool,
    pub pretrain_log: Vec<f64>,
}

impl Trainer {
    pub fn new(config: TrainConfig, vocab_size: usize, seq_len: usize) -> Result<Self> {
        config.validate()?;
        if seq_len == 0 {
            return Err(Error::InvalidArgument("sequence length must be positive".into()));
        }
        let mut init = stream(config.seed, Stream::Init);
        let gen = GeneratorParams::new(config.generator_config(vocab_size), &mut init)?;
        let disc = FeatureNetParams::new(config.feature_net_config(vocab_size), &mut init)?;
        Ok(Self {
            shuffle_rng: stream(config.seed, Stream::Shuffle),
            gumbel_rng: stream(config.seed, Stream::Gumbel),
            config,
            seq_len,
            gen,
            disc,
            gen_opt: Adam::new(),
            disc_opt: Adam::new(),
            iteration: 0,
            pretrained: false,
            pretrain_log: Vec::new(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.gen.vocab_size()
    }

    fn validate_corpus(&self, corpus: &[TokenSequence]) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        for s in corpus {
            if s.is_empty() {
                return Err(Error::Empty("token sequence"));
            }
            s.validate(self.vocab_size())?;
        }
        Ok(())
    }

    fn clip(&self, grads: &mut GradMap<f32>) {
        self.config.clip_mode.apply(grads, self.config.clip_norm);
    }

    /// One MLE update on `batch`; returns the loss before the update.
    fn mle_update(&mut self, batch: &[TokenSequence], opt: &mut Adam<f32>, lr: f64, at: usize) -> Result<f64> {
        let mut tape = Tape::<f32>::new();
        let gen = self.gen.bind(&mut tape, true);
        let loss = mle_loss(&mut tape, &gen, batch)?;
        let value = tape.value(loss).data()[0].as_f64();
        check_finite(value, "mle loss", at)?;
        let mut grads = tape.backward(loss)?.into_named();
        check_grads_finite(&grads, "generator gradient", at)?;
        self.clip(&mut grads);
        opt.step(&mut self.gen, &grads, lr)?;
        Ok(value)
    }

    /// `pretrain_epochs` epochs of minibatch MLE. Returns the mean batch
    /// loss of every epoch. The optimizer state is kept in `gen_opt`, so the
    /// MLE baseline continues exactly where pretraining stopped; the first
    /// adversarial iteration starts a fresh one.
    pub fn pretrain(&mut self, corpus: &[TokenSequence]) -> Result<Vec<f64>> {
        self.validate_corpus(corpus)?;
        let mut opt = std::mem::take(&mut self.gen_opt);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut log = Vec::with_capacity(self.config.pretrain_epochs);
        for _ in 0..self.config.pretrain_epochs {
            order.shuffle(&mut self.shuffle_rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<TokenSequence> = chunk.iter().map(|&i| corpus[i].clone()).collect();
                match self.mle_update(&batch, &mut opt, self.config.lr_pretrain, 0) {
                    Ok(v) => total += v,
                    Err(e) => {
                        self.gen_opt = opt;
                        return Err(e);
                    }
                }
                batches += 1;
            }
            log.push(total / batches as f64);
        }
        self.gen_opt = opt;
        self.pretrained = true;
        self.pretrain_log = log.clone();
        Ok(log)
    }

    fn sample_real(&mut self, corpus: &[TokenSequence]) -> Result<Vec<TokenSequence>> {
        let n = self.config.batch_size;
        if corpus.len() < n {
            return Err(Error::InvalidArgument(format!(
                "corpus of {} sequences is smaller than the batch size {n}",
                corpus.len()
            )));
        }
        Ok(index::sample(&mut self.shuffle_rng, corpus.len(), n)
            .into_iter()
            .map(|i| corpus[i].clone())
            .collect())
    }

    fn probe_features(&self, net: &FeatureNetParams<f32>, probe: &[TokenSequence]) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let f = bound.features(&mut tape, SeqBatch::Hard(probe))?;
        Ok(tape.value(f).clone())
    }

    /// One round of alternating updates: copy the encoder, `g_steps`
    /// generator updates, then `d_steps` discriminator updates.
    pub fn adversarial_iteration(&mut self, corpus: &[TokenSequence]) -> Result<(LossReport, IterationAudit)> {
        self.validate_corpus(corpus)?;
        let at = self.iteration + 1;
        let tau = self.config.tau_at(at);
        let audit = self.config.audit;
        let mut checks = 0;
        let n = self.config.batch_size;
        let len = self.seq_len;
        let probe: Vec<TokenSequence> = corpus.iter().take(4).cloned().collect();

        if self.iteration == 0 {
            self.gen_opt = Adam::new();
        }
        let aux = self.disc.copy_to_auxiliary();
        if audit {
            let f = self.probe_features(aux.params(), &probe)?;
            let d = self.probe_features(&self.disc, &probe)?;
            contract(f == d, || "encoder copy differs from the discriminator".into())?;
            checks += 1;
        }
        let aux_probe = if audit { Some(self.probe_features(aux.params(), &probe)?) } else { None };

        let mut report = LossReport::default();
        let disc_hash = audit.then(|| self.disc.fingerprint());
        for _ in 0..self.config.g_steps {
            let real = self.sample_real(corpus)?;
            let mut tape = Tape::<f32>::new();
            let gen = self.gen.bind(&mut tape, true);
            let h = self.disc.bind(&mut tape, false);
            let f = aux.bind(&mut tape);
            let fake = generate_soft(&mut tape, &gen, n, len, tau, &mut self.gumbel_rng)?;
            let h_real = h.logit(&mut tape, SeqBatch::Hard(&real))?;
            let h_fake = h.logit(&mut tape, SeqBatch::Soft(fake.probs))?;
            let gap = relativistic_gap(&mut tape, h_real, h_fake)?;
            let f_real = f.features(&mut tape, SeqBatch::Hard(&real))?;
            let f_fake = f.features(&mut tape, SeqBatch::Soft(fake.probs))?;
            let fsa = fsa_from_features(&mut tape, f_real, f_fake)?;
            let loss = generator_loss(&mut tape, gap, fsa, self.config.fsa_weight)?;
            let ld = discriminator_loss(&mut tape, gap)?;

            report.loss_g = tape.value(loss).data()[0].as_f64();
            report.fsa = tape.value(fsa).data()[0].as_f64();
            report.loss_d = tape.value(ld).data()[0].as_f64();
            check_finite(report.loss_g, "generator loss", at)?;
            check_finite(report.fsa, "fsa distance", at)?;

            let mut grads = tape.backward(loss)?.into_named();
            if audit {
                contract(grads.keys().all(|k| k.starts_with("gen.")), || {
                    format!("generator step gradient touches {:?}", grads.keys().collect::<Vec<_>>())
                })?;
                contract(tape.param_names().all(|k| k.starts_with("gen.")), || {
                    "discriminator or encoder weights are trainable during a generator step".into()
                })?;
                checks += 2;
            }
            check_grads_finite(&grads, "generator gradient", at)?;
            self.clip(&mut grads);
            self.gen_opt.step(&mut self.gen, &grads, self.config.lr_gen_adv)?;
        }
        if let Some(hash) = disc_hash {
            contract(hash == self.disc.fingerprint(), || "discriminator changed during generator steps".into())?;
            checks += 1;
        }

        let gen_hash = audit.then(|| self.gen.fingerprint());
        for _ in 0..self.config.d_steps {
            let real = self.sample_real(corpus)?;
            let mut tape = Tape::<f32>::new();
            let gen = self.gen.bind(&mut tape, false);
            let before = self.gumbel_rng.get_word_pos();
            let fake = generate_soft(&mut tape, &gen, n, len, tau, &mut self.gumbel_rng)?;
            if audit {
                contract(self.gumbel_rng.get_word_pos() > before, || "fake batch was not freshly sampled".into())?;
                contract(!tape.requires_grad(fake.probs), || "generator output carries gradient in a discriminator step".into())?;
                checks += 2;
            }
            let h = self.disc.bind(&mut tape, true);
            let h_real = h.logit(&mut tape, SeqBatch::Hard(&real))?;
            let h_fake = h.logit(&mut tape, SeqBatch::Soft(fake.probs))?;
            let gap = relativistic_gap(&mut tape, h_real, h_fake)?;
            let loss = discriminator_loss(&mut tape, gap)?;
            report.loss_d = tape.value(loss).data()[0].as_f64();
            report.mean_gap = tape.value(gap).data().iter().map(|v| v.as_f64()).sum::<f64>() / n as f64;
            check_finite(report.loss_d, "discriminator loss", at)?;

            let mut grads = tape.backward(loss)?.into_named();
            if audit {
                contract(grads.keys().all(|k| k.starts_with("disc.")), || {
                    format!("discriminator step gradient touches {:?}", grads.keys().collect::<Vec<_>>())
                })?;
                checks += 1;
            }
            check_grads_finite(&grads, "discriminator gradient", at)?;
            self.clip(&mut grads);
            self.disc_opt.step(&mut self.disc, &grads, self.config.lr_disc)?;
        }
        if let Some(hash) = gen_hash {
            contract(hash == self.gen.fingerprint(), || "generator changed during discriminator steps".into())?;
            checks += 1;
        }
        if let Some(before) = aux_probe {
            let after = self.probe_features(aux.params(), &probe)?;
            contract(after == before, || "auxiliary encoder changed during discriminator steps".into())?;
            checks += 1;
        }
        self.iteration = at;
        Ok((report, IterationAudit { checks }))
    }

    /// Baseline iteration: `g_steps` MLE updates on sampled real batches at
    /// the pretraining learning rate. Only `loss_g` is populated.
    pub fn mle_iteration(&mut self, corpus: &[TokenSequence]) -> Result<LossReport> {
        self.validate_corpus(corpus)?;
        let at = self.iteration + 1;
        let mut report = LossReport::default();
        let mut opt = std::mem::take(&mut self.gen_opt);
        for _ in 0..self.config.g_steps {
            let real = match self.sample_real(corpus) {
                Ok(r) => r,
                Err(e) => {
                    self.gen_opt = opt;
                    return Err(e);
                }
            };
            let result = self.mle_update(&real, &mut opt, self.config.lr_pretrain, at);
            match result {
                Ok(v) => report.loss_g = v,
                Err(e) => {
                    self.gen_opt = opt;
                    return Err(e);
                }
            }
        }
        self.gen_opt = opt;
        self.iteration = at;
        Ok(report)
    }

    /// One scheduled iteration in the configured mode.
    pub fn step(&mut self, corpus: &[TokenSequence]) -> Result<LossReport> {
        match self.config.mode {
            TrainMode::Adversarial => self.adversarial_iteration(corpus).map(|(r, _)| r),
            TrainMode::MleBaseline => self.mle_iteration(corpus),
        }
    }

    /// Serializes the full state; `config_text` is stored verbatim.
    pub fn to_checkpoint(&self, config_text: &str) -> Result<Checkpoint> {
        let mut c = Checkpoint::new();
        c.put_text("meta.config", config_text)?;
        c.put_u64("meta.iteration", self.iteration as u64)?;
        c.put_u64("meta.pretrained", self.pretrained as u64)?;
        c.put_u64("meta.seq_len", self.seq_len as u64)?;
        c.put_u64("meta.vocab_size", self.vocab_size() as u64)?;
        c.put_f64s("meta.pretrain_log", &self.pretrain_log)?;
        for (name, t) in self.gen.named() {
            c.put_tensor(&name, t)?;
        }
        for (name, t) in self.disc.named() {
            c.put_tensor(&name, t)?;
        }
        self.gen_opt.save(&mut c, "adam.gen")?;
        self.disc_opt.save(&mut c, "adam.disc")?;
        c.put_u64s("rng.shuffle", &save_state(&self.shuffle_rng))?;
        c.put_u64s("rng.gumbel", &save_state(&self.gumbel_rng))?;
        Ok(c)
    }

    /// Rebuilds a trainer from a checkpoint written with the same `config`.
    pub fn from_checkpoint(ckpt: &Checkpoint, config: TrainConfig) -> Result<Self> {
        let vocab = ckpt.u64("meta.vocab_size")? as usize;
        let seq_len = ckpt.u64("meta.seq_len")? as usize;
        let mut t = Self::new(config, vocab, seq_len)?;
        load_params(ckpt, &mut t.gen)?;
        load_params(ckpt, &mut t.disc)?;
        t.gen_opt = Adam::load(ckpt, "adam.gen", &t.gen)?;
        t.disc_opt = Adam::load(ckpt, "adam.disc", &t.disc)?;
        t.shuffle_rng = restore_state(&ckpt.u64s("rng.shuffle")?)?;
        t.gumbel_rng = restore_state(&ckpt.u64s("rng.gumbel")?)?;
        t.iteration = ckpt.u64("meta.iteration")? as usize;
        t.pretrained = ckpt.u64("meta.pretrained")? != 0;
        t.pretrain_log = ckpt.f64s("meta.pretrain_log")?;
        Ok(t)
    }
}

/// Overwrites every named tensor of `params` from the checkpoint.
pub fn load_params<T: Scalar, P: Parameters<T>>(ckpt: &Checkpoint, params: &mut P) -> Result<()> {
    for (name, slot) in params.named_mut() {
        *slot = ckpt.tensor_shaped(&name, slot.shape())?;
    }
    Ok(())
}

/// Called after pretraining (iteration 0, no report) and after every
/// iteration that is a multiple of the evaluation interval or the last one.
pub trait TrainHook {
    fn on_eval(&mut self, trainer: &Trainer, report: Option<&LossReport>) -> Result<()>;
}

impl<F: FnMut(&Trainer, Option<&LossReport>) -> Result<()>> TrainHook for F {
    fn on_eval(&mut self, trainer: &Trainer, report: Option<&LossReport>) -> Result<()> {
        self(trainer, report)
    }
}

/// Pretrains (unless already done) and then iterates until
/// `max_iterations`, invoking `hook` on the evaluation schedule.
pub fn train<H: TrainHook + ?Sized>(trainer: &mut Trainer, corpus: &[TokenSequence], hook: &mut H) -> Result<()> {
    if !trainer.pretrained {
        trainer.pretrain(corpus)?;
        hook.on_eval(trainer, None)?;
    }
    let max = trainer.config.max_iterations;
    let interval = trainer.config.eval_interval;
    while trainer.iteration < max {
        let report = trainer.step(corpus)?;
        let i = trainer.iteration;
        if i % interval == 0 || i == max {
            hook.on_eval(trainer, Some(&report))?;
        }
    }
    Ok(())
}
