//! Mini-batch SGD over the three-branch loss, and attention-quality probes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_synth::SampleRecord;
use crate::error::{Error, Result};
use crate::eval;
use crate::infer::{flip_image, infer_attention};
use crate::seenet::{total_loss, LabelVector, MaskPolicy, SeeNetModel};
use crate::tensor::{Graph, Sgd, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub lr: f64,
    /// Iteration from which the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_at: usize,
    pub lr_drop_factor: f64,
    pub batch: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations trained with erasing disabled.
    pub warmup: usize,
    pub seed: u64,
    /// Random horizontal flips of training images.
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 3000,
            lr: 0.01,
            lr_drop_at: 1800,
            lr_drop_factor: 0.1,
            batch: 16,
            momentum: 0.9,
            weight_decay: 0.0002,
            warmup: 500,
            seed: 0,
            flip_augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor <= 1.0) {
            return fail(format!(
                "lr drop factor must lie in (0, 1], got {}",
                self.lr_drop_factor
            ));
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        Ok(())
    }

    pub fn lr_at(&self, iter: usize) -> f64 {
        if iter >= self.lr_drop_at {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }
}

/// One training image with its image-level classes (model channel indices).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub classes: Vec<usize>,
}

impl From<&SampleRecord> for TrainSample {
    fn from(s: &SampleRecord) -> Self {
        TrainSample {
            id: s.id.clone(),
            image: s.image.clone(),
            classes: s.class_indices(),
        }
    }
}

/// Per-iteration record, averaged over the batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub warmup: bool,
    pub loss: f64,
    pub loss_a: f64,
    pub loss_b: f64,
    /// Absent for strategies without branch C.
    pub loss_c: Option<f64>,
}

/// Attention quality on held-out samples with pixel ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionQuality {
    pub iou: f64,
    pub leakage: f64,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Iter(IterRecord),
    Attention {
        iter: usize,
        #[serde(flatten)]
        quality: AttentionQuality,
    },
}

/// Contents of the diagnostic dump written when a loss is not finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonFiniteBatch {
    pub iter: usize,
    pub sample_ids: Vec<String>,
    pub losses: Vec<[f64; 3]>,
}

/// Owns the optimizer state and the sampling order.
pub struct Trainer<'a> {
    model: &'a mut SeeNetModel,
    policy: MaskPolicy,
    cfg: TrainConfig,
    data: &'a [TrainSample],
    opt: Sgd<f32>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    iter: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a mut SeeNetModel,
        policy: MaskPolicy,
        cfg: TrainConfig,
        data: &'a [TrainSample],
    ) -> Result<Self> {
        cfg.validate()?;
        policy.thresholds.validate()?;
        if data.is_empty() {
            return Err(Error::Contract("training set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Trainer {
            model,
            policy,
            opt: Sgd::new(cfg.momentum as f32),
            cfg,
            data,
            rng,
            order: Vec::new(),
            cursor: 0,
            iter: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn model(&self) -> &SeeNetModel {
        self.model
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order = (0..self.data.len()).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    /// One SGD step on the next batch.
    pub fn step(&mut self) -> Result<IterRecord> {
        let iter = self.iter;
        let warmup = iter < self.cfg.warmup;
        let lr = self.cfg.lr_at(iter);
        let b = self.cfg.batch;
        let scale = 1.0 / b as f32;

        let batch: Vec<(usize, bool)> = (0..b)
            .map(|_| {
                let i = self.next_index();
                let flip = self.cfg.flip_augment && self.rng.random_bool(0.5);
                (i, flip)
            })
            .collect();

        let mut grads: Vec<Vec<f32>> = self
            .model
            .params()
            .iter()
            .map(|p| vec![0.0; p.numel()])
            .collect();
        let mut losses = Vec::with_capacity(b);
        let mut has_c = false;
        for &(i, flip) in &batch {
            let sample = &self.data[i];
            let image = if flip {
                flip_image(&sample.image)?
            } else {
                sample.image.clone()
            };
            let labels = LabelVector::from_classes(&sample.classes, self.model.num_classes())?;
            let mut g = Graph::new();
            let vars = self.model.register(&mut g);
            let pass =
                self.model
                    .forward_train(&mut g, &vars, &image, &labels, &self.policy, warmup)?;
            let loss = total_loss(&mut g, &pass, &labels)?;
            let la = g.value(loss.a).data()[0] as f64;
            let lb = g.value(loss.b).data()[0] as f64;
            let lc = loss.c.map(|c| g.value(c).data()[0] as f64);
            has_c |= lc.is_some();
            losses.push([la, lb, lc.unwrap_or(0.0)]);
            if !(la + lb + lc.unwrap_or(0.0)).is_finite() {
                let dump = NonFiniteBatch {
                    iter,
                    sample_ids: batch
                        .iter()
                        .map(|&(j, _)| self.data[j].id.clone())
                        .collect(),
                    losses,
                };
                return Err(Error::NonFinite(
                    serde_json::to_string(&dump).expect("dump serializes"),
                ));
            }
            let item = g.backward(loss.total)?;
            for (acc, v) in grads.iter_mut().zip(vars.flat()) {
                if let Some(d) = item.get(*v) {
                    acc.iter_mut().zip(d).for_each(|(a, &x)| *a += x * scale);
                }
            }
        }

        let mut params = self.model.params_mut();
        for (p, g) in params.iter_mut().zip(grads) {
            p.set_grad(Some(g))?;
        }
        self.opt
            .step(&mut params, lr as f32, self.cfg.weight_decay as f32)?;
        self.iter += 1;

        let mean = |k: usize| losses.iter().map(|l| l[k]).sum::<f64>() / b as f64;
        let (loss_a, loss_b) = (mean(0), mean(1));
        let loss_c = has_c.then(|| mean(2));
        Ok(IterRecord {
            iter,
            lr,
            warmup,
            loss: loss_a + loss_b + loss_c.unwrap_or(0.0),
            loss_a,
            loss_b,
            loss_c,
        })
    }
}

/// Options for [`train`] beyond the optimizer settings.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProbeOptions<'p> {
    /// Held-out samples scored every `every` iterations and at the end.
    pub samples: &'p [SampleRecord],
    pub every: usize,
    pub input_side: usize,
}

/// Runs `cfg.iters` steps, sending every record to `sink`.
pub fn train(
    model: &mut SeeNetModel,
    policy: MaskPolicy,
    data: &[TrainSample],
    cfg: &TrainConfig,
    probes: ProbeOptions<'_>,
    sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
) -> Result<Vec<IterRecord>> {
    let mut trainer = Trainer::new(model, policy, cfg.clone(), data)?;
    let mut history = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let rec = trainer.step()?;
        sink(&LogRecord::Iter(rec.clone()))?;
        history.push(rec);
        let done = trainer.iteration();
        let due = probes.every > 0 && done % probes.every == 0;
        if !probes.samples.is_empty() && (due || done == cfg.iters) {
            let quality = attention_quality(
                trainer.model(),
                &policy,
                probes.samples,
                probes.input_side,
                0.5,
            )?;
            sink(&LogRecord::Attention {
                iter: done,
                quality,
            })?;
        }
    }
    Ok(history)
}

/// Mean localization IoU and background leakage over every (sample, class)
/// pair. IoU is against the pixels of that class; leakage counts attention
/// on ground-truth background.
pub fn attention_quality(
    model: &SeeNetModel,
    policy: &MaskPolicy,
    samples: &[SampleRecord],
    input_side: usize,
    tau: f64,
) -> Result<AttentionQuality> {
    let (mut iou, mut leak, mut pairs) = (0.0, 0.0, 0usize);
    for s in samples {
        let foreground = s.gt.foreground();
        for &label in &s.labels {
            let map = infer_attention(model, policy, &s.image, &[label as usize - 1], input_side)?;
            let class_mask: Vec<bool> = s.gt.labels().iter().map(|&g| g == label).collect();
            iou += eval::attention_localization_score(&map, &class_mask, tau)?.iou;
            leak += eval::background_leakage(&map, &foreground, tau)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::UndefinedMetric("no labeled samples to score".into()));
    }
    Ok(AttentionQuality {
        iou: iou / pairs as f64,
        leakage: leak / pairs as f64,
        pairs,
    })
}
