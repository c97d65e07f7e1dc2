//! Pruning run orchestration.
//!
//! `seven_pre` interleaves score updates and exponential-schedule
//! masking with training over the first K iterations; `seven_dyn` does
//! the same with a cubic schedule inside the window `(t_i, t_i + K]`
//! after a dense warm phase; the one-shot baselines mask once at the
//! first iteration. Every iteration performs exactly one gradient
//! computation and one optimizer step on the masked model, and the mask
//! is re-applied after each update so pruned coordinates stay exactly
//! zero.
//!
//! All randomness (init, batch order, random scores) derives from the
//! plan seed through fixed purpose tags; batch order in particular does
//! not depend on the method, so runs with different methods but equal
//! seeds see identical data streams and are directly comparable.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::{apply_mask, build_mask, Mask};
use crate::metrics::{MetricsRecord, Phase};
use crate::model::{eval_accuracy, forward_loss, init_model, ParamStore, TransformerConfig};
use crate::optim::{OptimKind, OptimizerState};
use crate::rng::SeedStream;
use crate::schedule::SparsitySchedule;
use crate::score::{baseline_score, ScoreState, ScoreVariant};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    SevenPre,
    SevenDyn,
    Snip,
    Magnitude,
    Random,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SevenPre => "seven_pre",
            Method::SevenDyn => "seven_dyn",
            Method::Snip => "snip",
            Method::Magnitude => "magnitude",
            Method::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "seven_pre" => Ok(Method::SevenPre),
            "seven_dyn" => Ok(Method::SevenDyn),
            "snip" => Ok(Method::Snip),
            "magnitude" => Ok(Method::Magnitude),
            "random" => Ok(Method::Random),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }

    pub fn is_seven(self) -> bool {
        matches!(self, Method::SevenPre | Method::SevenDyn)
    }

    pub fn all() -> [Method; 5] {
        [
            Method::SevenPre,
            Method::SevenDyn,
            Method::Snip,
            Method::Magnitude,
            Method::Random,
        ]
    }
}

/// Everything one run needs beyond the model config and the dataset.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub method: Method,
    pub variant: ScoreVariant,
    pub sparsity: f64,
    /// K: number of pruning steps.
    pub prune_steps: usize,
    /// t_i: last dense iteration before the dynamic pruning window.
    pub prune_start: usize,
    /// T: total training iterations.
    pub total_steps: usize,
    /// Dense optimizer steps taken before iteration t = 1, standing in
    /// for the pre-trained starting point the pruning loop expects.
    /// Identical across methods, so comparisons stay paired.
    pub warmup_steps: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub optimizer: OptimKind,
    pub batch_size: usize,
    pub seed: u64,
    pub resurrection: bool,
    /// Evaluate every this many iterations; 0 means once per epoch.
    pub eval_every: usize,
}

impl RunPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(Error::InvalidConfig(format!(
                "sparsity must lie in [0,1), got {}",
                self.sparsity
            )));
        }
        if self.total_steps == 0 || self.prune_steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "T, K, and batch_size must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        match self.method {
            Method::SevenPre => {
                if self.prune_steps > self.total_steps {
                    return Err(Error::InvalidConfig(format!(
                        "seven_pre needs K <= T, got K = {} > T = {}",
                        self.prune_steps, self.total_steps
                    )));
                }
                if !self.variant.is_accumulating() {
                    return Err(Error::InvalidConfig(format!(
                        "seven_pre cannot use one-shot variant {}",
                        self.variant.name()
                    )));
                }
            }
            Method::SevenDyn => {
                // A start beyond T is an explicit "never prune" dense run;
                // anything else must fit the whole window before T.
                if self.prune_start < self.total_steps
                    && self.prune_start + self.prune_steps > self.total_steps
                {
                    return Err(Error::InvalidConfig(format!(
                        "seven_dyn needs t_i + K <= T, got {} + {} > {}",
                        self.prune_start, self.prune_steps, self.total_steps
                    )));
                }
                if !self.variant.is_accumulating() {
                    return Err(Error::InvalidConfig(format!(
                        "seven_dyn cannot use one-shot variant {}",
                        self.variant.name()
                    )));
                }
            }
            Method::Snip | Method::Magnitude | Method::Random => {}
        }
        Ok(())
    }

    pub fn run_id(&self) -> String {
        let mut id = self.method.name().to_string();
        if self.method.is_seven() && self.variant != ScoreVariant::Seven {
            id.push('+');
            id.push_str(self.variant.name());
        }
        if self.resurrection {
            id.push_str("+res");
        }
        format!("{id}_s{}_seed{}", self.sparsity, self.seed)
    }
}

/// Final state of a completed run. Metrics are delivered through the
/// observer passed to [`run_streaming`] (or collected by [`run`]).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub store: ParamStore,
    pub mask: Mask,
    pub final_loss: f64,
    pub final_eval_acc: f64,
    pub score_state: Option<ScoreState>,
}

/// Receives the per-iteration metrics stream and, after each pruning
/// step, the freshly built mask.
pub trait RunObserver {
    fn on_record(&mut self, record: &MetricsRecord) -> Result<()>;
    fn on_mask(&mut self, _iteration: usize, _mask: &Mask) -> Result<()> {
        Ok(())
    }
}

impl<F: FnMut(&MetricsRecord) -> Result<()>> RunObserver for F {
    fn on_record(&mut self, record: &MetricsRecord) -> Result<()> {
        self(record)
    }
}

/// Shuffled epoch batching with a method-independent seeded order.
pub struct BatchStream<'d> {
    data: &'d Dataset,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    rng: SeedStream,
}

impl<'d> BatchStream<'d> {
    pub fn new(data: &'d Dataset, batch_size: usize, seed: u64) -> Self {
        let mut s = BatchStream {
            data,
            order: (0..data.train.len()).collect(),
            pos: 0,
            batch_size,
            rng: SeedStream::for_purpose(seed, "batches"),
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    pub fn epoch_len(&self) -> usize {
        self.data.train.len().div_ceil(self.batch_size)
    }

    pub fn next_batch(&mut self) -> crate::model::Batch {
        if self.pos >= self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.batch_of(&self.order[self.pos..end]);
        self.pos = end;
        batch
    }
}

fn expand_keep(store: &ParamStore, mask: &Mask) -> Vec<bool> {
    let mut out = Vec::with_capacity(store.flat_len());
    let mut prunable_bits = mask.flat().into_iter();
    for p in store.iter() {
        let n = p.tensor.numel();
        if p.prunable {
            out.extend(prunable_bits.by_ref().take(n));
        } else {
            out.extend(std::iter::repeat(true).take(n));
        }
    }
    out
}

struct PruneDecision {
    rate: f64,
    scores: Vec<f64>,
}

/// Run a plan to completion, streaming one metrics record per iteration.
pub fn run_streaming(
    plan: &RunPlan,
    cfg: &TransformerConfig,
    data: &Dataset,
    observer: &mut dyn RunObserver,
) -> Result<RunOutput> {
    plan.validate()?;
    cfg.validate()?;
    if data.seq_len != cfg.seq_len || data.vocab > cfg.vocab || data.classes > cfg.classes {
        return Err(Error::InvalidConfig(format!(
            "dataset ({} tokens x {}, vocab {}, classes {}) does not fit model (seq_len {}, vocab {}, classes {})",
            data.train.len(),
            data.seq_len,
            data.vocab,
            data.classes,
            cfg.seq_len,
            cfg.vocab,
            cfg.classes
        )));
    }

    let run_id = plan.run_id();
    let mut store = init_model(cfg, plan.seed)?;
    let mut mask = Mask::all_ones(&store);
    let mut keep = expand_keep(&store, &mask);
    let mut opt = OptimizerState::new(plan.optimizer, plan.lr, store.flat_len());
    let mut score_state = if plan.method.is_seven() {
        Some(ScoreState::new(
            store.prunable_len(),
            plan.alpha1,
            plan.alpha2,
            plan.epsilon,
            plan.variant,
        )?)
    } else {
        None
    };

    let schedule = match plan.method {
        Method::SevenPre => Some(SparsitySchedule::exponential(plan.sparsity, plan.prune_steps)?),
        Method::SevenDyn => Some(SparsitySchedule::cubic(
            plan.sparsity,
            plan.prune_steps,
            plan.prune_start,
        )?),
        _ => None,
    };

    let mut stream = BatchStream::new(data, plan.batch_size, plan.seed);
    let eval_every = if plan.eval_every == 0 {
        stream.epoch_len()
    } else {
        plan.eval_every
    };
    let (eval_inputs, eval_labels) = data.eval_inputs();

    let abort = |t: usize, e: Error| Error::RunAborted {
        iteration: t,
        reason: e.to_string(),
    };

    let mut final_eval = 0.0;
    let mut final_loss = 0.0;

    for step in 1..=plan.warmup_steps + plan.total_steps {
        // Algorithm time: warmup steps sit at t <= 0.
        let t = step.wrapping_sub(plan.warmup_steps);
        let in_algorithm = step > plan.warmup_steps;

        let batch = stream.next_batch();
        let mut fp = forward_loss(&store, cfg, &batch).map_err(|e| abort(step, e))?;
        fp.backward().map_err(|e| abort(step, e))?;
        let mut grad = fp.flat_grad(&store);
        for (g, &k) in grad.iter_mut().zip(&keep) {
            if !k {
                *g = 0.0;
            }
        }
        let loss = fp.loss_value();
        drop(fp);

        // Decide whether this iteration prunes, and with which scores.
        let decision: Option<PruneDecision> = if !in_algorithm {
            None
        } else {
            match plan.method {
                Method::SevenPre | Method::SevenDyn => {
                    let sched = schedule.as_ref().expect("seven methods have a schedule");
                    if sched.in_window(t) {
                        let theta = store.flat_prunable();
                        let g_pr = gather_prunable(&store, &grad);
                        let state = score_state.as_mut().expect("seven methods keep score state");
                        state.update(&g_pr).map_err(|e| abort(step, e))?;
                        state
                            .accumulate_score(&theta, &g_pr)
                            .map_err(|e| abort(step, e))?;
                        Some(PruneDecision {
                            rate: sched.rate_at(t).map_err(|e| abort(step, e))?,
                            scores: state.score().to_vec(),
                        })
                    } else {
                        None
                    }
                }
                Method::Snip | Method::Magnitude | Method::Random => {
                    if t == 1 {
                        let theta = store.flat_prunable();
                        let variant = match plan.method {
                            Method::Snip => ScoreVariant::Snip,
                            Method::Magnitude => ScoreVariant::Magnitude,
                            _ => ScoreVariant::Random,
                        };
                        let g_pr = gather_prunable(&store, &grad);
                        let grad_opt = if variant == ScoreVariant::Snip {
                            Some(&g_pr[..])
                        } else {
                            None
                        };
                        let scores = baseline_score(variant, &theta, grad_opt, plan.seed)
                            .map_err(|e| abort(step, e))?;
                        Some(PruneDecision {
                            rate: plan.sparsity,
                            scores,
                        })
                    } else {
                        None
                    }
                }
            }
        };

        let phase = if !in_algorithm {
            Phase::Dense
        } else {
            match plan.method {
                Method::SevenPre => {
                    if t <= plan.prune_steps {
                        Phase::Pruning
                    } else {
                        Phase::FineTune
                    }
                }
                Method::SevenDyn => {
                    if t <= plan.prune_start {
                        Phase::Dense
                    } else if plan.prune_start >= plan.total_steps {
                        Phase::Dense
                    } else if t <= plan.prune_start + plan.prune_steps {
                        Phase::Pruning
                    } else {
                        Phase::FineTune
                    }
                }
                _ => {
                    if t == 1 {
                        Phase::Pruning
                    } else {
                        Phase::FineTune
                    }
                }
            }
        };

        let mut score_stats = None;
        if let Some(d) = decision {
            let new_mask = build_mask(&d.scores, d.rate, Some(&mask), plan.resurrection, &store)
                .map_err(|e| abort(step, e))?;
            mask = new_mask;
            keep = expand_keep(&store, &mask);
            apply_mask(&mut store, &mask).map_err(|e| abort(step, e))?;
            opt.zero_pruned(&keep);
            for (g, &k) in grad.iter_mut().zip(&keep) {
                if !k {
                    *g = 0.0;
                }
            }
            let n = d.scores.len() as f64;
            let mean = d.scores.iter().sum::<f64>() / n;
            let max = d.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            score_stats = Some((mean, max));
            observer.on_mask(t, &mask)?;
        }

        let mut flat = store.flat_all();
        opt.step(&mut flat, &grad, Some(&keep)).map_err(|e| abort(step, e))?;
        store.set_flat_all(&flat).map_err(|e| abort(step, e))?;

        let at_boundary = in_algorithm
            && (t == plan.total_steps
                || (plan.method == Method::SevenDyn
                    && (t == plan.prune_start || t == plan.prune_start + plan.prune_steps))
                || (plan.method == Method::SevenPre && t == plan.prune_steps));
        let eval_acc = if step % eval_every == 0 || at_boundary {
            let acc = eval_accuracy(&store, cfg, &eval_inputs, &eval_labels)
                .map_err(|e| abort(step, e))?;
            final_eval = acc;
            Some(acc)
        } else {
            None
        };

        // Pruned coordinates must still be exactly zero after the update.
        if step % eval_every == 0 || step == plan.warmup_steps + plan.total_steps {
            let theta = store.flat_prunable();
            for (v, keep_bit) in theta.iter().zip(mask.flat()) {
                if !keep_bit && *v != 0.0 {
                    return Err(Error::RunAborted {
                        iteration: step,
                        reason: format!("pruned coordinate drifted to {v}"),
                    });
                }
            }
        }

        final_loss = loss;
        observer.on_record(&MetricsRecord {
            run_id: run_id.clone(),
            seed: plan.seed,
            iteration: step,
            phase,
            loss,
            eval_acc,
            density: mask.density(),
            score_mean: score_stats.map(|s| s.0),
            score_max: score_stats.map(|s| s.1),
            diag_kind: None,
            diag_value: None,
        })?;
    }

    Ok(RunOutput {
        store,
        mask,
        final_loss,
        final_eval_acc: final_eval,
        score_state,
    })
}

/// Convenience wrapper collecting the metrics in memory.
pub fn run(
    plan: &RunPlan,
    cfg: &TransformerConfig,
    data: &Dataset,
) -> Result<(RunOutput, Vec<MetricsRecord>)> {
    let mut records = Vec::new();
    let mut collect = |r: &MetricsRecord| -> Result<()> {
        records.push(r.clone());
        Ok(())
    };
    let out = run_streaming(plan, cfg, data, &mut collect)?;
    Ok((out, records))
}

/// Observer that keeps every pruning-step mask, for nestedness and
/// density-trace checks.
#[derive(Default)]
pub struct MaskTrace {
    pub records: Vec<MetricsRecord>,
    pub masks: Vec<(usize, Mask)>,
}

impl RunObserver for MaskTrace {
    fn on_record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn on_mask(&mut self, iteration: usize, mask: &Mask) -> Result<()> {
        self.masks.push((iteration, mask.clone()));
        Ok(())
    }
}

fn gather_prunable(store: &ParamStore, grad_full: &[f64]) -> Vec<f64> {
    let coords = store.prunable_coords();
    grad_full
        .iter()
        .zip(&coords)
        .filter_map(|(g, &p)| if p { Some(*g) } else { None })
        .collect()
}
