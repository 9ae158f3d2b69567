//! Outer-loop optimization: AdamW with (0.9, 0.95) moments, global gradient
//! clipping at 0.1, decoupled weight decay 1e-4 (biases and norms exempt),
//! linear warmup over the first 2% of steps, and per-group learning rates
//! with cosine or constant schedules — the multi-stage fine-tuning recipe
//! realized over the toy model's parameter groups.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig, ParamId, ParamSet};
use crate::tasks::{Task, TaskInstance};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP: f64 = 0.1;
pub const WEIGHT_DECAY: f64 = 1e-4;
pub const WARMUP_FRAC: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// A named set of trainable parameters sharing a learning rate and schedule.
/// Frozen parameters belong to no group and receive no update.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    pub name: String,
    pub ids: Vec<ParamId>,
    pub lr: f64,
    pub schedule: Schedule,
    /// Extra exemption on top of the bias/norm rule.
    pub weight_decay_exempt: bool,
}

/// Learning-rate factor: linear warmup to 1 at exactly ceil(0.02 * total),
/// then the schedule shape.
pub fn lr_factor(schedule: Schedule, step: usize, total_steps: usize) -> f64 {
    let warm = ((WARMUP_FRAC * total_steps as f64).ceil() as usize).max(1);
    let warmup = (step as f64 / warm as f64).min(1.0);
    let shape = match schedule {
        Schedule::Constant => 1.0,
        Schedule::Cosine => {
            if step <= warm || total_steps <= warm {
                1.0
            } else {
                let progress = (step - warm) as f64 / (total_steps - warm) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * progress.min(1.0)).cos())
            }
        }
    };
    warmup * shape
}

struct Moments {
    m: Tensor,
    v: Tensor,
}

/// AdamW state over a fixed set of parameter groups.
pub struct Optimizer {
    pub groups: Vec<ParamGroup>,
    state: BTreeMap<ParamId, Moments>,
    pub step_index: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
}

impl Optimizer {
    pub fn new(groups: Vec<ParamGroup>, total_steps: usize) -> Self {
        Optimizer {
            groups,
            state: BTreeMap::new(),
            step_index: 0,
            total_steps,
            weight_decay: WEIGHT_DECAY,
        }
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.groups.iter().flat_map(|g| g.ids.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// One AdamW step over all groups. `grads` must hold a finite gradient
    /// for every trainable parameter.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<ParamId, Tensor>) -> Result<()> {
        for (&id, g) in grads {
            if !g.is_finite() {
                return Err(Error::config(format!(
                    "non-finite gradient for parameter '{}'",
                    params.get(id).name
                )));
            }
        }
        // global norm over every trainable gradient
        let mut sq = 0.0;
        for group in &self.groups {
            for &id in &group.ids {
                let g = grads.get(&id).ok_or_else(|| {
                    Error::config(format!("missing gradient for '{}'", params.get(id).name))
                })?;
                sq += g.data().iter().map(|v| v * v).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        let clip = if norm > GRAD_CLIP { GRAD_CLIP / norm } else { 1.0 };

        let t = self.step_index + 1; // bias correction is 1-indexed
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);

        for group in &self.groups {
            let lr = group.lr * lr_factor(group.schedule, self.step_index, self.total_steps);
            for &id in &group.ids {
                let g = &grads[&id];
                let exempt = group.weight_decay_exempt || params.get(id).kind.decay_exempt();
                let mo = self.state.entry(id).or_insert_with(|| Moments {
                    m: Tensor::zeros(g.shape()),
                    v: Tensor::zeros(g.shape()),
                });
                let mut value = params.value(id).clone();
                if !exempt && self.weight_decay != 0.0 {
                    for w in value.data_mut() {
                        *w -= lr * self.weight_decay * *w;
                    }
                }
                for i in 0..value.numel() {
                    let gi = g.data()[i] * clip;
                    let m = BETA1 * mo.m.data()[i] + (1.0 - BETA1) * gi;
                    let v = BETA2 * mo.v.data()[i] + (1.0 - BETA2) * gi * gi;
                    mo.m.data_mut()[i] = m;
                    mo.v.data_mut()[i] = v;
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    value.data_mut()[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                }
                if !value.is_finite() {
                    return Err(Error::config(format!(
                        "non-finite update for parameter '{}'",
                        params.get(id).name
                    )));
                }
                params.set_value(id, value);
            }
        }
        self.step_index += 1;
        Ok(())
    }
}

// ----- stage schedules -----------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub lr: f64,
    pub schedule: Schedule,
}

/// One row of the multi-stage recipe: a video-length surrogate label, the
/// full-scale context length it mirrors, the toy sequence length actually
/// trained, the trainable groups, and the step budget.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Stage {
    pub video_len: String,
    pub context_length: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub groups: Vec<GroupSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageSchedule {
    #[serde(rename = "stage")]
    pub stages: Vec<Stage>,
}

impl StageSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("schedule has no stages"));
        }
        for w in self.stages.windows(2) {
            if w[1].seq_len <= w[0].seq_len {
                return Err(Error::config(format!(
                    "sequence lengths must strictly increase across stages ({} then {})",
                    w[0].seq_len, w[1].seq_len
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: StageSchedule =
            toml::from_str(text).map_err(|e| Error::config(format!("schedule: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("schedule serializes")
    }

    /// The five-stage fine-tuning analog: stage one trains the new layers and
    /// gates at 1e-4 cosine with everything else at 1e-5 constant; later
    /// stages train only the new layers, gates, and attention projections at
    /// 1e-5 constant.
    pub fn default_multi_stage(seq_lens: [usize; 5], steps: [usize; 5]) -> Self {
        let ctx = crate::pipeline::ProfileConfig::stage_context_lengths();
        let labels = ["3 sec", "9 sec", "18 sec", "30 sec", "63 sec"];
        let stages = (0..5)
            .map(|i| Stage {
                video_len: labels[i].to_string(),
                context_length: ctx[i],
                seq_len: seq_lens[i],
                steps: steps[i],
                groups: if i == 0 {
                    vec![
                        GroupSpec { name: "ttt".into(), lr: 1e-4, schedule: Schedule::Cosine },
                        GroupSpec { name: "gates".into(), lr: 1e-4, schedule: Schedule::Cosine },
                        GroupSpec { name: "attn".into(), lr: 1e-5, schedule: Schedule::Constant },
                        GroupSpec { name: "pretrained".into(), lr: 1e-5, schedule: Schedule::Constant },
                    ]
                } else {
                    vec![
                        GroupSpec { name: "ttt".into(), lr: 1e-5, schedule: Schedule::Constant },
                        GroupSpec { name: "gates".into(), lr: 1e-5, schedule: Schedule::Constant },
                        GroupSpec { name: "attn".into(), lr: 1e-5, schedule: Schedule::Constant },
                    ]
                },
            })
            .collect();
        StageSchedule { stages }
    }
}

/// Build the optimizer for a stage: every named group must exist on the
/// model; parameters outside the stage's groups are frozen.
pub fn apply_stage(schedule: &StageSchedule, stage_index: usize, model: &Model) -> Result<Optimizer> {
    let stage = schedule
        .stages
        .get(stage_index)
        .ok_or_else(|| Error::config(format!("no stage {stage_index}")))?;
    let known = model.params.group_names();
    let mut groups = Vec::with_capacity(stage.groups.len());
    for spec in &stage.groups {
        if !known.contains(&spec.name.as_str()) {
            return Err(Error::config(format!(
                "unknown parameter group '{}' (model has {:?})",
                spec.name, known
            )));
        }
        let ids = model.params.ids_in_group(&spec.name);
        groups.push(ParamGroup {
            name: spec.name.clone(),
            ids,
            lr: spec.lr,
            schedule: spec.schedule,
            weight_decay_exempt: false,
        });
    }
    Ok(Optimizer::new(groups, stage.steps))
}

// ----- toy training --------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TrainPoint {
    pub stage: usize,
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub points: Vec<TrainPoint>,
    pub final_accuracy: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub batch_size: usize,
    pub eval_interval: usize,
    pub eval_instances: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { batch_size: 8, eval_interval: 50, eval_instances: 32 }
    }
}

/// Mean squared error over masked positions of one instance's forward pass.
fn instance_loss_and_grads(
    model: &Model,
    task: &Task,
    inst: &TaskInstance,
    trainable: &[ParamId],
) -> Result<(f64, Vec<Tensor>, Tensor)> {
    let mut g: Graph = Graph::new();
    let bound = model.params.bind(&mut g);
    let x = g.constant(inst.x.clone());
    let mask = model.attention_mask(task.spec.t, &task.spec.segments())?;
    let y = model.forward(&mut g, &bound, x, &mask)?;
    let target = g.constant(inst.target.clone());
    let mtensor = g.constant(inst.mask_tensor(task.spec.d));
    let diff = g.sub(y, target)?;
    let masked = g.mul(diff, mtensor)?;
    let sq = g.mul(masked, masked)?;
    let total = g.sum(sq)?;
    let denom = (inst.masked_count() * task.spec.d).max(1) as f64;
    let loss = g.scale(total, 1.0 / denom)?;
    let wrt: Vec<crate::graph::Var> = trainable.iter().map(|&id| bound.var(id)).collect();
    let grads = g.grad(loss, &wrt)?;
    let grad_values = grads.iter().map(|&v| g.value(v).clone()).collect();
    Ok((g.value(loss).item()?, grad_values, g.value(y).clone()))
}

/// Forward-only evaluation accuracy over fresh instances.
pub fn evaluate(model: &Model, task: &Task, start: u64, n: usize) -> Result<f64> {
    let mask = model.attention_mask(task.spec.t, &task.spec.segments())?;
    let mut correct = 0;
    let mut total = 0;
    for i in 0..n as u64 {
        let inst = task.instance(start + i);
        let mut g: Graph = Graph::new();
        let bound = model.params.bind(&mut g);
        let x = g.constant(inst.x.clone());
        let y = model.forward(&mut g, &bound, x, &mask)?;
        let (c, t) = task.score(g.value(y), &inst);
        correct += c;
        total += t;
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Run every stage of the schedule on one model. Deterministic for a fixed
/// seed: the instance stream is indexed, never re-sampled.
pub fn train_toy(
    model: &mut Model,
    task: &Task,
    schedule: &StageSchedule,
    settings: &TrainSettings,
    seed: u64,
) -> Result<TrainReport> {
    schedule.validate()?;
    let mut points = Vec::new();
    let mut instance_cursor: u64 = seed.wrapping_mul(1_000_003);
    const EVAL_STREAM_OFFSET: u64 = 0x7fff_ffff_0000_0000;

    for (stage_idx, stage) in schedule.stages.iter().enumerate() {
        let mut opt = apply_stage(schedule, stage_idx, model)?;
        let trainable = opt.trainable_ids();
        for step in 0..stage.steps {
            let batch = task.batch(instance_cursor, settings.batch_size);
            instance_cursor += settings.batch_size as u64;

            let mut batch_loss = 0.0;
            let mut acc: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            for inst in &batch {
                let (loss, grads, _) = instance_loss_and_grads(model, task, inst, &trainable)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        msg: format!("loss became non-finite in stage {stage_idx}"),
                    });
                }
                batch_loss += loss;
                for (&id, gt) in trainable.iter().zip(&grads) {
                    let scaled = gt.scale(1.0 / settings.batch_size as f64)?;
                    match acc.get_mut(&id) {
                        Some(prev) => *prev = prev.add(&scaled)?,
                        None => {
                            acc.insert(id, scaled);
                        }
                    }
                }
            }
            batch_loss /= settings.batch_size as f64;
            opt.step(&mut model.params, &acc)?;

            if step % settings.eval_interval == 0 || step + 1 == stage.steps {
                let accuracy = evaluate(model, task, EVAL_STREAM_OFFSET, settings.eval_instances)?;
                points.push(TrainPoint { stage: stage_idx, step, loss: batch_loss, accuracy });
            }
        }
    }
    let final_point = points.last().cloned().unwrap_or(TrainPoint {
        stage: 0,
        step: 0,
        loss: f64::NAN,
        accuracy: 0.0,
    });
    Ok(TrainReport {
        final_accuracy: final_point.accuracy,
        final_loss: final_point.loss,
        points,
    })
}

/// Convenience single-stage schedule for task runs.
pub fn single_stage(seq_len: usize, steps: usize, groups: Vec<GroupSpec>) -> StageSchedule {
    StageSchedule {
        stages: vec![Stage {
            video_len: "toy".into(),
            context_length: seq_len,
            seq_len,
            steps,
            groups,
        }],
    }
}

/// All four groups trainable, new layers hot: the stage-one analog used by
/// toy task runs.
pub fn toy_groups(model_cfg: &ModelConfig, hot_lr: f64, base_lr: f64) -> Vec<GroupSpec> {
    let mut groups = vec![
        GroupSpec { name: "attn".into(), lr: base_lr, schedule: Schedule::Constant },
        GroupSpec { name: "pretrained".into(), lr: base_lr, schedule: Schedule::Constant },
    ];
    if !matches!(
        model_cfg.variant,
        crate::model::Variant::LocalAttn | crate::model::Variant::Swa | crate::model::Variant::FullAttn
    ) {
        groups.push(GroupSpec { name: "ttt".into(), lr: hot_lr, schedule: Schedule::Cosine });
        groups.push(GroupSpec { name: "gates".into(), lr: hot_lr, schedule: Schedule::Cosine });
    }
    groups
}
