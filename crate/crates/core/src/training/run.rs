use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{CouplingConfig, ModelKind, StagePlan, StageSpec, TrainConfig};
use super::{correction_direction, lambda_schedule, loss_forward_pretrain, loss_localization, weighted_forward_error};
use crate::autodiff::{Tape, Var};
use crate::baselines::BaselineModel;
use crate::dataset::{PreparedSample, PreparedSplit};
use crate::forward_model::{coordinate_gradient, mismatch, ForwardModel};
use crate::geometry::{Point, SplitName};
use crate::graphs::{ForwardTopology, InverseGraph, GEOMETRY_WIDTH};
use crate::inverse_model::InverseModel;
use crate::nn::{clip_grad_norm, squared_distance, Adam, Bound, ParamRecord, ParamStore, PlateauDecay};
use crate::tensor::Matrix;
use crate::{Error, Result, Scalar};

/// Any model mapping an inverse graph to a coordinate.
#[derive(Clone, Debug)]
pub enum Localizer {
    Wgn(InverseModel),
    Baseline(BaselineModel),
}

impl Localizer {
    pub fn new<T: Scalar>(cfg: &TrainConfig, store: &mut ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let in_dim = GEOMETRY_WIDTH + 2 * cfg.inverse.bins;
        Ok(match cfg.model.baseline() {
            Some(kind) => Self::Baseline(BaselineModel::new(kind, &cfg.baseline, in_dim, store, rng)?),
            None => Self::Wgn(InverseModel::new(cfg.inverse.clone(), store, rng)?),
        })
    }

    /// Training-mode forward pass when `rng` is given, evaluation otherwise.
    pub fn forward<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        graph: &InverseGraph<T>,
        tape: &'t Tape<T>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let feats = tape.constant(graph.edge_features.clone());
        match self {
            Self::Wgn(m) => m.forward(p, graph, feats, rng),
            Self::Baseline(m) => Ok(m.forward(p, graph, feats, rng)),
        }
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, graph: &InverseGraph<T>) -> Result<Point> {
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let v = self.forward(&p, graph, &tape, None)?.value();
        let pt = [v[(0, 0)].to_f64_lossy(), v[(0, 1)].to_f64_lossy()];
        if !pt.iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("non-finite coordinate prediction".into()));
        }
        Ok(pt)
    }
}

/// Per-step loss components, averaged over an epoch in the log.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub localization: f64,
    pub forward: f64,
    pub correction: f64,
    pub lambda: f64,
    pub mu: f64,
}

impl LossParts {
    fn is_finite(&self) -> bool {
        [self.total, self.localization, self.forward, self.correction]
            .iter()
            .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossParts, weight: f64) {
        self.total += other.total * weight;
        self.localization += other.localization * weight;
        self.forward += other.forward * weight;
        self.correction += other.correction * weight;
        self.lambda = other.lambda;
        self.mu = other.mu;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub train: LossParts,
    /// Metric monitored by the plateau scheduler.
    pub val_metric: f64,
    /// Checkpoint selection score when the stage selects checkpoints.
    pub val_score: Option<f64>,
    pub clipped_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedCheckpoint {
    pub stage: u8,
    pub epoch: usize,
    pub score: f64,
}

struct ValMetrics {
    plateau: f64,
    selection: f64,
}

trait Objective<T: Scalar> {
    fn batch_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        batch: &[&PreparedSample<T>],
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t, T>, LossParts)>;

    fn validate(&self, store: &ParamStore<T>) -> Result<ValMetrics>;
}

fn coordinate_mse<T: Scalar>(
    localizer: &Localizer,
    store: &ParamStore<T>,
    samples: &[&PreparedSample<T>],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("validation set has no damaged samples".into()));
    }
    let mut acc = 0.0;
    for s in samples {
        let p = localizer.predict(store, &s.graph)?;
        let t = s.target();
        acc += (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
    }
    Ok(acc / samples.len() as f64)
}

struct LocalizationObjective<'a, T> {
    localizer: &'a Localizer,
    val_damaged: Vec<&'a PreparedSample<T>>,
}

impl<T: Scalar> Objective<T> for LocalizationObjective<'_, T> {
    fn batch_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        batch: &[&PreparedSample<T>],
        _epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t, T>, LossParts)> {
        let preds = batch
            .iter()
            .map(|s| self.localizer.forward(p, &s.graph, tape, Some(&mut *rng)))
            .collect::<Result<Vec<_>>>()?;
        let targets: Vec<Point> = batch.iter().map(|s| s.target()).collect();
        let loss = loss_localization(&preds, &targets);
        let v = loss.scalar_value().to_f64_lossy();
        Ok((
            loss,
            LossParts {
                total: v,
                localization: v,
                ..LossParts::default()
            },
        ))
    }

    fn validate(&self, store: &ParamStore<T>) -> Result<ValMetrics> {
        let mse = coordinate_mse(self.localizer, store, &self.val_damaged)?;
        Ok(ValMetrics {
            plateau: mse,
            selection: mse,
        })
    }
}

struct ForwardPretrainObjective<'a, T> {
    forward: &'a ForwardModel,
    topo: &'a ForwardTopology,
    eps: f64,
    val: Vec<&'a PreparedSample<T>>,
}

fn candidate_var<T: Scalar>(tape: &Tape<T>, p: Point) -> Var<'_, T> {
    tape.constant(Matrix::row_vector(vec![T::lit(p[0]), T::lit(p[1])]))
}

impl<T: Scalar> Objective<T> for ForwardPretrainObjective<'_, T> {
    fn batch_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        batch: &[&PreparedSample<T>],
        _epoch: usize,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t, T>, LossParts)> {
        let preds: Vec<Var<'t, T>> = batch
            .iter()
            .map(|s| {
                let feats = self.topo.features_on_tape(tape, candidate_var(tape, s.target()));
                self.forward.forward(p, self.topo, feats)
            })
            .collect();
        let targets: Vec<&[T]> = batch.iter().map(|s| s.delta_e.as_slice()).collect();
        let loss = loss_forward_pretrain(&preds, &targets, self.eps);
        let v = loss.scalar_value().to_f64_lossy();
        Ok((
            loss,
            LossParts {
                total: v,
                forward: v,
                ..LossParts::default()
            },
        ))
    }

    fn validate(&self, store: &ParamStore<T>) -> Result<ValMetrics> {
        if self.val.is_empty() {
            return Err(Error::Config("empty validation set".into()));
        }
        let tape = Tape::new();
        let p = store.bind(&tape, false);
        let mut acc = 0.0;
        for s in &self.val {
            let feats = self.topo.features_on_tape(&tape, candidate_var(&tape, s.target()));
            let pred = self.forward.forward(&p, self.topo, feats);
            acc += weighted_forward_error(pred, &s.delta_e, self.eps).scalar_value().to_f64_lossy();
        }
        let loss = acc / (self.val.len() * self.topo.n_paths) as f64;
        Ok(ValMetrics {
            plateau: loss,
            selection: loss,
        })
    }
}

/// Frozen forward branch and coupling settings for Stage III.
pub struct CoupledContext<'a, T> {
    pub localizer: &'a Localizer,
    pub forward: &'a ForwardModel,
    pub forward_params: &'a ParamStore<T>,
    pub topo: &'a ForwardTopology,
    pub coupling: &'a CouplingConfig,
}

/// `L_loc(all) + λ(epoch)·L_fwd(damaged) + μ·L_corr(damaged)` on one batch.
/// The forward parameters enter as constants; the correction direction is
/// computed on a detached probe and carries no gradient.
pub fn stage3_batch_loss<'t, T: Scalar>(
    ctx: &CoupledContext<'_, T>,
    tape: &'t Tape<T>,
    p: &Bound<'t, T>,
    batch: &[&PreparedSample<T>],
    epoch: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(Var<'t, T>, LossParts)> {
    let fwd = ctx.forward_params.bind(tape, false);
    let preds = batch
        .iter()
        .map(|s| ctx.localizer.forward(p, &s.graph, tape, rng.as_deref_mut()))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Point> = batch.iter().map(|s| s.target()).collect();
    let loc = loss_localization(&preds, &targets);

    let mut mismatches = Vec::new();
    let mut corrections = Vec::new();
    for ((s, &pred), t) in batch.iter().zip(&preds).zip(&targets) {
        if !s.is_damaged() {
            continue;
        }
        let feats = ctx.topo.features_on_tape(tape, pred);
        let implied = ctx.forward.forward(&fwd, ctx.topo, feats);
        mismatches.push(mismatch(implied, &s.delta_e));

        let at = pred.value();
        let g = coordinate_gradient(ctx.forward, ctx.forward_params, ctx.topo, [at[(0, 0)], at[(0, 1)]], &s.delta_e)?;
        let d = correction_direction(g, ctx.coupling.eps_grad);
        let alpha = T::lit(ctx.coupling.alpha);
        let shift = tape.constant(Matrix::row_vector(vec![-alpha * d[0], -alpha * d[1]]));
        let physical = pred.add_row(shift);
        corrections.push(squared_distance(physical, candidate_var(tape, *t)));
    }
    let mean_of = |terms: &[Var<'t, T>]| -> Var<'t, T> {
        if terms.is_empty() {
            tape.constant(Matrix::scalar(T::zero()))
        } else {
            Var::concat_rows(terms).mean()
        }
    };
    let fwd_term = mean_of(&mismatches);
    let corr_term = mean_of(&corrections);
    let lambda = lambda_schedule(epoch, ctx.coupling);
    let mu = ctx.coupling.mu;
    let total = loc
        .add(fwd_term.scale(T::lit(lambda)))
        .add(corr_term.scale(T::lit(mu)));
    let parts = LossParts {
        total: total.scalar_value().to_f64_lossy(),
        localization: loc.scalar_value().to_f64_lossy(),
        forward: fwd_term.scalar_value().to_f64_lossy(),
        correction: corr_term.scalar_value().to_f64_lossy(),
        lambda,
        mu,
    };
    Ok((total, parts))
}

/// Coordinate MSE plus forward-consistency MSE at the predicted coordinates,
/// over damaged validation samples; returns `(s_val, coord, forward)`.
pub fn validation_score<T: Scalar>(
    ctx: &CoupledContext<'_, T>,
    localizer_params: &ParamStore<T>,
    val_damaged: &[&PreparedSample<T>],
) -> Result<(f64, f64, f64)> {
    if val_damaged.is_empty() {
        return Err(Error::Config("validation set has no damaged samples".into()));
    }
    let mut coord = 0.0;
    let mut fwd = 0.0;
    for s in val_damaged {
        let p = ctx.localizer.predict(localizer_params, &s.graph)?;
        let t = s.target();
        coord += (p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2);
        let implied = ctx.forward.predict(ctx.forward_params, ctx.topo, p)?;
        let m: f64 = implied
            .iter()
            .zip(&s.delta_e)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
            .sum::<f64>()
            / implied.len() as f64;
        fwd += m;
    }
    let n = val_damaged.len() as f64;
    Ok(((coord + fwd) / n, coord / n, fwd / n))
}

struct CoupledObjective<'a, T> {
    ctx: CoupledContext<'a, T>,
    val_damaged: Vec<&'a PreparedSample<T>>,
}

impl<T: Scalar> Objective<T> for CoupledObjective<'_, T> {
    fn batch_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &Bound<'t, T>,
        batch: &[&PreparedSample<T>],
        epoch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'t, T>, LossParts)> {
        stage3_batch_loss(&self.ctx, tape, p, batch, epoch, Some(rng))
    }

    fn validate(&self, store: &ParamStore<T>) -> Result<ValMetrics> {
        let (score, coord, _) = validation_score(&self.ctx, store, &self.val_damaged)?;
        Ok(ValMetrics {
            plateau: coord,
            selection: score,
        })
    }
}

struct StageOutcome<T> {
    best: Option<(ParamStore<T>, SelectedCheckpoint)>,
}

#[allow(clippy::too_many_arguments)]
fn train_stage<T: Scalar, O: Objective<T>>(
    stage: u8,
    objective: &O,
    store: &mut ParamStore<T>,
    train: &[&PreparedSample<T>],
    spec: StageSpec,
    plan: &StagePlan,
    rng: &mut ChaCha8Rng,
    log: &mut Vec<EpochLog>,
    select: bool,
) -> Result<StageOutcome<T>> {
    if train.is_empty() {
        return Err(Error::InsufficientData(format!("stage {stage} has no training samples")));
    }
    let mut adam = Adam::new(spec.lr);
    let mut plateau = PlateauDecay::new(plan.plateau_factor, plan.plateau_patience);
    let mut lr = spec.lr;
    let mut best: Option<(ParamStore<T>, SelectedCheckpoint)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..spec.epochs {
        order.shuffle(rng);
        let mut sums = LossParts::default();
        let mut clipped = 0;
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<&PreparedSample<T>> = chunk.iter().map(|&i| train[i]).collect();
            let grads = {
                let tape = Tape::new();
                let p = store.bind(&tape, true);
                let (loss, parts) = objective.batch_loss(&tape, &p, &batch, epoch, rng)?;
                if !parts.is_finite() {
                    let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
                    return Err(Error::TrainingAborted {
                        stage,
                        epoch,
                        msg: format!("non-finite loss {parts:?} on batch {ids:?} at lr {lr}"),
                    });
                }
                sums.accumulate(&parts, batch.len() as f64);
                p.gradients(&tape.backward(loss))
            };
            let mut grads = grads;
            let norm = clip_grad_norm(&mut grads, plan.grad_clip);
            if !norm.is_finite() {
                return Err(Error::TrainingAborted {
                    stage,
                    epoch,
                    msg: format!("non-finite gradient norm at lr {lr}"),
                });
            }
            if norm > plan.grad_clip {
                clipped += 1;
            }
            adam.lr = lr;
            adam.step(store, &grads);
        }
        if !store.is_finite() {
            return Err(Error::TrainingAborted {
                stage,
                epoch,
                msg: "parameters became non-finite".into(),
            });
        }
        let n = train.len() as f64;
        let train_parts = LossParts {
            total: sums.total / n,
            localization: sums.localization / n,
            forward: sums.forward / n,
            correction: sums.correction / n,
            lambda: sums.lambda,
            mu: sums.mu,
        };
        let val = objective.validate(store)?;
        if !val.plateau.is_finite() || !val.selection.is_finite() {
            return Err(Error::TrainingAborted {
                stage,
                epoch,
                msg: "non-finite validation metric".into(),
            });
        }
        log.push(EpochLog {
            stage,
            epoch,
            lr,
            train: train_parts,
            val_metric: val.plateau,
            val_score: select.then_some(val.selection),
            clipped_steps: clipped,
        });
        log::debug!(
            "stage {stage} epoch {epoch}: loss {:.6} val {:.6} lr {lr:.2e}",
            train_parts.total,
            val.plateau
        );
        if select && best.as_ref().is_none_or(|(_, b)| val.selection < b.score) {
            best = Some((
                store.clone(),
                SelectedCheckpoint {
                    stage,
                    epoch,
                    score: val.selection,
                },
            ));
        }
        lr = plateau.observe(val.plateau, lr);
    }
    Ok(StageOutcome { best })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelKind,
    pub split: SplitName,
    pub seed: u64,
    pub config: TrainConfig,
    pub config_hash: String,
    pub bin_indices: Vec<usize>,
    pub e_max: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub localizer_parameters: usize,
    pub forward_parameters: Option<usize>,
    pub epochs: Vec<EpochLog>,
    pub selected: Option<SelectedCheckpoint>,
    pub localizer_checksum: String,
    pub forward_checksum_before_stage3: Option<String>,
    pub forward_checksum_after_stage3: Option<String>,
}

/// Parameters and metadata persisted for a trained run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ModelKind,
    pub config: TrainConfig,
    pub selected: Option<SelectedCheckpoint>,
    pub localizer: ParamRecord,
    pub localizer_checksum: String,
    pub forward: Option<ParamRecord>,
    pub forward_checksum: Option<String>,
}

pub struct TrainedRun<T> {
    pub manifest: RunManifest,
    pub localizer: Localizer,
    pub localizer_params: ParamStore<T>,
    pub forward: Option<(ForwardModel, ParamStore<T>)>,
    /// Localiser parameters after the last epoch, before checkpoint
    /// selection. Not persisted.
    pub last_localizer_params: Option<ParamStore<T>>,
}

impl<T: Scalar> TrainedRun<T> {
    pub fn predict(&self, sample: &PreparedSample<T>) -> Result<Point> {
        self.localizer.predict(&self.localizer_params, &sample.graph)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.manifest.model,
            config: self.manifest.config.clone(),
            selected: self.manifest.selected,
            localizer: self.localizer_params.to_record(),
            localizer_checksum: self.localizer_params.checksum(),
            forward: self.forward.as_ref().map(|(_, s)| s.to_record()),
            forward_checksum: self.forward.as_ref().map(|(_, s)| s.checksum()),
        }
    }

    /// Rebuilds models from a checkpoint, verifying parameter names, shapes
    /// and checksums.
    pub fn from_checkpoint(ck: &Checkpoint, manifest: RunManifest) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let restore = |template: &ParamStore<T>, rec: &ParamRecord, expected: &str| -> Result<ParamStore<T>> {
            let store = ParamStore::<T>::from_record(rec)?;
            let same_layout = store.len() == template.len()
                && template
                    .iter()
                    .all(|(k, v)| store.get(k).is_some_and(|w| w.shape() == v.shape()));
            if !same_layout {
                return Err(Error::Data("checkpoint parameters do not match the model architecture".into()));
            }
            if store.checksum() != expected {
                return Err(Error::Data("checkpoint checksum mismatch".into()));
            }
            Ok(store)
        };
        let mut template = ParamStore::new();
        let localizer = Localizer::new(&ck.config, &mut template, &mut rng)?;
        let localizer_params = restore(&template, &ck.localizer, &ck.localizer_checksum)?;
        let forward = match (&ck.forward, &ck.forward_checksum) {
            (Some(rec), Some(sum)) => {
                let mut template = ParamStore::new();
                let model = ForwardModel::new(ck.config.forward.clone(), &mut template, &mut rng)?;
                Some((model, restore(&template, rec, sum)?))
            }
            _ => None,
        };
        Ok(Self {
            manifest,
            localizer,
            localizer_params,
            forward,
            last_localizer_params: None,
        })
    }
}

/// Runs the training protocol of `cfg.model` on a prepared split.
///
/// `wgn-coupled`: Stage I (inverse, L_loc), Stage II (forward, weighted
/// pretraining loss, best validation epoch kept), Stage III (inverse only,
/// coupled objective, best `s_val` kept). All other kinds train the
/// localiser on L_loc for the Stage I and Stage III budgets and keep the best
/// validation coordinate MSE of the second phase.
pub fn run_stages<T: Scalar>(prepared: &PreparedSplit<T>, cfg: &TrainConfig, seed: u64) -> Result<TrainedRun<T>> {
    cfg.validate()?;
    if prepared.bins() != cfg.inverse.bins {
        return Err(Error::Config(format!(
            "prepared data has {} bins, model expects {}",
            prepared.bins(),
            cfg.inverse.bins
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD1CE_5EED);
    let mut localizer_params = ParamStore::new();
    let localizer = Localizer::new(cfg, &mut localizer_params, &mut init_rng)?;
    let train: Vec<&PreparedSample<T>> = prepared.train.iter().collect();
    let val_damaged: Vec<&PreparedSample<T>> = prepared.val.iter().filter(|s| s.is_damaged()).collect();
    let plan = &cfg.plan;
    let mut log = Vec::new();

    let loc_objective = LocalizationObjective {
        localizer: &localizer,
        val_damaged: val_damaged.clone(),
    };
    train_stage(1, &loc_objective, &mut localizer_params, &train, plan.stage1, plan, &mut data_rng, &mut log, false)?;

    let topo = prepared.forward_topology();
    let mut forward = None;
    let mut checksums = (None, None);
    let selected;
    let last;
    if cfg.model == ModelKind::WgnCoupled {
        let mut fwd_params = ParamStore::new();
        let fwd_model = ForwardModel::new(cfg.forward.clone(), &mut fwd_params, &mut init_rng)?;
        let val_all: Vec<&PreparedSample<T>> = prepared.val.iter().collect();
        let objective = ForwardPretrainObjective {
            forward: &fwd_model,
            topo: &topo,
            eps: cfg.coupling.eps_weight,
            val: val_all,
        };
        let outcome = train_stage(2, &objective, &mut fwd_params, &train, plan.stage2, plan, &mut data_rng, &mut log, true)?;
        if let Some((best, _)) = outcome.best {
            fwd_params = best;
        }
        let before = fwd_params.checksum();
        let objective = CoupledObjective {
            ctx: CoupledContext {
                localizer: &localizer,
                forward: &fwd_model,
                forward_params: &fwd_params,
                topo: &topo,
                coupling: &cfg.coupling,
            },
            val_damaged: val_damaged.clone(),
        };
        let outcome = train_stage(3, &objective, &mut localizer_params, &train, plan.stage3, plan, &mut data_rng, &mut log, true)?;
        let after = fwd_params.checksum();
        if before != after {
            return Err(Error::TrainingAborted {
                stage: 3,
                epoch: plan.stage3.epochs,
                msg: "forward parameters changed during stage III".into(),
            });
        }
        last = localizer_params.clone();
        selected = outcome.best.map(|(best, info)| {
            localizer_params = best;
            info
        });
        checksums = (Some(before), Some(after));
        forward = Some((fwd_model, fwd_params));
    } else {
        let outcome = train_stage(3, &loc_objective, &mut localizer_params, &train, plan.stage3, plan, &mut data_rng, &mut log, true)?;
        last = localizer_params.clone();
        selected = outcome.best.map(|(best, info)| {
            localizer_params = best;
            info
        });
    }

    let manifest = RunManifest {
        model: cfg.model,
        split: prepared.assignment.spec.name,
        seed,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        bin_indices: prepared.bin_indices.clone(),
        e_max: prepared.e_max,
        n_train: prepared.train.len(),
        n_val: prepared.val.len(),
        n_test: prepared.test.len(),
        localizer_parameters: localizer_params.parameter_count(),
        forward_parameters: forward.as_ref().map(|(_, s)| s.parameter_count()),
        epochs: log,
        selected,
        localizer_checksum: localizer_params.checksum(),
        forward_checksum_before_stage3: checksums.0,
        forward_checksum_after_stage3: checksums.1,
    };
    Ok(TrainedRun {
        manifest,
        localizer,
        localizer_params,
        forward,
        last_localizer_params: Some(last),
    })
}
