use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{global_parts, loss_deformation, loss_vnet};
use super::{Stage, TrainConfig, TrainRecord, TrainedModel, Variant, NetConfigs};
use crate::metrics::dsc_prob;
use crate::net::{normalize_intensity, Stn, VNet};
use crate::nn::{AdamState, ParamSet, Tape, Tensor, Var};
use crate::volume::{apply_augment, AugmentParams, Mask3D, ShapePrior, Volume3D};
use crate::{par, Error, Result};

/// One training or validation volume with its target and optional prior.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub image: &'a Volume3D,
    pub prior: Option<&'a ShapePrior>,
    pub target: &'a Mask3D,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub records: Vec<TrainRecord>,
}

/// State handed to the observer after every epoch.
pub struct EpochView<'a> {
    pub record: &'a TrainRecord,
    pub vnet: &'a VNet,
    pub stn: Option<&'a Stn>,
}

/// Order-sensitive hash of every parameter bit pattern.
pub fn params_checksum(ps: &ParamSet) -> u64 {
    let mut h = DefaultHasher::new();
    for p in ps.iter() {
        p.name.hash(&mut h);
        p.value.shape().hash(&mut h);
        for v in p.value.data() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

pub fn train(train_set: &[Sample], val_set: &[Sample], cfg: &TrainConfig, nets: &NetConfigs) -> Result<TrainOutcome> {
    train_observed(train_set, val_set, cfg, nets, None, &mut |_| ControlFlow::Continue(()))
}

/// [`train`] with periodic checkpoints under `checkpoint_dir` and a per-epoch
/// callback; `ControlFlow::Break` ends training after that epoch.
pub fn train_observed(
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    nets: &NetConfigs,
    checkpoint_dir: Option<&Path>,
    observer: &mut dyn FnMut(&EpochView) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.variant == Variant::Dp {
        return Ok(TrainOutcome { model: TrainedModel::dp(cfg.structure), records: Vec::new() });
    }
    let first = train_set.first().ok_or_else(|| Error::InvalidArgument("empty training set".into()))?;
    let dims = first.image.dims();
    for s in train_set.iter().chain(val_set) {
        if s.image.dims() != dims || s.target.dims() != dims {
            return Err(Error::Shape(format!("samples mix dims {:?} and {:?}", dims, s.image.dims())));
        }
        if cfg.variant.needs_prior() {
            match s.prior {
                None => return Err(Error::MissingPriors(format!("variant {} needs DP priors", cfg.variant))),
                Some(p) if p.mask().dims() != dims => {
                    return Err(Error::Shape(format!("prior {:?} vs image {:?}", p.mask().dims(), dims)))
                }
                _ => {}
            }
        }
    }
    let mut t = Trainer::new(cfg, nets, dims)?;
    let spe = cfg.samples_per_epoch.unwrap_or(train_set.len());
    let mut order: Vec<usize> = Vec::new();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let stage = cfg.stage_at(epoch);
        let mut picks = Vec::with_capacity(spe);
        while picks.len() < spe {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut t.rng);
                order.reverse();
            }
            picks.push(order.pop().expect("refilled"));
        }
        let mut sums = [0.0; 3];
        let mut seen = 0.0;
        for chunk in picks.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let l = t.step(&batch, stage).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                e => e,
            })?;
            if !l.objective.is_finite() {
                return Err(Error::Diverged { epoch, loss: l.objective });
            }
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip(l.parts) {
                *s += w * v.unwrap_or(0.0);
            }
            seen += w;
            t.last = l.parts;
        }
        let mean = |k: usize| t.last[k].map(|_| sums[k] / seen);
        let mut rec = TrainRecord {
            epoch,
            stage: stage.id(),
            loss_vnet: mean(0),
            loss_deformation: mean(1),
            loss_global: mean(2),
            val_dsc_endo: None,
            val_dsc_myo: None,
            val_dsc_epi: None,
        };
        let last = epoch + 1 == cfg.epochs;
        if !val_set.is_empty() && ((epoch + 1) % cfg.validate_every == 0 || last) {
            rec.set_val_dsc(cfg.structure, validation_dsc(&t.model(), val_set)?);
        }
        if let Some(dir) = checkpoint_dir {
            if (epoch + 1) % cfg.checkpoint_every == 0 || last {
                t.model().save(&dir.join(format!("epoch_{:05}", epoch + 1)))?;
            }
        }
        let flow = observer(&EpochView { record: &rec, vnet: &t.vnet, stn: t.stn.as_ref() });
        records.push(rec);
        if flow.is_break() {
            break;
        }
    }
    Ok(TrainOutcome { model: t.model(), records })
}

fn validation_dsc(model: &TrainedModel, val_set: &[Sample]) -> Result<f64> {
    let scores = par::map_slice(val_set, |s| {
        let p = model.predict(s.image, s.prior)?;
        dsc_prob(&p, s.target, 0.5)
    });
    let scores = scores.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

struct StepLosses {
    /// V-Net, deformation and joint loss, where the stage computes them.
    parts: [Option<f64>; 3],
    objective: f64,
}

struct Trainer<'c> {
    cfg: &'c TrainConfig,
    vnet: VNet,
    stn: Option<Stn>,
    adam_v: AdamState,
    adam_s: Option<AdamState>,
    rng: ChaCha8Rng,
    dims: [usize; 3],
    last: [Option<f64>; 3],
}

fn decay_vars(ps: &ParamSet, vars: &[Var]) -> Vec<Var> {
    ps.iter().zip(vars).filter(|(p, _)| p.decay).map(|(_, &v)| v).collect()
}

fn grads_for(g: &mut crate::nn::Gradients, vars: &[Var]) -> Vec<Option<Vec<f64>>> {
    vars.iter().map(|&v| g.take(v)).collect()
}

impl<'c> Trainer<'c> {
    fn new(cfg: &'c TrainConfig, nets: &NetConfigs, dims: [usize; 3]) -> Result<Self> {
        let mut vcfg = nets.vnet.clone();
        vcfg.in_channels = cfg.variant.in_channels();
        if vcfg.out_channels != 1 {
            return Err(Error::InvalidArgument("training fits one structure; set out_channels to 1".into()));
        }
        let vnet = VNet::new(vcfg, cfg.seed)?;
        let stn = if cfg.variant.has_stn() {
            if dims != [nets.stn.input_size; 3] {
                return Err(Error::Shape(format!("stn input_size {} vs volumes {:?}", nets.stn.input_size, dims)));
            }
            Some(Stn::new(nets.stn.clone(), cfg.seed.wrapping_add(1))?)
        } else {
            None
        };
        Ok(Trainer {
            adam_v: AdamState::new(vnet.params()),
            adam_s: stn.as_ref().map(|s| AdamState::new(s.params())),
            cfg,
            vnet,
            stn,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_6e64_6f6d_6e65),
            dims,
            last: [None; 3],
        })
    }

    fn model(&self) -> TrainedModel {
        TrainedModel {
            variant: self.cfg.variant,
            structure: self.cfg.structure,
            vnet: Some(self.vnet.clone()),
            stn: self.stn.clone(),
        }
    }

    /// Network input, priors and targets for a batch, augmented when configured.
    fn tensors(&mut self, batch: &[Sample]) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
        let ch = self.cfg.variant.in_channels();
        let v: usize = self.dims.iter().product();
        let n = batch.len();
        let (mut x, mut priors, mut target) =
            (Vec::with_capacity(n * ch * v), Vec::with_capacity(n * v), Vec::with_capacity(n * v));
        for s in batch {
            let mut masks = vec![s.target.clone()];
            if let Some(p) = s.prior {
                masks.push(p.mask().clone());
            }
            let (img, masks) = if self.cfg.augment {
                apply_augment(s.image, &masks, &AugmentParams::sample(&mut self.rng))?
            } else {
                (s.image.clone(), masks)
            };
            x.extend(normalize_intensity(&img));
            let prior = masks.get(1).map(Mask3D::to_f64).unwrap_or_else(|| vec![0.0; v]);
            if ch == 2 {
                x.extend_from_slice(&prior);
            }
            priors.extend(prior);
            target.extend(masks[0].to_f64());
        }
        let [l, w, h] = self.dims;
        Ok((Tensor::new(vec![n, ch, l, w, h], x)?, priors, target))
    }

    fn step(&mut self, batch: &[Sample], stage: Stage) -> Result<StepLosses> {
        let (x, priors, target) = self.tensors(batch)?;
        let l2 = self.cfg.l2_coeff;
        let train_v = stage != Stage::Deformation;
        let mut tape = Tape::new();
        let vv = self.vnet.bind(&mut tape, train_v);
        let xv = tape.constant(x);
        let z = self.vnet.forward(&mut tape, &vv, xv, train_v, &mut self.rng)?;
        let w1 = decay_vars(self.vnet.params(), &vv);
        let (loss, parts, sv) = match stage {
            Stage::VNet => {
                let l = loss_vnet(&mut tape, z, &target, &w1, l2)?;
                (l, [Some(tape.value(l).item()), None, None], None)
            }
            Stage::Deformation | Stage::Joint => {
                let stn = self.stn.as_ref().expect("stage 2/3 only with a deformation module");
                let n = batch.len();
                let [l, w, h] = self.dims;
                let p = tape.sigmoid(z);
                let sv = stn.bind(&mut tape, true);
                let pr = tape.constant(Tensor::new(vec![n, 1, l, w, h], priors)?);
                let sin = tape.concat(p, pr)?;
                let theta = stn.forward(&mut tape, &sv, sin)?;
                let warped = tape.warp(p, theta)?;
                let w2 = decay_vars(stn.params(), &sv);
                if stage == Stage::Deformation {
                    let l = loss_deformation(&mut tape, warped, &target, &w2, l2)?;
                    (l, [None, Some(tape.value(l).item()), None], Some(sv))
                } else {
                    let g = global_parts(&mut tape, z, warped, &target, &w1, &w2, self.cfg.loss_weights(), l2)?;
                    let parts = [g.vnet, g.deformation, g.total].map(|v| Some(tape.value(v).item()));
                    (g.total, parts, Some(sv))
                }
            }
        };
        let objective = tape.value(loss).item();
        if !objective.is_finite() {
            return Ok(StepLosses { parts, objective });
        }
        let mut grads = tape.backward(loss)?;
        if train_v {
            let g = grads_for(&mut grads, &vv);
            self.adam_v.step(&self.cfg.adam, self.vnet.params_mut(), &g)?;
        }
        if let (Some(sv), Some(stn), Some(adam)) = (sv, self.stn.as_mut(), self.adam_s.as_mut()) {
            let g = grads_for(&mut grads, &sv);
            adam.step(&self.cfg.adam, stn.params_mut(), &g)?;
        }
        Ok(StepLosses { parts, objective })
    }
}
