use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::Dataset;
use crate::error::{DressError, Result};
use crate::net::params::ParamStore;
use crate::net::spec::NetworkSpec;
use crate::sampling::{allocate_with, sample_masks_with, validate_levels, MaskSet, SubnetMask, Support};
use crate::train::common::{empty_mask, finetune, frozen_on, mask_minus};
use crate::train::record::RunRecord;

/// Fractions of a target sparsity applied over successive pruning rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneScheduler {
    pub fractions: Vec<f64>,
    pub finetune_epochs: usize,
}

impl PruneScheduler {
    pub fn new(fractions: Vec<f64>, finetune_epochs: usize) -> Result<Self> {
        if fractions.is_empty()
            || fractions.windows(2).any(|w| w[1] < w[0])
            || fractions.iter().any(|&p| !(p > 0.0 && p <= 1.0))
            || *fractions.last().unwrap() != 1.0
        {
            return Err(DressError::config(format!(
                "schedule {:?} must be non-decreasing in (0, 1] and end at 1",
                fractions
            )));
        }
        Ok(PruneScheduler {
            fractions,
            finetune_epochs,
        })
    }

    pub fn from_config(cfg: &TrainConfig) -> Result<Self> {
        Self::new(cfg.schedule.clone(), cfg.finetune_epochs)
    }

    /// Sparsity of every round for a final sparsity `target`.
    pub fn round_sparsities(&self, target: f64) -> Vec<f64> {
        self.fractions.iter().map(|p| p * target).collect()
    }
}

#[derive(Clone, Debug)]
pub struct IterativeOutcome {
    pub params: ParamStore<f32>,
    pub masks: MaskSet,
    pub record: RunRecord,
    /// Weights before the first stage and after every stage.
    pub stages: Vec<ParamStore<f32>>,
}

/// Masks of one layer-wise allocation at sparsity `s` under per-layer supports.
fn sample_single(net: &NetworkSpec, params: &ParamStore<f32>, s: f64, supports: &[Support<'_>]) -> Result<SubnetMask> {
    let ladder = allocate_with(net, params, &[s], supports)?;
    let set = sample_masks_with(net, params, &ladder, supports)?;
    Ok(set.levels()[0].clone())
}

fn supports<'a>(net: &NetworkSpec, f: impl Fn(usize) -> Support<'a>) -> Vec<Support<'a>> {
    net.sampled_layers().into_iter().map(f).collect()
}

/// One pruning run: each round samples at the round's sparsity, keeping all
/// of `keep` and staying inside the previous round's mask, then fine-tunes
/// only the entries outside `keep`.
fn prune_rounds(
    net: &NetworkSpec,
    params: &mut ParamStore<f32>,
    keep: &SubnetMask,
    target: f64,
    sched: &PruneScheduler,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    record: &mut RunRecord,
    subnet: usize,
) -> Result<SubnetMask> {
    let mut within = SubnetMask::dense(net);
    for s in sched.round_sparsities(target) {
        let sup = supports(net, |i| Support::Between {
            keep: keep.layer(i).expect("sampled layer"),
            within: within.layer(i).expect("sampled layer"),
        });
        let mask = sample_single(net, params, s, &sup)?;
        let update = mask_minus(&mask, keep);
        let epoch0 = record.rows.last().map_or(0, |r| r.epoch + 1);
        let trace = finetune(net, params, &mask, &update, train, val, cfg, sched.finetune_epochs, epoch0)?;
        for (e, (loss, acc)) in trace.into_iter().enumerate() {
            record.rows.push(crate::train::record::EpochRow {
                epoch: epoch0 + e,
                subnet,
                loss,
                val_acc: acc,
                avg_val_acc: acc,
                realloc_flag: 0,
            });
        }
        within = mask;
    }
    Ok(within)
}

/// Progressive magnitude pruning of subnet 1 with sparse fine-tuning and
/// learning-rate rewinding; subnets `2..K` are then cut from subnet `k - 1`
/// without further training.
pub fn iterative_increased(
    net: &NetworkSpec,
    params: ParamStore<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<IterativeOutcome> {
    validate_levels(&cfg.levels)?;
    let sched = PruneScheduler::from_config(cfg)?;
    let mut params = params;
    params.check(net)?;
    let mut record = RunRecord::default();
    let mut stages = vec![params.clone()];
    let none = empty_mask(net);
    let m1 = prune_rounds(net, &mut params, &none, cfg.levels[0], &sched, train, val, cfg, &mut record, 1)?;
    stages.push(params.clone());
    let mut masks = vec![m1];
    for &s in &cfg.levels[1..] {
        let prev = masks.last().expect("subnet 1 exists");
        let sup = supports(net, |i| Support::Within(prev.layer(i).expect("sampled layer")));
        masks.push(sample_single(net, &params, s, &sup)?);
    }
    let masks = MaskSet::new(masks);
    if !masks.is_nested() {
        return Err(DressError::invariant("iterative masks are not nested"));
    }
    Ok(IterativeOutcome {
        params,
        masks,
        record,
        stages,
    })
}

/// Builds subnets from the sparsest up: subnet `k` keeps subnet `k + 1`
/// frozen and grows into its complement by a pruning run whose updates touch
/// only the newly added entries.
pub fn iterative_decreased(
    net: &NetworkSpec,
    params: ParamStore<f32>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<IterativeOutcome> {
    validate_levels(&cfg.levels)?;
    let sched = PruneScheduler::from_config(cfg)?;
    let mut params = params;
    params.check(net)?;
    let k_levels = cfg.levels.len();
    let mut record = RunRecord::default();
    let mut stages = vec![params.clone()];
    let mut masks: Vec<Option<SubnetMask>> = vec![None; k_levels];
    let none = empty_mask(net);
    for k in (0..k_levels).rev() {
        let keep = masks.get(k + 1).cloned().flatten().unwrap_or_else(|| none.clone());
        let before = params.clone();
        let m = prune_rounds(net, &mut params, &keep, cfg.levels[k], &sched, train, val, cfg, &mut record, k + 1)?;
        if !frozen_on(net, &before, &params, &keep) {
            return Err(DressError::invariant(format!(
                "weights of subnet {} changed while training subnet {}",
                k + 2,
                k + 1
            )));
        }
        masks[k] = Some(m);
        stages.push(params.clone());
    }
    let masks = MaskSet::new(masks.into_iter().map(|m| m.expect("every level trained")).collect());
    if !masks.is_nested() {
        return Err(DressError::invariant("iterative masks are not nested"));
    }
    Ok(IterativeOutcome {
        params,
        masks,
        record,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_sparsities_follow_the_schedule() {
        let s = PruneScheduler::new(vec![0.5, 0.8, 0.9, 0.95, 1.0], 5).unwrap();
        let r = s.round_sparsities(0.9);
        let want = [0.45, 0.72, 0.81, 0.855, 0.9];
        assert!(r.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12), "{:?}", r);
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(PruneScheduler::new(vec![0.5, 0.4, 1.0], 1).is_err());
        assert!(PruneScheduler::new(vec![0.5, 0.9], 1).is_err());
        assert!(PruneScheduler::new(vec![0.0, 1.0], 1).is_err());
        assert!(PruneScheduler::new(vec![], 1).is_err());
    }
}
