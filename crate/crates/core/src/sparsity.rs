//! Post-conversion weight reduction.
//!
//! Two independent tools operate on a [`MoeMlp`]:
//!
//! * **Fractal fade** sparsifies branch `i` by magnitude at ratio
//!   `s_i = max_ratio · i / B`, so branch 0 stays dense and later branches are
//!   progressively thinner. Only the gate and up projections are masked, each
//!   against its own quantile threshold.
//! * **Compensated pruning** keeps the first `K` branches, scales them by
//!   `√(B/K)` and silences the rest with a zero gate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{resolve_mlp, Checkpoint, LayerMlp};
use crate::error::{Error, Result};
use crate::tensor::{mask_below, quantile_abs};
use crate::transform::MoeMlp;

pub const DEFAULT_MAX_RATIO: f64 = 0.9;

/// Per-branch sparsity ratios for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadePlan {
    pub max_ratio: f64,
    pub per_branch_ratios: Vec<f64>,
}

impl FadePlan {
    pub fn new(branches: usize, max_ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&max_ratio) {
            return Err(Error::arg(format!("fade max ratio {max_ratio} outside [0, 1)")));
        }
        if branches == 0 {
            return Err(Error::arg("fade plan for zero branches"));
        }
        let per_branch_ratios = (0..branches)
            .map(|i| max_ratio * i as f64 / branches as f64)
            .collect();
        Ok(Self {
            max_ratio,
            per_branch_ratios,
        })
    }
}

/// Surviving entry counts of one branch after fading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchKept {
    pub gate_kept: usize,
    pub up_kept: usize,
    pub gate_total: usize,
    pub up_total: usize,
}

pub fn fractal_fade(mlp: &MoeMlp, max_ratio: f64) -> Result<(MoeMlp, Vec<BranchKept>)> {
    let plan = FadePlan::new(mlp.branches.len(), max_ratio)?;
    let results: Vec<_> = mlp
        .branches
        .par_iter()
        .zip(&plan.per_branch_ratios)
        .map(|(branch, &ratio)| -> Result<_> {
            let mut out = branch.clone();
            let (gate_kept, up_kept) = if ratio == 0.0 {
                (branch.w_gate.nonzero_count(), branch.w_up.nonzero_count())
            } else {
                let (gate, gate_kept) =
                    mask_below(&branch.w_gate, quantile_abs(&branch.w_gate, ratio)?);
                let (up, up_kept) = mask_below(&branch.w_up, quantile_abs(&branch.w_up, ratio)?);
                out.w_gate = gate;
                out.w_up = up;
                (gate_kept, up_kept)
            };
            Ok((
                out,
                BranchKept {
                    gate_kept,
                    up_kept,
                    gate_total: branch.w_gate.len(),
                    up_total: branch.w_up.len(),
                },
            ))
        })
        .collect::<Result<_>>()?;
    let (branches, kept): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((
        MoeMlp::new(branches, mlp.activation, mlp.source_branches)?,
        kept,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    pub keep: usize,
    pub compensation: f32,
}

impl PrunePlan {
    /// `source_branches` is the count the layer was converted with.
    pub fn new(source_branches: usize, keep: usize) -> Result<Self> {
        if keep < 1 || keep > source_branches {
            return Err(Error::arg(format!(
                "prune K = {keep} must lie in 1..={source_branches}"
            )));
        }
        Ok(Self {
            keep,
            compensation: (source_branches as f64 / keep as f64).sqrt() as f32,
        })
    }
}

/// Scales the first `keep` branches by `√(B/K)` and zeroes the gates of the
/// rest. Weights of silenced branches stay in place.
pub fn compensated_prune(mlp: &MoeMlp, keep: usize) -> Result<MoeMlp> {
    let plan = PrunePlan::new(mlp.source_branches, keep)?;
    if keep > mlp.branches.len() {
        return Err(Error::arg(format!(
            "prune K = {keep} exceeds the {} remaining branches",
            mlp.branches.len()
        )));
    }
    let mut out = mlp.clone();
    for (b, branch) in out.branches.iter_mut().enumerate() {
        branch.alpha = if b < plan.keep { plan.compensation } else { 0.0 };
    }
    Ok(out)
}

/// Removes branches whose gate is exactly zero.
pub fn drop_dead_branches(mlp: &MoeMlp) -> Result<MoeMlp> {
    let alive: Vec<_> = mlp
        .branches
        .iter()
        .filter(|b| b.alpha != 0.0)
        .cloned()
        .collect();
    if alive.is_empty() {
        return Err(Error::arg("every branch has a zero gate; nothing would remain"));
    }
    MoeMlp::new(alive, mlp.activation, mlp.source_branches)
}

fn map_moe_layers<F>(ckpt: &Checkpoint, f: F) -> Result<(Checkpoint, Vec<Vec<BranchKept>>)>
where
    F: Fn(&MoeMlp) -> Result<(MoeMlp, Vec<BranchKept>)> + Sync,
{
    let layers: Vec<(MoeMlp, Vec<BranchKept>)> = (0..ckpt.meta.num_layers)
        .into_par_iter()
        .map(|layer| {
            let run = || match resolve_mlp(ckpt, layer)? {
                LayerMlp::Moe(m) => f(&m),
                LayerMlp::Dense(_) => Err(Error::Schema(
                    "MLP is dense; convert it to branch form first".into(),
                )),
            };
            run().map_err(|e: Error| e.context(format!("layer {layer}")))
        })
        .collect::<Result<_>>()?;
    let mut out = ckpt.clone();
    let mut kept = Vec::with_capacity(layers.len());
    for (layer, (mlp, k)) in layers.into_iter().enumerate() {
        out.write_mlp(layer, &LayerMlp::Moe(mlp))?;
        kept.push(k);
    }
    Ok((out, kept))
}

/// Applies [`fractal_fade`] to every layer; returns per-layer kept counts.
pub fn fade_checkpoint(ckpt: &Checkpoint, max_ratio: f64) -> Result<(Checkpoint, Vec<Vec<BranchKept>>)> {
    map_moe_layers(ckpt, |m| fractal_fade(m, max_ratio))
}

/// Applies [`compensated_prune`] to every layer, optionally followed by
/// [`drop_dead_branches`].
pub fn prune_checkpoint(ckpt: &Checkpoint, keep: usize, drop_dead: bool) -> Result<Checkpoint> {
    map_moe_layers(ckpt, |m| {
        let mut pruned = compensated_prune(m, keep)?;
        if drop_dead {
            pruned = drop_dead_branches(&pruned)?;
        }
        Ok((pruned, Vec::new()))
    })
    .map(|(c, _)| c)
}
