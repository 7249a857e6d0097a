//! Dense MLP to summed-branch conversion.
//!
//! Weights follow the checkpoint convention `[out_features × in_features]`:
//! `w_gate` and `w_up` are `[d_inter × d_model]`, `w_down` is
//! `[d_model × d_inter]`. Branch `b` therefore owns a contiguous block of
//! *rows* of the gate/up projections and the matching block of *columns* of
//! the down projection.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::checkpoint::{resolve_mlp, Checkpoint, LayerMlp, MlpRole, NamingScheme};
use crate::error::{Error, Result};
use crate::tensor::{add_scaled_in_place, hadamard, linear, Activation, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMlp {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub activation: Activation,
}

impl DenseMlp {
    pub fn new(w_gate: Tensor, w_up: Tensor, w_down: Tensor, activation: Activation) -> Result<Self> {
        let (inter, model) = w_gate.dims2()?;
        if w_up.shape() != w_gate.shape() {
            return Err(Error::dim(format!(
                "w_up {:?} does not match w_gate {:?}",
                w_up.shape(),
                w_gate.shape()
            )));
        }
        if w_down.dims2()? != (model, inter) {
            return Err(Error::dim(format!(
                "w_down {:?} should be [{model}, {inter}]",
                w_down.shape()
            )));
        }
        Ok(Self {
            w_gate,
            w_up,
            w_down,
            activation,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_gate.shape()[1]
    }

    pub fn d_inter(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn nonzero_count(&self) -> usize {
        self.w_gate.nonzero_count() + self.w_up.nonzero_count() + self.w_down.nonzero_count()
    }
}

/// One slice of the intermediate dimension, scaled by `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub w_gate: Tensor,
    pub w_up: Tensor,
    pub w_down: Tensor,
    pub alpha: f32,
}

impl Branch {
    pub fn new(w_gate: Tensor, w_up: Tensor, w_down: Tensor, alpha: f32) -> Result<Self> {
        let (width, model) = w_gate.dims2()?;
        if w_up.shape() != w_gate.shape() || w_down.dims2()? != (model, width) {
            return Err(Error::dim(format!(
                "inconsistent branch shapes: gate {:?}, up {:?}, down {:?}",
                w_gate.shape(),
                w_up.shape(),
                w_down.shape()
            )));
        }
        if !alpha.is_finite() {
            return Err(Error::arg("branch gate must be finite"));
        }
        Ok(Self {
            w_gate,
            w_up,
            w_down,
            alpha,
        })
    }

    pub fn width(&self) -> usize {
        self.w_gate.shape()[0]
    }

    pub fn nonzero_count(&self) -> usize {
        self.w_gate.nonzero_count()
            + self.w_up.nonzero_count()
            + self.w_down.nonzero_count()
            + usize::from(self.alpha != 0.0)
    }

    /// `W_down · (φ(W_gate·x) ⊙ W_up·x)`, without the scalar gate.
    fn raw_forward(&self, x: &Tensor, activation: Activation) -> Result<Tensor> {
        gated(&self.w_gate, &self.w_up, &self.w_down, activation, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeMlp {
    pub branches: Vec<Branch>,
    pub activation: Activation,
    /// Branch count at conversion time; compensated pruning scales by it even
    /// after dead branches have been dropped.
    pub source_branches: usize,
}

impl MoeMlp {
    pub fn new(branches: Vec<Branch>, activation: Activation, source_branches: usize) -> Result<Self> {
        let first = branches
            .first()
            .ok_or_else(|| Error::arg("an MLP needs at least one branch"))?;
        let model = first.w_gate.shape()[1];
        if branches.iter().any(|b| b.w_gate.shape()[1] != model) {
            return Err(Error::dim("branches disagree on d_model"));
        }
        if source_branches < branches.len() {
            return Err(Error::arg(format!(
                "source branch count {source_branches} is below the {} stored branches",
                branches.len()
            )));
        }
        Ok(Self {
            branches,
            activation,
            source_branches,
        })
    }

    pub fn d_model(&self) -> usize {
        self.branches[0].w_gate.shape()[1]
    }

    pub fn d_inter_total(&self) -> usize {
        self.branches.iter().map(Branch::width).sum()
    }

    /// Start row of every branch within the concatenated intermediate axis.
    pub fn offsets(&self) -> Vec<usize> {
        self.branches
            .iter()
            .scan(0, |acc, b| {
                let start = *acc;
                *acc += b.width();
                Some(start)
            })
            .collect()
    }

    pub fn alphas(&self) -> Vec<f32> {
        self.branches.iter().map(|b| b.alpha).collect()
    }

    pub fn nonzero_count(&self) -> usize {
        self.branches.iter().map(Branch::nonzero_count).sum()
    }

    /// Reassembles the dense triple by concatenating branch slices. Scalar
    /// gates are not folded in.
    pub fn concat_weights(&self) -> Result<DenseMlp> {
        let gates: Vec<&Tensor> = self.branches.iter().map(|b| &b.w_gate).collect();
        let ups: Vec<&Tensor> = self.branches.iter().map(|b| &b.w_up).collect();
        let downs: Vec<&Tensor> = self.branches.iter().map(|b| &b.w_down).collect();
        DenseMlp::new(
            Tensor::concat_rows(&gates)?,
            Tensor::concat_rows(&ups)?,
            Tensor::concat_cols(&downs)?,
            self.activation,
        )
    }
}

/// Sizes of `branches` contiguous slices of `d_inter`; the first
/// `d_inter % branches` slices get one extra row.
pub fn split_sizes(d_inter: usize, branches: usize) -> Result<Vec<usize>> {
    if branches < 1 || branches > d_inter {
        return Err(Error::arg(format!(
            "branch count {branches} must lie in 1..={d_inter}"
        )));
    }
    let base = d_inter / branches;
    let extra = d_inter % branches;
    Ok((0..branches).map(|b| base + usize::from(b < extra)).collect())
}

/// Slices a dense MLP into `branches` contiguous branches with unit gates.
pub fn convert(mlp: &DenseMlp, branches: usize) -> Result<MoeMlp> {
    let sizes = split_sizes(mlp.d_inter(), branches)?;
    let mut out = Vec::with_capacity(branches);
    let mut start = 0;
    for size in sizes {
        let rows = start..start + size;
        out.push(Branch::new(
            mlp.w_gate.slice_rows(rows.clone())?,
            mlp.w_up.slice_rows(rows.clone())?,
            mlp.w_down.slice_cols(rows)?,
            1.0,
        )?);
        start += size;
    }
    MoeMlp::new(out, mlp.activation, branches)
}

fn gated(
    w_gate: &Tensor,
    w_up: &Tensor,
    w_down: &Tensor,
    activation: Activation,
    x: &Tensor,
) -> Result<Tensor> {
    let g = activation.apply(&linear(x, w_gate)?);
    let u = linear(x, w_up)?;
    linear(&hadamard(&g, &u)?, w_down)
}

/// `W_down · (φ(W_gate·x) ⊙ W_up·x)` for a vector `x` or each row of a matrix.
pub fn dense_forward(mlp: &DenseMlp, x: &Tensor) -> Result<Tensor> {
    gated(&mlp.w_gate, &mlp.w_up, &mlp.w_down, mlp.activation, x)
}

/// `Σ_b α_b · branch_b(x)`, accumulated in ascending branch order.
pub fn moe_forward(mlp: &MoeMlp, x: &Tensor) -> Result<Tensor> {
    let mut branches = mlp.branches.iter();
    let first = branches.next().expect("MoeMlp holds at least one branch");
    // Seeding with the first term keeps B = 1 bit-identical to the dense path.
    let mut acc = first.raw_forward(x, mlp.activation)?.scale(first.alpha)?;
    for b in branches {
        let term = b.raw_forward(x, mlp.activation)?;
        add_scaled_in_place(&mut acc, &term, b.alpha)?;
    }
    Ok(acc)
}

/// Classic two-matrix FFN `W_down · φ(W_up·x)`.
pub fn ungated_forward(w_up: &Tensor, w_down: &Tensor, activation: Activation, x: &Tensor) -> Result<Tensor> {
    let (inter, model) = w_up.dims2()?;
    if w_down.dims2()? != (model, inter) {
        return Err(Error::dim(format!(
            "w_down {:?} should be [{model}, {inter}]",
            w_down.shape()
        )));
    }
    linear(&activation.apply(&linear(x, w_up)?), w_down)
}

/// The same FFN evaluated as a sum of `branches` partial products over
/// contiguous slices of the intermediate axis.
pub fn ungated_partial_sum(
    w_up: &Tensor,
    w_down: &Tensor,
    activation: Activation,
    x: &Tensor,
    branches: usize,
) -> Result<Tensor> {
    let (inter, _) = w_up.dims2()?;
    let mut acc: Option<Tensor> = None;
    let mut start = 0;
    for size in split_sizes(inter, branches)? {
        let rows = start..start + size;
        let part = ungated_forward(
            &w_up.slice_rows(rows.clone())?,
            &w_down.slice_cols(rows)?,
            activation,
            x,
        )?;
        match acc.as_mut() {
            None => acc = Some(part),
            Some(a) => add_scaled_in_place(a, &part, 1.0)?,
        }
        start += size;
    }
    Ok(acc.expect("split_sizes yields at least one slice"))
}

/// Converts every dense MLP layer of a checkpoint. Layers already in branch
/// form are rejected. Attention and embedding tensors are carried over
/// untouched.
pub fn convert_checkpoint(ckpt: &Checkpoint, branches: usize) -> Result<Checkpoint> {
    let converted: Vec<LayerMlp> = (0..ckpt.meta.num_layers)
        .into_par_iter()
        .map(|layer| {
            let run = || match resolve_mlp(ckpt, layer)? {
                LayerMlp::Dense(d) => Ok(LayerMlp::Moe(convert(&d, branches)?)),
                LayerMlp::Moe(_) => Err(Error::Schema("MLP is already in branch form".into())),
            };
            run().map_err(|e: Error| e.context(format!("layer {layer}")))
        })
        .collect::<Result<_>>()?;
    let mut out = ckpt.clone();
    for (layer, mlp) in converted.iter().enumerate() {
        out.write_mlp(layer, mlp)?;
    }
    Ok(out)
}

/// Tensor shapes a conversion would produce, computed from shapes alone.
/// Lets parameter arithmetic run on a container header without loading
/// the payload.
pub fn plan_conversion_shapes(
    shapes: &BTreeMap<String, Vec<usize>>,
    naming: &NamingScheme,
    branches: usize,
) -> Result<BTreeMap<String, Vec<usize>>> {
    let mut out = BTreeMap::new();
    for (name, shape) in shapes {
        match naming.parse_dense(name) {
            Some((layer, MlpRole::Gate)) => {
                let &[inter, model] = shape.as_slice() else {
                    return Err(Error::dim(format!("'{name}' is not a matrix")));
                };
                let sizes = split_sizes(inter, branches)
                    .map_err(|e| e.context(format!("layer {layer}")))?;
                for (b, width) in sizes.into_iter().enumerate() {
                    let n = |r| naming.branch_name(layer, b, r);
                    out.insert(n(MlpRole::Gate), vec![width, model]);
                    out.insert(n(MlpRole::Up), vec![width, model]);
                    out.insert(n(MlpRole::Down), vec![model, width]);
                    out.insert(n(MlpRole::Alpha), vec![1]);
                }
            }
            Some(_) => {}
            None => {
                out.insert(name.clone(), shape.clone());
            }
        }
    }
    Ok(out)
}
