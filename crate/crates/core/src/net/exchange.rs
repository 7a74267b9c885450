//! The feature exchange block: convolve the stacked per-sensor entropies,
//! apply a sigmoid to get a per-sensor gate in (0,1), scale each sensor's
//! block of the concatenated features by its gate channel, re-append the
//! entropies, and project back into each branch's channel width as a residual
//! update.

use crate::error::Result;
use crate::tensor::{Tape, Tensor};

/// How the multiplicative gate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// sigmoid(conv1x1(stacked entropies)) - the adaptive path.
    Entropy,
    /// Constant one: the exchange mixes features but ignores entropy values
    /// in the gate (they still ride along as projection inputs).
    Unit,
}

pub struct ExchangeParams<'a> {
    pub gate_weight: &'a Tensor,
    pub gate_bias: &'a Tensor,
    /// One projection conv (weight, bias) per sensor, back to its width.
    pub projections: Vec<(&'a Tensor, &'a Tensor)>,
}

pub struct ExchangeOutput {
    /// Post-exchange feature map per sensor (residually updated).
    pub features: Vec<Tensor>,
    /// The gate that scaled the concatenated features, [1,S,h,w].
    pub gate: Tensor,
    /// Gated concatenated features before entropy re-append and projection.
    pub fused: Tensor,
}

/// Runs one exchange over per-sensor features of identical spatial shape.
/// `entropy` is the stacked per-sensor entropy at this level, [1,S,h,w].
pub fn exchange_block(
    tape: &mut Tape,
    features: &[Tensor],
    entropy: &Tensor,
    params: &ExchangeParams<'_>,
    mode: GateMode,
) -> Result<ExchangeOutput> {
    let sensors = features.len();
    debug_assert_eq!(entropy.shape()[1], sensors);
    debug_assert_eq!(params.projections.len(), sensors);

    let gate = match mode {
        GateMode::Entropy => {
            let pre = tape.conv2d(entropy, params.gate_weight, 1, 0)?;
            let pre = tape.bias_add(&pre, params.gate_bias)?;
            tape.sigmoid(&pre)
        }
        GateMode::Unit => Tensor::full(entropy.shape().to_vec(), 1.0),
    };

    let widths: Vec<usize> = features.iter().map(|f| f.shape()[1]).collect();
    let refs: Vec<&Tensor> = features.iter().collect();
    let stacked = tape.concat(&refs, 1)?;
    let fused = tape.group_scale(&stacked, &gate, &widths)?;
    let fused_with_entropy = tape.concat(&[&fused, entropy], 1)?;

    let mut out = Vec::with_capacity(sensors);
    for (s, feat) in features.iter().enumerate() {
        let (w, b) = params.projections[s];
        let proj = tape.conv2d(&fused_with_entropy, w, 1, 0)?;
        let proj = tape.bias_add(&proj, b)?;
        out.push(tape.add(feat, &proj)?);
    }
    Ok(ExchangeOutput { features: out, gate, fused })
}
