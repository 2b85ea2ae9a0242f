// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;

use super::{IntegrationPath, PathObjective};
use crate::autodiff::Float;
use crate::error::{Error, Result};

/// Gradient norms along a path and the share of near-zero ones.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationProfile {
    pub labels: Vec<String>,
    /// `‖∂L/∂(channel)‖` indexed `[step][channel]`.
    pub norms: Vec<Vec<f64>>,
    /// `norms[j][c] < eps · max_j norms[j][c]`.
    pub saturated: Vec<Vec<bool>>,
    pub eps: f64,
    pub saturated_fraction: f64,
}

/// Per-step, per-channel gradient norms along `path`.
pub fn saturation_profile<F: Float, O: PathObjective<F> + ?Sized>(
    objective: &O,
    path: &IntegrationPath<F>,
    eps: f64,
) -> Result<SaturationProfile> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "saturation threshold must be positive, got {eps}"
        )));
    }
    if path.points.is_empty() {
        return Err(Error::EmptyPath);
    }
    let norms: Vec<Vec<f64>> = path
        .points
        .iter()
        .map(|p| {
            Ok(objective
                .loss_grads(p)?
                .iter()
                .map(|g| g.l2_norm().as_f64())
                .collect())
        })
        .collect::<Result<_>>()?;
    let n_channels = norms[0].len();
    let max: Vec<f64> = (0..n_channels)
        .map(|c| norms.iter().map(|row| row[c]).fold(0.0, f64::max))
        .collect();
    let saturated: Vec<Vec<bool>> = norms
        .iter()
        .map(|row| row.iter().zip(&max).map(|(&n, &m)| n < eps * m).collect())
        .collect();
    let total = saturated.len() * n_channels;
    let hits = saturated.iter().flatten().filter(|&&s| s).count();
    Ok(SaturationProfile {
        labels: objective.channel_labels(),
        norms,
        saturated,
        eps,
        saturated_fraction: if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        },
    })
}

/// One row per (step, channel): `step, channel, grad_norm, saturated, w_j,
/// endpoint_residual`. `w_j` is the mean GradPath gradient norm of that
/// step and is blank for straight lines.
pub fn write_path_diagnostics<F: Float>(
    w: impl Write,
    path: &IntegrationPath<F>,
    profile: &SaturationProfile,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "step",
        "channel",
        "grad_norm",
        "saturated",
        "w_j",
        "endpoint_residual",
    ])?;
    let w_j = path.mean_grad_norms();
    let residual = path.mean_endpoint_residual().to_string();
    for (j, row) in profile.norms.iter().enumerate() {
        let wj = w_j.get(j).map_or(String::new(), |v| v.to_string());
        for (c, norm) in row.iter().enumerate() {
            out.write_record([
                j.to_string(),
                profile.labels[c].clone(),
                norm.to_string(),
                profile.saturated[j][c].to_string(),
                wj.clone(),
                residual.clone(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}
