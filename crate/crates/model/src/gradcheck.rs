//! Central finite-difference check of the hand-written backward pass.

use tdlm_core::loss::CorruptedBatch;
use tdlm_core::{LevelWeightConfig, NoiseSchedule, TokenTree};

use crate::denoiser::Denoiser;
use crate::error::Result;

/// `(tensor, relative error, scale)` per tensor, where the relative error is
/// `‖fd − g‖ / max(‖fd‖, ‖g‖)` between central differences with step `h` and
/// the analytic gradient, and the scale is that denominator.
pub fn gradient_errors(
    model: &Denoiser<f64>,
    batch: &CorruptedBatch,
    tree: &TokenTree,
    sched: &NoiseSchedule,
    level_weights: &LevelWeightConfig,
    h: f64,
) -> Result<Vec<(String, f64, f64)>> {
    let (_, grad) = model.loss_and_grad(batch, tree, sched, level_weights)?;
    let mut probe = model.clone();
    let objective = |m: &Denoiser<f64>| {
        m.loss_and_grad(batch, tree, sched, level_weights)
            .map(|r| r.0.objective)
    };
    let mut out = Vec::new();
    for t in &model.layout().tensors {
        let (mut num, mut nfd, mut nan) = (0.0, 0.0, 0.0);
        for i in t.range() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = objective(&probe)?;
            probe.params_mut()[i] = orig - h;
            let down = objective(&probe)?;
            probe.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            num += (fd - grad[i]).powi(2);
            nfd += fd * fd;
            nan += grad[i] * grad[i];
        }
        let scale = f64::max(nfd, nan).sqrt();
        let rel = if scale == 0.0 {
            0.0
        } else {
            num.sqrt() / scale
        };
        out.push((t.name.clone(), rel, scale));
    }
    Ok(out)
}
