//! Second implementations used as test oracles.

use alloc::vec::Vec;

use crate::attention::{ffn, multi_head_self_attention};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_grad, GradCheckReport};
use crate::matrix::Matrix;
use crate::model::{evaluate_episode, loss_and_grads, Episode, MemoryBank, Mode, ModelConfig, ModelParams};
use crate::numeric::layer_norm;
use crate::retention::RetentionConfig;
use crate::rng::Rng;

/// Logits of a plain transformer stack over the same parameters, ignoring
/// every retention weight. Eval mode only.
pub fn vanilla_forward(tokens: &[usize], params: &ModelParams, cfg: &ModelConfig) -> Result<Matrix> {
    if tokens.iter().any(|&t| t >= cfg.vocab) || tokens.len() > cfg.max_len {
        return Err(Error::InvalidConfig("tokens do not fit the model".into()));
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut x = params
        .token_embedding
        .gather_rows(tokens)?
        .add(&params.position_embedding.gather_rows(&positions)?)?;
    for b in &params.blocks {
        let z = multi_head_self_attention(&x, &b.attn, cfg.causal)?;
        let xt = layer_norm(&x.add(&z)?, b.ln1.gamma.as_slice(), b.ln1.beta.as_slice(), cfg.ln_eps)?;
        let o = ffn(&xt, &b.ffn)?;
        x = layer_norm(&xt.add(&o)?, b.ln2.gamma.as_slice(), b.ln2.beta.as_slice(), cfg.ln_eps)?;
    }
    x.matmul(&params.output_projection)
}

/// Compares the analytic episode gradient of every parameter tensor with
/// central differences of step `h`. The model must have dropout 0.
pub fn model_gradcheck(
    episode: &Episode,
    bank: &MemoryBank,
    params: &ModelParams,
    cfg: &ModelConfig,
    ret: &RetentionConfig,
    h: f64,
) -> Result<Vec<GradCheckReport>> {
    if cfg.dropout != 0.0 {
        return Err(Error::InvalidConfig("gradient check needs dropout 0".into()));
    }
    let analytic = loss_and_grads(episode, bank, params, cfg, ret, &mut Rng::new(0))?.grads;
    let names: Vec<_> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut reports = Vec::with_capacity(names.len());
    for (i, ((name, a), base)) in names
        .into_iter()
        .zip(analytic.named().into_iter().map(|(_, g)| g))
        .zip(params.named().into_iter().map(|(_, p)| p))
        .enumerate()
    {
        let mut probe = params.clone();
        let numeric = finite_diff_grad(
            |theta| {
                probe.tensors_mut()[i].as_mut_slice().copy_from_slice(theta);
                evaluate_episode(episode, bank, &probe, cfg, ret, Mode::Eval, &mut Rng::new(0))
                    .map(|r| r.loss)
                    .unwrap_or(f64::NAN)
            },
            base.as_slice(),
            h,
        )?;
        reports.push(GradCheckReport::compare(name, a.as_slice(), &numeric));
    }
    Ok(reports)
}
