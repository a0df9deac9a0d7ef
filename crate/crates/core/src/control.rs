//! Control branch: copies of the first `L/N` denoiser blocks that read the
//! condition latent and emit one zero-initialised residual per injection point.

use candle_core::Tensor;

use crate::dit::{DitBlock, DitConfig};
use crate::error::{Error, Result};
use crate::nn::{Builder, Linear, ParamMap};

#[derive(Debug, Clone)]
pub struct ControlBranch {
    pub interval: usize,
    /// Condition channels `D` to model width, no bias.
    pub cond_embed: Linear,
    pub blocks: Vec<DitBlock>,
    pub emit: Vec<Linear>,
}

pub fn num_emissions(depth: usize, interval: usize) -> Result<usize> {
    if interval == 0 || depth % interval != 0 {
        return Err(Error::config(format!(
            "control.interval ({interval}) must divide dit.depth ({depth})"
        )));
    }
    Ok(depth / interval)
}

impl ControlBranch {
    pub fn new(b: &mut Builder, dit: &DitConfig, cond_channels: usize, interval: usize) -> Result<Self> {
        let n = num_emissions(dit.depth, interval)?;
        let w = dit.width;
        let blocks = (0..n)
            .map(|j| DitBlock::new(&mut b.sub(format!("blocks.{j}")), dit))
            .collect::<Result<Vec<_>>>()?;
        let emit = (0..n)
            .map(|j| Linear::zeros(&mut b.sub(format!("emit.{j}")), w, w, true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            interval,
            cond_embed: Linear::new(&mut b.sub("cond_embed"), cond_channels, w, false, 1.0)?,
            blocks,
            emit,
        })
    }

    /// `tokens`: the denoiser's embedded `z_t`, `[T_lat, n, W]`; `cond`:
    /// `[T_lat, h, w, D]` with `h * w = n`; `c`: the time vector.
    pub fn forward(&self, cond: &Tensor, tokens: &Tensor, c: &Tensor) -> Result<Vec<Tensor>> {
        let (tl, n, _) = tokens.dims3()?;
        let (ct, ch, cw, cd) = cond.dims4()?;
        if ct != tl || ch * cw != n {
            return Err(Error::data(format!(
                "condition grid [{ct}, {ch}, {cw}] does not match the token grid ({tl} frames, {n} tokens)"
            )));
        }
        let mut x = (tokens + self.cond_embed.forward(&cond.reshape((ct, n, cd))?)?)?;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (block, emit) in self.blocks.iter().zip(&self.emit) {
            x = block.forward(&x, c)?;
            out.push(emit.forward(&x)?);
        }
        Ok(out)
    }
}

/// Copies denoiser blocks `0..L/N` into the branch.
pub fn init_from_denoiser(params: &ParamMap, denoiser: &str, branch: &str, emissions: usize) -> Result<()> {
    for j in 0..emissions {
        params.copy_prefix(
            &format!("{denoiser}blocks.{j}."),
            &format!("{branch}blocks.{j}."),
        )?;
    }
    Ok(())
}
