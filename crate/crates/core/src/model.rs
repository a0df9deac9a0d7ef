//! The full conditional generator: frozen denoiser, control branch, aligner.

use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{Aligner, AlignerConfig};
use crate::control::{init_from_denoiser, num_emissions, ControlBranch};
use crate::dit::{Dit, DitConfig};
use crate::error::{Error, Result};
use crate::nn::{Builder, ParamMap};

pub const DENOISER: &str = "denoiser.";
pub const BRANCH: &str = "branch.";
pub const ALIGNER: &str = "aligner.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub aligner: AlignerConfig,
    pub dit: DitConfig,
    /// Injection interval `N`.
    pub interval: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.aligner.validate()?;
        self.dit.validate()?;
        num_emissions(self.dit.depth, self.interval)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamMap,
    pub dit: Dit,
    pub branch: ControlBranch,
    pub aligner: Aligner,
}

impl Model {
    /// Seeded initialisation; the branch starts as a copy of the (fresh)
    /// denoiser blocks.
    pub fn new(cfg: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamMap::new(dtype);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut params, &mut rng);
        let dit = Dit::new(&mut b.sub("denoiser"), cfg.dit)?;
        let branch = ControlBranch::new(
            &mut b.sub("branch"),
            &cfg.dit,
            cfg.aligner.out_channels,
            cfg.interval,
        )?;
        let aligner = Aligner::new(&mut b.sub("aligner"), cfg.aligner)?;
        let model = Self {
            cfg,
            params,
            dit,
            branch,
            aligner,
        };
        model.init_branch()?;
        Ok(model)
    }

    /// Re-copies denoiser blocks into the branch (after denoiser pretraining).
    pub fn init_branch(&self) -> Result<()> {
        init_from_denoiser(&self.params, DENOISER, BRANCH, self.branch.blocks.len())
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Condition latent from a masked projected grid `[T, h_s, w_s, k_m]`.
    pub fn condition(&self, proj: &Tensor) -> Result<Tensor> {
        self.aligner.forward(proj)
    }

    pub fn residuals(&self, z_t: &Tensor, t: f64, cond: &Tensor) -> Result<Vec<Tensor>> {
        let tokens = self.dit.embed(z_t)?.detach();
        let c = self.dit.time_vector(t)?;
        self.branch.forward(cond, &tokens, &c)
    }

    /// Velocity prediction, controlled when `cond` is given.
    pub fn predict(&self, z_t: &Tensor, t: f64, cond: Option<&Tensor>) -> Result<Tensor> {
        match cond {
            None => self.dit.forward(z_t, t, None),
            Some(cond) => {
                let res = self.residuals(z_t, t, cond)?;
                self.dit.forward(z_t, t, Some((&res, self.cfg.interval)))
            }
        }
    }

    pub fn group(&self, prefix: &str) -> Vec<(String, Var)> {
        self.params
            .with_prefix(prefix)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    /// Branch and aligner parameters.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let mut v = self.group(ALIGNER);
        v.extend(self.group(BRANCH));
        v
    }

    /// Overwrites parameter values by name (checkpoint restore).
    pub fn load_values(&self, values: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in values {
            let var = self
                .params
                .get(name)
                .ok_or_else(|| Error::data(format!("unknown parameter {name} in checkpoint")))?;
            if var.dims() != t.dims() {
                return Err(Error::data(format!(
                    "parameter {name}: checkpoint shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(var.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::{standard_normal, LATENT_DIM};

    pub fn tiny_config() -> ModelConfig {
        ModelConfig {
            aligner: AlignerConfig {
                scale: 2,
                in_channels: 4,
                hidden: 8,
                out_channels: 16,
                temporal_ratio: 4,
                temporal_kernel: 5,
            },
            dit: DitConfig {
                depth: 4,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
                head_hidden: 16,
            },
            interval: 2,
        }
    }

    #[test]
    fn branch_blocks_copy_denoiser() {
        let m = Model::new(tiny_config(), 0, DType::F32).unwrap();
        let a = m.params.hash("denoiser.blocks.0.").unwrap();
        let d: Vec<_> = m.group("denoiser.blocks.0.").into_iter().map(|(k, _)| k["denoiser.".len()..].to_string()).collect();
        let b: Vec<_> = m.group("branch.blocks.0.").into_iter().map(|(k, _)| k["branch.".len()..].to_string()).collect();
        assert_eq!(d, b);
        for (name, var) in m.group("branch.blocks.0.") {
            let src = m.params.get(&name.replacen("branch.", "denoiser.", 1)).unwrap();
            let x = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let y = src.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(x, y, "{name}");
        }
        assert_eq!(a, m.params.hash("denoiser.blocks.0.").unwrap());
        assert_eq!(m.branch.blocks.len(), 2);
    }

    #[test]
    fn emission_projections_start_at_zero() {
        let m = Model::new(tiny_config(), 1, DType::F32).unwrap();
        for (name, var) in m.group("branch.emit.") {
            assert_eq!(crate::aligner::max_abs(var.as_tensor()).unwrap(), 0.0, "{name}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = standard_normal(&mut rng, &[2, 2, 2, LATENT_DIM], DType::F32).unwrap();
        let cond = standard_normal(&mut rng, &[2, 2, 2, 16], DType::F32).unwrap();
        let res = m.residuals(&z, 0.4, &cond).unwrap();
        assert_eq!(res.len(), 2);
        for r in &res {
            assert_eq!(crate::aligner::max_abs(r).unwrap(), 0.0);
        }
    }

    #[test]
    fn condition_grid_mismatch_rejected() {
        let m = Model::new(tiny_config(), 1, DType::F32).unwrap();
        let z = Tensor::zeros((2, 2, 2, LATENT_DIM), DType::F32, &candle_core::Device::Cpu).unwrap();
        let cond = Tensor::zeros((2, 2, 3, 16), DType::F32, &candle_core::Device::Cpu).unwrap();
        assert!(m.predict(&z, 0.5, Some(&cond)).is_err());
    }
}
