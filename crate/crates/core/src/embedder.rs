//! Convolutional region embedder: one region image in, one token out.
//!
//! Each stage is a 3×3, stride-2, padding-1 convolution followed by GELU, so
//! every stage halves the side length. Global average pooling and a dense
//! projection produce the `embed_dim`-wide token.

use rand::Rng;

use crate::error::{dim_err, Result, SatError};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::{Real, Tape, Tensor, Var};

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedderConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channel_widths: Vec<usize>,
    pub embed_dim: usize,
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.embed_dim == 0 {
            return Err(SatError::Config("embedder needs in_channels > 0 and embed_dim > 0".into()));
        }
        if self.channel_widths.is_empty() || self.channel_widths.contains(&0) {
            return Err(SatError::Config(format!("invalid channel widths {:?}", self.channel_widths)));
        }
        let factor = 1usize
            .checked_shl(self.channel_widths.len() as u32)
            .ok_or_else(|| SatError::Config("too many conv stages".into()))?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return Err(SatError::Config(format!(
                "image size {} must be divisible by 2^{} for {} conv stages",
                self.image_size,
                self.channel_widths.len(),
                self.channel_widths.len()
            )));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }
}

/// Embedder weights live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug)]
pub struct Embedder {
    cfg: EmbedderConfig,
    prefix: String,
}

impl Embedder {
    pub fn new(cfg: EmbedderConfig, prefix: impl Into<String>) -> Result<Self> {
        cfg.validate()?;
        Ok(Embedder { cfg, prefix: prefix.into() })
    }

    pub fn config(&self) -> &EmbedderConfig {
        &self.cfg
    }

    fn name(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.prefix)
    }

    /// He-normal conv kernels, std-0.02 projection, zero biases.
    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let mut in_ch = self.cfg.in_channels;
        for (i, &out_ch) in self.cfg.channel_widths.iter().enumerate() {
            let fan_in = in_ch * KERNEL * KERNEL;
            let std = (2.0 / fan_in as f64).sqrt();
            store.insert(
                self.name(&format!("conv{i}.weight")),
                trunc_normal(&[out_ch, in_ch, KERNEL, KERNEL], std, rng),
            )?;
            store.insert(self.name(&format!("conv{i}.bias")), Tensor::zeros(&[out_ch]))?;
            in_ch = out_ch;
        }
        store.insert(self.name("proj.weight"), trunc_normal(&[in_ch, self.cfg.embed_dim], 0.02, rng))?;
        store.insert(self.name("proj.bias"), Tensor::zeros(&[self.cfg.embed_dim]))?;
        Ok(())
    }

    /// images[N,C,H,W] → tokens[N,d]
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &Bound, images: Var) -> Result<Var> {
        let shape = tape.shape(images);
        let [c, h, w] = self.cfg.image_shape();
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(dim_err!("embedder expects [N,{c},{h},{w}], got {shape:?}"));
        }
        let mut x = images;
        for i in 0..self.cfg.channel_widths.len() {
            let kernel = params.var(&self.name(&format!("conv{i}.weight")))?;
            let bias = params.var(&self.name(&format!("conv{i}.bias")))?;
            x = tape.conv2d(x, kernel, Some(bias), STRIDE, PADDING)?;
            x = tape.gelu(x)?;
        }
        let pooled = tape.avgpool_global(x)?;
        let proj = tape.matmul(pooled, params.var(&self.name("proj.weight"))?)?;
        tape.add(proj, params.var(&self.name("proj.bias"))?)
    }

    /// One image[C,H,W] → token[d].
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, params: &Bound, image: Var) -> Result<Var> {
        let mut shape = vec![1];
        shape.extend_from_slice(tape.shape(image));
        let batched = tape.reshape(image, &shape)?;
        let token = self.forward(tape, params, batched)?;
        tape.reshape(token, &[self.cfg.embed_dim])
    }
}

/// Maps images[B,R,C,H,W] to tokens[B,R,d] with either one shared embedder or
/// one embedder per region.
#[derive(Clone, Debug)]
pub struct RegionEmbedder {
    embedders: Vec<Embedder>,
    regions: usize,
}

impl RegionEmbedder {
    pub fn new(cfg: EmbedderConfig, regions: usize, shared: bool) -> Result<Self> {
        let embedders = if shared {
            vec![Embedder::new(cfg, "embed")?]
        } else {
            (0..regions).map(|r| Embedder::new(cfg.clone(), format!("embed{r}"))).collect::<Result<_>>()?
        };
        Ok(RegionEmbedder { embedders, regions })
    }

    pub fn is_shared(&self) -> bool {
        self.embedders.len() == 1
    }

    pub fn init_params<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        self.embedders.iter().try_for_each(|e| e.init_params(store, rng))
    }

    pub fn embed_batch<T: Real>(&self, tape: &mut Tape<T>, params: &Bound, images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let cfg = self.embedders[0].config();
        if shape.len() != 5 {
            return Err(dim_err!("embed_batch expects [B,R,C,H,W], got {shape:?}"));
        }
        if shape[1] != self.regions {
            return Err(SatError::Config(format!(
                "images carry {} regions but the model expects {}",
                shape[1], self.regions
            )));
        }
        let (batch, d) = (shape[0], cfg.embed_dim);
        let [c, h, w] = cfg.image_shape();
        if self.is_shared() {
            let flat = tape.reshape(images, &[batch * self.regions, c, h, w])?;
            let tokens = self.embedders[0].forward(tape, params, flat)?;
            return tape.reshape(tokens, &[batch, self.regions, d]);
        }
        let mut per_region = Vec::with_capacity(self.regions);
        for (r, embedder) in self.embedders.iter().enumerate() {
            let slice = tape.narrow(images, 1, r, 1)?;
            let flat = tape.reshape(slice, &[batch, c, h, w])?;
            let tokens = embedder.forward(tape, params, flat)?;
            per_region.push(tape.reshape(tokens, &[batch, 1, d])?);
        }
        tape.concat(&per_region, 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> EmbedderConfig {
        EmbedderConfig { in_channels: 1, image_size: 16, channel_widths: vec![4, 6], embed_dim: 5 }
    }

    #[test]
    fn validates_stage_divisibility() {
        let mut c = cfg();
        c.image_size = 18;
        assert!(matches!(c.validate(), Err(SatError::Config(_))));
        c.image_size = 16;
        assert!(c.validate().is_ok());
        c.embed_dim = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_image_with_zero_projection_gives_zero_token() {
        let e = Embedder::new(cfg(), "embed").unwrap();
        let mut store = ParamStore::<f64>::new();
        e.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        store.get_mut("embed.proj.weight").unwrap().data_mut().fill(0.0);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.constant(Tensor::zeros(&[1, 16, 16]));
        let tok = e.embed(&mut tape, &bound, img).unwrap();
        assert_eq!(tape.shape(tok), &[5]);
        assert!(tape.value(tok).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let e = Embedder::new(cfg(), "embed").unwrap();
        let mut store = ParamStore::<f64>::new();
        e.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let img = tape.constant(Tensor::zeros(&[1, 8, 8]));
        assert!(matches!(e.embed(&mut tape, &bound, img), Err(SatError::Dimension(_))));
    }

    #[test]
    fn region_count_mismatch_is_a_config_error() {
        let re = RegionEmbedder::new(cfg(), 3, true).unwrap();
        let mut store = ParamStore::<f64>::new();
        re.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let imgs = tape.constant(Tensor::zeros(&[1, 2, 1, 16, 16]));
        assert!(matches!(re.embed_batch(&mut tape, &bound, imgs), Err(SatError::Config(_))));
    }

    #[test]
    fn shared_embedder_owns_one_parameter_set() {
        for regions in [1, 3, 5] {
            let re = RegionEmbedder::new(cfg(), regions, true).unwrap();
            let mut store = ParamStore::<f32>::new();
            re.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(store.len(), 6);
        }
        let re = RegionEmbedder::new(cfg(), 3, false).unwrap();
        let mut store = ParamStore::<f32>::new();
        re.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.len(), 18);
    }
}
