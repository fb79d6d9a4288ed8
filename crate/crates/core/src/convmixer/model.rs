use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{BatchNormStats, NormMode, Tape, Tensor, Var};

/// Affine parameters and running statistics of one batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BatchNormStats<T>,
}

impl<T: Scalar> Norm<T> {
    fn new(channels: usize) -> Self {
        Self { gamma: Tensor::ones(&[channels]), beta: Tensor::zeros(&[channels]), stats: BatchNormStats::new(channels) }
    }
}

/// Depthwise stage (residual) followed by the pointwise stage.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerLayer<T> {
    pub dw_weight: Tensor<T>,
    pub dw_bias: Tensor<T>,
    pub norm1: Norm<T>,
    pub pw_weight: Tensor<T>,
    pub pw_bias: Tensor<T>,
    pub norm2: Norm<T>,
}

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Backbone,
    Adaptive,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainScope {
    All,
    AdaptiveOnly,
    BackboneOnly,
    Frozen,
}

impl TrainScope {
    pub fn includes(self, group: ParamGroup) -> bool {
        match self {
            TrainScope::All => true,
            TrainScope::AdaptiveOnly => group == ParamGroup::Adaptive,
            TrainScope::BackboneOnly => group == ParamGroup::Backbone,
            TrainScope::Frozen => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    cfg: ModelConfig,
    pub stem_weight: Tensor<T>,
    pub stem_bias: Tensor<T>,
    pub stem_norm: Norm<T>,
    /// `n x n` token-mixing matrix.
    pub adaptive: Option<Tensor<T>>,
    pub layers: Vec<MixerLayer<T>>,
    pub head_weight: Tensor<T>,
    pub head_bias: Tensor<T>,
}

/// Variables recorded by one forward pass.
pub struct Forward {
    pub logits: Var,
    /// Parameter variables, in [`Model::params`] order.
    pub params: Vec<Var>,
    pub adaptive: Option<Var>,
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(rng)))
}

/// `I + noise`, noise uniform in `[-0.01, 0.01]`.
fn near_identity<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-0.01, 0.01);
    Tensor::from_fn(&[n, n], |i| {
        let eye = if i / n == i % n { 1.0 } else { 0.0 };
        T::from_f64_lossy(eye + dist.sample(rng))
    })
}

impl<T: Scalar> Model<T> {
    /// Weights uniform in `+-fan_in^(-1/2)`, biases zero, norms at `gamma=1, beta=0`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, m, k) = (cfg.hidden, cfg.patch, cfg.kernel);
        let stem_weight = uniform(&mut rng, &[h, 3, m, m], 3 * m * m);
        let layers = (0..cfg.depth)
            .map(|_| MixerLayer {
                dw_weight: uniform(&mut rng, &[h, k, k], k * k),
                dw_bias: Tensor::zeros(&[h]),
                norm1: Norm::new(h),
                pw_weight: uniform(&mut rng, &[h, h], h),
                pw_bias: Tensor::zeros(&[h]),
                norm2: Norm::new(h),
            })
            .collect();
        let head_weight = uniform(&mut rng, &[cfg.n_classes, h], h);
        let adaptive = cfg.use_adaptive_matrix.then(|| near_identity(&mut rng, cfg.n_tokens()));
        Ok(Self {
            cfg: *cfg,
            stem_weight,
            stem_bias: Tensor::zeros(&[h]),
            stem_norm: Norm::new(h),
            adaptive,
            layers,
            head_weight,
            head_bias: Tensor::zeros(&[cfg.n_classes]),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Inserts a fresh `I + noise` matrix (replacing any existing one).
    pub fn attach_adaptive_matrix(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.adaptive = Some(near_identity(&mut rng, self.cfg.n_tokens()));
        self.cfg.use_adaptive_matrix = true;
    }

    pub fn set_adaptive_matrix(&mut self, u: Tensor<T>) -> Result<()> {
        let n = self.cfg.n_tokens();
        if u.shape() != [n, n] {
            return Err(crate::error::shape(format!("adaptive matrix must be {n}x{n}, got {:?}", u.shape())));
        }
        self.adaptive = Some(u);
        self.cfg.use_adaptive_matrix = true;
        Ok(())
    }

    pub fn detach_adaptive_matrix(&mut self) -> Option<Tensor<T>> {
        self.cfg.use_adaptive_matrix = false;
        self.adaptive.take()
    }

    /// Trainable tensors with their names and groups, in checkpoint order.
    pub fn params(&self) -> Vec<(String, ParamGroup, &Tensor<T>)> {
        use ParamGroup::*;
        let mut out = vec![
            ("stem.weight".to_string(), Backbone, &self.stem_weight),
            ("stem.bias".to_string(), Backbone, &self.stem_bias),
            ("stem.norm.gamma".to_string(), Backbone, &self.stem_norm.gamma),
            ("stem.norm.beta".to_string(), Backbone, &self.stem_norm.beta),
        ];
        if let Some(u) = &self.adaptive {
            out.push(("adaptive.u".to_string(), Adaptive, u));
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.dw.weight"), Backbone, &l.dw_weight),
                (format!("layers.{i}.dw.bias"), Backbone, &l.dw_bias),
                (format!("layers.{i}.norm1.gamma"), Backbone, &l.norm1.gamma),
                (format!("layers.{i}.norm1.beta"), Backbone, &l.norm1.beta),
                (format!("layers.{i}.pw.weight"), Backbone, &l.pw_weight),
                (format!("layers.{i}.pw.bias"), Backbone, &l.pw_bias),
                (format!("layers.{i}.norm2.gamma"), Backbone, &l.norm2.gamma),
                (format!("layers.{i}.norm2.beta"), Backbone, &l.norm2.beta),
            ]);
        }
        out.push(("head.weight".to_string(), Backbone, &self.head_weight));
        out.push(("head.bias".to_string(), Backbone, &self.head_bias));
        out
    }

    /// Mutable view of the same tensors, same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![
            &mut self.stem_weight,
            &mut self.stem_bias,
            &mut self.stem_norm.gamma,
            &mut self.stem_norm.beta,
        ];
        if let Some(u) = &mut self.adaptive {
            out.push(u);
        }
        for l in &mut self.layers {
            out.extend([
                &mut l.dw_weight,
                &mut l.dw_bias,
                &mut l.norm1.gamma,
                &mut l.norm1.beta,
                &mut l.pw_weight,
                &mut l.pw_bias,
                &mut l.norm2.gamma,
                &mut l.norm2.beta,
            ]);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    /// Non-trainable running statistics, in checkpoint order.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("stem.norm.running_mean".to_string(), &self.stem_norm.stats.running_mean),
            ("stem.norm.running_var".to_string(), &self.stem_norm.stats.running_var),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend([
                (format!("layers.{i}.norm1.running_mean"), &l.norm1.stats.running_mean),
                (format!("layers.{i}.norm1.running_var"), &l.norm1.stats.running_var),
                (format!("layers.{i}.norm2.running_mean"), &l.norm2.stats.running_mean),
                (format!("layers.{i}.norm2.running_var"), &l.norm2.stats.running_var),
            ]);
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.stem_norm.stats.running_mean, &mut self.stem_norm.stats.running_var];
        for l in &mut self.layers {
            out.extend([
                &mut l.norm1.stats.running_mean,
                &mut l.norm1.stats.running_var,
                &mut l.norm2.stats.running_mean,
                &mut l.norm2.stats.running_var,
            ]);
        }
        out
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> u64 {
        self.params().iter().map(|(_, _, t)| t.numel() as u64).sum()
    }

    /// Records the forward pass of `images: B x 3 x S x S` on `tape`.
    ///
    /// Parameters in groups selected by `scope` are recorded as trainable.
    /// In [`NormMode::Train`] the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape<T>, images: Var, mode: NormMode, scope: TrainScope) -> Result<Forward> {
        let params: Vec<Var> = self
            .params()
            .into_iter()
            .map(|(_, group, t)| tape.leaf(t.clone().with_grad(scope.includes(group))))
            .collect();
        self.forward_with(tape, images, params, mode)
    }

    /// Forward pass using already-recorded parameter variables (in
    /// [`Model::params`] order) instead of this model's own values.
    pub fn forward_with(&mut self, tape: &mut Tape<T>, images: Var, params: Vec<Var>, mode: NormMode) -> Result<Forward> {
        if params.len() != self.params().len() {
            return Err(crate::error::shape(format!(
                "expected {} parameter variables, got {}",
                self.params().len(),
                params.len()
            )));
        }
        let mut next = params.iter().copied();
        let mut take = || next.next().expect("parameter count");
        let (sw, sb, sg, sbeta) = (take(), take(), take(), take());
        let adaptive = self.adaptive.as_ref().map(|_| take());

        let mut z = tape.patch_embed(images, sw, sb, self.cfg.patch)?;
        z = tape.gelu(z);
        z = tape.batchnorm(z, sg, sbeta, &mut self.stem_norm.stats, mode)?;
        if let Some(u) = adaptive {
            z = tape.token_mix(z, u)?;
        }
        for layer in &mut self.layers {
            let (dw, db, g1, b1, pw, pb, g2, b2) = (take(), take(), take(), take(), take(), take(), take(), take());
            let mut r = tape.depthwise_conv(z, dw, db)?;
            r = tape.gelu(r);
            r = tape.batchnorm(r, g1, b1, &mut layer.norm1.stats, mode)?;
            z = tape.add(r, z)?;
            z = tape.channel_affine(z, pw, pb)?;
            z = tape.gelu(z);
            z = tape.batchnorm(z, g2, b2, &mut layer.norm2.stats, mode)?;
        }
        let (hw, hb) = (take(), take());
        let pooled = tape.global_avg_pool(z)?;
        let logits = tape.channel_affine(pooled, hw, hb)?;
        Ok(Forward { logits, params, adaptive })
    }

    /// Logits for a batch without recording gradients.
    pub fn logits(&mut self, images: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone());
        let fwd = self.forward(&mut tape, x, mode, TrainScope::Frozen)?;
        Ok(tape.value(fwd.logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(use_adaptive_matrix: bool) -> ModelConfig {
        ModelConfig {
            hidden: 6,
            depth: 2,
            kernel: 3,
            patch: 2,
            n_classes: 4,
            image_size: 8,
            use_adaptive_matrix,
            lambda: 1e-4,
        }
    }

    #[test]
    fn minimal_model_has_sixteen_scalars() {
        let c = ModelConfig {
            hidden: 1,
            depth: 1,
            kernel: 1,
            patch: 1,
            n_classes: 1,
            image_size: 1,
            use_adaptive_matrix: false,
            lambda: 0.0,
        };
        let m = Model::<f64>::build(&c, 0).unwrap();
        assert_eq!(m.count_params(), 16);
        assert_eq!(c.expected_params().unwrap(), 16);
    }

    #[test]
    fn param_views_agree() {
        let mut m = Model::<f64>::build(&cfg(true), 1).unwrap();
        let shapes: Vec<Vec<usize>> = m.params().iter().map(|(_, _, t)| t.shape().to_vec()).collect();
        let shapes_mut: Vec<Vec<usize>> = m.params_mut().iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, shapes_mut);
        assert_eq!(m.buffers().len(), m.buffers_mut().len());
        assert_eq!(m.params()[4].0, "adaptive.u");
        assert_eq!(m.count_params(), cfg(true).expected_params().unwrap());
    }

    #[test]
    fn initialization_rules() {
        let m = Model::<f64>::build(&cfg(true), 2).unwrap();
        let bound = 1.0 / 12f64.sqrt();
        assert!(m.stem_weight.data().iter().all(|v| v.abs() <= bound));
        assert!(m.stem_bias.data().iter().all(|&v| v == 0.0));
        assert!(m.layers[0].norm1.gamma.data().iter().all(|&v| v == 1.0));
        let u = m.adaptive.as_ref().unwrap();
        let n = 16;
        for t in 0..n {
            for s in 0..n {
                let eye = if t == s { 1.0 } else { 0.0 };
                assert!((u.data()[t * n + s] - eye).abs() <= 0.01);
            }
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let mut a = Model::<f64>::build(&cfg(true), 3).unwrap();
        let mut b = a.clone();
        let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        let la = a.logits(&x, NormMode::Train).unwrap();
        let lb = b.logits(&x, NormMode::Train).unwrap();
        assert_eq!(la.shape(), &[2, 4]);
        assert_eq!(la, lb);
        assert_eq!(a, b);
    }

    #[test]
    fn f32_model_runs() {
        let mut m = Model::<f32>::build(&cfg(false), 3).unwrap();
        let x = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |i| (i % 7) as f32 / 7.0);
        let l = m.logits(&x, NormMode::Train).unwrap();
        assert!(l.data().iter().all(|v| v.is_finite()));
    }
}
