//! Fixed three-layer generator `x = W3·tanh(W2·tanh(W1·z + b1) + b2) + b3`
//! with hand-derived reverse mode.

use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Rng, Tensor};
use crate::scene::PointCloud;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub latent_dim: usize,
    /// Extra conditioning inputs appended after the latent code (0 unless
    /// the generator is class-conditional).
    #[serde(default)]
    pub cond_dim: usize,
    pub hidden: usize,
    pub points: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            cond_dim: 0,
            hidden: 64,
            points: 32,
        }
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.cond_dim
    }

    pub fn output_dim(&self) -> usize {
        2 * self.points
    }

    pub fn layout(&self) -> Layout {
        let (h, i, o) = (self.hidden, self.input_dim(), self.output_dim());
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Layout {
            w1: take(h * i),
            b1: take(h),
            w2: take(h * h),
            b2: take(h),
            w3: take(o * h),
            b3: take(o),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().b3.end
    }

    pub fn blocks(&self) -> Vec<(String, usize)> {
        let l = self.layout();
        [("W1", l.w1), ("b1", l.b1), ("W2", l.w2), ("b2", l.b2), ("W3", l.w3), ("b3", l.b3)]
            .into_iter()
            .map(|(n, r)| (n.to_string(), r.len()))
            .collect()
    }
}

/// All weights and biases in one flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    pub output: Vec<f64>,
}

impl GeneratorParams {
    pub fn zeros(arch: Architecture) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    /// Gaussian weights with variance `1/fan_in`, zero biases.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(arch);
        let l = arch.layout();
        for (range, fan_in) in [(l.w1, arch.input_dim()), (l.w2, arch.hidden), (l.w3, arch.hidden)] {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for v in &mut p.values[range] {
                *v = scale * rng.normal();
            }
        }
        p
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "{} values for an architecture with {} parameters",
                values.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, values })
    }

    pub fn layout(&self) -> Layout {
        self.arch.layout()
    }

    /// First-layer weights as an `H × input_dim` matrix.
    pub fn w1(&self) -> Tensor {
        let l = self.layout();
        Tensor::new(vec![self.arch.hidden, self.arch.input_dim()], self.values[l.w1].to_vec())
            .expect("layout")
    }

    /// The latent columns of W1 (`H × latent_dim`).
    pub fn w1_latent(&self) -> Tensor {
        let w = self.w1();
        let (h, d, i) = (self.arch.hidden, self.arch.latent_dim, self.arch.input_dim());
        let mut out = Tensor::zeros(&[h, d]);
        for r in 0..h {
            for c in 0..d {
                out.set(r, c, w.data()[r * i + c]);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.arch).as_bytes());
        for v in &self.values {
            h.update(v.to_bits().to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn trace(&self, input: &[f64]) -> Result<Trace> {
        let a = &self.arch;
        if input.len() != a.input_dim() {
            return Err(Error::Shape(format!(
                "generator input of length {}, expected {}",
                input.len(),
                a.input_dim()
            )));
        }
        let l = self.layout();
        let v = &self.values;
        let h1 = dense(&v[l.w1], &v[l.b1], input, true);
        let h2 = dense(&v[l.w2], &v[l.b2], &h1, true);
        let output = dense(&v[l.w3], &v[l.b3], &h2, false);
        Ok(Trace {
            input: input.to_vec(),
            h1,
            h2,
            output,
        })
    }

    pub fn forward(&self, input: &[f64]) -> Result<PointCloud> {
        PointCloud::from_coords(self.trace(input)?.output)
    }

    pub fn forward_batch(&self, inputs: &[Vec<f64>]) -> Result<Vec<PointCloud>> {
        inputs.iter().map(|z| self.forward(z)).collect()
    }

    /// Accumulates `∂(grad_output·x)/∂θ` into `param_grads` and returns the
    /// input gradient.
    pub fn backward_into(&self, trace: &Trace, grad_output: &[f64], param_grads: &mut [f64]) -> Vec<f64> {
        let a = &self.arch;
        let (h, i) = (a.hidden, a.input_dim());
        let l = self.layout();
        let v = &self.values;
        debug_assert_eq!(grad_output.len(), a.output_dim());
        debug_assert_eq!(param_grads.len(), v.len());

        // layer 3
        for (r, go) in grad_output.iter().enumerate() {
            if *go == 0.0 {
                continue;
            }
            let row = &mut param_grads[l.w3.start + r * h..l.w3.start + (r + 1) * h];
            for (g, x) in row.iter_mut().zip(&trace.h2) {
                *g += go * x;
            }
            param_grads[l.b3.start + r] += go;
        }
        let mut d2 = vec![0.0; h];
        let w3 = &v[l.w3.clone()];
        for (r, go) in grad_output.iter().enumerate() {
            if *go == 0.0 {
                continue;
            }
            for (d, w) in d2.iter_mut().zip(&w3[r * h..(r + 1) * h]) {
                *d += go * w;
            }
        }
        for (d, x) in d2.iter_mut().zip(&trace.h2) {
            *d *= 1.0 - x * x;
        }

        // layer 2
        let mut d1 = vec![0.0; h];
        let w2 = &v[l.w2.clone()];
        for (r, dr) in d2.iter().enumerate() {
            if *dr == 0.0 {
                continue;
            }
            let row = &mut param_grads[l.w2.start + r * h..l.w2.start + (r + 1) * h];
            for (g, x) in row.iter_mut().zip(&trace.h1) {
                *g += dr * x;
            }
            param_grads[l.b2.start + r] += dr;
            for (d, w) in d1.iter_mut().zip(&w2[r * h..(r + 1) * h]) {
                *d += dr * w;
            }
        }
        for (d, x) in d1.iter_mut().zip(&trace.h1) {
            *d *= 1.0 - x * x;
        }

        // layer 1
        let mut dz = vec![0.0; i];
        let w1 = &v[l.w1.clone()];
        for (r, dr) in d1.iter().enumerate() {
            if *dr == 0.0 {
                continue;
            }
            let row = &mut param_grads[l.w1.start + r * i..l.w1.start + (r + 1) * i];
            for (g, x) in row.iter_mut().zip(&trace.input) {
                *g += dr * x;
            }
            param_grads[l.b1.start + r] += dr;
            for (d, w) in dz.iter_mut().zip(&w1[r * i..(r + 1) * i]) {
                *d += dr * w;
            }
        }
        dz
    }

    /// Parameter and input gradients of `grad_output·G(input)`.
    pub fn backward(&self, input: &[f64], grad_output: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if grad_output.len() != self.arch.output_dim() {
            return Err(Error::Shape(format!(
                "output gradient of length {}, expected {}",
                grad_output.len(),
                self.arch.output_dim()
            )));
        }
        let trace = self.trace(input)?;
        let mut grads = vec![0.0; self.values.len()];
        let dz = self.backward_into(&trace, grad_output, &mut grads);
        Ok((grads, dz))
    }

    pub fn clone_frozen(&self) -> FrozenGenerator {
        FrozenGenerator::new(self.clone())
    }
}

fn dense(w: &[f64], b: &[f64], x: &[f64], activate: bool) -> Vec<f64> {
    let n = x.len();
    b.iter()
        .enumerate()
        .map(|(r, bias)| {
            let pre = w[r * n..(r + 1) * n]
                .iter()
                .zip(x)
                .fold(*bias, |acc, (wi, xi)| acc + wi * xi);
            if activate {
                libm::tanh(pre)
            } else {
                pre
            }
        })
        .collect()
}

/// Immutable snapshot of a generator.
#[derive(Clone, Debug)]
pub struct FrozenGenerator {
    params: GeneratorParams,
    checksum: String,
}

impl FrozenGenerator {
    fn new(params: GeneratorParams) -> Self {
        let checksum = params.checksum();
        Self { params, checksum }
    }

    pub fn params(&self) -> &GeneratorParams {
        &self.params
    }

    /// Checksum recorded when the snapshot was taken.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn verify(&self) -> bool {
        self.params.checksum() == self.checksum
    }

    pub fn forward(&self, input: &[f64]) -> Result<PointCloud> {
        self.params.forward(input)
    }
}

/// Latent code minimizing `‖G(z) − target‖²`, found by Adam from `z = 0`.
/// Returns the best iterate seen.
pub fn invert(params: &GeneratorParams, target: &PointCloud, steps: usize, lr: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("inversion needs at least one step".into()));
    }
    if params.arch.cond_dim != 0 {
        return Err(Error::InvalidArgument("inversion of a conditional generator".into()));
    }
    if target.coords().len() != params.arch.output_dim() {
        return Err(Error::Shape("inversion target size".into()));
    }
    let d = params.arch.latent_dim;
    let mut z = vec![0.0; d];
    let mut adam = AdamState::new(d, AdamConfig::with_lr(lr));
    let mut scratch = vec![0.0; params.values.len()];
    let mut best = (f64::INFINITY, z.clone());
    for it in 0..steps {
        let trace = params.trace(&z)?;
        let resid: Vec<f64> = trace.output.iter().zip(target.coords()).map(|(a, b)| a - b).collect();
        let loss: f64 = resid.iter().map(|r| r * r).sum();
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: it,
                term: "inversion loss".into(),
            });
        }
        if loss < best.0 {
            best = (loss, z.clone());
        }
        let grad_out: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
        let dz = params.backward_into(&trace, &grad_out, &mut scratch);
        adam.step(&mut z, &dz)?;
    }
    let final_loss = params.forward(&z)?.sq_distance(target);
    if final_loss < best.0 {
        best = (final_loss, z);
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn small_arch() -> Architecture {
        Architecture {
            latent_dim: 5,
            cond_dim: 0,
            hidden: 7,
            points: 4,
        }
    }

    #[test]
    fn zero_params_give_zero_cloud() {
        let p = GeneratorParams::zeros(Architecture::default());
        let out = p.forward(&[0.3; 16]).unwrap();
        assert!(out.coords().iter().all(|c| *c == 0.0));
    }

    #[test]
    fn wrong_latent_length() {
        let p = GeneratorParams::zeros(Architecture::default());
        assert!(matches!(p.forward(&[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn null_space_directions_do_not_change_output() {
        let mut rng = Rng::new(1);
        let arch = Architecture::default();
        let mut p = GeneratorParams::init(arch, &mut rng);
        // zero the last latent column of W1
        let l = p.layout();
        for r in 0..arch.hidden {
            p.values[l.w1.start + r * arch.input_dim() + 15] = 0.0;
        }
        let z = rng.normal_vec(16);
        let mut z2 = z.clone();
        z2[15] += 3.7;
        assert_eq!(p.forward(&z).unwrap(), p.forward(&z2).unwrap());
    }

    #[test]
    fn zero_output_gradient() {
        let mut rng = Rng::new(2);
        let p = GeneratorParams::init(small_arch(), &mut rng);
        let (g, dz) = p.backward(&rng.normal_vec(5), &[0.0; 8]).unwrap();
        assert!(g.iter().chain(&dz).all(|x| *x == 0.0));
    }

    #[test]
    fn squared_norm_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let p = GeneratorParams::init(small_arch(), &mut rng);
            let z = rng.normal_vec(5);
            let out = p.forward(&z).unwrap();
            let go: Vec<f64> = out.coords().iter().map(|x| 2.0 * x).collect();
            let (g, dz) = p.backward(&z, &go).unwrap();
            let loss = |vals: &[f64], z: &[f64]| {
                let q = GeneratorParams::from_values(p.arch, vals.to_vec()).unwrap();
                q.forward(z).unwrap().coords().iter().map(|x| x * x).sum::<f64>()
            };
            let fd = finite_diff_grad(|v| loss(v, &z), &p.values, 1e-5).unwrap();
            assert!(relative_error(&g, &fd, 1e-8) < 1e-4);
            let fdz = finite_diff_grad(|zz| loss(&p.values, zz), &z, 1e-5).unwrap();
            assert!(relative_error(&dz, &fdz, 1e-8) < 1e-4);
        }
    }

    #[test]
    fn input_gradient_lies_in_w1_row_space() {
        let mut rng = Rng::new(4);
        let arch = Architecture::default();
        let mut p = GeneratorParams::init(arch, &mut rng);
        let l = p.layout();
        // rank-deficient W1: zero the last 6 columns
        for r in 0..arch.hidden {
            for c in 10..16 {
                p.values[l.w1.start + r * 16 + c] = 0.0;
            }
        }
        let go = rng.normal_vec(arch.output_dim());
        let (_, dz) = p.backward(&rng.normal_vec(16), &go).unwrap();
        let null_part: f64 = dz[10..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(null_part <= 1e-10);
    }

    #[test]
    fn frozen_clone_is_independent() {
        let mut rng = Rng::new(5);
        let mut p = GeneratorParams::init(Architecture::default(), &mut rng);
        let z = rng.normal_vec(16);
        let before = p.forward(&z).unwrap();
        let frozen = p.clone_frozen();
        assert_eq!(frozen.checksum(), p.checksum());
        let mut adam = AdamState::new(p.values.len(), AdamConfig::default());
        for _ in 0..100 {
            let go = rng.normal_vec(64);
            let (g, _) = p.backward(&z, &go).unwrap();
            adam.step(&mut p.values, &g).unwrap();
        }
        assert_ne!(frozen.checksum(), p.checksum());
        assert!(frozen.verify());
        assert_eq!(frozen.forward(&z).unwrap(), before);
    }

    #[test]
    fn inversion_recovers_self_generated_target() {
        let mut rng = Rng::new(6);
        let arch = Architecture::default();
        let p = GeneratorParams::init(arch, &mut rng);
        let z_star: Vec<f64> = rng.normal_vec(16).iter().map(|x| 0.5 * x).collect();
        let target = p.forward(&z_star).unwrap();
        let z = invert(&p, &target, 500, 0.05).unwrap();
        let err = p.forward(&z).unwrap().sq_distance(&target);
        assert!(err <= 1e-4, "reconstruction error {err}");
        let z_again = invert(&p, &target, 500, 0.05).unwrap();
        assert_eq!(z, z_again);
        assert!(invert(&p, &target, 0, 0.05).is_err());
    }
}
