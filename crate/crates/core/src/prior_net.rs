//! Empirical-Bayes prior network.
//!
//! A residual feedforward map from contextual features `z` to per-feature
//! Gamma-Poisson prior parameters `(ln α, ζ)`, with `β = e^ζ`:
//!
//! ```text
//! h₀ = W_in z + b_in
//! hₖ = hₖ₋₁ + W₂ₖ relu(W₁ₖ hₖ₋₁ + b₁ₖ) + b₂ₖ      k = 1..=num_residual_blocks
//! [ln α₁..ln α_L, ζ₁..ζ_L] = W_head h_B + b_head
//! ```
//!
//! Training minimizes the Gamma-Poisson negative log-likelihood (without the
//! `ln x!` constant) with hand-derived gradients and Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::error::{Error, Result};
use crate::gamma_poisson::GammaPoissonParams;
use crate::optim::OptimizerState;
use crate::special::{digamma, ln_gamma, log_sigmoid, sigmoid};

pub const LOG_ALPHA_BOUNDS: (f64, f64) = (-10.0, 10.0);
pub const ZETA_BOUNDS: (f64, f64) = (-30.0, 30.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    /// Number of interaction features `L`; the head emits `2L` values.
    pub num_features: usize,
    pub hidden_width: usize,
    pub num_residual_blocks: usize,
}

impl Architecture {
    /// Hidden width 64 with two residual blocks.
    pub fn new(input_dim: usize, num_features: usize) -> Self {
        Self {
            input_dim,
            num_features,
            hidden_width: 64,
            num_residual_blocks: 2,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.num_features
    }

    pub fn param_count(&self) -> usize {
        let (d, h, o) = (self.input_dim, self.hidden_width, self.output_dim());
        h * d + h + self.num_residual_blocks * (2 * h * h + 2 * h) + o * h + o
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_features == 0 || self.hidden_width == 0 {
            return Err(Error::Usage(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Offsets of each weight block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    arch: Architecture,
}

impl Layout {
    fn w_in(&self) -> usize {
        0
    }
    fn b_in(&self) -> usize {
        self.arch.hidden_width * self.arch.input_dim
    }
    fn block(&self, k: usize) -> usize {
        let h = self.arch.hidden_width;
        self.b_in() + h + k * (2 * h * h + 2 * h)
    }
    // within a block: W1 [h×h], b1 [h], W2 [h×h], b2 [h]
    fn w1(&self, k: usize) -> usize {
        self.block(k)
    }
    fn b1(&self, k: usize) -> usize {
        self.block(k) + self.arch.hidden_width * self.arch.hidden_width
    }
    fn w2(&self, k: usize) -> usize {
        self.b1(k) + self.arch.hidden_width
    }
    fn b2(&self, k: usize) -> usize {
        self.w2(k) + self.arch.hidden_width * self.arch.hidden_width
    }
    fn w_head(&self) -> usize {
        self.block(self.arch.num_residual_blocks)
    }
    fn b_head(&self) -> usize {
        self.w_head() + self.arch.output_dim() * self.arch.hidden_width
    }
}

/// out += W x, W row-major `[rows × x.len()]`.
fn matvec_add(w: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// out += Wᵀ g.
fn matvec_t_add(w: &[f64], g: &[f64], out: &mut [f64]) {
    let cols = out.len();
    for (gi, row) in g.iter().zip(w.chunks_exact(cols)) {
        if *gi == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(row) {
            *o += gi * a;
        }
    }
}

/// dW += g ⊗ x.
fn outer_add(g: &[f64], x: &[f64], dw: &mut [f64]) {
    for (gi, row) in g.iter().zip(dw.chunks_exact_mut(x.len())) {
        if *gi == 0.0 {
            continue;
        }
        for (d, xj) in row.iter_mut().zip(x) {
            *d += gi * xj;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorNetwork {
    arch: Architecture,
    params: Vec<f64>,
}

/// Network outputs for one input: `ln α` and `ζ` per interaction feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorOutput {
    pub log_alpha: Vec<f64>,
    pub zeta: Vec<f64>,
}

impl PriorOutput {
    pub fn len(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_alpha.is_empty()
    }

    /// Gamma-Poisson parameters of feature `i`, clamped to the loss bounds.
    pub fn params(&self, i: usize) -> GammaPoissonParams {
        let la = self.log_alpha[i].clamp(LOG_ALPHA_BOUNDS.0, LOG_ALPHA_BOUNDS.1);
        let z = self.zeta[i].clamp(ZETA_BOUNDS.0, ZETA_BOUNDS.1);
        GammaPoissonParams::from_logits(la, z).expect("clamped logits are finite")
    }
}

/// Gradient of a loss with respect to the network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub log_alpha: Vec<f64>,
    pub zeta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub z: Vec<f64>,
    pub x: Vec<u64>,
    /// Exposures behind the counts in `x`; the count rate is per exposure, so
    /// the likelihood uses success logit `ζ - ln(exposure)`.
    pub exposure: f64,
}

impl TrainingExample {
    pub fn new(z: Vec<f64>, x: Vec<u64>) -> Self {
        Self { z, x, exposure: 1.0 }
    }

    pub fn with_exposure(z: Vec<f64>, x: Vec<u64>, exposure: f64) -> Self {
        Self { z, x, exposure }
    }
}

struct ForwardCache {
    hidden: Vec<Vec<f64>>,
    pre_act: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl PriorNetwork {
    /// He-uniform hidden layers, zero biases, zero head (initial prior α = β = 1).
    pub fn new<R: Rng + ?Sized>(arch: Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let layout = Layout { arch };
        let mut params = vec![0.0; arch.param_count()];
        let (d, h) = (arch.input_dim, arch.hidden_width);
        let mut he = |slice: &mut [f64], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in slice {
                *p = rng.random_range(-bound..bound);
            }
        };
        he(&mut params[layout.w_in()..layout.b_in()], d);
        for k in 0..arch.num_residual_blocks {
            he(&mut params[layout.w1(k)..layout.b1(k)], h);
            he(&mut params[layout.w2(k)..layout.b2(k)], h);
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Shape {
                what: "prior network parameters",
                expected: arch.param_count(),
                got: params.len(),
            });
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.arch.input_dim {
            return Err(Error::Shape {
                what: "prior network input",
                expected: self.arch.input_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    fn forward_cached(&self, z: &[f64]) -> ForwardCache {
        let layout = Layout { arch: self.arch };
        let p = &self.params;
        let h = self.arch.hidden_width;
        let mut h0 = p[layout.b_in()..layout.b_in() + h].to_vec();
        matvec_add(&p[layout.w_in()..layout.b_in()], z, &mut h0);
        let mut hidden = vec![h0];
        let mut pre_act = Vec::with_capacity(self.arch.num_residual_blocks);
        for k in 0..self.arch.num_residual_blocks {
            let prev = hidden.last().unwrap();
            let mut a = p[layout.b1(k)..layout.w2(k)].to_vec();
            matvec_add(&p[layout.w1(k)..layout.b1(k)], prev, &mut a);
            let r: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
            let mut next = prev.clone();
            for (n, b) in next.iter_mut().zip(&p[layout.b2(k)..layout.b2(k) + h]) {
                *n += b;
            }
            matvec_add(&p[layout.w2(k)..layout.b2(k)], &r, &mut next);
            pre_act.push(a);
            hidden.push(next);
        }
        let o = self.arch.output_dim();
        let mut out = p[layout.b_head()..layout.b_head() + o].to_vec();
        matvec_add(&p[layout.w_head()..layout.b_head()], hidden.last().unwrap(), &mut out);
        ForwardCache {
            hidden,
            pre_act,
            out,
        }
    }

    pub fn forward(&self, z: &[f64]) -> Result<PriorOutput> {
        self.check_input(z)?;
        let out = self.forward_cached(z).out;
        let l = self.arch.num_features;
        Ok(PriorOutput {
            log_alpha: out[..l].to_vec(),
            zeta: out[l..].to_vec(),
        })
    }

    /// Accumulates `∂/∂θ` into `grad` given `∂/∂out`.
    fn backward(&self, z: &[f64], cache: &ForwardCache, g_out: &[f64], grad: &mut [f64]) {
        let layout = Layout { arch: self.arch };
        let p = &self.params;
        let h = self.arch.hidden_width;
        let top = cache.hidden.last().unwrap();
        outer_add(g_out, top, &mut grad[layout.w_head()..layout.b_head()]);
        for (gb, g) in grad[layout.b_head()..].iter_mut().zip(g_out) {
            *gb += g;
        }
        let mut g_h = vec![0.0; h];
        matvec_t_add(&p[layout.w_head()..layout.b_head()], g_out, &mut g_h);

        for k in (0..self.arch.num_residual_blocks).rev() {
            let a = &cache.pre_act[k];
            let prev = &cache.hidden[k];
            let r: Vec<f64> = a.iter().map(|v| v.max(0.0)).collect();
            outer_add(&g_h, &r, &mut grad[layout.w2(k)..layout.b2(k)]);
            for (gb, g) in grad[layout.b2(k)..layout.b2(k) + h].iter_mut().zip(&g_h) {
                *gb += g;
            }
            let mut g_a = vec![0.0; h];
            matvec_t_add(&p[layout.w2(k)..layout.b2(k)], &g_h, &mut g_a);
            for (ga, av) in g_a.iter_mut().zip(a) {
                if *av <= 0.0 {
                    *ga = 0.0;
                }
            }
            outer_add(&g_a, prev, &mut grad[layout.w1(k)..layout.b1(k)]);
            for (gb, g) in grad[layout.b1(k)..layout.w2(k)].iter_mut().zip(&g_a) {
                *gb += g;
            }
            // skip path keeps g_h; the branch adds W1ᵀ g_a
            matvec_t_add(&p[layout.w1(k)..layout.b1(k)], &g_a, &mut g_h);
        }

        outer_add(&g_h, z, &mut grad[layout.w_in()..layout.b_in()]);
        for (gb, g) in grad[layout.b_in()..layout.b_in() + h].iter_mut().zip(&g_h) {
            *gb += g;
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let a = self.arch;
        Checkpoint {
            kind: CheckpointKind::PriorNetwork,
            dims: vec![
                a.input_dim as u64,
                a.num_features as u64,
                a.hidden_width as u64,
                a.num_residual_blocks as u64,
            ],
            values: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::PriorNetwork || ck.dims.len() != 4 {
            return Err(Error::Load("checkpoint does not hold a prior network".into()));
        }
        let arch = Architecture {
            input_dim: ck.dims[0] as usize,
            num_features: ck.dims[1] as usize,
            hidden_width: ck.dims[2] as usize,
            num_residual_blocks: ck.dims[3] as usize,
        };
        Self::from_params(arch, ck.values.clone()).map_err(|e| Error::Load(e.to_string()))
    }
}

/// Loss and output-gradients of one feature, at success logit `zeta - ln(exposure)`.
///
/// Returns `(nll, ∂/∂ln α, ∂/∂ζ)`; a clamped coordinate has zero gradient.
fn feature_nll(x: u64, log_alpha: f64, zeta: f64, log_exposure: f64) -> (f64, f64, f64) {
    let la = log_alpha.clamp(LOG_ALPHA_BOUNDS.0, LOG_ALPHA_BOUNDS.1);
    let zc = zeta.clamp(ZETA_BOUNDS.0, ZETA_BOUNDS.1);
    let alpha = la.exp();
    let xf = x as f64;
    let logit = zc - log_exposure;
    // α ln σ(ζ) and x ln(1 - σ(ζ)) as log-sigmoids: the BCE-style stable form.
    let mut ll = ln_gamma(xf + alpha) - ln_gamma(alpha) + alpha * log_sigmoid(logit);
    if x > 0 {
        ll += xf * log_sigmoid(-logit);
    }
    let s = sigmoid(logit);
    let d_zeta = if zc == zeta {
        -(alpha * (1.0 - s) - xf * s)
    } else {
        0.0
    };
    let d_log_alpha = if la == log_alpha {
        -alpha * (digamma(xf + alpha) - digamma(alpha) + log_sigmoid(logit))
    } else {
        0.0
    };
    (-ll, d_log_alpha, d_zeta)
}

fn check_lengths(out: &PriorOutput, x: &[u64]) -> Result<()> {
    if out.zeta.len() != out.log_alpha.len() {
        return Err(Error::Shape {
            what: "prior output zeta",
            expected: out.log_alpha.len(),
            got: out.zeta.len(),
        });
    }
    if x.len() != out.log_alpha.len() {
        return Err(Error::Shape {
            what: "count vector",
            expected: out.log_alpha.len(),
            got: x.len(),
        });
    }
    Ok(())
}

/// Gamma-Poisson negative log-likelihood summed over features, dropping `ln x!`.
pub fn gp_nll(out: &PriorOutput, x: &[u64]) -> Result<f64> {
    gp_nll_with_exposure(out, x, 1.0)
}

pub fn gp_nll_with_exposure(out: &PriorOutput, x: &[u64], exposure: f64) -> Result<f64> {
    check_lengths(out, x)?;
    let le = exposure.ln();
    Ok(x
        .iter()
        .enumerate()
        .map(|(i, &xi)| feature_nll(xi, out.log_alpha[i], out.zeta[i], le).0)
        .sum())
}

/// Analytic gradient of [`gp_nll`]:
///
/// ```text
/// ∂/∂ζᵢ    = -[αᵢ (1 - σ(ζᵢ)) - xᵢ σ(ζᵢ)]
/// ∂/∂ln αᵢ = -αᵢ [ψ(xᵢ + αᵢ) - ψ(αᵢ) + ln σ(ζᵢ)]
/// ```
pub fn gp_nll_grad(out: &PriorOutput, x: &[u64]) -> Result<OutputGrad> {
    gp_nll_grad_with_exposure(out, x, 1.0)
}

pub fn gp_nll_grad_with_exposure(out: &PriorOutput, x: &[u64], exposure: f64) -> Result<OutputGrad> {
    check_lengths(out, x)?;
    let le = exposure.ln();
    let (log_alpha, zeta) = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            let (_, ga, gz) = feature_nll(xi, out.log_alpha[i], out.zeta[i], le);
            (ga, gz)
        })
        .unzip();
    Ok(OutputGrad { log_alpha, zeta })
}

fn check_example(net: &PriorNetwork, ex: &TrainingExample) -> Result<()> {
    net.check_input(&ex.z)?;
    if ex.x.len() != net.arch.num_features {
        return Err(Error::Shape {
            what: "count vector",
            expected: net.arch.num_features,
            got: ex.x.len(),
        });
    }
    if !(ex.exposure.is_finite() && ex.exposure > 0.0) {
        return Err(Error::domain(format!("exposure must be positive, got {}", ex.exposure)));
    }
    Ok(())
}

/// Gradient of the batch-mean loss with respect to θ, and the mean loss.
pub fn backprop(net: &PriorNetwork, batch: &[TrainingExample]) -> Result<(Vec<f64>, f64)> {
    let refs: Vec<&TrainingExample> = batch.iter().collect();
    backprop_refs(net, &refs)
}

fn backprop_refs(net: &PriorNetwork, batch: &[&TrainingExample]) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let l = net.arch.num_features;
    let mut grad = vec![0.0; net.params.len()];
    let mut loss = 0.0;
    let mut g_out = vec![0.0; 2 * l];
    for ex in batch {
        check_example(net, ex)?;
        let cache = net.forward_cached(&ex.z);
        let le = ex.exposure.ln();
        for i in 0..l {
            let (nll, ga, gz) = feature_nll(ex.x[i], cache.out[i], cache.out[l + i], le);
            loss += nll;
            g_out[i] = ga;
            g_out[l + i] = gz;
        }
        net.backward(&ex.z, &cache, &g_out, &mut grad);
    }
    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((grad, loss * scale))
}

/// Mean per-example loss of `net` over `data`.
pub fn mean_nll(net: &PriorNetwork, data: &[TrainingExample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Usage("empty dataset".into()));
    }
    let mut total = 0.0;
    for ex in data {
        check_example(net, ex)?;
        let out = net.forward(&ex.z)?;
        total += gp_nll_with_exposure(&out, &ex.x, ex.exposure)?;
    }
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 1024,
            epochs: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: PriorNetwork,
    /// Mean mini-batch loss of each epoch.
    pub loss_history: Vec<f64>,
}

/// Mini-batch Adam on the mean Gamma-Poisson NLL.
///
/// The shuffle order is drawn from `config.seed`, so training is
/// bit-reproducible.
pub fn train(
    mut net: PriorNetwork,
    dataset: &[TrainingExample],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train on an empty dataset".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    for ex in dataset {
        check_example(&net, ex)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = OptimizerState::adam(net.params.len(), config.learning_rate);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (grad, loss) = backprop_refs(&net, &batch)?;
            opt.apply(&mut net.params, &grad);
            epoch_loss += loss;
            batches += 1;
        }
        history.push(epoch_loss / batches as f64);
    }
    Ok(TrainOutcome {
        network: net,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma_poisson::log_pmf;

    fn tiny(blocks: usize, seed: u64) -> PriorNetwork {
        let arch = Architecture {
            input_dim: 3,
            num_features: 2,
            hidden_width: 5,
            num_residual_blocks: blocks,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = PriorNetwork::new(arch, &mut rng).unwrap();
        // give the zero head some weight so every path carries gradient
        for p in net.params_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        net
    }

    #[test]
    fn zero_head_yields_unit_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = PriorNetwork::new(Architecture::new(3, 3), &mut rng).unwrap();
        let out = net.forward(&[0.2, 0.9, 0.4]).unwrap();
        assert_eq!(out.log_alpha.len() + out.zeta.len(), 6);
        assert!(out.log_alpha.iter().chain(&out.zeta).all(|v| *v == 0.0));
        let p = out.params(0);
        assert_eq!((p.alpha(), p.beta()), (1.0, 1.0));
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let net = tiny(2, 3);
        let a = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let b = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let bits = |o: &PriorOutput| {
            o.log_alpha.iter().chain(&o.zeta).map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
        assert!(matches!(net.forward(&[0.1, 0.2]), Err(Error::Shape { .. })));
    }

    #[test]
    fn param_count_formula() {
        let a = Architecture::new(3, 1);
        assert_eq!(a.param_count(), 64 * 3 + 64 + 2 * (2 * 64 * 64 + 128) + 2 * 64 + 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(PriorNetwork::new(a, &mut rng).unwrap().params().len(), a.param_count());
    }

    #[test]
    fn nll_examples() {
        let out = PriorOutput {
            log_alpha: vec![0.0],
            zeta: vec![0.0],
        };
        assert!((gp_nll(&out, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let out2 = PriorOutput {
            log_alpha: vec![0.0, 0.0],
            zeta: vec![0.0, 0.0],
        };
        assert!((gp_nll(&out2, &[0, 0]).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-15);

        let out3 = PriorOutput {
            log_alpha: vec![3f64.ln()],
            zeta: vec![2f64.ln()],
        };
        let nll = gp_nll(&out3, &[2]).unwrap();
        let full = -log_pmf(2, &GammaPoissonParams::new(3.0, 2.0).unwrap());
        assert!((nll + ln_gamma(3.0) - full).abs() < 1e-10 * full);

        assert!(gp_nll(&out, &[1, 2]).is_err());
    }

    #[test]
    fn zeta_gradient_vanishes_at_the_mean() {
        let (alpha, zeta) = (4.0f64, 0.0f64);
        let s = sigmoid(zeta);
        let x = (alpha * (1.0 - s) / s).round() as u64;
        assert_eq!(x, 4);
        let out = PriorOutput {
            log_alpha: vec![alpha.ln()],
            zeta: vec![zeta],
        };
        let g = gp_nll_grad(&out, &[x]).unwrap();
        assert!(g.zeta[0].abs() < 1e-12);
    }

    #[test]
    fn zeta_gradient_at_zero_count() {
        let out = PriorOutput {
            log_alpha: vec![0.7],
            zeta: vec![-0.4],
        };
        let g = gp_nll_grad(&out, &[0]).unwrap();
        // magnitude α(1 - σ(ζ)); the descent direction -∂/∂ζ raises ζ
        let magnitude = 0.7f64.exp() * (1.0 - sigmoid(-0.4));
        assert!((g.zeta[0] + magnitude).abs() < 1e-14);
        assert!(-g.zeta[0] > 0.0);
    }

    #[test]
    fn clamped_outputs_have_zero_gradient() {
        let out = PriorOutput {
            log_alpha: vec![12.0],
            zeta: vec![-40.0],
        };
        let g = gp_nll_grad(&out, &[3]).unwrap();
        assert_eq!((g.log_alpha[0], g.zeta[0]), (0.0, 0.0));
    }

    #[test]
    fn linear_network_gradient_matches_closed_form() {
        // 0 blocks: out = W_h (W_in z + b_in) + b_h
        let net = tiny(0, 9);
        let arch = net.architecture();
        let layout = Layout { arch };
        let ex = TrainingExample::new(vec![0.3, 0.6, 0.9], vec![2, 0]);
        let (grad, _) = backprop(&net, std::slice::from_ref(&ex)).unwrap();

        let p = net.params();
        let (d, h, o) = (arch.input_dim, arch.hidden_width, arch.output_dim());
        let mut h0 = vec![0.0; h];
        for r in 0..h {
            h0[r] = p[layout.b_in() + r] + (0..d).map(|c| p[r * d + c] * ex.z[c]).sum::<f64>();
        }
        let out = net.forward(&ex.z).unwrap();
        let g = gp_nll_grad(&out, &ex.x).unwrap();
        let g_out: Vec<f64> = g.log_alpha.iter().chain(&g.zeta).copied().collect();
        for r in 0..o {
            for c in 0..h {
                let want = g_out[r] * h0[c];
                assert!((grad[layout.w_head() + r * h + c] - want).abs() < 1e-12);
            }
            assert!((grad[layout.b_head() + r] - g_out[r]).abs() < 1e-12);
        }
        for r in 0..h {
            let back: f64 = (0..o).map(|k| p[layout.w_head() + k * h + r] * g_out[k]).sum();
            for c in 0..d {
                assert!((grad[r * d + c] - back * ex.z[c]).abs() < 1e-12);
            }
            assert!((grad[layout.b_in() + r] - back).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_example_gives_same_gradient() {
        let net = tiny(2, 4);
        let ex = TrainingExample::new(vec![0.5, 0.1, 0.7], vec![3, 1]);
        let (g1, l1) = backprop(&net, std::slice::from_ref(&ex)).unwrap();
        let (g2, l2) = backprop(&net, &[ex.clone(), ex]).unwrap();
        assert!((l1 - l2).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
        }
    }

    #[test]
    fn train_with_zero_epochs_is_identity() {
        let net = tiny(1, 5);
        let data = vec![TrainingExample::new(vec![0.0, 0.5, 1.0], vec![1, 2])];
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(net.clone(), &data, &cfg).unwrap();
        assert_eq!(out.network, net);
        assert!(out.loss_history.is_empty());
        assert!(matches!(train(net, &[], &cfg), Err(Error::Usage(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = tiny(2, 8);
        let bytes = net.to_checkpoint().encode();
        let back = PriorNetwork::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap();
        assert_eq!(back.architecture(), net.architecture());
        let bits = |n: &PriorNetwork| n.params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&net));
    }
}
