//! Fully connected network trained on a survival ranking loss.
//!
//! The loss combines a one-sided squared error on predicted times with a
//! pairwise penalty on under-predicted time differences, plus weight decay.
//! Predictions are times, so the output head is a softplus.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::RecurrentDataset;
use crate::error::{Error, Result};
use crate::metrics::RiskScores;
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Softplus,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Softplus, Activation::Tanh, Activation::Sigmoid];

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative given the pre-activation `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input width first, output width (1) last.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Weight-decay coefficient.
    pub mu: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    /// `None` trains full-batch.
    pub batch: Option<usize>,
}

impl NetworkSpec {
    /// Two hidden layers of width `min(p, 32)`.
    pub fn for_inputs(p: usize) -> Self {
        let h = p.clamp(1, 32);
        Self {
            layer_sizes: vec![p, h, h, 1],
            activation: Activation::Softplus,
            alpha1: 1.0,
            alpha2: 1.0,
            mu: 1e-4,
            learning_rate: 0.05,
            epochs: 300,
            batch: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.layer_sizes.len() < 2 || self.layer_sizes.iter().any(|&s| s == 0) {
            return fail("network needs at least input and output layers of nonzero width");
        }
        if self.layer_sizes.last() != Some(&1) {
            return fail("output layer must have width 1");
        }
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return fail("alpha1 and alpha2 must be > 0");
        }
        if !(self.mu >= 0.0) || !(self.learning_rate > 0.0) {
            return fail("mu must be >= 0 and learning_rate > 0");
        }
        if self.batch == Some(0) {
            return fail("batch size must be positive");
        }
        Ok(())
    }
}

/// One training target: time to the next event or to censoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvSample {
    pub covariates: Vec<f64>,
    pub observed_time: f64,
    pub censored: bool,
}

/// How recurrent histories become training samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Every inter-event gap is a sample; the trailing gap is censored.
    #[default]
    Gaps,
    /// One sample per subject: first event, or censoring if none.
    FirstEvent,
}

pub fn samples_from_dataset(data: &RecurrentDataset, mode: SampleMode) -> Vec<SurvSample> {
    let mut out = Vec::new();
    for s in data.subjects() {
        match mode {
            SampleMode::Gaps => {
                let mut prev = 0.0;
                for &t in &s.event_times {
                    out.push(SurvSample {
                        covariates: s.covariates.clone(),
                        observed_time: t - prev,
                        censored: false,
                    });
                    prev = t;
                }
                if s.follow_up() > prev {
                    out.push(SurvSample {
                        covariates: s.covariates.clone(),
                        observed_time: s.follow_up() - prev,
                        censored: true,
                    });
                }
            }
            SampleMode::FirstEvent => {
                if s.follow_up() > 0.0 || !s.event_times.is_empty() {
                    let (t, censored) = match s.event_times.first() {
                        Some(&t) => (t, false),
                        None => (s.follow_up(), true),
                    };
                    out.push(SurvSample {
                        covariates: s.covariates.clone(),
                        observed_time: t,
                        censored,
                    });
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub weight_penalty: f64,
    pub total: f64,
}

fn check_alignment(predictions: &[f64], samples: &[SurvSample]) -> Result<()> {
    if predictions.len() != samples.len() || samples.is_empty() {
        return Err(Error::InvalidData(format!(
            "{} predictions for {} samples",
            predictions.len(),
            samples.len()
        )));
    }
    Ok(())
}

/// Ranking loss of `predictions` against `samples`. `weight_sq_norm` is the
/// squared norm of the network weights for the decay term.
pub fn rank_loss(
    predictions: &[f64],
    samples: &[SurvSample],
    spec: &NetworkSpec,
    weight_sq_norm: f64,
) -> Result<LossBreakdown> {
    Ok(loss_with_gradient(predictions, samples, spec, weight_sq_norm, false)?.0)
}

/// Loss and its gradient with respect to each prediction.
fn loss_with_gradient(
    pred: &[f64],
    samples: &[SurvSample],
    spec: &NetworkSpec,
    weight_sq_norm: f64,
    want_gradient: bool,
) -> Result<(LossBreakdown, Vec<f64>)> {
    check_alignment(pred, samples)?;
    let n = samples.len() as f64;
    let mut grad = if want_gradient { vec![0.0; pred.len()] } else { Vec::new() };

    let mut l1 = 0.0;
    for (i, s) in samples.iter().enumerate() {
        if s.censored || pred[i] < s.observed_time {
            let r = pred[i] - s.observed_time;
            l1 += r * r;
            if want_gradient {
                grad[i] += spec.alpha1 * 2.0 * r / n;
            }
        }
    }
    l1 /= n;

    let mut l2 = 0.0;
    for i in 0..samples.len() {
        for j in 0..samples.len() {
            let obs_diff = samples[j].observed_time - samples[i].observed_time;
            let pred_diff = pred[j] - pred[i];
            if obs_diff > pred_diff {
                let r = obs_diff - pred_diff;
                l2 += r * r;
                if want_gradient {
                    let g = spec.alpha2 * 2.0 * r / n;
                    grad[j] -= g;
                    grad[i] += g;
                }
            }
        }
    }
    l2 /= n;

    let weight_penalty = spec.mu * weight_sq_norm;
    let total = spec.alpha1 * l1 + spec.alpha2 * l2 + weight_penalty;
    if !total.is_finite() {
        return Err(Error::Numerical(format!("ranking loss is not finite ({total})")));
    }
    Ok((
        LossBreakdown {
            l1,
            l2,
            weight_penalty,
            total,
        },
        grad,
    ))
}

/// Dense layer, weights row-major `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Layer {
    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.biases[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub layers: Vec<Layer>,
}

/// Per-sample activations kept for backpropagation.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Network {
    /// Network with every weight and bias zero.
    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Self {
        let layers = layer_sizes
            .windows(2)
            .map(|w| Layer {
                inputs: w[0],
                outputs: w[1],
                weights: vec![0.0; w[0] * w[1]],
                biases: vec![0.0; w[1]],
            })
            .collect();
        Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            layers,
        }
    }

    /// Normal weights scaled by `1/sqrt(fan_in)`, zero biases.
    pub fn init(spec: &NetworkSpec, rng: &mut Stream) -> Result<Self> {
        spec.validate()?;
        let mut net = Self::zeros(&spec.layer_sizes, spec.activation);
        for layer in &mut net.layers {
            let scale = (1.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weights {
                *w = scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(net)
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = vec![x.to_vec()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(post.last().unwrap());
            let a = if l == last {
                z.iter().map(|&v| softplus(v)).collect()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            post.push(a);
        }
        Trace { pre, post }
    }

    /// Predicted time (always positive).
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.input_width() {
            return Err(Error::InvalidData(format!(
                "input has {} covariates, network expects {}",
                x.len(),
                self.input_width()
            )));
        }
        Ok(self.trace(x).post.last().unwrap()[0])
    }

    pub fn predict(&self, samples: &[SurvSample]) -> Result<Vec<f64>> {
        samples.iter().map(|s| self.forward(&s.covariates)).collect()
    }

    pub fn weight_sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter())
            .map(|w| w * w)
            .sum()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Parameters flattened layer by layer, weights (row-major) then biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.n_params());
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
    }

    pub fn loss(&self, samples: &[SurvSample], spec: &NetworkSpec) -> Result<LossBreakdown> {
        rank_loss(&self.predict(samples)?, samples, spec, self.weight_sq_norm())
    }

    /// Loss and its gradient in [`Network::params`] order.
    pub fn loss_and_gradient(
        &self,
        samples: &[SurvSample],
        spec: &NetworkSpec,
    ) -> Result<(LossBreakdown, Vec<f64>)> {
        for s in samples {
            if s.covariates.len() != self.input_width() {
                return Err(Error::InvalidData("sample width does not match network".into()));
            }
        }
        let traces: Vec<Trace> = samples.iter().map(|s| self.trace(&s.covariates)).collect();
        let pred: Vec<f64> = traces.iter().map(|t| t.post.last().unwrap()[0]).collect();
        let (loss, dpred) = loss_with_gradient(&pred, samples, spec, self.weight_sq_norm(), true)?;

        let mut grads: Vec<(Vec<f64>, Vec<f64>)> = self
            .layers
            .iter()
            .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.biases.len()]))
            .collect();
        let last = self.layers.len() - 1;
        for (trace, &g) in traces.iter().zip(&dpred) {
            if g == 0.0 {
                continue;
            }
            // softplus head
            let mut delta = vec![g * sigmoid(trace.pre[last][0])];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &trace.post[l];
                let (gw, gb) = &mut grads[l];
                for o in 0..layer.outputs {
                    gb[o] += delta[o];
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (w, x) in row.iter_mut().zip(input) {
                        *w += delta[o] * x;
                    }
                }
                if l == 0 {
                    break;
                }
                let mut back = vec![0.0; layer.inputs];
                for o in 0..layer.outputs {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (b, w) in back.iter_mut().zip(row) {
                        *b += delta[o] * w;
                    }
                }
                let (z, a) = (&trace.pre[l - 1], &trace.post[l]);
                delta = back
                    .iter()
                    .zip(z.iter().zip(a))
                    .map(|(b, (&zv, &av))| b * self.activation.derivative(zv, av))
                    .collect();
            }
        }

        let mut flat = Vec::with_capacity(self.n_params());
        for (layer, (gw, gb)) in self.layers.iter().zip(grads) {
            flat.extend(gw.iter().zip(&layer.weights).map(|(g, w)| g + 2.0 * spec.mu * w));
            flat.extend(gb);
        }
        Ok((loss, flat))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(text)?;
        if net.layers.len() + 1 != net.layer_sizes.len()
            || net.layers.iter().zip(net.layer_sizes.windows(2)).any(|(l, w)| {
                l.inputs != w[0] || l.outputs != w[1] || l.weights.len() != w[0] * w[1] || l.biases.len() != w[1]
            })
        {
            return Err(Error::InvalidData("network JSON has inconsistent shapes".into()));
        }
        Ok(net)
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
    pub final_learning_rate: f64,
}

fn inverse_softplus(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

/// Gradient-descent training. Full-batch steps that would raise the loss are
/// rejected and retried at half the learning rate, so the training loss never
/// increases.
pub fn train(samples: &[SurvSample], spec: &NetworkSpec, rng: &mut Stream) -> Result<(Network, TrainingReport)> {
    spec.validate()?;
    if samples.len() < 2 {
        return Err(Error::InvalidData("training needs at least 2 samples".into()));
    }
    if samples.iter().any(|s| !(s.observed_time > 0.0)) {
        return Err(Error::InvalidData("observed times must be > 0".into()));
    }
    let mut net = Network::init(spec, rng)?;
    // start the output at the mean observed time
    let mean = samples.iter().map(|s| s.observed_time).sum::<f64>() / samples.len() as f64;
    net.layers.last_mut().unwrap().biases[0] = inverse_softplus(mean);

    let mut lr = spec.learning_rate;
    let mut losses = Vec::with_capacity(spec.epochs + 1);
    match spec.batch {
        None => {
            let (mut loss, mut grad) = net.loss_and_gradient(samples, spec)?;
            losses.push(loss.total);
            'epochs: for _ in 0..spec.epochs {
                let params = net.params();
                let mut tries = 0;
                loop {
                    let candidate: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
                    net.set_params(&candidate);
                    match net.loss_and_gradient(samples, spec) {
                        Ok((l, g)) if l.total <= loss.total => {
                            loss = l;
                            grad = g;
                            break;
                        }
                        _ => {
                            lr *= 0.5;
                            tries += 1;
                            if tries > 40 {
                                net.set_params(&params);
                                break 'epochs;
                            }
                        }
                    }
                }
                losses.push(loss.total);
            }
        }
        Some(batch) => {
            let mut order: Vec<usize> = (0..samples.len()).collect();
            losses.push(net.loss(samples, spec)?.total);
            for _ in 0..spec.epochs {
                order.shuffle(rng);
                for chunk in order.chunks(batch) {
                    let sub: Vec<SurvSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
                    if sub.len() < 2 {
                        continue;
                    }
                    let (_, grad) = net.loss_and_gradient(&sub, spec)?;
                    let params: Vec<f64> = net.params().iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
                    net.set_params(&params);
                }
                losses.push(net.loss(samples, spec)?.total);
            }
        }
    }
    Ok((
        net,
        TrainingReport {
            losses,
            final_learning_rate: lr,
        },
    ))
}

/// Per-subject risk: the negated predicted first-gap time.
pub fn predict_risk(network: &Network, data: &RecurrentDataset) -> Result<RiskScores> {
    let values = data
        .subjects()
        .iter()
        .map(|s| network.forward(&s.covariates).map(|t| -t))
        .collect::<Result<Vec<_>>>()?;
    RiskScores::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, censored: bool) -> SurvSample {
        SurvSample {
            covariates: vec![0.0],
            observed_time: t,
            censored,
        }
    }

    fn unit_spec(mu: f64) -> NetworkSpec {
        NetworkSpec {
            layer_sizes: vec![1, 1],
            activation: Activation::Softplus,
            alpha1: 1.0,
            alpha2: 1.0,
            mu,
            learning_rate: 0.1,
            epochs: 10,
            batch: None,
        }
    }

    #[test]
    fn zero_network_outputs_log_two() {
        let net = Network::zeros(&[3, 4, 1], Activation::Tanh);
        assert!((net.forward(&[1.0, -2.0, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn single_layer_hand_value() {
        let mut net = Network::zeros(&[2, 1], Activation::Softplus);
        net.layers[0].weights = vec![0.5, -1.0];
        net.layers[0].biases = vec![0.25];
        // z = 0.5*2 - 1*0.5 + 0.25 = 0.75
        let expected = (1.0 + 0.75f64.exp()).ln();
        assert!((net.forward(&[2.0, 0.5]).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn perfect_fit_leaves_only_decay() {
        let samples = vec![sample(1.0, false), sample(3.0, false)];
        let loss = rank_loss(&[1.0, 3.0], &samples, &unit_spec(0.5), 2.0).unwrap();
        assert_eq!(loss.l1, 0.0);
        assert_eq!(loss.l2, 0.0);
        assert_eq!(loss.total, 1.0);
    }

    #[test]
    fn two_sample_hand_loss() {
        let samples = vec![sample(1.0, false), sample(3.0, false)];
        let spec = NetworkSpec { alpha1: 2.0, alpha2: 3.0, ..unit_spec(0.0) };
        let loss = rank_loss(&[1.0, 2.0], &samples, &spec, 0.0).unwrap();
        assert_eq!(loss.l1, 0.5);
        assert_eq!(loss.l2, 0.5);
        assert_eq!(loss.total, 2.5);
    }

    #[test]
    fn censored_samples_always_enter_l1() {
        let samples = vec![sample(1.0, true), sample(3.0, true)];
        // over-predicted but censored: still penalized
        let loss = rank_loss(&[2.0, 4.0], &samples, &unit_spec(0.0), 0.0).unwrap();
        assert_eq!(loss.l1, 1.0);
    }

    #[test]
    fn sample_conversion() {
        use crate::data::Subject;
        let data = RecurrentDataset::new(
            vec![
                Subject::new(0, vec![1.0, 1.5], 2.0, vec![0.1]).unwrap(),
                Subject::new(1, vec![], 1.2, vec![0.2]).unwrap(),
            ],
            1,
            None,
        )
        .unwrap();
        let gaps = samples_from_dataset(&data, SampleMode::Gaps);
        let got: Vec<(f64, bool)> = gaps.iter().map(|s| (s.observed_time, s.censored)).collect();
        assert_eq!(got, vec![(1.0, false), (0.5, false), (0.5, true), (1.2, true)]);
        let first = samples_from_dataset(&data, SampleMode::FirstEvent);
        let got: Vec<(f64, bool)> = first.iter().map(|s| (s.observed_time, s.censored)).collect();
        assert_eq!(got, vec![(1.0, false), (1.2, true)]);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = crate::rng::substream(1, &[2]);
        let net = Network::init(&NetworkSpec::for_inputs(3), &mut rng).unwrap();
        let back = Network::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
        assert!(Network::from_json(r#"{"layer_sizes":[2,1],"activation":"tanh","layers":[]}"#).is_err());
    }
}
