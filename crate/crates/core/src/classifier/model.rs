//! Logistic model over hashed features, trained by per-sample updates.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureVector;
use super::{ClassifierError, OptimizerKind, TrainingConfig};
use crate::corpus::Label;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit `z` against label `y`:
/// `softplus(z) - y*z`.
pub fn bce_from_margin(z: f64, y: f64) -> f64 {
    let softplus = z.max(0.0) + (-z.abs()).exp().ln_1p();
    softplus - y * z
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: FeatureVector,
    pub label: Label,
}

/// Gradient of the loss for one example: dense in the bias, sparse in the
/// weights (only indices present in the example).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub bias: f64,
    pub weights: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    bits: u32,
    weights: Vec<f64>,
    bias: f64,
    trained_epochs: usize,
}

impl LinearModel {
    pub fn zeros(bits: u32) -> Self {
        LinearModel {
            bits,
            weights: vec![0.0; 1usize << bits],
            bias: 0.0,
            trained_epochs: 0,
        }
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> f64 {
        self.bias
    }

    pub fn set_bias(&mut self, b: f64) {
        self.bias = b;
    }

    pub fn trained_epochs(&self) -> usize {
        self.trained_epochs
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    fn check_bits(&self, fv: &FeatureVector) {
        assert_eq!(
            fv.bits(),
            self.bits,
            "feature vector hashed with a different width"
        );
    }

    pub fn margin(&self, fv: &FeatureVector) -> f64 {
        self.check_bits(fv);
        self.bias
            + fv.entries()
                .iter()
                .map(|&(i, c)| self.weights[i as usize] * c as f64)
                .sum::<f64>()
    }

    /// Probability of class 1.
    pub fn predict_proba(&self, fv: &FeatureVector) -> f64 {
        sigmoid(self.margin(fv))
    }

    pub fn loss(&self, ex: &Example) -> f64 {
        bce_from_margin(self.margin(&ex.features), ex.label.as_f64())
    }

    pub fn mean_loss(&self, data: &[Example]) -> f64 {
        data.iter().map(|e| self.loss(e)).sum::<f64>() / data.len() as f64
    }

    pub fn loss_and_gradient(&self, ex: &Example) -> (f64, Gradient) {
        let z = self.margin(&ex.features);
        let y = ex.label.as_f64();
        let residual = sigmoid(z) - y;
        let grad = Gradient {
            bias: residual,
            weights: ex
                .features
                .entries()
                .iter()
                .map(|&(i, c)| (i, residual * c as f64))
                .collect(),
        };
        (bce_from_margin(z, y), grad)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let body = serde_json::to_string(&Checkpoint::from(self))?;
        std::fs::write(path, body + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let body = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&body)?;
        ck.try_into()
    }
}

/// On-disk model: nonzero weights only.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub bits: u32,
    pub weights: Vec<(u32, f64)>,
    pub bias: f64,
    pub trained_epochs: usize,
}

impl From<&LinearModel> for Checkpoint {
    fn from(m: &LinearModel) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            bits: m.bits,
            weights: m
                .weights
                .iter()
                .enumerate()
                .filter(|(_, w)| **w != 0.0)
                .map(|(i, w)| (i as u32, *w))
                .collect(),
            bias: m.bias,
            trained_epochs: m.trained_epochs,
        }
    }
}

impl TryFrom<Checkpoint> for LinearModel {
    type Error = ClassifierError;

    fn try_from(ck: Checkpoint) -> Result<Self, Self::Error> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(ClassifierError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        if !(1..=super::features::MAX_BITS).contains(&ck.bits) {
            return Err(ClassifierError::Checkpoint(format!(
                "invalid bits {}",
                ck.bits
            )));
        }
        let mut m = LinearModel::zeros(ck.bits);
        for (i, w) in ck.weights {
            let slot = m.weights.get_mut(i as usize).ok_or_else(|| {
                ClassifierError::Checkpoint(format!("weight index {i} out of range"))
            })?;
            *slot = w;
        }
        m.bias = ck.bias;
        m.trained_epochs = ck.trained_epochs;
        if !m.is_finite() {
            return Err(ClassifierError::Checkpoint("non-finite parameters".into()));
        }
        Ok(m)
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPSILON: f64 = 1e-8;

/// Optimizer state. Adaptive-moment updates are applied lazily: only the
/// coordinates present in the current example (and the bias) move, while
/// bias correction uses the global step count.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    m_bias: f64,
    v_bias: f64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, bits: u32) -> Self {
        let n = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::AdaptiveMoments => 1usize << bits,
        };
        Optimizer {
            kind,
            lr,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            m_bias: 0.0,
            v_bias: 0.0,
        }
    }

    pub fn apply(&mut self, model: &mut LinearModel, grad: &Gradient) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                model.bias -= self.lr * grad.bias;
                for &(i, g) in &grad.weights {
                    model.weights[i as usize] -= self.lr * g;
                }
            }
            OptimizerKind::AdaptiveMoments => {
                let t = self.step as i32;
                let c1 = 1.0 - BETA1.powi(t);
                let c2 = 1.0 - BETA2.powi(t);
                let lr = self.lr;
                let update = |m: &mut f64, v: &mut f64, g: f64| {
                    *m = BETA1 * *m + (1.0 - BETA1) * g;
                    *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                    lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON)
                };
                model.bias -= update(&mut self.m_bias, &mut self.v_bias, grad.bias);
                for &(i, g) in &grad.weights {
                    let i = i as usize;
                    model.weights[i] -= update(&mut self.m[i], &mut self.v[i], g);
                }
            }
        }
    }
}

/// Seed for the shuffle of a given absolute epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64)
        .wrapping_add(1)
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// One pass over `data` in a seed-determined order, updating `model` in
/// place. Returns the mean loss of the updated model on `data`.
pub fn run_epoch(
    model: &mut LinearModel,
    opt: &mut Optimizer,
    data: &[Example],
    seed: u64,
) -> Result<f64, ClassifierError> {
    if data.is_empty() {
        return Err(ClassifierError::EmptyData);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, model.trained_epochs));
    order.shuffle(&mut rng);
    for i in order {
        let (_, grad) = model.loss_and_gradient(&data[i]);
        opt.apply(model, &grad);
    }
    model.trained_epochs += 1;
    let loss = model.mean_loss(data);
    if !loss.is_finite() || !model.is_finite() {
        return Err(ClassifierError::NonFiniteLoss {
            epoch: model.trained_epochs,
        });
    }
    Ok(loss)
}

/// One epoch from fresh optimizer state.
pub fn train_epoch(
    model: &LinearModel,
    data: &[Example],
    cfg: &TrainingConfig,
) -> Result<LinearModel, ClassifierError> {
    let mut next = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, model.bits);
    run_epoch(&mut next, &mut opt, data, cfg.seed)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::features::featurize;

    fn ex(text: &str, label: Label) -> Example {
        Example {
            features: featurize(text, 10),
            label,
        }
    }

    #[test]
    fn sigmoid_spot_checks() {
        let m = LinearModel::zeros(10);
        let empty = FeatureVector::empty(10);
        assert_eq!(m.predict_proba(&empty), 0.5);
        let mut biased = m.clone();
        biased.set_bias(10.0);
        assert!(biased.predict_proba(&empty) > 0.9999);
        for z in [-40.0, -3.0, 0.0, 0.7, 25.0] {
            assert!((sigmoid(z) + sigmoid(-z) - 1.0).abs() < 1e-15);
        }
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!(bce_from_margin(800.0, 0.0).is_finite());
    }

    #[test]
    fn epoch_decreases_loss_on_separable_pair() {
        let data = vec![
            ex("warm welcome", Label::Positive),
            ex("cold silence", Label::Negative),
        ];
        let m0 = LinearModel::zeros(10);
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::AdaptiveMoments] {
            let cfg = TrainingConfig {
                optimizer,
                ..Default::default()
            };
            let m1 = train_epoch(&m0, &data, &cfg).unwrap();
            assert!(m1.mean_loss(&data) < m0.mean_loss(&data));
            assert_eq!(m1.trained_epochs(), 1);
        }
    }

    #[test]
    fn empty_texts_move_bias_toward_prior() {
        let data = vec![
            ex("", Label::Positive),
            ex("", Label::Positive),
            ex("", Label::Positive),
            ex("", Label::Negative),
        ];
        let m = train_epoch(&LinearModel::zeros(10), &data, &TrainingConfig::default()).unwrap();
        assert!(m.bias() > 0.0);
        assert!(m.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn empty_data_rejected() {
        assert!(matches!(
            train_epoch(&LinearModel::zeros(4), &[], &TrainingConfig::default()),
            Err(ClassifierError::EmptyData)
        ));
    }

    #[test]
    fn blow_up_is_reported() {
        let data = vec![ex("a b c", Label::Positive), ex("d e f", Label::Negative)];
        let cfg = TrainingConfig {
            optimizer: OptimizerKind::Sgd,
            learning_rate: f64::MAX,
            ..Default::default()
        };
        assert!(matches!(
            train_epoch(&LinearModel::zeros(10), &data, &cfg),
            Err(ClassifierError::NonFiniteLoss { epoch: 1 })
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let data = vec![
            ex("tell me about home", Label::Positive),
            ex("open the book", Label::Negative),
        ];
        let m = train_epoch(&LinearModel::zeros(10), &data, &TrainingConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(LinearModel::load(&p).unwrap(), m);
    }

    /// Central differences on the scalar loss, perturbing one parameter.
    fn numeric(m: &LinearModel, e: &Example, idx: Option<u32>, h: f64) -> f64 {
        let mut plus = m.clone();
        let mut minus = m.clone();
        match idx {
            Some(i) => {
                plus.weights[i as usize] += h;
                minus.weights[i as usize] -= h;
            }
            None => {
                plus.bias += h;
                minus.bias -= h;
            }
        }
        (plus.loss(e) - minus.loss(e)) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let bits = 6;
        let mut checked = 0;
        for _ in 0..120 {
            let mut m = LinearModel::zeros(bits);
            for w in m.weights_mut() {
                *w = rng.gen_range(-1.0..1.0);
            }
            m.set_bias(rng.gen_range(-1.0..1.0));
            let n = rng.gen_range(1..6);
            let pairs: Vec<(u32, u32)> = (0..n)
                .map(|_| (rng.gen_range(0..1u32 << bits), rng.gen_range(1..4)))
                .collect();
            let e = Example {
                features: FeatureVector::from_pairs(bits, pairs),
                label: if rng.gen_bool(0.5) {
                    Label::Positive
                } else {
                    Label::Negative
                },
            };
            let (_, g) = m.loss_and_gradient(&e);
            let mut targets: Vec<(Option<u32>, f64)> = vec![(None, g.bias)];
            targets.extend(g.weights.iter().map(|&(i, v)| (Some(i), v)));
            for (idx, analytic) in targets {
                let approx = numeric(&m, &e, idx, 1e-5);
                let rel = (analytic - approx).abs() / analytic.abs().max(approx.abs()).max(1e-8);
                assert!(
                    rel <= 1e-4,
                    "idx {idx:?}: analytic {analytic} vs numeric {approx}"
                );
            }
            checked += 1;
        }
        assert!(checked >= 100);
    }
}
