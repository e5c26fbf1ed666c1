use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Layout, LearningError, ParamVector, TensorShape, TrainerKind};
use crate::data::Dataset;

/// A trainer bound to its input/output dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    kind: TrainerKind,
    d: usize,
    c: usize,
}

fn tensor(name: &str, shape: &[usize]) -> TensorShape {
    TensorShape { name: name.into(), shape: shape.to_vec() }
}

fn view2<'a>(theta: &'a [f64], offset: usize, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &theta[offset..offset + rows * cols]).expect("layout checked")
}

fn view1(theta: &[f64], offset: usize, len: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&theta[offset..offset + len])
}

/// Row-wise log-softmax.
fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

impl Model {
    pub fn new(kind: TrainerKind, d: usize, c: usize) -> Result<Self, LearningError> {
        if d == 0 {
            return Err(LearningError::InvalidConfig("feature dimension must be positive".into()));
        }
        match kind {
            TrainerKind::Logistic | TrainerKind::Mlp { .. } if c < 2 => {
                return Err(LearningError::InvalidConfig("classifiers need at least two classes".into()))
            }
            TrainerKind::Mlp { hidden: 0 } | TrainerKind::Autoencoder { hidden: 0 } => {
                return Err(LearningError::InvalidConfig("hidden width must be positive".into()))
            }
            _ => {}
        }
        Ok(Self { kind, d, c })
    }

    pub fn kind(&self) -> TrainerKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn layout(&self) -> Layout {
        let (d, c) = (self.d, self.c);
        let tensors = match self.kind {
            TrainerKind::Logistic => vec![tensor("w", &[d, c]), tensor("b", &[c])],
            TrainerKind::Mlp { hidden: h } => {
                vec![tensor("w1", &[d, h]), tensor("b1", &[h]), tensor("w2", &[h, c]), tensor("b2", &[c])]
            }
            TrainerKind::Autoencoder { hidden: h } => {
                vec![tensor("enc_w", &[d, h]), tensor("enc_b", &[h]), tensor("dec_w", &[h, d]), tensor("dec_b", &[d])]
            }
        };
        Layout { tensors }
    }

    /// Weights uniform in `±1/sqrt(fan_in)` (logistic: `±0.01`), biases zero.
    pub fn init_params(&self, seed: u64) -> Result<ParamVector, LearningError> {
        let layout = self.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(layout.len());
        for t in &layout.tensors {
            if t.shape.len() == 1 {
                values.extend(std::iter::repeat_n(0.0, t.numel()));
                continue;
            }
            let scale = match self.kind {
                TrainerKind::Logistic => 0.01,
                _ => 1.0 / (t.shape[0] as f64).sqrt(),
            };
            values.extend((0..t.numel()).map(|_| rng.random_range(-scale..scale)));
        }
        ParamVector::new(values, layout)
    }

    pub fn check_params(&self, params: &ParamVector) -> Result<(), LearningError> {
        let expected = self.layout().len();
        if params.len() != expected {
            return Err(LearningError::LayoutMismatch { expected, actual: params.len() });
        }
        Ok(())
    }

    pub fn check_data(&self, data: &Dataset) -> Result<(), LearningError> {
        if data.is_empty() {
            return Err(LearningError::EmptyData);
        }
        if data.dim() != self.d {
            return Err(LearningError::DimensionMismatch { expected: self.d, actual: data.dim() });
        }
        Ok(())
    }

    /// Mean batch loss and its gradient with respect to `theta`.
    /// Labels are ignored by the autoencoder.
    pub fn loss_and_grad(&self, theta: &[f64], x: ArrayView2<f64>, y: &[usize]) -> (f64, Vec<f64>) {
        match self.kind {
            TrainerKind::Logistic => self.logistic_grad(theta, x, y),
            TrainerKind::Mlp { hidden } => self.mlp_grad(theta, hidden, x, y),
            TrainerKind::Autoencoder { hidden } => self.autoencoder_grad(theta, hidden, x),
        }
    }

    /// Mean batch loss only.
    pub fn loss(&self, theta: &[f64], x: ArrayView2<f64>, y: &[usize]) -> f64 {
        let per = self.per_sample_loss(theta, x, y);
        per.iter().sum::<f64>() / per.len() as f64
    }

    /// Cross-entropy per row for classifiers, mean squared reconstruction
    /// error per row for the autoencoder.
    pub fn per_sample_loss(&self, theta: &[f64], x: ArrayView2<f64>, y: &[usize]) -> Vec<f64> {
        match self.kind {
            TrainerKind::Autoencoder { hidden } => {
                let (_, recon) = self.ae_forward(theta, hidden, x);
                (recon - &x)
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|v| v * v).sum::<f64>() / self.d as f64)
                    .collect()
            }
            _ => {
                let logp = log_softmax(&self.logits(theta, x));
                y.iter().enumerate().map(|(i, &label)| -logp[[i, label]]).collect()
            }
        }
    }

    /// Argmax class per row (classifiers only).
    pub fn predict(&self, theta: &[f64], x: ArrayView2<f64>) -> Vec<usize> {
        self.logits(theta, x)
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }

    fn logits(&self, theta: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        let (d, c) = (self.d, self.c);
        match self.kind {
            TrainerKind::Logistic => x.dot(&view2(theta, 0, d, c)) + &view1(theta, d * c, c),
            TrainerKind::Mlp { hidden: h } => {
                let hid = self.mlp_hidden(theta, h, x);
                hid.dot(&view2(theta, d * h + h, h, c)) + &view1(theta, d * h + h + h * c, c)
            }
            TrainerKind::Autoencoder { .. } => Array2::zeros((x.nrows(), 1)),
        }
    }

    fn one_hot_residual(&self, logits: &Array2<f64>, y: &[usize]) -> (f64, Array2<f64>) {
        let logp = log_softmax(logits);
        let n = y.len() as f64;
        let loss = -y.iter().enumerate().map(|(i, &l)| logp[[i, l]]).sum::<f64>() / n;
        let mut resid = logp.mapv(f64::exp);
        for (i, &l) in y.iter().enumerate() {
            resid[[i, l]] -= 1.0;
        }
        (loss, resid / n)
    }

    fn logistic_grad(&self, theta: &[f64], x: ArrayView2<f64>, y: &[usize]) -> (f64, Vec<f64>) {
        let logits = self.logits(theta, x);
        let (loss, g) = self.one_hot_residual(&logits, y);
        let dw = x.t().dot(&g);
        let db = g.sum_axis(Axis(0));
        (loss, dw.iter().chain(db.iter()).copied().collect())
    }

    fn mlp_hidden(&self, theta: &[f64], h: usize, x: ArrayView2<f64>) -> Array2<f64> {
        let d = self.d;
        (x.dot(&view2(theta, 0, d, h)) + &view1(theta, d * h, h)).mapv(f64::tanh)
    }

    fn mlp_grad(&self, theta: &[f64], h: usize, x: ArrayView2<f64>, y: &[usize]) -> (f64, Vec<f64>) {
        let (d, c) = (self.d, self.c);
        let hid = self.mlp_hidden(theta, h, x);
        let w2 = view2(theta, d * h + h, h, c);
        let logits = hid.dot(&w2) + &view1(theta, d * h + h + h * c, c);
        let (loss, g2) = self.one_hot_residual(&logits, y);
        let dw2 = hid.t().dot(&g2);
        let db2 = g2.sum_axis(Axis(0));
        let dz1 = g2.dot(&w2.t()) * &hid.mapv(|a| 1.0 - a * a);
        let dw1 = x.t().dot(&dz1);
        let db1 = dz1.sum_axis(Axis(0));
        let grad = dw1.iter().chain(db1.iter()).chain(dw2.iter()).chain(db2.iter()).copied().collect();
        (loss, grad)
    }

    fn ae_forward(&self, theta: &[f64], h: usize, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let d = self.d;
        let hid = (x.dot(&view2(theta, 0, d, h)) + &view1(theta, d * h, h)).mapv(f64::tanh);
        let recon = hid.dot(&view2(theta, d * h + h, h, d)) + &view1(theta, d * h + h + h * d, d);
        (hid, recon)
    }

    fn autoencoder_grad(&self, theta: &[f64], h: usize, x: ArrayView2<f64>) -> (f64, Vec<f64>) {
        let d = self.d;
        let (hid, recon) = self.ae_forward(theta, h, x);
        let diff = recon - &x;
        let n = x.nrows() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / (n * d as f64);
        let g_out = &diff * (2.0 / (n * d as f64));
        let w_dec = view2(theta, d * h + h, h, d);
        let dw_dec = hid.t().dot(&g_out);
        let db_dec: Array1<f64> = g_out.sum_axis(Axis(0));
        let dz = g_out.dot(&w_dec.t()) * &hid.mapv(|a| 1.0 - a * a);
        let dw_enc = x.t().dot(&dz);
        let db_enc = dz.sum_axis(Axis(0));
        let grad = dw_enc
            .iter()
            .chain(db_enc.iter())
            .chain(dw_dec.iter())
            .chain(db_dec.iter())
            .copied()
            .collect();
        (loss, grad)
    }

    /// Reconstruction errors for every row (autoencoder only).
    pub fn reconstruction_errors(&self, theta: &[f64], x: ArrayView2<f64>) -> Vec<f64> {
        self.per_sample_loss(theta, x, &[])
    }
}
