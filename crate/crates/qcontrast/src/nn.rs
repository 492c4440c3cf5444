//! Minimal fully connected network with analytic gradients and an Adam
//! optimizer, written directly on `Vec<f64>` buffers.
//!
//! The only loss used in training is the mean-squared TD error over a batch,
//! where each sample contributes the squared gap between the predicted value
//! of its taken action and a fixed scalar target.

use rand::Rng;

/// One dense layer; weights are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Layer {
    /// Uniform fan-in initialization: U(-1/sqrt(n_in), 1/sqrt(n_in)).
    fn init<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let w = (0..n_in * n_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        let b = (0..n_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { w, b, n_in, n_out }
    }

    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self {
            w: vec![0.0; n_in * n_out],
            b: vec![0.0; n_out],
            n_in,
            n_out,
        }
    }

    fn forward_into(&self, input: &[f64], out: &mut Vec<f64>) {
        debug_assert_eq!(input.len(), self.n_in);
        out.clear();
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// Feed-forward network with a rectifier after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least one layer");
        let layers = sizes
            .windows(2)
            .map(|pair| Layer::init(pair[0], pair[1], rng))
            .collect();
        Self { layers }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        let layers = sizes
            .windows(2)
            .map(|pair| Layer::zeros(pair[0], pair[1]))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_in)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out)
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.n_out));
        sizes
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut cur = input.to_vec();
        let mut next = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward_into(&cur, &mut next);
            if i + 1 < self.layers.len() {
                for v in next.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    /// Post-activation output of every layer (input excluded, last layer raw).
    fn forward_cached(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut cur = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            layer.forward_into(&cur, &mut out);
            if i + 1 < self.layers.len() {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            cur = out.clone();
            acts.push(out);
        }
        acts
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    /// Flat parameter indexing (per layer: weights then biases), used by the
    /// finite-difference checks.
    pub fn get_param(&self, mut idx: usize) -> f64 {
        for l in &self.layers {
            if idx < l.w.len() {
                return l.w[idx];
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                return l.b[idx];
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for l in &mut self.layers {
            if idx < l.w.len() {
                l.w[idx] = value;
                return;
            }
            idx -= l.w.len();
            if idx < l.b.len() {
                l.b[idx] = value;
                return;
            }
            idx -= l.b.len();
        }
        panic!("parameter index out of range");
    }
}

/// Gradient buffers mirroring a network's layer shapes.
#[derive(Debug, Clone)]
pub struct Grads {
    pub dw: Vec<Vec<f64>>,
    pub db: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            dw: net.layers.iter().map(|l| vec![0.0; l.w.len()]).collect(),
            db: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }

    pub fn get(&self, mut idx: usize) -> f64 {
        for (dw, db) in self.dw.iter().zip(&self.db) {
            if idx < dw.len() {
                return dw[idx];
            }
            idx -= dw.len();
            if idx < db.len() {
                return db[idx];
            }
            idx -= db.len();
        }
        panic!("gradient index out of range");
    }
}

/// A TD regression batch: per sample an input, the index of the action whose
/// predicted value is trained, and the scalar target.
#[derive(Debug)]
pub struct TdBatch<'a> {
    pub inputs: &'a [Vec<f64>],
    pub actions: &'a [usize],
    pub targets: &'a [f64],
}

impl TdBatch<'_> {
    fn len(&self) -> usize {
        debug_assert_eq!(self.inputs.len(), self.actions.len());
        debug_assert_eq!(self.inputs.len(), self.targets.len());
        self.inputs.len()
    }
}

/// Mean-squared TD loss: (1/B) sum_i (q(x_i)[a_i] - y_i)^2.
pub fn td_loss(net: &Mlp, batch: &TdBatch) -> f64 {
    let n = batch.len();
    let mut loss = 0.0;
    for i in 0..n {
        let q = net.forward(&batch.inputs[i]);
        let err = q[batch.actions[i]] - batch.targets[i];
        loss += err * err;
    }
    loss / n as f64
}

/// Loss and analytic gradients of the mean-squared TD loss.
pub fn td_loss_grads(net: &Mlp, batch: &TdBatch) -> (f64, Grads) {
    let n = batch.len();
    let scale = 1.0 / n as f64;
    let mut grads = Grads::zeros_like(net);
    let mut loss = 0.0;

    for i in 0..n {
        let input = &batch.inputs[i];
        let acts = net.forward_cached(input);
        let q = acts.last().expect("network has layers");
        let err = q[batch.actions[i]] - batch.targets[i];
        loss += err * err * scale;

        // delta at the output: only the taken action carries error
        let mut delta = vec![0.0; q.len()];
        delta[batch.actions[i]] = 2.0 * err * scale;

        for li in (0..net.layers.len()).rev() {
            let layer = &net.layers[li];
            let below: &[f64] = if li == 0 { input } else { &acts[li - 1] };
            let dw = &mut grads.dw[li];
            let db = &mut grads.db[li];
            for o in 0..layer.n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                db[o] += d;
                let row = &mut dw[o * layer.n_in..(o + 1) * layer.n_in];
                for (g, x) in row.iter_mut().zip(below) {
                    *g += d * x;
                }
            }
            if li == 0 {
                break;
            }
            // propagate through the weights, then through the rectifier
            let mut prev = vec![0.0; layer.n_in];
            for o in 0..layer.n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                for (p, wv) in prev.iter_mut().zip(row) {
                    *p += d * wv;
                }
            }
            for (p, &a) in prev.iter_mut().zip(&acts[li - 1]) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
    (loss, grads)
}

/// Adam with the usual defaults (beta1 0.9, beta2 0.999, eps 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Grads,
    v: Grads,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Grads::zeros_like(net),
            v: Grads::zeros_like(net),
        }
    }

    pub fn step(&mut self, net: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for li in 0..net.layers.len() {
            Self::update_block(
                &mut net.layers[li].w,
                &grads.dw[li],
                &mut self.m.dw[li],
                &mut self.v.dw[li],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
            Self::update_block(
                &mut net.layers[li].b,
                &grads.db[li],
                &mut self.m.db[li],
                &mut self.v.db[li],
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
                bc1,
                bc2,
            );
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn update_block(
        params: &mut [f64],
        grads: &[f64],
        m: &mut [f64],
        v: &mut [f64],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        bc1: f64,
        bc2: f64,
    ) {
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_batch(net: &Mlp, rng: &mut ChaCha12Rng, n: usize) -> (Vec<Vec<f64>>, Vec<usize>, Vec<f64>) {
        let inputs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..net.input_dim()).map(|_| rng.gen_range(-1.0..=1.0)).collect())
            .collect();
        let actions: Vec<usize> = (0..n).map(|_| rng.gen_range(0..net.output_dim())).collect();
        let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        (inputs, actions, targets)
    }

    #[test]
    fn zero_network_outputs_zeros() {
        let net = Mlp::zeros(&[10, 256, 5]);
        assert_eq!(net.forward(&[1.0; 10]), vec![0.0; 5]);
    }

    #[test]
    fn doubling_an_output_row_doubles_that_value() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let mut net = Mlp::new(&[4, 8, 3], &mut rng);
        // positive bias so some hidden units are active
        for b in net.layers[0].b.iter_mut() {
            *b = 0.5;
        }
        net.layers[1].b = vec![0.0; 3];
        let input = [0.3, -0.2, 0.1, 0.4];
        let before = net.forward(&input);
        let n_in = net.layers[1].n_in;
        for w in net.layers[1].w[2 * n_in..3 * n_in].iter_mut() {
            *w *= 2.0;
        }
        let after = net.forward(&input);
        assert_eq!(after[0], before[0]);
        assert_eq!(after[1], before[1]);
        approx::assert_relative_eq!(after[2], 2.0 * before[2], max_relative = 1e-12);
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut net = Mlp::new(&[6, 12, 4], &mut rng);
        let (inputs, actions, targets) = small_batch(&net, &mut rng, 5);
        let batch = TdBatch { inputs: &inputs, actions: &actions, targets: &targets };
        let (_, grads) = td_loss_grads(&net, &batch);

        for idx in 0..net.param_count() {
            let orig = net.get_param(idx);
            let h = 1e-5 * (1.0 + orig.abs());
            net.set_param(idx, orig + h);
            let plus = td_loss(&net, &batch);
            net.set_param(idx, orig - h);
            let minus = td_loss(&net, &batch);
            net.set_param(idx, orig);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads.get(idx);
            let tol = 1e-4 * analytic.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic - numeric).abs() <= tol,
                "param {idx}: analytic {analytic} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn adam_minimizes_a_small_regression() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[3, 16, 2], &mut rng);
        let (inputs, actions, targets) = small_batch(&net, &mut rng, 16);
        let batch = TdBatch { inputs: &inputs, actions: &actions, targets: &targets };
        let mut adam = Adam::new(&net, 1e-2);
        let initial = td_loss(&net, &batch);
        for _ in 0..300 {
            let (_, grads) = td_loss_grads(&net, &batch);
            adam.step(&mut net, &grads);
        }
        let trained = td_loss(&net, &batch);
        assert!(net.is_finite());
        assert!(
            trained < initial * 0.05,
            "loss barely moved: {initial} -> {trained}"
        );
    }

    #[test]
    fn same_seed_gives_identical_initialization() {
        let a = Mlp::new(&[10, 256, 5], &mut ChaCha12Rng::seed_from_u64(9));
        let b = Mlp::new(&[10, 256, 5], &mut ChaCha12Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 10 * 256 + 256 + 256 * 5 + 5);
    }
}
