//! Stacked Bi-LSTM classifier: two bidirectional LSTM layers with additive
//! fusion, dropout between layers, a ReLU dense layer and a linear head whose
//! logits feed the softmax losses.
//!
//! Gradients are computed by hand (backpropagation through time) and checked
//! against central differences in the tests.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Matrix, SeededRng};

/// Gate weights act on the concatenation `[h_{t-1}, x_t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCellParams {
    pub w_f: Matrix,
    pub w_i: Matrix,
    pub w_c: Matrix,
    pub w_o: Matrix,
    pub b_f: Vec<f64>,
    pub b_i: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl LstmCellParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Matrix::zeros(hidden, hidden + input);
        Self {
            w_f: w.clone(),
            w_i: w.clone(),
            w_c: w.clone(),
            w_o: w,
            b_f: vec![0.0; hidden],
            b_i: vec![0.0; hidden],
            b_c: vec![0.0; hidden],
            b_o: vec![0.0; hidden],
        }
    }

    /// Glorot-uniform weights, forget bias 1, other biases 0.
    pub fn init(hidden: usize, input: usize, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(hidden, input);
        for w in [&mut p.w_f, &mut p.w_i, &mut p.w_c, &mut p.w_o] {
            glorot_fill(w, rng);
        }
        p.b_f.iter_mut().for_each(|b| *b = 1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.b_f.len()
    }

    pub fn input(&self) -> usize {
        self.w_f.cols() - self.hidden()
    }

    fn tensors(&self) -> [&[f64]; 8] {
        [
            self.w_f.as_slice(),
            self.w_i.as_slice(),
            self.w_c.as_slice(),
            self.w_o.as_slice(),
            &self.b_f,
            &self.b_i,
            &self.b_c,
            &self.b_o,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 8] {
        [
            self.w_f.as_mut_slice(),
            self.w_i.as_mut_slice(),
            self.w_c.as_mut_slice(),
            self.w_o.as_mut_slice(),
            &mut self.b_f,
            &mut self.b_i,
            &mut self.b_c,
            &mut self.b_o,
        ]
    }
}

fn glorot_fill(w: &mut Matrix, rng: &mut SeededRng) {
    let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
    w.as_mut_slice()
        .iter_mut()
        .for_each(|v| *v = rng.uniform_range(-limit, limit));
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Values from one cell step needed by its backward pass.
#[derive(Debug, Clone)]
pub struct CellCache {
    pub concat: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub f: Vec<f64>,
    pub i: Vec<f64>,
    pub candidate: Vec<f64>,
    pub o: Vec<f64>,
    pub tanh_c: Vec<f64>,
}

/// One LSTM step:
/// `f, i, o = σ(W·[h, x] + b)`, `c̃ = tanh(W_c·[h, x] + b_c)`,
/// `c = f⊙c_prev + i⊙c̃`, `h = o⊙tanh(c)`.
pub fn lstm_cell_forward(params: &LstmCellParams, prev: &LstmState, x: &[f64]) -> Result<(LstmState, CellCache)> {
    let hidden = params.hidden();
    if prev.h.len() != hidden || prev.c.len() != hidden || x.len() != params.input() {
        return Err(Error::DimensionMismatch {
            op: "lstm_cell_forward",
            left: (hidden, params.input()),
            right: (prev.h.len(), x.len()),
        });
    }
    let mut concat = Vec::with_capacity(hidden + x.len());
    concat.extend_from_slice(&prev.h);
    concat.extend_from_slice(x);

    let gate = |w: &Matrix, b: &[f64]| {
        let mut a = vec![0.0; hidden];
        w.matvec_into(&concat, &mut a);
        a.iter_mut().zip(b).for_each(|(v, bi)| *v += bi);
        a
    };
    let mut f = gate(&params.w_f, &params.b_f);
    let mut i = gate(&params.w_i, &params.b_i);
    let mut candidate = gate(&params.w_c, &params.b_c);
    let mut o = gate(&params.w_o, &params.b_o);
    f.iter_mut().for_each(|v| *v = sigmoid(*v));
    i.iter_mut().for_each(|v| *v = sigmoid(*v));
    candidate.iter_mut().for_each(|v| *v = v.tanh());
    o.iter_mut().for_each(|v| *v = sigmoid(*v));

    let c: Vec<f64> = (0..hidden).map(|k| f[k] * prev.c[k] + i[k] * candidate[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..hidden).map(|k| o[k] * tanh_c[k]).collect();
    let cache = CellCache {
        concat,
        c_prev: prev.c.clone(),
        f,
        i,
        candidate,
        o,
        tanh_c,
    };
    Ok((LstmState { h, c }, cache))
}

/// Backward through one cell step. `dh`/`dc` are the total upstream
/// gradients into `h_t`/`c_t`; returns `(dh_prev, dc_prev, dx)` and
/// accumulates parameter gradients into `grads`.
fn lstm_cell_backward(
    params: &LstmCellParams,
    cache: &CellCache,
    dh: &[f64],
    dc_next: &[f64],
    grads: &mut LstmCellParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hidden = params.hidden();
    let mut da_f = vec![0.0; hidden];
    let mut da_i = vec![0.0; hidden];
    let mut da_c = vec![0.0; hidden];
    let mut da_o = vec![0.0; hidden];
    let mut dc_prev = vec![0.0; hidden];
    for k in 0..hidden {
        let (f, i, g, o, tc) = (cache.f[k], cache.i[k], cache.candidate[k], cache.o[k], cache.tanh_c[k]);
        let dc = dc_next[k] + dh[k] * o * (1.0 - tc * tc);
        da_o[k] = dh[k] * tc * o * (1.0 - o);
        da_f[k] = dc * cache.c_prev[k] * f * (1.0 - f);
        da_i[k] = dc * g * i * (1.0 - i);
        da_c[k] = dc * i * (1.0 - g * g);
        dc_prev[k] = dc * f;
    }
    let mut dconcat = vec![0.0; cache.concat.len()];
    for (w, gw, gb, da) in [
        (&params.w_f, &mut grads.w_f, &mut grads.b_f, &da_f),
        (&params.w_i, &mut grads.w_i, &mut grads.b_i, &da_i),
        (&params.w_c, &mut grads.w_c, &mut grads.b_c, &da_c),
        (&params.w_o, &mut grads.w_o, &mut grads.b_o, &da_o),
    ] {
        gw.add_outer(da, &cache.concat);
        gb.iter_mut().zip(da).for_each(|(b, d)| *b += d);
        w.add_transpose_matvec(da, &mut dconcat);
    }
    let dx = dconcat.split_off(hidden);
    (dconcat, dc_prev, dx)
}

/// A forward-direction and a backward-direction cell over one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmParams {
    pub forward: LstmCellParams,
    pub backward: LstmCellParams,
}

impl BiLstmParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            forward: LstmCellParams::zeros(hidden, input),
            backward: LstmCellParams::zeros(hidden, input),
        }
    }

    pub fn init(hidden: usize, input: usize, rng: &mut SeededRng) -> Self {
        Self {
            forward: LstmCellParams::init(hidden, input, rng),
            backward: LstmCellParams::init(hidden, input, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    /// Indexed by timestep.
    forward: Vec<CellCache>,
    /// Indexed by timestep (not by processing order).
    backward: Vec<CellCache>,
}

/// Runs both directions and fuses them additively: `y_t = h→_t + h←_t`.
/// Rows of `inputs` are timesteps.
pub fn bilstm_layer_forward(layer: &BiLstmParams, inputs: &Matrix) -> Result<(Matrix, BiLstmCache)> {
    let steps = inputs.rows();
    if steps == 0 {
        return Err(Error::Empty("bilstm_layer_forward: sequence"));
    }
    let hidden = layer.forward.hidden();
    if layer.backward.hidden() != hidden {
        return Err(Error::InvalidArgument("forward and backward cells differ in width".into()));
    }
    let mut out = Matrix::zeros(steps, hidden);
    let mut fwd = Vec::with_capacity(steps);
    let mut state = LstmState::zeros(hidden);
    for t in 0..steps {
        let (next, cache) = lstm_cell_forward(&layer.forward, &state, inputs.row(t))?;
        out.row_mut(t).copy_from_slice(&next.h);
        fwd.push(cache);
        state = next;
    }
    let mut bwd = Vec::with_capacity(steps);
    let mut state = LstmState::zeros(hidden);
    for t in (0..steps).rev() {
        let (next, cache) = lstm_cell_forward(&layer.backward, &state, inputs.row(t))?;
        out.row_mut(t).iter_mut().zip(&next.h).for_each(|(y, h)| *y += h);
        bwd.push(cache);
        state = next;
    }
    bwd.reverse();
    Ok((out, BiLstmCache { forward: fwd, backward: bwd }))
}

/// BPTT through both directions. Returns the gradient w.r.t. the inputs.
fn bilstm_layer_backward(layer: &BiLstmParams, cache: &BiLstmCache, d_out: &Matrix, grads: &mut BiLstmParams) -> Matrix {
    let steps = d_out.rows();
    let hidden = layer.forward.hidden();
    let mut d_in = Matrix::zeros(steps, layer.forward.input());

    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for t in (0..steps).rev() {
        let dh: Vec<f64> = d_out.row(t).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (dh_prev, dc_prev, dx) = lstm_cell_backward(&layer.forward, &cache.forward[t], &dh, &dc_next, &mut grads.forward);
        d_in.row_mut(t).iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for t in 0..steps {
        let dh: Vec<f64> = d_out.row(t).iter().zip(&dh_next).map(|(a, b)| a + b).collect();
        let (dh_prev, dc_prev, dx) = lstm_cell_backward(&layer.backward, &cache.backward[t], &dh, &dc_next, &mut grads.backward);
        d_in.row_mut(t).iter_mut().zip(&dx).for_each(|(d, v)| *d += v);
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    d_in
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseParams {
    /// `out × in`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl DenseParams {
    pub fn zeros(out: usize, input: usize) -> Self {
        Self {
            w: Matrix::zeros(out, input),
            b: vec![0.0; out],
        }
    }

    pub fn init(out: usize, input: usize, rng: &mut SeededRng) -> Self {
        let mut p = Self::zeros(out, input);
        glorot_fill(&mut p.w, rng);
        p
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.b.len()];
        self.w.matvec_into(x, &mut y);
        y.iter_mut().zip(&self.b).for_each(|(v, b)| *v += b);
        y
    }
}

/// How the fused Bi-LSTM output sequence becomes one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Last,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkShape {
    /// Width of one timestep.
    pub input_width: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dense_units: usize,
    pub classes: usize,
    pub dropout_rate: f64,
    pub aggregation: Aggregation,
}

impl NetworkShape {
    /// 256/128 Bi-LSTM, 64-unit dense layer, 40% dropout.
    pub fn full_scale(input_width: usize, classes: usize) -> Self {
        Self {
            input_width,
            hidden1: 256,
            hidden2: 128,
            dense_units: 64,
            classes,
            dropout_rate: 0.4,
            aggregation: Aggregation::Last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.input_width, self.hidden1, self.hidden2, self.dense_units, self.classes].contains(&0) {
            return Err(Error::InvalidArgument(format!("all layer widths must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// All trainable tensors. Doubles as the gradient buffer layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub bilstm1: BiLstmParams,
    pub bilstm2: BiLstmParams,
    pub dense: DenseParams,
    pub head: DenseParams,
}

impl NetworkParams {
    pub fn zeros(shape: &NetworkShape) -> Self {
        Self {
            bilstm1: BiLstmParams::zeros(shape.hidden1, shape.input_width),
            bilstm2: BiLstmParams::zeros(shape.hidden2, shape.hidden1),
            dense: DenseParams::zeros(shape.dense_units, shape.hidden2),
            head: DenseParams::zeros(shape.classes, shape.dense_units),
        }
    }

    /// Tensors in a fixed order: layer 1 (forward then backward cell, each
    /// W_f, W_i, W_c, W_o, b_f, b_i, b_c, b_o), layer 2, dense W and b,
    /// head W and b.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(36);
        for cell in [&self.bilstm1.forward, &self.bilstm1.backward, &self.bilstm2.forward, &self.bilstm2.backward] {
            out.extend(cell.tensors());
        }
        out.extend([self.dense.w.as_slice(), &self.dense.b[..], self.head.w.as_slice(), &self.head.b[..]]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(36);
        let Self { bilstm1, bilstm2, dense, head } = self;
        for cell in [&mut bilstm1.forward, &mut bilstm1.backward, &mut bilstm2.forward, &mut bilstm2.backward] {
            out.extend(cell.tensors_mut());
        }
        out.push(dense.w.as_mut_slice());
        out.push(&mut dense.b[..]);
        out.push(head.w.as_mut_slice());
        out.push(&mut head.b[..]);
        out
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::DimensionMismatch {
                op: "load_flat",
                left: (self.len(), 1),
                right: (flat.len(), 1),
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// Gradient of the batch loss w.r.t. every parameter of a
/// [`SequenceNetwork`], in the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub NetworkParams);

impl GradientSet {
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.0.tensors()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }
}

pub enum Mode<'a> {
    Eval,
    /// Dropout masks are drawn from the given stream.
    Train(&'a mut SeededRng),
}

#[derive(Debug, Clone)]
struct SampleCache {
    layer1: BiLstmCache,
    mask1: Option<Matrix>,
    layer2_in: Matrix,
    layer2: BiLstmCache,
    mask2: Option<Matrix>,
    steps: usize,
    pooled: Vec<f64>,
    dense_pre: Vec<f64>,
    mask3: Option<Vec<f64>>,
    dense_out: Vec<f64>,
}

/// Activations of one batch, consumed by [`SequenceNetwork::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    samples: Vec<SampleCache>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceNetwork {
    shape: NetworkShape,
    params: NetworkParams,
    /// Bumped whenever parameters are handed out mutably; caches from an
    /// older version are rejected by `backward`.
    #[serde(skip)]
    version: u64,
}

impl SequenceNetwork {
    pub fn new(shape: NetworkShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let params = NetworkParams {
            bilstm1: BiLstmParams::init(shape.hidden1, shape.input_width, rng),
            bilstm2: BiLstmParams::init(shape.hidden2, shape.hidden1, rng),
            dense: DenseParams::init(shape.dense_units, shape.hidden2, rng),
            head: DenseParams::init(shape.classes, shape.dense_units, rng),
        };
        Ok(Self { shape, params, version: 0 })
    }

    pub fn from_params(shape: NetworkShape, params: NetworkParams) -> Result<Self> {
        shape.validate()?;
        let expected = NetworkParams::zeros(&shape);
        let dims = |p: &NetworkParams| p.tensors().iter().map(|t| t.len()).collect::<Vec<_>>();
        if dims(&expected) != dims(&params) {
            return Err(Error::InvalidArgument("parameter tensors do not match the shape".into()));
        }
        Ok(Self { shape, params, version: 0 })
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        self.version += 1;
        &mut self.params
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.params_mut().tensors_mut()
    }

    pub fn zero_gradients(&self) -> GradientSet {
        GradientSet(NetworkParams::zeros(&self.shape))
    }

    fn dropout_mask(&self, rows: usize, cols: usize, rng: &mut Option<&mut SeededRng>) -> Option<Matrix> {
        let rate = self.shape.dropout_rate;
        let rng = rng.as_mut()?;
        if rate == 0.0 {
            return None;
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let values = (0..rows * cols)
            .map(|_| if rng.bernoulli(keep) { scale } else { 0.0 })
            .collect();
        Some(Matrix::from_vec(rows, cols, values).expect("mask shape"))
    }

    fn forward_sample(&self, input: &Matrix, rng: &mut Option<&mut SeededRng>) -> Result<(Vec<f64>, SampleCache)> {
        if input.cols() != self.shape.input_width {
            return Err(Error::DimensionMismatch {
                op: "network_forward",
                left: (input.rows(), self.shape.input_width),
                right: input.shape(),
            });
        }
        let steps = input.rows();
        let (h1, layer1) = bilstm_layer_forward(&self.params.bilstm1, input)?;
        let mask1 = self.dropout_mask(steps, self.shape.hidden1, rng);
        let layer2_in = apply_mask(h1, mask1.as_ref());
        let (h2, layer2) = bilstm_layer_forward(&self.params.bilstm2, &layer2_in)?;
        let mask2 = self.dropout_mask(steps, self.shape.hidden2, rng);
        let h2 = apply_mask(h2, mask2.as_ref());
        let pooled = match self.shape.aggregation {
            Aggregation::Last => h2.row(steps - 1).to_vec(),
            Aggregation::Mean => {
                let mut acc = vec![0.0; self.shape.hidden2];
                for t in 0..steps {
                    acc.iter_mut().zip(h2.row(t)).for_each(|(a, v)| *a += v);
                }
                acc.iter_mut().for_each(|a| *a /= steps as f64);
                acc
            }
        };
        let dense_pre = self.params.dense.apply(&pooled);
        let mut dense_out: Vec<f64> = dense_pre.iter().map(|v| v.max(0.0)).collect();
        let mask3 = self
            .dropout_mask(1, self.shape.dense_units, rng)
            .map(Matrix::into_vec);
        if let Some(m) = &mask3 {
            dense_out.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
        }
        let logits = self.params.head.apply(&dense_out);
        Ok((
            logits,
            SampleCache {
                layer1,
                mask1,
                layer2_in,
                layer2,
                mask2,
                steps,
                pooled,
                dense_pre,
                mask3,
                dense_out,
            },
        ))
    }

    /// Logits for each sequence in the batch (one row per sample).
    pub fn forward(&self, inputs: &[Matrix], mode: Mode<'_>) -> Result<(Matrix, ForwardCache)> {
        let mut rng = match mode {
            Mode::Eval => None,
            Mode::Train(r) => Some(r),
        };
        let mut logits = Matrix::zeros(inputs.len(), self.shape.classes);
        let mut samples = Vec::with_capacity(inputs.len());
        for (r, x) in inputs.iter().enumerate() {
            let (z, cache) = self.forward_sample(x, &mut rng)?;
            logits.row_mut(r).copy_from_slice(&z);
            samples.push(cache);
        }
        Ok((
            logits,
            ForwardCache {
                version: self.version,
                samples,
            },
        ))
    }

    /// Eval-mode logits without keeping the cache.
    pub fn predict_logits(&self, inputs: &[Matrix]) -> Result<Matrix> {
        self.forward(inputs, Mode::Eval).map(|(z, _)| z)
    }

    /// Parameter gradients given `∂L/∂logits` for the batch in `cache`.
    pub fn backward(&self, cache: &ForwardCache, d_logits: &Matrix) -> Result<GradientSet> {
        if cache.version != self.version {
            return Err(Error::StaleCache(format!(
                "cache from parameter version {}, network is at {}",
                cache.version, self.version
            )));
        }
        if d_logits.rows() != cache.samples.len() || d_logits.cols() != self.shape.classes {
            return Err(Error::StaleCache(format!(
                "upstream gradient is {:?} for a batch of {} over {} classes",
                d_logits.shape(),
                cache.samples.len(),
                self.shape.classes
            )));
        }
        let mut grads = self.zero_gradients();
        for (r, s) in cache.samples.iter().enumerate() {
            self.backward_sample(s, d_logits.row(r), &mut grads.0);
        }
        Ok(grads)
    }

    fn backward_sample(&self, s: &SampleCache, d_logits: &[f64], g: &mut NetworkParams) {
        let p = &self.params;
        g.head.w.add_outer(d_logits, &s.dense_out);
        g.head.b.iter_mut().zip(d_logits).for_each(|(b, d)| *b += d);
        let mut d_dense = vec![0.0; self.shape.dense_units];
        p.head.w.add_transpose_matvec(d_logits, &mut d_dense);
        if let Some(m) = &s.mask3 {
            d_dense.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
        }
        d_dense
            .iter_mut()
            .zip(&s.dense_pre)
            .for_each(|(d, &pre)| if pre <= 0.0 { *d = 0.0 });
        g.dense.w.add_outer(&d_dense, &s.pooled);
        g.dense.b.iter_mut().zip(&d_dense).for_each(|(b, d)| *b += d);
        let mut d_pooled = vec![0.0; self.shape.hidden2];
        p.dense.w.add_transpose_matvec(&d_dense, &mut d_pooled);

        let mut d_h2 = Matrix::zeros(s.steps, self.shape.hidden2);
        match self.shape.aggregation {
            Aggregation::Last => d_h2.row_mut(s.steps - 1).copy_from_slice(&d_pooled),
            Aggregation::Mean => {
                let inv = 1.0 / s.steps as f64;
                for t in 0..s.steps {
                    d_h2.row_mut(t).iter_mut().zip(&d_pooled).for_each(|(d, v)| *d = v * inv);
                }
            }
        }
        let d_h2 = apply_mask(d_h2, s.mask2.as_ref());
        let d_l2_in = bilstm_layer_backward(&p.bilstm2, &s.layer2, &d_h2, &mut g.bilstm2);
        let d_h1 = apply_mask(d_l2_in, s.mask1.as_ref());
        debug_assert_eq!(s.layer2_in.rows(), d_h1.rows());
        bilstm_layer_backward(&p.bilstm1, &s.layer1, &d_h1, &mut g.bilstm1);
    }
}

fn apply_mask(mut m: Matrix, mask: Option<&Matrix>) -> Matrix {
    if let Some(mask) = mask {
        m.as_mut_slice()
            .iter_mut()
            .zip(mask.as_slice())
            .for_each(|(v, k)| *v *= k);
    }
    m
}

/// Reshapes a flat feature vector into `steps` rows of `ceil(F / steps)`
/// columns, zero-padding the tail.
pub fn chunk_features(features: &[f64], steps: usize) -> Result<Matrix> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sequence length must be >= 1".into()));
    }
    let width = features.len().div_ceil(steps).max(1);
    let mut values = features.to_vec();
    values.resize(width * steps, 0.0);
    Matrix::from_vec(steps, width, values)
}
