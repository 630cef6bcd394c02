//! Character-level BiLSTM encoder with a tanh emission projection.
//!
//! Forward math per position `t` and direction:
//! ```text
//! f_t = sigmoid(W_f [h_{t-1}, x_t] + b_f)
//! i_t = sigmoid(W_i [h_{t-1}, x_t] + b_i)
//! o_t = sigmoid(W_o [h_{t-1}, x_t] + b_o)
//! g_t = tanh  (W_c [h_{t-1}, x_t] + b_c)
//! c_t = f_t * c_{t-1} + i_t * g_t
//! h_t = o_t * tanh(c_t)
//! ```
//! where `[h_{t-1}, x_t]` concatenates the previous hidden state and the
//! input. The two directions are concatenated per position and projected to
//! `k` emission scores through `tanh(proj_w . h + proj_b)`.
//!
//! The module also implements the exact reverse-mode gradients for this
//! fixed architecture; see [`sentence_forward`] / [`sentence_backward`].

use ndarray::linalg::{general_mat_mul, general_mat_vec_mul};
use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::crf::TransitionModel;
use crate::error::{Error, Result};
use crate::math::sigmoid;

/// Weights of one LSTM direction. Every `w_*` is `H x (H+E)`; every `b_*`
/// is length `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmDirectionParams {
    pub w_f: Array2<f64>,
    pub w_i: Array2<f64>,
    pub w_o: Array2<f64>,
    pub w_c: Array2<f64>,
    pub b_f: Array1<f64>,
    pub b_i: Array1<f64>,
    pub b_o: Array1<f64>,
    pub b_c: Array1<f64>,
}

impl LstmDirectionParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        Self {
            w_f: Array2::zeros((hidden, input)),
            w_i: Array2::zeros((hidden, input)),
            w_o: Array2::zeros((hidden, input)),
            w_c: Array2::zeros((hidden, input)),
            b_f: Array1::zeros(hidden),
            b_i: Array1::zeros(hidden),
            b_o: Array1::zeros(hidden),
            b_c: Array1::zeros(hidden),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_f.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.ncols()
    }

    fn check(&self) -> Result<()> {
        let shape = self.w_f.dim();
        let h = shape.0;
        for (name, w) in [("w_i", &self.w_i), ("w_o", &self.w_o), ("w_c", &self.w_c)] {
            if w.dim() != shape {
                return Err(Error::Dimension {
                    what: "lstm weight",
                    expected: format!("{name} of shape {shape:?}"),
                    got: format!("{:?}", w.dim()),
                });
            }
        }
        for (name, b) in [
            ("b_f", &self.b_f),
            ("b_i", &self.b_i),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ] {
            if b.len() != h {
                return Err(Error::Dimension {
                    what: "lstm bias",
                    expected: format!("{name} of length {h}"),
                    got: b.len().to_string(),
                });
            }
        }
        Ok(())
    }

    fn flat(&self) -> [&[f64]; 8] {
        [
            slice2(&self.w_f),
            slice2(&self.w_i),
            slice2(&self.w_o),
            slice2(&self.w_c),
            self.b_f.as_slice().expect("standard layout"),
            self.b_i.as_slice().expect("standard layout"),
            self.b_o.as_slice().expect("standard layout"),
            self.b_c.as_slice().expect("standard layout"),
        ]
    }

    fn flat_mut(&mut self) -> [&mut [f64]; 8] {
        [
            slice2_mut(&mut self.w_f),
            slice2_mut(&mut self.w_i),
            slice2_mut(&mut self.w_o),
            slice2_mut(&mut self.w_c),
            self.b_f.as_slice_mut().expect("standard layout"),
            self.b_i.as_slice_mut().expect("standard layout"),
            self.b_o.as_slice_mut().expect("standard layout"),
            self.b_c.as_slice_mut().expect("standard layout"),
        ]
    }
}

fn slice2(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice2_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// All trainable parameters of the tagger.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Array2<f64>, // V x E
    pub forward_lstm: LstmDirectionParams,
    pub backward_lstm: LstmDirectionParams,
    pub proj_w: Array2<f64>, // k x 2H
    pub proj_b: Array1<f64>, // k
    pub transitions: TransitionModel,
}

/// Names of the flat parameter slots, in the fixed order used by
/// [`ModelParams::flat`], gradient stores and optimizer state.
pub const SLOT_NAMES: [&str; 22] = [
    "embedding",
    "fwd.w_f",
    "fwd.w_i",
    "fwd.w_o",
    "fwd.w_c",
    "fwd.b_f",
    "fwd.b_i",
    "fwd.b_o",
    "fwd.b_c",
    "bwd.w_f",
    "bwd.w_i",
    "bwd.w_o",
    "bwd.w_c",
    "bwd.b_f",
    "bwd.b_i",
    "bwd.b_o",
    "bwd.b_c",
    "proj_w",
    "proj_b",
    "trans",
    "start",
    "stop",
];

impl ModelParams {
    /// All-zero parameters with consistent shapes (mostly for tests).
    pub fn zeros(vocab: usize, embed: usize, hidden: usize, tags: usize) -> Self {
        Self {
            embedding: Array2::zeros((vocab, embed)),
            forward_lstm: LstmDirectionParams::zeros(hidden, hidden + embed),
            backward_lstm: LstmDirectionParams::zeros(hidden, hidden + embed),
            proj_w: Array2::zeros((tags, 2 * hidden)),
            proj_b: Array1::zeros(tags),
            transitions: TransitionModel::zeros(tags),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.forward_lstm.hidden_dim()
    }

    pub fn num_tags(&self) -> usize {
        self.proj_b.len()
    }

    /// Validates cross-tensor dimension consistency.
    pub fn check(&self) -> Result<()> {
        self.forward_lstm.check()?;
        self.backward_lstm.check()?;
        let h = self.hidden_dim();
        let e = self.embed_dim();
        let k = self.num_tags();
        if self.backward_lstm.hidden_dim() != h
            || self.forward_lstm.input_dim() != h + e
            || self.backward_lstm.input_dim() != h + e
        {
            return Err(Error::Dimension {
                what: "lstm directions",
                expected: format!("both {h} x {}", h + e),
                got: format!(
                    "fwd {:?}, bwd {:?}",
                    self.forward_lstm.w_f.dim(),
                    self.backward_lstm.w_f.dim()
                ),
            });
        }
        if self.proj_w.dim() != (k, 2 * h) {
            return Err(Error::Dimension {
                what: "projection",
                expected: format!("{k} x {}", 2 * h),
                got: format!("{:?}", self.proj_w.dim()),
            });
        }
        if self.transitions.num_tags() != k {
            return Err(Error::Dimension {
                what: "transitions",
                expected: k.to_string(),
                got: self.transitions.num_tags().to_string(),
            });
        }
        Ok(())
    }

    /// Flat read-only view of all 22 parameter slots in the fixed order of
    /// [`SLOT_NAMES`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(SLOT_NAMES.len());
        v.push(slice2(&self.embedding));
        v.extend(self.forward_lstm.flat());
        v.extend(self.backward_lstm.flat());
        v.push(slice2(&self.proj_w));
        v.push(self.proj_b.as_slice().expect("standard layout"));
        v.push(slice2(&self.transitions.trans));
        v.push(self.transitions.start.as_slice().expect("standard layout"));
        v.push(self.transitions.stop.as_slice().expect("standard layout"));
        v
    }

    /// Flat mutable view; same order as [`ModelParams::flat`].
    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(SLOT_NAMES.len());
        v.push(slice2_mut(&mut self.embedding));
        v.extend(self.forward_lstm.flat_mut());
        v.extend(self.backward_lstm.flat_mut());
        v.push(slice2_mut(&mut self.proj_w));
        v.push(self.proj_b.as_slice_mut().expect("standard layout"));
        v.push(slice2_mut(&mut self.transitions.trans));
        v.push(
            self.transitions
                .start
                .as_slice_mut()
                .expect("standard layout"),
        );
        v.push(
            self.transitions
                .stop
                .as_slice_mut()
                .expect("standard layout"),
        );
        v
    }

    /// Shape of each slot, aligned with [`SLOT_NAMES`] and
    /// [`ModelParams::flat`]. Vectors report a single dimension.
    pub fn slot_shapes(&self) -> Vec<Vec<usize>> {
        let (v, e, h, k) = (
            self.vocab_size(),
            self.embed_dim(),
            self.hidden_dim(),
            self.num_tags(),
        );
        let mut shapes = vec![vec![v, e]];
        for _ in 0..2 {
            shapes.extend(vec![vec![h, h + e]; 4]);
            shapes.extend(vec![vec![h]; 4]);
        }
        shapes.push(vec![k, 2 * h]);
        shapes.push(vec![k]);
        shapes.push(vec![k, k]);
        shapes.push(vec![k]);
        shapes.push(vec![k]);
        shapes
    }

    /// Errors if any parameter is NaN or infinite.
    pub fn assert_finite(&self) -> Result<()> {
        for (slot, values) in self.flat().into_iter().enumerate() {
            if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
                return Err(Error::NumericFailure(format!(
                    "parameter {} contains {bad}",
                    SLOT_NAMES[slot]
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter gradient accumulator, shape-congruent with [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    pub embedding: Array2<f64>,
    pub forward_lstm: LstmDirectionParams,
    pub backward_lstm: LstmDirectionParams,
    pub proj_w: Array2<f64>,
    pub proj_b: Array1<f64>,
    pub trans: Array2<f64>,
    pub start: Array1<f64>,
    pub stop: Array1<f64>,
}

impl GradientStore {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let (v, e, h, k) = (
            params.vocab_size(),
            params.embed_dim(),
            params.hidden_dim(),
            params.num_tags(),
        );
        Self {
            embedding: Array2::zeros((v, e)),
            forward_lstm: LstmDirectionParams::zeros(h, h + e),
            backward_lstm: LstmDirectionParams::zeros(h, h + e),
            proj_w: Array2::zeros((k, 2 * h)),
            proj_b: Array1::zeros(k),
            trans: Array2::zeros((k, k)),
            start: Array1::zeros(k),
            stop: Array1::zeros(k),
        }
    }

    pub fn flat(&self) -> Vec<&[f64]> {
        let mut v = Vec::with_capacity(SLOT_NAMES.len());
        v.push(slice2(&self.embedding));
        v.extend(self.forward_lstm.flat());
        v.extend(self.backward_lstm.flat());
        v.push(slice2(&self.proj_w));
        v.push(self.proj_b.as_slice().expect("standard layout"));
        v.push(slice2(&self.trans));
        v.push(self.start.as_slice().expect("standard layout"));
        v.push(self.stop.as_slice().expect("standard layout"));
        v
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = Vec::with_capacity(SLOT_NAMES.len());
        v.push(slice2_mut(&mut self.embedding));
        v.extend(self.forward_lstm.flat_mut());
        v.extend(self.backward_lstm.flat_mut());
        v.push(slice2_mut(&mut self.proj_w));
        v.push(self.proj_b.as_slice_mut().expect("standard layout"));
        v.push(slice2_mut(&mut self.trans));
        v.push(self.start.as_slice_mut().expect("standard layout"));
        v.push(self.stop.as_slice_mut().expect("standard layout"));
        v
    }

    /// Resets every gradient to zero (between batches).
    pub fn zero(&mut self) {
        for s in self.flat_mut() {
            s.fill(0.0);
        }
    }

    /// `self += scale * other`, slot by slot.
    pub fn add_scaled(&mut self, other: &GradientStore, scale: f64) {
        for (dst, src) in self.flat_mut().into_iter().zip(other.flat()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Euclidean norm over every gradient entry.
    pub fn global_norm(&self) -> f64 {
        self.flat()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

fn glorot_fill(arr: &mut Array2<f64>, rng: &mut impl Rng) {
    let (rows, cols) = arr.dim();
    let r = (6.0 / (rows + cols) as f64).sqrt();
    for v in arr.iter_mut() {
        *v = rng.random_range(-r..r);
    }
}

/// Random initialization: every weight matrix uniform in `(-r, r)` with
/// `r = sqrt(6 / (fan_in + fan_out))`, biases zero except the forget-gate
/// bias, which starts at 1.0. RNG consumption order is fixed: embedding,
/// forward LSTM (f, i, o, c), backward LSTM, projection, transitions.
pub fn init_params(
    vocab: usize,
    embed: usize,
    hidden: usize,
    tags: usize,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    if vocab < 2 || embed == 0 || hidden == 0 || tags == 0 {
        return Err(Error::InvalidConfig(format!(
            "model dimensions must be positive (vocab >= 2): V={vocab} E={embed} H={hidden} k={tags}"
        )));
    }
    let mut params = ModelParams::zeros(vocab, embed, hidden, tags);
    glorot_fill(&mut params.embedding, rng);
    for dir in [&mut params.forward_lstm, &mut params.backward_lstm] {
        glorot_fill(&mut dir.w_f, rng);
        glorot_fill(&mut dir.w_i, rng);
        glorot_fill(&mut dir.w_o, rng);
        glorot_fill(&mut dir.w_c, rng);
        dir.b_f.fill(1.0);
    }
    glorot_fill(&mut params.proj_w, rng);
    glorot_fill(&mut params.transitions.trans, rng);
    Ok(params)
}

struct StepCache {
    z: Array1<f64>, // [h_prev, x_t]
    f: Array1<f64>,
    i: Array1<f64>,
    o: Array1<f64>,
    g: Array1<f64>,
    c: Array1<f64>,
    tanh_c: Array1<f64>,
}

struct DirectionCache {
    steps: Vec<StepCache>, // in processing order
}

fn gate_preact(w: &Array2<f64>, z: &Array1<f64>, b: &Array1<f64>) -> Array1<f64> {
    let mut out = b.clone();
    general_mat_vec_mul(1.0, w, z, 1.0, &mut out);
    out
}

fn cell_step(z: &Array1<f64>, c_prev: &Array1<f64>, p: &LstmDirectionParams) -> StepCache {
    let f = gate_preact(&p.w_f, z, &p.b_f).mapv(sigmoid);
    let i = gate_preact(&p.w_i, z, &p.b_i).mapv(sigmoid);
    let o = gate_preact(&p.w_o, z, &p.b_o).mapv(sigmoid);
    let g = gate_preact(&p.w_c, z, &p.b_c).mapv(f64::tanh);
    let c = &f * c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    StepCache {
        z: z.clone(),
        f,
        i,
        o,
        g,
        c,
        tanh_c,
    }
}

fn concat_state(h_prev: &Array1<f64>, x: ndarray::ArrayView1<f64>) -> Array1<f64> {
    let h = h_prev.len();
    let mut z = Array1::zeros(h + x.len());
    z.slice_mut(s![..h]).assign(h_prev);
    z.slice_mut(s![h..]).assign(&x);
    z
}

/// One LSTM cell step: returns `(h_t, c_t)`.
pub fn lstm_cell_forward(
    x_t: &Array1<f64>,
    h_prev: &Array1<f64>,
    c_prev: &Array1<f64>,
    p: &LstmDirectionParams,
) -> Result<(Array1<f64>, Array1<f64>)> {
    p.check()?;
    let h = p.hidden_dim();
    if h_prev.len() != h || c_prev.len() != h || x_t.len() + h != p.input_dim() {
        return Err(Error::Dimension {
            what: "lstm cell inputs",
            expected: format!("h,c of {h}, x of {}", p.input_dim() - h),
            got: format!("h {}, c {}, x {}", h_prev.len(), c_prev.len(), x_t.len()),
        });
    }
    let z = concat_state(h_prev, x_t.view());
    let step = cell_step(&z, c_prev, p);
    let h_t = &step.o * &step.tanh_c;
    if !h_t.iter().all(|v| v.is_finite()) || !step.c.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericFailure("non-finite lstm cell output".into()));
    }
    Ok((h_t, step.c))
}

// Runs one direction over the whole sentence; `h_aligned` row t always
// corresponds to input position t regardless of traversal direction.
fn run_direction(
    x: &Array2<f64>,
    p: &LstmDirectionParams,
    reverse: bool,
) -> Result<(DirectionCache, Array2<f64>)> {
    let n = x.nrows();
    let h = p.hidden_dim();
    let mut cache = DirectionCache {
        steps: Vec::with_capacity(n),
    };
    let mut h_aligned = Array2::zeros((n, h));
    let mut h_prev = Array1::zeros(h);
    let mut c_prev = Array1::zeros(h);
    for s in 0..n {
        let pos = if reverse { n - 1 - s } else { s };
        let z = concat_state(&h_prev, x.row(pos));
        let step = cell_step(&z, &c_prev, p);
        let h_t = &step.o * &step.tanh_c;
        if !h_t.iter().all(|v| v.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite hidden state at position {pos}"
            )));
        }
        h_aligned.row_mut(pos).assign(&h_t);
        c_prev = step.c.clone();
        h_prev = h_t;
        cache.steps.push(step);
    }
    Ok((cache, h_aligned))
}

/// Full-sequence LSTM over `x` (`n x E`), zero initial state. With
/// `reverse`, the input is traversed right-to-left and the output rows are
/// re-aligned so row `t` still corresponds to position `t`.
pub fn lstm_sequence_forward(
    x: &Array2<f64>,
    p: &LstmDirectionParams,
    reverse: bool,
) -> Result<Array2<f64>> {
    p.check()?;
    check_rows(x)?;
    if x.ncols() + p.hidden_dim() != p.input_dim() {
        return Err(Error::Dimension {
            what: "lstm input width",
            expected: (p.input_dim() - p.hidden_dim()).to_string(),
            got: x.ncols().to_string(),
        });
    }
    run_direction(x, p, reverse).map(|(_, h)| h)
}

fn check_rows(x: &Array2<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Dimension {
            what: "input sequence",
            expected: "at least one position".into(),
            got: "0".into(),
        });
    }
    Ok(())
}

/// Both directions concatenated: row `t` is `[fwd h_t, bwd h_t]` (`n x 2H`).
pub fn bilstm_forward(
    x: &Array2<f64>,
    fwd: &LstmDirectionParams,
    bwd: &LstmDirectionParams,
) -> Result<Array2<f64>> {
    if fwd.hidden_dim() != bwd.hidden_dim() {
        return Err(Error::Dimension {
            what: "bilstm hidden size",
            expected: fwd.hidden_dim().to_string(),
            got: bwd.hidden_dim().to_string(),
        });
    }
    let hf = lstm_sequence_forward(x, fwd, false)?;
    let hb = lstm_sequence_forward(x, bwd, true)?;
    Ok(ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("matching row counts"))
}

/// Emission projection: row `i` of the result is
/// `tanh(proj_w . h_i + proj_b)` (or the linear pre-activation when
/// `apply_tanh` is off), so with tanh every score lies in (-1, 1).
pub fn project(
    h_states: &Array2<f64>,
    proj_w: &Array2<f64>,
    proj_b: &Array1<f64>,
    apply_tanh: bool,
) -> Result<Array2<f64>> {
    if h_states.ncols() != proj_w.ncols() || proj_w.nrows() != proj_b.len() {
        return Err(Error::Dimension {
            what: "projection input",
            expected: format!(
                "{} columns, {} bias entries",
                proj_w.ncols(),
                proj_w.nrows()
            ),
            got: format!(
                "{} columns, {} bias entries",
                h_states.ncols(),
                proj_b.len()
            ),
        });
    }
    let mut a = h_states.dot(&proj_w.t());
    a += &proj_b.view().insert_axis(Axis(0));
    if apply_tanh {
        a.mapv_inplace(f64::tanh);
    }
    Ok(a)
}

/// Inverted dropout. In training each entry is zeroed with probability `p`
/// and survivors are scaled by `1/(1-p)`; at inference the input passes
/// through unchanged.
pub fn dropout(t: &Array2<f64>, p: f64, training: bool, rng: &mut impl Rng) -> Result<Array2<f64>> {
    let mask = dropout_mask(t.dim(), p, training, rng)?;
    Ok(match mask {
        Some(m) => t * &m,
        None => t.clone(),
    })
}

// Returns None when dropout is a no-op; mask entries are 0 or 1/(1-p).
fn dropout_mask(
    dim: (usize, usize),
    p: f64,
    training: bool,
    rng: &mut impl Rng,
) -> Result<Option<Array2<f64>>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "dropout rate must be in [0, 1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok(None);
    }
    let keep = 1.0 / (1.0 - p);
    let mut mask = Array2::zeros(dim);
    for v in mask.iter_mut() {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
    Ok(Some(mask))
}

/// Forward-pass switches shared by training and inference.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOpts {
    pub dropout: f64,
    pub training: bool,
    /// When off, emissions are the unbounded linear projection.
    pub tanh_projection: bool,
}

impl Default for ForwardOpts {
    fn default() -> Self {
        Self {
            dropout: 0.0,
            training: false,
            tanh_projection: true,
        }
    }
}

/// Cached activations of one sentence's forward pass; consumed by
/// [`sentence_backward`].
pub struct SentenceForward {
    /// `n x k` emission scores, ready for the CRF.
    pub emissions: Array2<f64>,
    char_ids: Vec<usize>,
    mask_x: Option<Array2<f64>>,
    mask_h: Option<Array2<f64>>,
    concat_dropped: Array2<f64>,
    fwd: DirectionCache,
    bwd: DirectionCache,
    tanh_projection: bool,
}

/// Embeds `char_ids`, applies dropout, runs both LSTM directions, applies
/// dropout again and projects to emission scores, caching every
/// intermediate needed for the backward pass.
pub fn sentence_forward(
    params: &ModelParams,
    char_ids: &[usize],
    opts: &ForwardOpts,
    rng: &mut impl Rng,
) -> Result<SentenceForward> {
    params.check()?;
    let n = char_ids.len();
    if n == 0 {
        return Err(Error::Dimension {
            what: "sentence",
            expected: "at least one character".into(),
            got: "0".into(),
        });
    }
    let (v, e) = (params.vocab_size(), params.embed_dim());
    if let Some(&bad) = char_ids.iter().find(|&&id| id >= v) {
        return Err(Error::Dimension {
            what: "char id",
            expected: format!("< {v}"),
            got: bad.to_string(),
        });
    }

    let mut x = Array2::zeros((n, e));
    for (t, &id) in char_ids.iter().enumerate() {
        x.row_mut(t).assign(&params.embedding.row(id));
    }
    let mask_x = dropout_mask(x.dim(), opts.dropout, opts.training, rng)?;
    if let Some(m) = &mask_x {
        x *= m;
    }

    let (fwd, hf) = run_direction(&x, &params.forward_lstm, false)?;
    let (bwd, hb) = run_direction(&x, &params.backward_lstm, true)?;
    let mut concat =
        ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("matching row counts");
    let mask_h = dropout_mask(concat.dim(), opts.dropout, opts.training, rng)?;
    if let Some(m) = &mask_h {
        concat *= m;
    }

    let emissions = project(
        &concat,
        &params.proj_w,
        &params.proj_b,
        opts.tanh_projection,
    )?;
    Ok(SentenceForward {
        emissions,
        char_ids: char_ids.to_vec(),
        mask_x,
        mask_h,
        concat_dropped: concat,
        fwd,
        bwd,
        tanh_projection: opts.tanh_projection,
    })
}

fn direction_backward(
    p: &LstmDirectionParams,
    cache: &DirectionCache,
    d_h_aligned: &Array2<f64>,
    reverse: bool,
    grads: &mut LstmDirectionParams,
    d_x: &mut Array2<f64>,
) {
    let n = cache.steps.len();
    let h = p.hidden_dim();
    let mut dh_carry = Array1::<f64>::zeros(h);
    let mut dc_carry = Array1::<f64>::zeros(h);
    for step in (0..n).rev() {
        let pos = if reverse { n - 1 - step } else { step };
        let st = &cache.steps[step];
        let dh = &d_h_aligned.row(pos) + &dh_carry;

        let d_o = &dh * &st.tanh_c;
        let da_o = &d_o * &(&st.o * &(1.0 - &st.o));
        let dc = &(&dh * &st.o) * &(1.0 - &(&st.tanh_c * &st.tanh_c)) + &dc_carry;
        let df = if step == 0 {
            Array1::zeros(h) // c_prev is the zero initial state
        } else {
            &dc * &cache.steps[step - 1].c
        };
        let da_f = &df * &(&st.f * &(1.0 - &st.f));
        let da_i = &(&dc * &st.g) * &(&st.i * &(1.0 - &st.i));
        let da_g = &(&dc * &st.i) * &(1.0 - &(&st.g * &st.g));
        dc_carry = &dc * &st.f;

        let z_row = st.z.view().insert_axis(Axis(0));
        let mut dz = Array1::<f64>::zeros(p.input_dim());
        for (w, db, da) in [
            (&p.w_f, &mut grads.b_f, &da_f),
            (&p.w_i, &mut grads.b_i, &da_i),
            (&p.w_o, &mut grads.b_o, &da_o),
            (&p.w_c, &mut grads.b_c, &da_g),
        ] {
            *db += da;
            general_mat_vec_mul(1.0, &w.t(), da, 1.0, &mut dz);
        }
        for (dw, da) in [
            (&mut grads.w_f, &da_f),
            (&mut grads.w_i, &da_i),
            (&mut grads.w_o, &da_o),
            (&mut grads.w_c, &da_g),
        ] {
            let da_col = da.view().insert_axis(Axis(1));
            general_mat_mul(1.0, &da_col, &z_row, 1.0, dw);
        }

        dh_carry.assign(&dz.slice(s![..h]));
        let mut dx_row = d_x.row_mut(pos);
        dx_row += &dz.slice(s![h..]);
    }
}

/// Accumulates `d(loss)/d(params)` into `grads` given the gradient of the
/// loss with respect to this sentence's emission matrix. Scale
/// `d_emissions` beforehand for batch averaging; CRF transition gradients
/// are accumulated separately by the caller.
pub fn sentence_backward(
    params: &ModelParams,
    cache: &SentenceForward,
    d_emissions: &Array2<f64>,
    grads: &mut GradientStore,
) -> Result<()> {
    let n = cache.char_ids.len();
    let k = params.num_tags();
    if d_emissions.dim() != (n, k) {
        return Err(Error::Dimension {
            what: "emission gradient",
            expected: format!("{n} x {k}"),
            got: format!("{:?}", d_emissions.dim()),
        });
    }

    // tanh projection: d pre-activation = d_emissions * (1 - emissions^2)
    let d_a = if cache.tanh_projection {
        d_emissions * &(1.0 - &(&cache.emissions * &cache.emissions))
    } else {
        d_emissions.clone()
    };
    general_mat_mul(1.0, &d_a.t(), &cache.concat_dropped, 1.0, &mut grads.proj_w);
    grads.proj_b += &d_a.sum_axis(Axis(0));

    let mut d_concat = d_a.dot(&params.proj_w);
    if let Some(m) = &cache.mask_h {
        d_concat *= m;
    }
    let h = params.hidden_dim();
    let d_hf = d_concat.slice(s![.., ..h]).to_owned();
    let d_hb = d_concat.slice(s![.., h..]).to_owned();

    let mut d_x = Array2::zeros((n, params.embed_dim()));
    direction_backward(
        &params.forward_lstm,
        &cache.fwd,
        &d_hf,
        false,
        &mut grads.forward_lstm,
        &mut d_x,
    );
    direction_backward(
        &params.backward_lstm,
        &cache.bwd,
        &d_hb,
        true,
        &mut grads.backward_lstm,
        &mut d_x,
    );

    if let Some(m) = &cache.mask_x {
        d_x *= m;
    }
    for (t, &id) in cache.char_ids.iter().enumerate() {
        let mut row = grads.embedding.row_mut(id);
        row += &d_x.row(t);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_dir(h: usize, e: usize, rng: &mut ChaCha8Rng) -> LstmDirectionParams {
        let mut p = LstmDirectionParams::zeros(h, h + e);
        for w in [&mut p.w_f, &mut p.w_i, &mut p.w_o, &mut p.w_c] {
            for v in w.iter_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        for b in [&mut p.b_f, &mut p.b_i, &mut p.b_o, &mut p.b_c] {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        p
    }

    #[test]
    fn cell_all_zero_inputs() {
        let p = LstmDirectionParams::zeros(2, 5);
        let (h, c) =
            lstm_cell_forward(&Array1::zeros(3), &Array1::zeros(2), &Array1::zeros(2), &p).unwrap();
        assert_eq!(h, Array1::<f64>::zeros(2));
        assert_eq!(c, Array1::<f64>::zeros(2));
    }

    #[test]
    fn cell_zero_weights_nonzero_cell_state() {
        // f=i=o=0.5, g=0  =>  c=0.5, h=0.5*tanh(0.5)
        let p = LstmDirectionParams::zeros(1, 2);
        let (h, c) = lstm_cell_forward(&arr1(&[0.7]), &arr1(&[0.3]), &arr1(&[1.0]), &p).unwrap();
        assert!((c[0] - 0.5).abs() < 1e-15);
        assert!((h[0] - 0.23105857863000487).abs() < 1e-15);
    }

    #[test]
    fn cell_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let p = random_dir(3, 3, &mut rng);
        let x = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let h_prev = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let c_prev = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let (h, c) = lstm_cell_forward(&x, &h_prev, &c_prev, &p).unwrap();
        let (h_ref, c_ref) = crate::selfcheck::scalar_lstm_cell(&x, &h_prev, &c_prev, &p);
        for j in 0..3 {
            assert!((h[j] - h_ref[j]).abs() < 1e-12);
            assert!((c[j] - c_ref[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_rejects_dimension_mismatch() {
        let p = LstmDirectionParams::zeros(2, 5);
        let r = lstm_cell_forward(&Array1::zeros(4), &Array1::zeros(2), &Array1::zeros(2), &p);
        assert!(r.is_err());
    }

    #[test]
    fn sequence_n1_equals_cell_with_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_dir(4, 3, &mut rng);
        let x = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.0..1.0));
        let seq = lstm_sequence_forward(&x, &p, false).unwrap();
        let (h, _) = lstm_cell_forward(
            &x.row(0).to_owned(),
            &Array1::zeros(4),
            &Array1::zeros(4),
            &p,
        )
        .unwrap();
        assert_eq!(seq.row(0).to_owned(), h);
    }

    #[test]
    fn reverse_on_palindrome_mirrors_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let p = random_dir(3, 2, &mut rng);
        let n = 5;
        let mut x = Array2::zeros((n, 2));
        for t in 0..n.div_ceil(2) {
            let row = Array1::from_shape_fn(2, |_| rng.random_range(-1.0..1.0));
            x.row_mut(t).assign(&row);
            x.row_mut(n - 1 - t).assign(&row);
        }
        let fwd = lstm_sequence_forward(&x, &p, false).unwrap();
        let rev = lstm_sequence_forward(&x, &p, true).unwrap();
        for t in 0..n {
            for j in 0..3 {
                assert!((rev[[t, j]] - fwd[[n - 1 - t, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_sequence_output() {
        let p = LstmDirectionParams::zeros(3, 5);
        let x = Array2::from_elem((4, 2), 0.9);
        assert_eq!(
            lstm_sequence_forward(&x, &p, false).unwrap(),
            Array2::<f64>::zeros((4, 3))
        );
        assert_eq!(
            lstm_sequence_forward(&x, &p, true).unwrap(),
            Array2::<f64>::zeros((4, 3))
        );
    }

    #[test]
    fn bilstm_concatenates_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let fwd = random_dir(1, 2, &mut rng);
        let bwd = random_dir(1, 2, &mut rng);
        let x = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let both = bilstm_forward(&x, &fwd, &bwd).unwrap();
        let hf = lstm_sequence_forward(&x, &fwd, false).unwrap();
        let hb = lstm_sequence_forward(&x, &bwd, true).unwrap();
        assert_eq!(both.dim(), (3, 2));
        for t in 0..3 {
            assert_eq!(both[[t, 0]], hf[[t, 0]]);
            assert_eq!(both[[t, 1]], hb[[t, 0]]);
        }
    }

    #[test]
    fn bilstm_zero_backward_weights_zero_right_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let fwd = random_dir(2, 2, &mut rng);
        let bwd = LstmDirectionParams::zeros(2, 4);
        let x = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let both = bilstm_forward(&x, &fwd, &bwd).unwrap();
        assert_eq!(both.slice(s![.., 2..]).sum(), 0.0);
    }

    #[test]
    fn project_zero_params_zero_output() {
        let h = Array2::from_elem((3, 4), 1.5);
        let p = project(&h, &Array2::zeros((2, 4)), &Array1::zeros(2), true).unwrap();
        assert_eq!(p, Array2::<f64>::zeros((3, 2)));
    }

    #[test]
    fn project_identity_example() {
        let h = ndarray::arr2(&[[0.5, -0.5]]);
        let w = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let p = project(&h, &w, &Array1::zeros(2), true).unwrap();
        assert!((p[[0, 0]] - 0.46211715726000974).abs() < 1e-15);
        assert!((p[[0, 1]] + 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn project_tanh_bounds_all_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let h = Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.5..1.5));
        let w = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.5..1.5));
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-1.5..1.5));
        let p = project(&h, &w, &b, true).unwrap();
        assert!(p.iter().all(|v| v.abs() < 1.0));
        // even saturating pre-activations never escape [-1, 1]
        let big = project(&(&h * 1e6), &w, &b, true).unwrap();
        assert!(big.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn dropout_p0_and_inference_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Array2::from_elem((5, 5), 2.0);
        assert_eq!(dropout(&t, 0.0, true, &mut rng).unwrap(), t);
        assert_eq!(dropout(&t, 0.9, false, &mut rng).unwrap(), t);
        assert!(dropout(&t, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let t = Array2::ones((1, 100_000));
        let dropped = dropout(&t, 0.5, true, &mut rng).unwrap();
        let mean = dropped.sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn init_params_shapes_and_forget_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = init_params(10, 6, 4, 5, &mut rng).unwrap();
        p.check().unwrap();
        p.assert_finite().unwrap();
        assert!(p.forward_lstm.b_f.iter().all(|&v| v == 1.0));
        assert!(p.backward_lstm.b_f.iter().all(|&v| v == 1.0));
        assert_eq!(p.forward_lstm.b_i, Array1::<f64>::zeros(4));
        assert_eq!(p.transitions.start, Array1::<f64>::zeros(5));
        let r = (6.0 / (10 + 6) as f64).sqrt();
        assert!(p.embedding.iter().all(|v| v.abs() < r));
        // same seed, same params
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(init_params(10, 6, 4, 5, &mut rng2).unwrap(), p);
    }

    #[test]
    fn flat_covers_every_parameter_once() {
        let p = ModelParams::zeros(5, 3, 2, 4);
        let total: usize = p.flat().iter().map(|s| s.len()).sum();
        let expected = 5 * 3            // embedding
            + 2 * (4 * (2 * 5) + 4 * 2) // two lstm directions
            + 4 * 4 + 4                 // projection
            + 4 * 4 + 4 + 4; // transitions
        assert_eq!(total, expected);
        assert_eq!(p.flat().len(), SLOT_NAMES.len());
    }

    #[test]
    fn forward_is_deterministic_given_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = init_params(8, 4, 3, 5, &mut rng).unwrap();
        let opts = ForwardOpts {
            dropout: 0.5,
            training: true,
            tanh_projection: true,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        let a = sentence_forward(&params, &[2, 3, 4, 5], &opts, &mut r1).unwrap();
        let b = sentence_forward(&params, &[2, 3, 4, 5], &opts, &mut r2).unwrap();
        assert_eq!(a.emissions, b.emissions);
    }

    #[test]
    fn forward_rejects_out_of_range_char_id() {
        let params = ModelParams::zeros(4, 3, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sentence_forward(&params, &[1, 4], &ForwardOpts::default(), &mut rng).is_err());
        assert!(sentence_forward(&params, &[], &ForwardOpts::default(), &mut rng).is_err());
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let params = init_params(7, 4, 3, 5, &mut rng).unwrap();
        let cache =
            sentence_forward(&params, &[2, 5, 1], &ForwardOpts::default(), &mut rng).unwrap();
        let mut grads = GradientStore::zeros_like(&params);
        sentence_backward(&params, &cache, &Array2::zeros((3, 5)), &mut grads).unwrap();
        assert_eq!(grads, GradientStore::zeros_like(&params));
    }

    #[test]
    fn gradients_add_over_sentences() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let params = init_params(9, 4, 3, 4, &mut rng).unwrap();
        let opts = ForwardOpts::default();
        let sent_a: Vec<usize> = vec![2, 3, 4];
        let sent_b: Vec<usize> = vec![5, 6, 7, 8];
        let up_a = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let up_b = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));

        let mut rng_f = ChaCha8Rng::seed_from_u64(0);
        let mut ga = GradientStore::zeros_like(&params);
        let ca = sentence_forward(&params, &sent_a, &opts, &mut rng_f).unwrap();
        sentence_backward(&params, &ca, &up_a, &mut ga).unwrap();
        let mut gb = GradientStore::zeros_like(&params);
        let cb = sentence_forward(&params, &sent_b, &opts, &mut rng_f).unwrap();
        sentence_backward(&params, &cb, &up_b, &mut gb).unwrap();

        let mut joint = GradientStore::zeros_like(&params);
        let ca2 = sentence_forward(&params, &sent_a, &opts, &mut rng_f).unwrap();
        sentence_backward(&params, &ca2, &up_a, &mut joint).unwrap();
        let cb2 = sentence_forward(&params, &sent_b, &opts, &mut rng_f).unwrap();
        sentence_backward(&params, &cb2, &up_b, &mut joint).unwrap();

        ga.add_scaled(&gb, 1.0);
        for (want, got) in ga.flat().into_iter().zip(joint.flat()) {
            for (w, g) in want.iter().zip(got) {
                assert!((w - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_store_zero_and_norm() {
        let params = ModelParams::zeros(3, 2, 2, 2);
        let mut g = GradientStore::zeros_like(&params);
        g.proj_b[0] = 3.0;
        g.trans[[1, 1]] = 4.0;
        assert_eq!(g.global_norm(), 5.0);
        g.zero();
        assert_eq!(g.global_norm(), 0.0);
    }
}
