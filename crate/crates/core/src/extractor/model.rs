use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ExtractorError, SourceTokens, Vocab, MAX_SOURCE_TOKENS};
use crate::scalar::Scalar;
use crate::tagged::Relation;

pub const POLICY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { embed_dim: 64, hidden: 64, seed: 0 }
    }
}

/// One direction of the recurrent encoder: `h_t = tanh(W_x x_t + W_h h_prev + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RnnParams<F> {
    pub w_x: Array2<F>,
    pub w_h: Array2<F>,
    pub b: Array1<F>,
}

/// All trainable tensors. The same type holds gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams<F> {
    pub embed: Array2<F>,
    pub pos: Array2<F>,
    pub fwd: RnnParams<F>,
    pub bwd: RnnParams<F>,
    /// Rows: cause start, cause end, effect start, effect end.
    pub pointer_w: Array2<F>,
    pub pointer_b: Array1<F>,
    pub relation_w: Array2<F>,
    pub relation_b: Array1<F>,
    pub value_w: Array1<F>,
    pub value_b: Array1<F>,
}

fn uniform<F: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::of(rng.random_range(-scale..scale)))
}

impl<F: Scalar> PolicyParams<F> {
    pub fn init(vocab_size: usize, cfg: &PolicyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (e, h) = (cfg.embed_dim, cfg.hidden);
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        let rnn = |rng: &mut ChaCha8Rng| RnnParams {
            w_x: uniform(rng, h, e, glorot(h, e)),
            w_h: uniform(rng, h, h, glorot(h, h)),
            b: Array1::zeros(h),
        };
        let fwd = rnn(&mut rng);
        let bwd = rnn(&mut rng);
        Self {
            embed: uniform(&mut rng, vocab_size, e, 0.5),
            pos: uniform(&mut rng, MAX_SOURCE_TOKENS, e, 0.5),
            fwd,
            bwd,
            pointer_w: uniform(&mut rng, 4, 2 * h, glorot(4, 2 * h)),
            pointer_b: Array1::zeros(4),
            relation_w: uniform(&mut rng, 3, 2 * h, glorot(3, 2 * h)),
            relation_b: Array1::zeros(3),
            value_w: Array1::zeros(2 * h),
            value_b: Array1::zeros(1),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<F>| Array2::zeros(a.raw_dim());
        let z1 = |a: &Array1<F>| Array1::zeros(a.raw_dim());
        let zr = |r: &RnnParams<F>| RnnParams { w_x: z2(&r.w_x), w_h: z2(&r.w_h), b: z1(&r.b) };
        Self {
            embed: z2(&self.embed),
            pos: z2(&self.pos),
            fwd: zr(&self.fwd),
            bwd: zr(&self.bwd),
            pointer_w: z2(&self.pointer_w),
            pointer_b: z1(&self.pointer_b),
            relation_w: z2(&self.relation_w),
            relation_b: z1(&self.relation_b),
            value_w: z1(&self.value_w),
            value_b: z1(&self.value_b),
        }
    }

    /// Flat views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[F]> {
        let t: [&[F]; 14] = [
            self.embed.as_slice().expect("standard layout"),
            self.pos.as_slice().expect("standard layout"),
            self.fwd.w_x.as_slice().expect("standard layout"),
            self.fwd.w_h.as_slice().expect("standard layout"),
            self.fwd.b.as_slice().expect("standard layout"),
            self.bwd.w_x.as_slice().expect("standard layout"),
            self.bwd.w_h.as_slice().expect("standard layout"),
            self.bwd.b.as_slice().expect("standard layout"),
            self.pointer_w.as_slice().expect("standard layout"),
            self.pointer_b.as_slice().expect("standard layout"),
            self.relation_w.as_slice().expect("standard layout"),
            self.relation_b.as_slice().expect("standard layout"),
            self.value_w.as_slice().expect("standard layout"),
            self.value_b.as_slice().expect("standard layout"),
        ];
        t.to_vec()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let t: [&mut [F]; 14] = [
            self.embed.as_slice_mut().expect("standard layout"),
            self.pos.as_slice_mut().expect("standard layout"),
            self.fwd.w_x.as_slice_mut().expect("standard layout"),
            self.fwd.w_h.as_slice_mut().expect("standard layout"),
            self.fwd.b.as_slice_mut().expect("standard layout"),
            self.bwd.w_x.as_slice_mut().expect("standard layout"),
            self.bwd.w_h.as_slice_mut().expect("standard layout"),
            self.bwd.b.as_slice_mut().expect("standard layout"),
            self.pointer_w.as_slice_mut().expect("standard layout"),
            self.pointer_b.as_slice_mut().expect("standard layout"),
            self.relation_w.as_slice_mut().expect("standard layout"),
            self.relation_b.as_slice_mut().expect("standard layout"),
            self.value_w.as_slice_mut().expect("standard layout"),
            self.value_b.as_slice_mut().expect("standard layout"),
        ];
        t.into_iter().collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: F, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * *y;
            }
        }
    }

    pub fn scale(&mut self, alpha: F) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= alpha;
            }
        }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward<F> {
    pub ids: Vec<usize>,
    pub inputs: Array2<F>,
    pub h_fwd: Array2<F>,
    pub h_bwd: Array2<F>,
    /// `[h_fwd | h_bwd]` per position.
    pub states: Array2<F>,
    pub pooled: Array1<F>,
    /// 4 × n pointer scores.
    pub pointer: Array2<F>,
    pub relation: Array1<F>,
    pub value: F,
}

impl<F> Forward<F> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// The extraction policy: parameters plus vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel<F> {
    pub format_version: u32,
    pub config: PolicyConfig,
    pub vocab: Vocab,
    /// When set, the relation step always picks this label (datasets
    /// without relation annotations).
    pub fixed_relation: Option<Relation>,
    pub params: PolicyParams<F>,
}

fn run_rnn<F: Scalar>(p: &RnnParams<F>, inputs: &Array2<F>, reverse: bool) -> Array2<F> {
    let n = inputs.nrows();
    let h = p.b.len();
    let mut out = Array2::zeros((n, h));
    let mut prev: Array1<F> = Array1::zeros(h);
    let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
    for t in order {
        let mut a = p.w_x.dot(&inputs.row(t)) + p.w_h.dot(&prev) + &p.b;
        a.mapv_inplace(F::tanh);
        out.row_mut(t).assign(&a);
        prev = a;
    }
    out
}

/// `dW += outer(d, x)`.
fn add_outer<F: Scalar>(w: &mut Array2<F>, d: ArrayView1<F>, x: ArrayView1<F>) {
    for (mut row, &di) in w.rows_mut().into_iter().zip(d.iter()) {
        if di != F::zero() {
            row.scaled_add(di, &x);
        }
    }
}

/// Backpropagate through one direction; returns gradients w.r.t. inputs.
fn rnn_backward<F: Scalar>(
    p: &RnnParams<F>,
    inputs: &Array2<F>,
    hs: &Array2<F>,
    dh_out: ArrayView2Ref<F>,
    reverse: bool,
    g: &mut RnnParams<F>,
) -> Array2<F> {
    let n = inputs.nrows();
    let h = p.b.len();
    let mut dx = Array2::zeros(inputs.raw_dim());
    let mut carry: Array1<F> = Array1::zeros(h);
    let order: Vec<usize> = if reverse { (0..n).collect() } else { (0..n).rev().collect() };
    for t in order {
        let dh = &dh_out.row(t) + &carry;
        let ht = hs.row(t);
        let da: Array1<F> = dh.iter().zip(ht.iter()).map(|(d, y)| *d * (F::one() - *y * *y)).collect();
        add_outer(&mut g.w_x, da.view(), inputs.row(t));
        let prev = if reverse { t + 1 } else { t.wrapping_sub(1) };
        if prev < n {
            add_outer(&mut g.w_h, da.view(), hs.row(prev));
        }
        g.b += &da;
        dx.row_mut(t).assign(&p.w_x.t().dot(&da));
        carry = p.w_h.t().dot(&da);
    }
    dx
}

type ArrayView2Ref<'a, F> = ndarray::ArrayView2<'a, F>;

impl<F: Scalar> PolicyModel<F> {
    pub fn new(vocab: Vocab, config: PolicyConfig, fixed_relation: Option<Relation>) -> Self {
        let params = PolicyParams::init(vocab.len(), &config);
        Self { format_version: POLICY_FORMAT_VERSION, config, vocab, fixed_relation, params }
    }

    pub fn check(&self) -> Result<(), ExtractorError> {
        if self.format_version != POLICY_FORMAT_VERSION {
            return Err(ExtractorError::Version(self.format_version));
        }
        Ok(())
    }

    pub fn forward_source(&self, source: &SourceTokens) -> Result<Forward<F>, ExtractorError> {
        if source.is_empty() {
            return Err(ExtractorError::EmptySource);
        }
        Ok(self.forward_ids(&self.vocab.encode(source)))
    }

    pub fn forward_ids(&self, ids: &[usize]) -> Forward<F> {
        let p = &self.params;
        let n = ids.len();
        let e = p.embed.ncols();
        let mut inputs = Array2::zeros((n, e));
        for (t, &id) in ids.iter().enumerate() {
            let mut row = inputs.row_mut(t);
            row.assign(&p.embed.row(id));
            row += &p.pos.row(t);
        }
        let h_fwd = run_rnn(&p.fwd, &inputs, false);
        let h_bwd = run_rnn(&p.bwd, &inputs, true);
        let states = ndarray::concatenate(Axis(1), &[h_fwd.view(), h_bwd.view()]).expect("same rows");
        let pooled = states.mean_axis(Axis(0)).expect("non-empty source");
        let pointer = p.pointer_w.dot(&states.t()) + p.pointer_b.view().insert_axis(Axis(1));
        let relation = p.relation_w.dot(&pooled) + &p.relation_b;
        let value = p.value_w.dot(&pooled) + p.value_b[0];
        Forward { ids: ids.to_vec(), inputs, h_fwd, h_bwd, states, pooled, pointer, relation, value }
    }

    /// Accumulate parameter gradients into `grads` given the loss gradient
    /// with respect to the head outputs of `fw`.
    pub fn backward(
        &self,
        fw: &Forward<F>,
        d_pointer: &Array2<F>,
        d_relation: &Array1<F>,
        d_value: F,
        grads: &mut PolicyParams<F>,
    ) {
        let p = &self.params;
        let n = fw.len();
        let h = p.fwd.b.len();

        grads.pointer_w += &d_pointer.dot(&fw.states);
        grads.pointer_b += &d_pointer.sum_axis(Axis(1));
        let mut d_states = d_pointer.t().dot(&p.pointer_w);

        add_outer(&mut grads.relation_w, d_relation.view(), fw.pooled.view());
        grads.relation_b += d_relation;
        let mut d_pooled = p.relation_w.t().dot(d_relation);
        grads.value_w.scaled_add(d_value, &fw.pooled);
        grads.value_b[0] += d_value;
        d_pooled.scaled_add(d_value, &p.value_w);

        let share = F::one() / F::of(n as f64);
        for mut row in d_states.rows_mut() {
            row.scaled_add(share, &d_pooled);
        }

        let dx_f = rnn_backward(&p.fwd, &fw.inputs, &fw.h_fwd, d_states.slice(s![.., ..h]), false, &mut grads.fwd);
        let dx_b = rnn_backward(&p.bwd, &fw.inputs, &fw.h_bwd, d_states.slice(s![.., h..]), true, &mut grads.bwd);
        let dx = dx_f + dx_b;
        for (t, &id) in fw.ids.iter().enumerate() {
            let mut er = grads.embed.row_mut(id);
            er += &dx.row(t);
            let mut pr = grads.pos.row_mut(t);
            pr += &dx.row(t);
        }
    }
}
