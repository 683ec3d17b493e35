//! Embedding + single-layer LSTM sequence model with a task head.
//!
//! The model reads a setup token by token and maps the final hidden state to
//! either one logit (entanglement) or three raw distribution parameters
//! (SRV). One model serves one task.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use train::{train, History, HistoryRow, TrainConfig, TrainError, TrainOutcome};

use ndarray::{s, Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;

use crate::dataset::{Record, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::labeler::SrvLabel;
use crate::rng::{self, Stream};
use crate::srv_loss::{self, logistic, softplus, SrvParams, SrvPrediction};

pub const DEFAULT_EMBED: usize = 64;
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub task: Task,
}

impl ModelShape {
    pub fn outputs(&self) -> usize {
        match self.task {
            Task::Entanglement => 1,
            Task::Srv => 3,
        }
    }
}

/// All trainable tensors. Gates are laid out `[input, forget, cell, output]`
/// along the `4H` axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub embed: Array2<f64>,
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub bias: Array1<f64>,
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
}

impl Params {
    pub fn zeros(shape: &ModelShape) -> Self {
        let h4 = 4 * shape.hidden;
        Params {
            embed: Array2::zeros((shape.vocab, shape.embed)),
            w_x: Array2::zeros((shape.embed, h4)),
            w_h: Array2::zeros((shape.hidden, h4)),
            bias: Array1::zeros(h4),
            head_w: Array2::zeros((shape.hidden, shape.outputs())),
            head_b: Array1::zeros(shape.outputs()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Params {
            embed: Array2::zeros(self.embed.raw_dim()),
            w_x: Array2::zeros(self.w_x.raw_dim()),
            w_h: Array2::zeros(self.w_h.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
            head_w: Array2::zeros(self.head_w.raw_dim()),
            head_b: Array1::zeros(self.head_b.raw_dim()),
        }
    }

    /// Contiguous views of every tensor, in checkpoint order.
    pub fn slices(&self) -> [&[f64]; 6] {
        [
            self.embed.as_slice().expect("standard layout"),
            self.w_x.as_slice().expect("standard layout"),
            self.w_h.as_slice().expect("standard layout"),
            self.bias.as_slice().expect("standard layout"),
            self.head_w.as_slice().expect("standard layout"),
            self.head_b.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.embed.as_slice_mut().expect("standard layout"),
            self.w_x.as_slice_mut().expect("standard layout"),
            self.w_h.as_slice_mut().expect("standard layout"),
            self.bias.as_slice_mut().expect("standard layout"),
            self.head_w.as_slice_mut().expect("standard layout"),
            self.head_b.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn norm_sqr(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().flat_map(|s| s.iter()).all(|x| x.is_finite())
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Params) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= alpha);
        }
    }
}

/// Recurrent state carried between tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Array1<f64>,
    pub c: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadOutput {
    /// Probability of the positive class.
    Entanglement(f64),
    Srv(SrvParams),
}

impl HeadOutput {
    pub fn probability(&self) -> Option<f64> {
        match self {
            HeadOutput::Entanglement(p) => Some(*p),
            HeadOutput::Srv(_) => None,
        }
    }

    pub fn srv(&self) -> Option<SrvPrediction> {
        match self {
            HeadOutput::Srv(p) => Some(srv_loss::predict(p)),
            HeadOutput::Entanglement(_) => None,
        }
    }
}

/// Supervision for one sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    Entanglement(bool),
    Srv(SrvLabel),
}

impl Target {
    pub fn for_record(task: Task, r: &Record) -> Option<Target> {
        match task {
            Task::Entanglement => Some(Target::Entanglement(r.y_e)),
            Task::Srv => r.srv.filter(|_| r.fold_rank >= 2).map(Target::Srv),
        }
    }
}

/// One training example: token indices plus target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmModel {
    pub shape: ModelShape,
    pub vocab_hash: u64,
    pub params: Params,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    logistic(x)
}

/// Binary cross entropy on a logit, `softplus(z) - y z`.
pub fn bce_with_logit(z: f64, y: bool) -> f64 {
    softplus(z) - if y { z } else { 0.0 }
}

impl LstmModel {
    /// Uniform `+-1/sqrt(H)` initialization with forget-gate bias 1.
    pub fn new(vocab: &Vocabulary, embed: usize, hidden: usize, task: Task, seed: u64) -> Self {
        let shape = ModelShape {
            vocab: vocab.len(),
            embed,
            hidden,
            task,
        };
        let mut params = Params::zeros(&shape);
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut rng = rng::stream(seed, Stream::Init);
        for (i, slice) in params.slices_mut().into_iter().enumerate() {
            if i == 3 || i == 5 {
                continue; // biases
            }
            for x in slice.iter_mut() {
                *x = rng.gen_range(-bound..bound);
            }
        }
        params.bias.slice_mut(s![hidden..2 * hidden]).fill(1.0);
        LstmModel {
            shape,
            vocab_hash: vocab.hash(),
            params,
        }
    }

    pub fn zeroed(vocab: &Vocabulary, embed: usize, hidden: usize, task: Task) -> Self {
        let shape = ModelShape {
            vocab: vocab.len(),
            embed,
            hidden,
            task,
        };
        LstmModel {
            shape,
            vocab_hash: vocab.hash(),
            params: Params::zeros(&shape),
        }
    }

    pub fn task(&self) -> Task {
        self.shape.task
    }

    pub fn initial_state(&self) -> LstmState {
        LstmState {
            h: Array1::zeros(self.shape.hidden),
            c: Array1::zeros(self.shape.hidden),
        }
    }

    fn check_token(&self, token: usize) -> Result<()> {
        if token == 0 || token >= self.shape.vocab {
            return Err(Error::Vocabulary(format!(
                "token index {token} outside 1..{}",
                self.shape.vocab
            )));
        }
        Ok(())
    }

    /// Advances the recurrence by one token.
    pub fn step(&self, state: &LstmState, token: usize) -> Result<LstmState> {
        self.check_token(token)?;
        let hd = self.shape.hidden;
        let p = &self.params;
        let x = p.embed.row(token);
        let z = x.dot(&p.w_x) + state.h.dot(&p.w_h) + &p.bias;
        let mut c = Array1::zeros(hd);
        let mut h = Array1::zeros(hd);
        for j in 0..hd {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hd + j]);
            let g = z[2 * hd + j].tanh();
            let o = sigmoid(z[3 * hd + j]);
            c[j] = f * state.c[j] + i * g;
            h[j] = o * c[j].tanh();
        }
        Ok(LstmState { h, c })
    }

    pub fn run(&self, tokens: &[usize]) -> Result<LstmState> {
        if tokens.is_empty() {
            return Err(Error::Structural("empty token sequence".into()));
        }
        tokens.iter().try_fold(self.initial_state(), |st, &t| self.step(&st, t))
    }

    fn head_raw(&self, h: ArrayView1<f64>) -> Array1<f64> {
        h.dot(&self.params.head_w) + &self.params.head_b
    }

    pub fn head(&self, state: &LstmState) -> HeadOutput {
        let raw = self.head_raw(state.h.view());
        self.output_from_raw(raw.as_slice().expect("contiguous"))
    }

    fn output_from_raw(&self, raw: &[f64]) -> HeadOutput {
        match self.shape.task {
            Task::Entanglement => HeadOutput::Entanglement(sigmoid(raw[0])),
            Task::Srv => HeadOutput::Srv(SrvParams::from_raw([raw[0], raw[1], raw[2]])),
        }
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<HeadOutput> {
        Ok(self.head(&self.run(tokens)?))
    }

    /// Mean loss over `batch` and its gradient, by backpropagation through
    /// time. Sequences are grouped by length and each group is run as one
    /// matrix recurrence; group gradients are summed in length order.
    pub fn loss_and_gradients(&self, batch: &[&Example], mode: ExecMode) -> Result<(f64, Params)> {
        if batch.is_empty() {
            return Err(Error::Structural("empty batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let groups = group_by_length(batch);
        for ex in batch {
            if ex.tokens.is_empty() {
                return Err(Error::Structural("empty token sequence".into()));
            }
            for &t in &ex.tokens {
                self.check_token(t)?;
            }
            match (ex.target, self.shape.task) {
                (Target::Entanglement(_), Task::Entanglement) | (Target::Srv(_), Task::Srv) => {}
                _ => return Err(Error::Structural("target does not match model task".into())),
            }
        }
        let parts = exec::map_slice(mode, &groups, |g| self.group_backprop(g, scale));
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for (l, g) in parts {
            loss += l;
            grads.add_scaled(1.0, &g);
        }
        loss *= scale;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} on a batch of {} sequences (lengths {:?})",
                batch.len(),
                groups.iter().map(|g| (g[0].tokens.len(), g.len())).collect::<Vec<_>>()
            )));
        }
        Ok((loss, grads))
    }

    /// Mean loss only (no gradients), evaluated group-wise.
    pub fn mean_loss(&self, batch: &[&Example], mode: ExecMode) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Structural("empty batch".into()));
        }
        let outs = self.predict_examples(batch, mode)?;
        let total: f64 = outs
            .iter()
            .zip(batch)
            .map(|(raw, ex)| sample_loss(raw, &ex.target).0)
            .sum();
        Ok(total / batch.len() as f64)
    }

    /// Raw head outputs for each example, in input order.
    fn predict_examples(&self, batch: &[&Example], mode: ExecMode) -> Result<Vec<Vec<f64>>> {
        let seqs: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        self.raw_outputs(&seqs, mode)
    }

    fn raw_outputs(&self, seqs: &[&[usize]], mode: ExecMode) -> Result<Vec<Vec<f64>>> {
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Structural("empty token sequence".into()));
            }
            for &t in s.iter() {
                self.check_token(t)?;
            }
        }
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        order.sort_by_key(|&i| (seqs[i].len(), i));
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for i in order {
            match groups.last_mut() {
                Some(g) if seqs[g[0]].len() == seqs[i].len() && g.len() < 256 => g.push(i),
                _ => groups.push(vec![i]),
            }
        }
        let results = exec::map_slice(mode, &groups, |g| {
            let members: Vec<&[usize]> = g.iter().map(|&i| seqs[i]).collect();
            let (h, _) = self.group_forward(&members, false);
            h.dot(&self.params.head_w) + &self.params.head_b
        });
        let mut out = vec![Vec::new(); seqs.len()];
        for (g, raw) in groups.iter().zip(results) {
            for (row, &i) in g.iter().enumerate() {
                out[i] = raw.row(row).to_vec();
            }
        }
        Ok(out)
    }

    /// Predictions for token sequences, computed in length-bucketed batches.
    pub fn predict_sequences(&self, seqs: &[&[usize]], mode: ExecMode) -> Result<Vec<HeadOutput>> {
        Ok(self
            .raw_outputs(seqs, mode)?
            .iter()
            .map(|raw| self.output_from_raw(raw))
            .collect())
    }

    /// Encodes records with `vocab` and predicts each one.
    pub fn predict_batch(&self, records: &[Record], vocab: &Vocabulary, mode: ExecMode) -> Result<Vec<HeadOutput>> {
        if vocab.hash() != self.vocab_hash || vocab.len() != self.shape.vocab {
            return Err(Error::Vocabulary(format!(
                "model vocabulary hash {:016x} does not match {:016x}",
                self.vocab_hash,
                vocab.hash()
            )));
        }
        let encoded = records
            .iter()
            .map(|r| vocab.encode(r.tokens()))
            .collect::<Result<Vec<_>>>()?;
        let seqs: Vec<&[usize]> = encoded.iter().map(|v| v.as_slice()).collect();
        self.predict_sequences(&seqs, mode)
    }

    /// Batched recurrence over equal-length sequences. Returns the final
    /// hidden states and, when `keep` is set, the per-step cache.
    fn group_forward(&self, seqs: &[&[usize]], keep: bool) -> (Array2<f64>, Vec<StepCache>) {
        let b = seqs.len();
        let hd = self.shape.hidden;
        let len = seqs[0].len();
        let p = &self.params;
        let mut h = Array2::<f64>::zeros((b, hd));
        let mut c = Array2::<f64>::zeros((b, hd));
        let mut cache = Vec::with_capacity(if keep { len } else { 0 });
        for t in 0..len {
            let mut x = Array2::<f64>::zeros((b, self.shape.embed));
            for (r, s) in seqs.iter().enumerate() {
                x.row_mut(r).assign(&p.embed.row(s[t]));
            }
            let mut z = x.dot(&p.w_x) + h.dot(&p.w_h) + &p.bias;
            // activations in place: sigmoid on i,f,o and tanh on g
            z.slice_mut(s![.., 0..2 * hd]).mapv_inplace(sigmoid);
            z.slice_mut(s![.., 2 * hd..3 * hd]).mapv_inplace(f64::tanh);
            z.slice_mut(s![.., 3 * hd..]).mapv_inplace(sigmoid);
            let gates = z;
            let mut c_new = Array2::<f64>::zeros((b, hd));
            Zip::from(&mut c_new)
                .and(&gates.slice(s![.., 0..hd]))
                .and(&gates.slice(s![.., hd..2 * hd]))
                .and(&gates.slice(s![.., 2 * hd..3 * hd]))
                .and(&c)
                .for_each(|cn, &i, &f, &g, &cp| *cn = f * cp + i * g);
            let tc = c_new.mapv(f64::tanh);
            let h_new = &gates.slice(s![.., 3 * hd..]) * &tc;
            if keep {
                cache.push(StepCache {
                    x,
                    h_prev: h,
                    c_prev: c,
                    gates,
                    tanh_c: tc,
                });
            }
            h = h_new;
            c = c_new;
        }
        (h, cache)
    }

    fn group_backprop(&self, group: &[&Example], scale: f64) -> (f64, Params) {
        let hd = self.shape.hidden;
        let p = &self.params;
        let seqs: Vec<&[usize]> = group.iter().map(|e| e.tokens.as_slice()).collect();
        let (h_last, cache) = self.group_forward(&seqs, true);
        let raw = h_last.dot(&p.head_w) + &p.head_b;
        let mut dout = Array2::<f64>::zeros(raw.raw_dim());
        let mut loss = 0.0;
        for (r, ex) in group.iter().enumerate() {
            let (l, g) = sample_loss(&raw.row(r).to_vec(), &ex.target);
            loss += l;
            for (j, v) in g.into_iter().enumerate() {
                dout[(r, j)] = v * scale;
            }
        }
        let mut grads = self.params.zeros_like();
        grads.head_w = h_last.t().dot(&dout);
        grads.head_b = dout.sum_axis(Axis(0));
        let mut dh = dout.dot(&p.head_w.t());
        let mut dc = Array2::<f64>::zeros(dh.raw_dim());
        let b = group.len();
        for (t, step) in cache.iter().enumerate().rev() {
            let gi = step.gates.slice(s![.., 0..hd]);
            let gf = step.gates.slice(s![.., hd..2 * hd]);
            let gg = step.gates.slice(s![.., 2 * hd..3 * hd]);
            let go = step.gates.slice(s![.., 3 * hd..]);
            let mut dz = Array2::<f64>::zeros((b, 4 * hd));
            for r in 0..b {
                for j in 0..hd {
                    let (i, f, g, o) = (gi[(r, j)], gf[(r, j)], gg[(r, j)], go[(r, j)]);
                    let tc = step.tanh_c[(r, j)];
                    let dhv = dh[(r, j)];
                    let dcv = dc[(r, j)] + dhv * o * (1.0 - tc * tc);
                    dz[(r, j)] = dcv * g * i * (1.0 - i);
                    dz[(r, hd + j)] = dcv * step.c_prev[(r, j)] * f * (1.0 - f);
                    dz[(r, 2 * hd + j)] = dcv * i * (1.0 - g * g);
                    dz[(r, 3 * hd + j)] = dhv * tc * o * (1.0 - o);
                    dc[(r, j)] = dcv * f;
                }
            }
            grads.w_x += &step.x.t().dot(&dz);
            grads.w_h += &step.h_prev.t().dot(&dz);
            grads.bias += &dz.sum_axis(Axis(0));
            let dx = dz.dot(&p.w_x.t());
            for (r, s) in seqs.iter().enumerate() {
                let mut row = grads.embed.row_mut(s[t]);
                row += &dx.row(r);
            }
            dh = dz.dot(&p.w_h.t());
        }
        (loss, grads)
    }
}

struct StepCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    gates: Array2<f64>,
    tanh_c: Array2<f64>,
}

/// Loss of one sample and its gradient with respect to the raw head output.
fn sample_loss(raw: &[f64], target: &Target) -> (f64, Vec<f64>) {
    match target {
        Target::Entanglement(y) => {
            let z = raw[0];
            let g = sigmoid(z) - if *y { 1.0 } else { 0.0 };
            (bce_with_logit(z, *y), vec![g])
        }
        Target::Srv(label) => {
            let (l, g) = srv_loss::nll_raw([raw[0], raw[1], raw[2]], label);
            (l, g.to_vec())
        }
    }
}

fn group_by_length<'a>(batch: &[&'a Example]) -> Vec<Vec<&'a Example>> {
    let mut groups: std::collections::BTreeMap<usize, Vec<&'a Example>> = Default::default();
    for ex in batch {
        groups.entry(ex.tokens.len()).or_default().push(*ex);
    }
    groups.into_values().collect()
}

/// Encodes the records usable for `task` into examples (record order kept).
pub fn examples_for(records: &[Record], vocab: &Vocabulary, task: Task) -> Result<Vec<(usize, Example)>> {
    records
        .iter()
        .enumerate()
        .filter_map(|(i, r)| Target::for_record(task, r).map(|t| (i, r, t)))
        .map(|(i, r, target)| {
            Ok((
                i,
                Example {
                    tokens: vocab.encode(r.tokens())?,
                    target,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests;
