//! LeNet-style binary patch classifier.
//!
//! Layout: three 3x3 stride-1 same-padded convolutions, each followed by ReLU
//! and a 2x2 max pool (odd sizes floor), then two ReLU dense layers, inverted
//! dropout, and a single sigmoid output. Inputs are 28x28 patches scaled by
//! 1/255.

mod format;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::Label;
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, PATCH_SIDE};
use crate::scalar::Scalar;

pub use format::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use train::{train, training_log_csv, Adam, AdamConfig, EpochLog, TrainConfig, TrainMeta};

/// Lower clamp for predictions inside the loss.
pub const PRED_CLAMP: f64 = 1e-7;
const KERNEL: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LayerPlan {
    pub input_side: usize,
    pub conv_maps: Vec<usize>,
    pub dense_layers: usize,
    pub dense_units: usize,
    pub dropout: f64,
}

impl Default for LayerPlan {
    fn default() -> Self {
        Self {
            input_side: PATCH_SIDE,
            conv_maps: vec![128, 256, 512],
            dense_layers: 2,
            dense_units: 512,
            dropout: 0.5,
        }
    }
}

impl LayerPlan {
    /// Small widths for tests and quick runs: maps (4, 8, 8), dense 16.
    pub fn reduced() -> Self {
        Self {
            conv_maps: vec![4, 8, 8],
            dense_units: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side == 0 || self.conv_maps.is_empty() || self.conv_maps.contains(&0) {
            return Err(Error::Model("plan needs a positive input side and conv widths".into()));
        }
        if self.dense_units == 0 {
            return Err(Error::Model("dense width must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Model(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        if self.conv_output().1 == 0 {
            return Err(Error::Model("input too small for the pooling stack".into()));
        }
        Ok(())
    }

    /// Activation shapes `(channels, side)`: input, then conv and pool outputs.
    pub fn shape_trace(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(1, self.input_side)];
        let mut side = self.input_side;
        for &m in &self.conv_maps {
            out.push((m, side));
            side /= 2;
            out.push((m, side));
        }
        out
    }

    fn conv_output(&self) -> (usize, usize) {
        *self.shape_trace().last().unwrap()
    }

    pub fn flatten_len(&self) -> usize {
        let (c, s) = self.conv_output();
        c * s * s
    }

    /// `(weights, biases)` element counts per layer in declaration order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::new();
        let mut in_c = 1;
        for &m in &self.conv_maps {
            shapes.push((m * in_c * KERNEL * KERNEL, m));
            in_c = m;
        }
        let mut fan_in = self.flatten_len();
        for _ in 0..self.dense_layers {
            shapes.push((self.dense_units * fan_in, self.dense_units));
            fan_in = self.dense_units;
        }
        shapes.push((fan_in, 1));
        shapes
    }

    fn head_fan_in(&self) -> usize {
        if self.dense_layers == 0 {
            self.flatten_len()
        } else {
            self.dense_units
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(shape: (usize, usize)) -> Self {
        Self {
            weights: vec![T::zero(); shape.0],
            bias: vec![T::zero(); shape.1],
        }
    }
}

/// Gradients share the parameter layout.
pub type Gradients<T> = Vec<LayerParams<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnModel<T> {
    pub plan: LayerPlan,
    pub layers: Vec<LayerParams<T>>,
    pub seed: u64,
    pub meta: TrainMeta,
}

impl<T: Scalar> CnnModel<T> {
    /// He-uniform init for ReLU layers, Glorot-uniform for the sigmoid head,
    /// zero biases.
    pub fn new(plan: LayerPlan, seed: u64) -> Result<Self> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = plan.layer_shapes();
        let n = shapes.len();
        let mut fan_ins: Vec<usize> = Vec::with_capacity(n);
        let mut in_c = 1;
        for &m in &plan.conv_maps {
            fan_ins.push(in_c * KERNEL * KERNEL);
            in_c = m;
        }
        let mut f = plan.flatten_len();
        for _ in 0..plan.dense_layers {
            fan_ins.push(f);
            f = plan.dense_units;
        }
        fan_ins.push(f);

        let layers = shapes
            .iter()
            .zip(&fan_ins)
            .enumerate()
            .map(|(i, (&shape, &fan_in))| {
                let limit = if i + 1 == n {
                    (6.0 / (fan_in + 1) as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let weights = (0..shape.0)
                    .map(|_| T::lit(rng.random_range(-limit..limit)))
                    .collect();
                LayerParams {
                    weights,
                    bias: vec![T::zero(); shape.1],
                }
            })
            .collect();
        Ok(Self {
            plan,
            layers,
            seed,
            meta: TrainMeta::default(),
        })
    }

    pub fn zeros(plan: LayerPlan) -> Result<Self> {
        plan.validate()?;
        let layers = plan.layer_shapes().into_iter().map(LayerParams::zeros).collect();
        Ok(Self {
            plan,
            layers,
            seed: 0,
            meta: TrainMeta::default(),
        })
    }

    pub fn zero_gradients(&self) -> Gradients<T> {
        self.plan.layer_shapes().into_iter().map(LayerParams::zeros).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Converts the weights to another scalar type.
    pub fn cast<U: Scalar>(&self) -> CnnModel<U> {
        CnnModel {
            plan: self.plan.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: l.weights.iter().map(|&w| U::lit(w.as_f64())).collect(),
                    bias: l.bias.iter().map(|&b| U::lit(b.as_f64())).collect(),
                })
                .collect(),
            seed: self.seed,
            meta: self.meta.clone(),
        }
    }

    /// Scales a patch to `[0, 1]` after checking its shape.
    pub fn normalize(&self, patch: &GrayImage) -> Result<Vec<T>> {
        let s = self.plan.input_side;
        if patch.width() != s || patch.height() != s {
            return Err(Error::Model(format!(
                "patch is {}x{}, plan expects {s}x{s}",
                patch.width(),
                patch.height()
            )));
        }
        let k = T::one() / T::lit(255.0);
        Ok(patch.data().iter().map(|&v| T::lit(v as f64) * k).collect())
    }

    fn check_mask(&self, mask: Option<&[T]>) -> Result<()> {
        match mask {
            Some(m) if m.len() != self.plan.head_fan_in() => Err(Error::Model(format!(
                "dropout mask has {} entries, head expects {}",
                m.len(),
                self.plan.head_fan_in()
            ))),
            _ => Ok(()),
        }
    }

    /// Samples an inverted-dropout mask for the head input: kept units carry
    /// `1 / (1 - rate)`, dropped units 0.
    pub fn sample_dropout_mask(&self, rng: &mut impl Rng) -> Vec<T> {
        let rate = self.plan.dropout;
        let keep = T::lit(1.0 / (1.0 - rate));
        (0..self.plan.head_fan_in())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect()
    }

    /// Confidence for one patch. Dropout is sampled from `rng` only when
    /// `train_mode` is set; eval mode is deterministic.
    pub fn forward(&self, patch: &GrayImage, train_mode: bool, rng: &mut impl Rng) -> Result<T> {
        let x = self.normalize(patch)?;
        let mask = train_mode.then(|| self.sample_dropout_mask(rng));
        self.check_mask(mask.as_deref())?;
        Ok(self.run(&x, mask.as_deref(), None).prob)
    }

    /// Eval-mode confidence.
    pub fn predict(&self, patch: &GrayImage) -> Result<T> {
        let x = self.normalize(patch)?;
        Ok(self.run(&x, None, None).prob)
    }

    /// Eval-mode confidences for many patches, computed in parallel.
    pub fn predict_batch(&self, patches: &[&GrayImage]) -> Result<Vec<T>> {
        patches.par_iter().map(|p| self.predict(p)).collect()
    }

    /// Eval-mode output of the last hidden layer (the dropout input), for
    /// inspecting dropout statistics.
    pub fn head_input(&self, patch: &GrayImage, mask: Option<&[T]>) -> Result<Vec<T>> {
        let x = self.normalize(patch)?;
        self.check_mask(mask)?;
        let mut cache = Cache::default();
        self.run(&x, mask, Some(&mut cache));
        Ok(cache.head_in)
    }

    /// Identifies the linear piece the network is in for this input: every
    /// ReLU on/off state and every pooling argmax. Two parameter settings with
    /// equal signatures differ only smoothly, which is what finite-difference
    /// checks need.
    pub fn activation_signature(&self, patch: &GrayImage, mask: Option<&[T]>) -> Result<Vec<u32>> {
        let x = self.normalize(patch)?;
        self.check_mask(mask)?;
        let mut cache = Cache::default();
        self.run(&x, mask, Some(&mut cache));
        let mut sig = Vec::new();
        for c in &cache.convs {
            sig.extend(c.relu_out.iter().map(|&v| u32::from(v > T::zero())));
            sig.extend_from_slice(&c.argmax);
        }
        for d in &cache.dense_out {
            sig.extend(d.iter().map(|&v| u32::from(v > T::zero())));
        }
        Ok(sig)
    }

    /// Mean binary cross-entropy of the batch, forward pass only.
    pub fn batch_loss(&self, batch: &[(&GrayImage, Label)], mask: Option<&[T]>) -> Result<T> {
        self.check_mask(mask)?;
        let mut total = T::zero();
        for (patch, label) in batch {
            let x = self.normalize(patch)?;
            total += loss_bce(self.run(&x, mask, None).prob, *label);
        }
        Ok(total / T::lit(batch.len() as f64))
    }

    /// Exact gradients of the mean BCE over `batch` for every parameter,
    /// with an optional fixed dropout mask shared by the whole batch.
    pub fn backward(
        &self,
        batch: &[(&GrayImage, Label)],
        mask: Option<&[T]>,
    ) -> Result<(T, Gradients<T>)> {
        if batch.is_empty() {
            return Err(Error::Model("backward on an empty batch".into()));
        }
        self.check_mask(mask)?;
        let inputs: Vec<(Vec<T>, Label)> = batch
            .iter()
            .map(|(p, l)| Ok((self.normalize(p)?, *l)))
            .collect::<Result<_>>()?;
        let refs: Vec<(&[T], Label)> = inputs.iter().map(|(x, l)| (x.as_slice(), *l)).collect();
        Ok(self.backward_normalized(&refs, mask))
    }

    /// Gradient work for pre-normalized inputs. Samples are processed in
    /// fixed chunks whose partial sums are reduced in order, so the result
    /// does not depend on the thread count.
    pub(crate) fn backward_normalized(&self, batch: &[(&[T], Label)], mask: Option<&[T]>) -> (T, Gradients<T>) {
        const CHUNK: usize = 4;
        let scale = T::one() / T::lit(batch.len() as f64);
        let partials: Vec<(T, Gradients<T>)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = self.zero_gradients();
                let mut loss = T::zero();
                let mut cache = Cache::default();
                for (x, label) in chunk {
                    let out = self.run(x, mask, Some(&mut cache));
                    loss += loss_bce(out.prob, *label);
                    let dz = (out.prob - T::lit(label.target())) * scale;
                    self.accumulate_grads(&cache, dz, mask, &mut grads);
                }
                (loss, grads)
            })
            .collect();
        let mut iter = partials.into_iter();
        let (mut loss, mut grads) = iter.next().expect("nonempty batch");
        for (l, g) in iter {
            loss += l;
            for (acc, part) in grads.iter_mut().zip(g) {
                add_into(&mut acc.weights, &part.weights);
                add_into(&mut acc.bias, &part.bias);
            }
        }
        (loss * scale, grads)
    }

    fn run(&self, x: &[T], mask: Option<&[T]>, mut cache: Option<&mut Cache<T>>) -> Output<T> {
        let plan = &self.plan;
        let mut act = x.to_vec();
        let mut channels = 1;
        let mut side = plan.input_side;
        if let Some(c) = cache.as_deref_mut() {
            c.convs.clear();
            c.dense_in.clear();
            c.dense_out.clear();
        }
        for (li, &maps) in plan.conv_maps.iter().enumerate() {
            let layer = &self.layers[li];
            let cols = im2col(&act, channels, side);
            let hw = side * side;
            let k = channels * KERNEL * KERNEL;
            let mut out = vec![T::zero(); maps * hw];
            for o in 0..maps {
                let row = &mut out[o * hw..(o + 1) * hw];
                row.fill(layer.bias[o]);
                let wrow = &layer.weights[o * k..(o + 1) * k];
                for (kk, &w) in wrow.iter().enumerate() {
                    axpy(row, w, &cols[kk * hw..(kk + 1) * hw]);
                }
                for v in row.iter_mut() {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
            }
            let (pooled, argmax) = max_pool(&out, maps, side);
            if let Some(c) = cache.as_deref_mut() {
                c.convs.push(ConvCache {
                    cols,
                    relu_out: out,
                    argmax,
                    in_channels: channels,
                    side,
                });
            }
            act = pooled;
            channels = maps;
            side /= 2;
        }

        let n_conv = plan.conv_maps.len();
        for d in 0..plan.dense_layers {
            let layer = &self.layers[n_conv + d];
            let mut out = dense(&layer.weights, &layer.bias, &act);
            for v in out.iter_mut() {
                if *v < T::zero() {
                    *v = T::zero();
                }
            }
            if let Some(c) = cache.as_deref_mut() {
                c.dense_in.push(std::mem::replace(&mut act, out.clone()));
                c.dense_out.push(out);
            } else {
                act = out;
            }
        }

        let head_in: Vec<T> = match mask {
            Some(m) => act.iter().zip(m).map(|(&a, &k)| a * k).collect(),
            None => act,
        };
        let head = &self.layers[n_conv + plan.dense_layers];
        let logit = dot(&head.weights, &head_in) + head.bias[0];
        let prob = sigmoid(logit);
        if let Some(c) = cache {
            c.head_in = head_in;
        }
        Output { prob }
    }

    fn accumulate_grads(&self, cache: &Cache<T>, dz: T, mask: Option<&[T]>, grads: &mut Gradients<T>) {
        let plan = &self.plan;
        let n_conv = plan.conv_maps.len();
        let head_idx = n_conv + plan.dense_layers;

        // head
        {
            let g = &mut grads[head_idx];
            axpy(&mut g.weights, dz, &cache.head_in);
            g.bias[0] += dz;
        }
        let head_w = &self.layers[head_idx].weights;
        let mut delta: Vec<T> = match mask {
            Some(m) => head_w.iter().zip(m).map(|(&w, &k)| w * k * dz).collect(),
            None => head_w.iter().map(|&w| w * dz).collect(),
        };

        // dense stack, last to first
        for d in (0..plan.dense_layers).rev() {
            let out = &cache.dense_out[d];
            for (dv, &o) in delta.iter_mut().zip(out) {
                if o <= T::zero() {
                    *dv = T::zero();
                }
            }
            let input = &cache.dense_in[d];
            let layer = &self.layers[n_conv + d];
            let g = &mut grads[n_conv + d];
            let n_in = input.len();
            let mut next = vec![T::zero(); n_in];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == T::zero() {
                    continue;
                }
                g.bias[j] += dj;
                axpy(&mut g.weights[j * n_in..(j + 1) * n_in], dj, input);
                axpy(&mut next, dj, &layer.weights[j * n_in..(j + 1) * n_in]);
            }
            delta = next;
        }

        // conv stack: delta is the gradient w.r.t. the last pooled output
        for li in (0..n_conv).rev() {
            let cc = &cache.convs[li];
            let maps = plan.conv_maps[li];
            let hw = cc.side * cc.side;
            let mut dout = vec![T::zero(); maps * hw];
            for (p, &src) in cc.argmax.iter().enumerate() {
                dout[src as usize] += delta[p];
            }
            for (dv, &o) in dout.iter_mut().zip(&cc.relu_out) {
                if o <= T::zero() {
                    *dv = T::zero();
                }
            }
            let k = cc.in_channels * KERNEL * KERNEL;
            let layer = &self.layers[li];
            let g = &mut grads[li];
            let need_input_grad = li > 0;
            let mut dcols = if need_input_grad {
                vec![T::zero(); k * hw]
            } else {
                Vec::new()
            };
            for o in 0..maps {
                let drow = &dout[o * hw..(o + 1) * hw];
                let mut bsum = T::zero();
                for &v in drow {
                    bsum += v;
                }
                if bsum == T::zero() && drow.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                g.bias[o] += bsum;
                let gw = &mut g.weights[o * k..(o + 1) * k];
                for (kk, gv) in gw.iter_mut().enumerate() {
                    *gv += dot(drow, &cc.cols[kk * hw..(kk + 1) * hw]);
                }
                if need_input_grad {
                    let wrow = &layer.weights[o * k..(o + 1) * k];
                    for (kk, &w) in wrow.iter().enumerate() {
                        axpy(&mut dcols[kk * hw..(kk + 1) * hw], w, drow);
                    }
                }
            }
            if need_input_grad {
                delta = col2im(&dcols, cc.in_channels, cc.side);
            }
        }
    }
}

struct Output<T> {
    prob: T,
}

struct ConvCache<T> {
    cols: Vec<T>,
    relu_out: Vec<T>,
    argmax: Vec<u32>,
    in_channels: usize,
    side: usize,
}

struct Cache<T> {
    convs: Vec<ConvCache<T>>,
    dense_in: Vec<Vec<T>>,
    dense_out: Vec<Vec<T>>,
    head_in: Vec<T>,
}

impl<T> Default for Cache<T> {
    fn default() -> Self {
        Self {
            convs: Vec::new(),
            dense_in: Vec::new(),
            dense_out: Vec::new(),
            head_in: Vec::new(),
        }
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Binary cross-entropy with the prediction clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_bce<T: Scalar>(pred: T, label: Label) -> T {
    let eps = T::lit(PRED_CLAMP);
    let p = pred.max(eps).min(T::one() - eps);
    match label {
        Label::Vehicle => -p.ln(),
        Label::Background => -(T::one() - p).ln(),
    }
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn add_into<T: Scalar>(acc: &mut [T], part: &[T]) {
    for (a, &p) in acc.iter_mut().zip(part) {
        *a += p;
    }
}

fn dense<T: Scalar>(w: &[T], b: &[T], x: &[T]) -> Vec<T> {
    let n_in = x.len();
    b.iter()
        .enumerate()
        .map(|(j, &bj)| bj + dot(&w[j * n_in..(j + 1) * n_in], x))
        .collect()
}

/// Unfolds `channels x side x side` into a `(channels*9) x (side*side)`
/// matrix of zero-padded 3x3 neighbourhoods.
fn im2col<T: Scalar>(x: &[T], channels: usize, side: usize) -> Vec<T> {
    let hw = side * side;
    let mut cols = vec![T::zero(); channels * KERNEL * KERNEL * hw];
    for c in 0..channels {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ((c * KERNEL + ky) * KERNEL + kx) * hw;
                let dst = &mut cols[row..row + hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for x in 0..side {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < side as isize {
                            dst[y * side + x] = plane[sy as usize * side + sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], channels: usize, side: usize) -> Vec<T> {
    let hw = side * side;
    let mut x = vec![T::zero(); channels * hw];
    for c in 0..channels {
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = ((c * KERNEL + ky) * KERNEL + kx) * hw;
                let src = &cols[row..row + hw];
                for y in 0..side {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= side as isize {
                        continue;
                    }
                    for xx in 0..side {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < side as isize {
                            x[c * hw + sy as usize * side + sx as usize] += src[y * side + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2x2 max pool with floor semantics; also returns the flat source index of
/// each maximum (first maximum wins on ties).
fn max_pool<T: Scalar>(x: &[T], channels: usize, side: usize) -> (Vec<T>, Vec<u32>) {
    let out_side = side / 2;
    let hw = side * side;
    let mut out = Vec::with_capacity(channels * out_side * out_side);
    let mut arg = Vec::with_capacity(channels * out_side * out_side);
    for c in 0..channels {
        for y in 0..out_side {
            for xx in 0..out_side {
                let mut best_i = c * hw + 2 * y * side + 2 * xx;
                let mut best = x[best_i];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = c * hw + (2 * y + dy) * side + 2 * xx + dx;
                    if x[i] > best {
                        best = x[i];
                        best_i = i;
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}
