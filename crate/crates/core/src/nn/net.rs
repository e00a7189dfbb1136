//! Dilated 3x3 convolution stack.
//!
//! Layer `k` maps `c_in -> c_out` with a 3x3 kernel at dilation `d_k` and
//! zero padding `d_k`, so spatial size is preserved. Hidden layers use
//! ReLU; the last layer is linear and zero-initialised. Convolutions run
//! as im2col followed by a matrix product.
//!
//! With `stacking_depth > 1` the same weights are applied repeatedly as a
//! residual refinement: pass `k + 1` sees the state `s_k - o_k` in place of
//! the first `out_channels` input channels (the remaining channels are
//! conditioning and stay fixed), and the network output is `sum_k o_k`.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::{Gradients, ModelParams, Param};
use crate::error::{Error, Result};

pub const DEFAULT_DILATIONS: [usize; 6] = [1, 2, 4, 8, 4, 1];

static LAYER_STACK_PASSES: AtomicU64 = AtomicU64::new(0);

/// Process-wide count of forward applications of a layer stack; a stacked
/// network contributes `stacking_depth` per call.
pub fn layer_stack_passes() -> u64 {
    LAYER_STACK_PASSES.load(Ordering::Relaxed)
}

/// Channel-major `channels x height x width` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Grid { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_planes(planes: &[ArrayView2<f64>]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::shape("no planes"))?;
        let (height, width) = first.dim();
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            if p.dim() != (height, width) {
                return Err(Error::shape(format!("plane {:?} differs from {:?}", p.dim(), (height, width))));
            }
            data.extend(p.iter());
        }
        Ok(Grid { channels: planes.len(), height, width, data })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn plane(&self, c: usize) -> ArrayView2<'_, f64> {
        let n = self.plane_len();
        ArrayView2::from_shape((self.height, self.width), &self.data[c * n..(c + 1) * n]).expect("plane shape")
    }

    pub fn plane_mut(&mut self, c: usize) -> ArrayViewMut2<'_, f64> {
        let n = self.plane_len();
        ArrayViewMut2::from_shape((self.height, self.width), &mut self.data[c * n..(c + 1) * n]).expect("plane shape")
    }

    fn push_constant_plane(&mut self, value: f64) {
        self.data.extend(std::iter::repeat_n(value, self.plane_len()));
        self.channels += 1;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    /// Total input channels, including the time channel when one is used.
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden_channels: usize,
    pub dilations: Vec<usize>,
    pub stacking_depth: usize,
}

impl NetSpec {
    pub fn new(in_channels: usize, out_channels: usize, hidden_channels: usize, stacking_depth: usize) -> Self {
        NetSpec { in_channels, out_channels, hidden_channels, dilations: DEFAULT_DILATIONS.to_vec(), stacking_depth }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.hidden_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.dilations.len() < 2 {
            return Err(Error::invalid("network needs at least two layers"));
        }
        if self.dilations.contains(&0) {
            return Err(Error::invalid("dilations must be positive"));
        }
        if self.stacking_depth == 0 {
            return Err(Error::invalid("stacking depth must be at least one"));
        }
        if self.stacking_depth > 1 && self.in_channels < self.out_channels {
            return Err(Error::invalid("stacked application needs in_channels >= out_channels"));
        }
        Ok(())
    }

    /// `(c_in, c_out)` for every layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        let n = self.dilations.len();
        (0..n)
            .map(|k| {
                let cin = if k == 0 { self.in_channels } else { self.hidden_channels };
                let cout = if k + 1 == n { self.out_channels } else { self.hidden_channels };
                (cin, cout)
            })
            .collect()
    }

    /// `9 c_in h + h + (L - 2)(9 h^2 + h) + 9 h c_out + c_out`.
    pub fn parameter_count(&self) -> usize {
        let l = self.dilations.len();
        let (i, h, o) = (self.in_channels, self.hidden_channels, self.out_channels);
        9 * i * h + h + (l - 2) * (9 * h * h + h) + 9 * h * o + o
    }
}

/// A network bound to a parameter-name prefix inside a `ModelParams`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub spec: NetSpec,
    pub prefix: String,
}

fn weight_name(prefix: &str, k: usize) -> String {
    format!("{prefix}layer{k}.weight")
}

fn bias_name(prefix: &str, k: usize) -> String {
    format!("{prefix}layer{k}.bias")
}

impl ConvNet {
    pub fn new(spec: NetSpec, prefix: impl Into<String>) -> Result<Self> {
        spec.validate()?;
        Ok(ConvNet { spec, prefix: prefix.into() })
    }

    /// Kaiming-uniform fan-in weights for hidden layers, zeros for the
    /// output layer and all biases.
    pub fn init_params<R: Rng + ?Sized>(&self, params: &mut ModelParams, rng: &mut R) -> Result<()> {
        let layers = self.spec.layer_channels();
        for (k, &(cin, cout)) in layers.iter().enumerate() {
            let n = cout * cin * 9;
            let weights = if k + 1 == layers.len() {
                vec![0.0; n]
            } else {
                let bound = (6.0 / (cin * 9) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(weight_name(&self.prefix, k), Param::new(vec![cout, cin, 3, 3], weights)?)?;
            params.insert(bias_name(&self.prefix, k), Param::new(vec![cout], vec![0.0; cout])?)?;
        }
        Ok(())
    }

    fn layer_params<'a>(&self, params: &'a ModelParams, k: usize) -> Result<(&'a Param, &'a Param)> {
        let (cin, cout) = self.spec.layer_channels()[k];
        let w = params.get(&weight_name(&self.prefix, k))?;
        let b = params.get(&bias_name(&self.prefix, k))?;
        if w.shape != [cout, cin, 3, 3] || b.shape != [cout] {
            return Err(Error::shape(format!("layer {k} parameters do not match the network spec")));
        }
        Ok((w, b))
    }

    fn param_index(&self, params: &ModelParams, name: &str) -> Result<usize> {
        params.entries.get_index_of(name).ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    fn check_input(&self, input: &Grid, t_norm: Option<f64>) -> Result<()> {
        let expect = self.spec.in_channels - usize::from(t_norm.is_some());
        if input.channels != expect || input.data.len() != input.channels * input.plane_len() {
            return Err(Error::shape(format!(
                "network expects {expect} input channels{}, got {}",
                if t_norm.is_some() { " plus time" } else { "" },
                input.channels
            )));
        }
        Ok(())
    }

    /// Forward pass; the tape holds what the backward pass needs.
    pub fn forward(&self, params: &ModelParams, input: &Grid, t_norm: Option<f64>) -> Result<(Grid, ForwardTape)> {
        self.check_input(input, t_norm)?;
        let mut first = input.clone();
        if let Some(t) = t_norm {
            first.push_constant_plane(t);
        }
        let oc = self.spec.out_channels;
        let hw = first.plane_len();
        let mut passes = Vec::with_capacity(self.spec.stacking_depth);
        let mut total = Grid::zeros(oc, first.height, first.width);
        let mut pass_input = first;
        for k in 0..self.spec.stacking_depth {
            let (out, activations) = self.single_pass(params, &pass_input)?;
            for (t, o) in total.data.iter_mut().zip(&out.data) {
                *t += o;
            }
            let next_input = if k + 1 < self.spec.stacking_depth {
                let mut next = pass_input.clone();
                for (s, o) in next.data[..oc * hw].iter_mut().zip(&out.data) {
                    *s -= o;
                }
                Some(next)
            } else {
                None
            };
            passes.push(activations);
            match next_input {
                Some(n) => pass_input = n,
                None => break,
            }
        }
        Ok((total, ForwardTape { passes, height: input.height, width: input.width }))
    }

    /// One application of the layer stack. Returns the output and the input
    /// of every layer (post-activation of the previous one).
    fn single_pass(&self, params: &ModelParams, input: &Grid) -> Result<(Grid, Vec<Grid>)> {
        LAYER_STACK_PASSES.fetch_add(1, Ordering::Relaxed);
        let layers = self.spec.layer_channels();
        let mut acts = Vec::with_capacity(layers.len());
        let mut x = input.clone();
        for (k, &(cin, cout)) in layers.iter().enumerate() {
            let (w, b) = self.layer_params(params, k)?;
            let d = self.spec.dilations[k];
            let hw = x.plane_len();
            let col = im2col(&x, d);
            let wv = ArrayView2::from_shape((cout, cin * 9), &w.value).expect("weight shape");
            let cv = ArrayView2::from_shape((cin * 9, hw), &col).expect("col shape");
            let mut y = Grid::zeros(cout, x.height, x.width);
            {
                let mut yv = ArrayViewMut2::from_shape((cout, hw), &mut y.data).expect("out shape");
                general_mat_mul(1.0, &wv, &cv, 0.0, &mut yv);
            }
            let last = k + 1 == layers.len();
            for (co, chunk) in y.data.chunks_mut(hw).enumerate() {
                let bias = b.value[co];
                for v in chunk {
                    *v += bias;
                    if !last && *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(std::mem::replace(&mut x, y));
        }
        Ok((x, acts))
    }

    /// Reverse pass: parameter gradients and input gradient (without the
    /// time channel) for `upstream` on the network output.
    pub fn backward(
        &self,
        params: &ModelParams,
        tape: &ForwardTape,
        upstream: &Grid,
        t_norm: Option<f64>,
    ) -> Result<(Gradients, Grid)> {
        let oc = self.spec.out_channels;
        if upstream.channels != oc || upstream.height != tape.height || upstream.width != tape.width {
            return Err(Error::shape("upstream gradient does not match network output"));
        }
        let hw = upstream.plane_len();
        let mut grads = params.zero_gradients();
        let in_ch = self.spec.in_channels;
        let mut cond_grad = vec![0.0; (in_ch - oc.min(in_ch)) * hw];
        // Gradient with respect to the state fed into the pass after k.
        let mut state_grad = vec![0.0; oc.min(in_ch) * hw];
        for acts in tape.passes.iter().rev() {
            let mut g_out = upstream.clone();
            if tape.passes.len() > 1 {
                for (g, s) in g_out.data.iter_mut().zip(&state_grad) {
                    *g -= s;
                }
            }
            let g_in = self.single_backward(params, acts, g_out, &mut grads)?;
            if tape.passes.len() > 1 {
                for (s, g) in state_grad.iter_mut().zip(&g_in.data[..oc * hw]) {
                    *s += g;
                }
                for (c, g) in cond_grad.iter_mut().zip(&g_in.data[oc * hw..]) {
                    *c += g;
                }
            } else {
                // Single pass: the input gradient is the pass gradient.
                let visible = in_ch - usize::from(t_norm.is_some());
                let mut out = g_in;
                out.data.truncate(visible * hw);
                out.channels = visible;
                return Ok((grads, out));
            }
        }
        let mut data = state_grad;
        data.extend(cond_grad);
        let visible = in_ch - usize::from(t_norm.is_some());
        data.truncate(visible * hw);
        Ok((grads, Grid { channels: visible, height: tape.height, width: tape.width, data }))
    }

    fn single_backward(
        &self,
        params: &ModelParams,
        acts: &[Grid],
        upstream: Grid,
        grads: &mut Gradients,
    ) -> Result<Grid> {
        let layers = self.spec.layer_channels();
        let mut g = upstream;
        for k in (0..layers.len()).rev() {
            let (cin, cout) = layers[k];
            let (w, _) = self.layer_params(params, k)?;
            let x = &acts[k];
            let hw = x.plane_len();
            let d = self.spec.dilations[k];
            // ReLU mask of layer k's output lives in acts[k + 1].
            if k + 1 < layers.len() {
                for (gv, av) in g.data.iter_mut().zip(&acts[k + 1].data) {
                    if *av <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let wi = self.param_index(params, &weight_name(&self.prefix, k))?;
            let bi = self.param_index(params, &bias_name(&self.prefix, k))?;
            for (co, chunk) in g.data.chunks(hw).enumerate() {
                grads.values[bi][co] += chunk.iter().sum::<f64>();
            }
            let col = im2col(x, d);
            let gv = ArrayView2::from_shape((cout, hw), &g.data).expect("grad shape");
            let cv = ArrayView2::from_shape((cin * 9, hw), &col).expect("col shape");
            {
                let mut dw = ArrayViewMut2::from_shape((cout, cin * 9), &mut grads.values[wi]).expect("dw shape");
                general_mat_mul(1.0, &gv, &cv.t(), 1.0, &mut dw);
            }
            let wv = ArrayView2::from_shape((cout, cin * 9), &w.value).expect("weight shape");
            let mut dcol = vec![0.0; cin * 9 * hw];
            {
                let mut dcv = ArrayViewMut2::from_shape((cin * 9, hw), &mut dcol).expect("dcol shape");
                general_mat_mul(1.0, &wv.t(), &gv, 0.0, &mut dcv);
            }
            g = col2im(&dcol, cin, x.height, x.width, d);
        }
        Ok(g)
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    passes: Vec<Vec<Grid>>,
    height: usize,
    width: usize,
}

/// Column matrix `(c * 9) x (h * w)` of a 3x3 dilated stencil with zero padding.
fn im2col(x: &Grid, d: usize) -> Vec<f64> {
    let (h, w) = (x.height, x.width);
    let hw = h * w;
    let mut col = vec![0.0; x.channels * 9 * hw];
    let di = d as isize;
    for c in 0..x.channels {
        let src = &x.data[c * hw..(c + 1) * hw];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row_block = (c * 9 + (ky * 3 + kx) as usize) * hw;
                let dy = (ky - 1) * di;
                let dx = (kx - 1) * di;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut col[row_block + y * w + x_lo..row_block + y * w + x_hi];
                    let s0 = sy as usize * w + (x_lo as isize + dx) as usize;
                    dst.copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
fn col2im(col: &[f64], channels: usize, h: usize, w: usize, d: usize) -> Grid {
    let hw = h * w;
    let mut out = Grid::zeros(channels, h, w);
    let di = d as isize;
    for c in 0..channels {
        let dst = &mut out.data[c * hw..(c + 1) * hw];
        for ky in 0..3isize {
            for kx in 0..3isize {
                let row_block = (c * 9 + (ky * 3 + kx) as usize) * hw;
                let dy = (ky - 1) * di;
                let dx = (kx - 1) * di;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &col[row_block + y * w + x_lo..row_block + y * w + x_hi];
                    let s0 = sy as usize * w + (x_lo as isize + dx) as usize;
                    for (o, v) in dst[s0..s0 + (x_hi - x_lo)].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
    out
}

/// Free-function form of [`ConvNet::forward`] returning only the output.
pub fn net_forward(net: &ConvNet, params: &ModelParams, input: &Grid, t_norm: Option<f64>) -> Result<Grid> {
    net.forward(params, input, t_norm).map(|(out, _)| out)
}

/// Gradients of `<net(input), upstream>` with respect to parameters and input.
pub fn net_backward(
    net: &ConvNet,
    params: &ModelParams,
    input: &Grid,
    t_norm: Option<f64>,
    upstream: &Grid,
) -> Result<(Gradients, Grid)> {
    let (_, tape) = net.forward(params, input, t_norm)?;
    net.backward(params, &tape, upstream, t_norm)
}
