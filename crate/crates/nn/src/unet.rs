//! Complex-valued recurrent U-Net used as a k-space auto-encoder.
//!
//! Every layer runs at full resolution. Tensors inside the graph are laid out
//! `[T, 2C, H, W]` (frames act as the batch axis, real channels then
//! imaginary channels). Encoder and decoder levels are bidirectional
//! convolutional recurrent blocks whose hidden state runs along the frame
//! axis.

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use num_complex::Complex32;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::tape::{Graph, NodeId, ParamId, ParamStore, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    /// Complex channel width between head and tail.
    pub channels: usize,
    /// Spatial kernel size of head, tail and recurrent convolutions.
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { channels: 64, kernel: 3 }
    }
}

/// `[H, W, C, T]` complex to `[T, 2C, H, W]` real.
pub fn volume_to_tensor<T: Real>(x: &Array4<Complex32>) -> ArrayD<T> {
    let (h, w, c, t) = x.dim();
    let mut out = ArrayD::<T>::zeros(IxDyn(&[t, 2 * c, h, w]));
    for ((ih, iw, ic, it), v) in x.indexed_iter() {
        out[[it, ic, ih, iw]] = T::lit(v.re as f64);
        out[[it, ic + c, ih, iw]] = T::lit(v.im as f64);
    }
    out
}

/// Inverse of [`volume_to_tensor`].
pub fn tensor_to_volume<T: Real>(x: &ArrayD<T>) -> Array4<Complex32> {
    let s = x.shape();
    let (t, c, h, w) = (s[0], s[1] / 2, s[2], s[3]);
    Array4::from_shape_fn((h, w, c, t), |(ih, iw, ic, it)| {
        Complex32::new(
            x[[it, ic, ih, iw]].to_f32().unwrap(),
            x[[it, ic + c, ih, iw]].to_f32().unwrap(),
        )
    })
}

/// Parameters of one complex convolution `(W_r + i W_i) * x + b`.
#[derive(Debug, Clone, Copy)]
pub struct ComplexConv {
    pub wr: ParamId,
    pub wi: ParamId,
    pub bias: Option<(ParamId, ParamId)>,
}

/// A complex convolution bound into one graph.
#[derive(Debug, Clone, Copy)]
pub struct BoundConv {
    w: NodeId,
    b: Option<NodeId>,
}

/// Uniform init with `Var(w_r) = Var(w_i) = 1 / (2 fan_in)`, so the complex
/// output keeps the input variance.
fn complex_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    let bound = (3.0 / (2.0 * fan_in as f64)).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit((rng.random::<f64>() * 2.0 - 1.0) * bound))
}

impl ComplexConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let shape = [cout, cin, kernel, kernel];
        let fan_in = cin * kernel * kernel;
        let wr = store.add(format!("{name}.wr"), complex_uniform(&shape, fan_in, rng));
        let wi = store.add(format!("{name}.wi"), complex_uniform(&shape, fan_in, rng));
        let bias = bias.then(|| {
            (
                store.add(format!("{name}.br"), ArrayD::zeros(IxDyn(&[cout]))),
                store.add(format!("{name}.bi"), ArrayD::zeros(IxDyn(&[cout]))),
            )
        });
        Self { wr, wi, bias }
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<BoundConv> {
        let (wr, wi) = (g.param(store, self.wr), g.param(store, self.wi));
        let w = g.complex_weight(wr, wi)?;
        let b = match self.bias {
            Some((br, bi)) => {
                let (br, bi) = (g.param(store, br), g.param(store, bi));
                Some(g.concat(&[br, bi], 0)?)
            }
            None => None,
        };
        Ok(BoundConv { w, b })
    }
}

impl BoundConv {
    pub fn apply<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.conv2d(x, self.w, self.b)
    }
}

/// Concrete weights for a standalone complex convolution.
#[derive(Debug, Clone)]
pub struct ComplexConvSpec {
    /// `[Cout, Cin, kh, kw]`
    pub real_weights: Array4<f32>,
    pub imag_weights: Array4<f32>,
    pub bias: Option<Array1<Complex32>>,
}

/// Applies a same-padded complex convolution to every frame of a
/// `[H, W, Cin, T]` complex volume.
pub fn complex_conv(x: &Array4<Complex32>, spec: &ComplexConvSpec) -> Result<Array4<Complex32>> {
    let cin = x.dim().2;
    let ws = spec.real_weights.dim();
    if ws != spec.imag_weights.dim() || ws.1 != cin {
        return Err(NnError::Shape(format!(
            "complex_conv: input has {cin} channels, weights {ws:?} / {:?}",
            spec.imag_weights.dim()
        )));
    }
    if spec.bias.as_ref().is_some_and(|b| b.len() != ws.0) {
        return Err(NnError::Shape("complex_conv: bias length differs from output channels".into()));
    }
    let mut g = Graph::<f64>::new();
    let to64 = |a: &Array4<f32>| a.mapv(|v| v as f64).into_dyn();
    let xin = g.input(volume_to_tensor(x));
    let wr = g.input(to64(&spec.real_weights));
    let wi = g.input(to64(&spec.imag_weights));
    let w = g.complex_weight(wr, wi)?;
    let b = spec.bias.as_ref().map(|b| {
        let mut v: Vec<f64> = b.iter().map(|z| z.re as f64).collect();
        v.extend(b.iter().map(|z| z.im as f64));
        g.input(ArrayD::from_shape_vec(IxDyn(&[v.len()]), v).unwrap())
    });
    let y = g.conv2d(xin, w, b)?;
    Ok(tensor_to_volume(g.value(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Forward,
    Backward,
}

/// Convolutional recurrent cell `h_t = modReLU(Conv_in x_t + Conv_hid h_{t-1})`.
#[derive(Debug, Clone, Copy)]
pub struct CCrnn {
    pub conv_in: ComplexConv,
    pub conv_hid: ComplexConv,
    pub act_bias: ParamId,
}

impl CCrnn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv_in: ComplexConv::new(store, &format!("{name}.in"), ch, ch, kernel, true, rng),
            conv_hid: ComplexConv::new(store, &format!("{name}.hid"), ch, ch, kernel, false, rng),
            act_bias: store.add(format!("{name}.act"), ArrayD::zeros(IxDyn(&[ch]))),
        }
    }

    /// `x: [T, 2C, H, W]` to the hidden states `[T, 2C, H, W]`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        direction: Direction,
    ) -> Result<NodeId> {
        let frames = g.shape(x)[0];
        if frames == 0 {
            return Err(NnError::Shape("recurrent block needs at least one frame".into()));
        }
        let cin = self.conv_in.bind(g, store)?;
        let chid = self.conv_hid.bind(g, store)?;
        let act = g.param(store, self.act_bias);
        // input projections of all frames in one batched convolution
        let proj = cin.apply(g, x)?;
        let order: Vec<usize> = match direction {
            Direction::Forward => (0..frames).collect(),
            Direction::Backward => (0..frames).rev().collect(),
        };
        let mut states = vec![None; frames];
        let mut prev: Option<NodeId> = None;
        for &t in &order {
            let mut pre = g.slice(proj, 0, t, 1)?;
            if let Some(h) = prev {
                let rec = chid.apply(g, h)?;
                pre = g.add(pre, rec)?;
            }
            let h = g.mod_relu(pre, act, 1)?;
            states[t] = Some(h);
            prev = Some(h);
        }
        let states: Vec<NodeId> = states.into_iter().map(|s| s.unwrap()).collect();
        g.concat(&states, 0)
    }
}

/// Forward and backward recurrent cells fused by a 1x1 complex convolution.
#[derive(Debug, Clone, Copy)]
pub struct CBcrnn {
    pub fwd: CCrnn,
    pub bwd: CCrnn,
    pub fuse: ComplexConv,
}

impl CBcrnn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fwd: CCrnn::new(store, &format!("{name}.fwd"), ch, kernel, rng),
            bwd: CCrnn::new(store, &format!("{name}.bwd"), ch, kernel, rng),
            fuse: ComplexConv::new(store, &format!("{name}.fuse"), 2 * ch, ch, 1, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        let f = self.fwd.forward(g, store, x, Direction::Forward)?;
        let b = self.bwd.forward(g, store, x, Direction::Backward)?;
        let both = g.concat_complex(&[f, b], 1)?;
        self.fuse.bind(g, store)?.apply(g, both)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub coils: usize,
    head: ComplexConv,
    enc1: CBcrnn,
    enc2: CBcrnn,
    bottleneck: CBcrnn,
    skip2: ComplexConv,
    dec2: CBcrnn,
    skip1: ComplexConv,
    dec1: CBcrnn,
    tail: ComplexConv,
}

/// Graph nodes produced by one U-Net pass.
#[derive(Debug, Clone, Copy)]
pub struct UNetOutput {
    /// Auto-encoded k-space, `[T, 2C, H, W]`.
    pub auto: NodeId,
    /// Sum of both decoder levels, `[T, 2F, H, W]`.
    pub features: NodeId,
    pub dec1: NodeId,
    pub dec2: NodeId,
}

impl UNet {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: &UNetConfig, coils: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if config.channels == 0 || config.kernel % 2 == 0 || coils == 0 {
            return Err(NnError::Config(format!(
                "U-Net needs positive widths and an odd kernel, got {config:?} with {coils} coils"
            )));
        }
        let (ch, k) = (config.channels, config.kernel);
        Ok(Self {
            config: config.clone(),
            coils,
            head: ComplexConv::new(store, "unet.head", coils, ch, k, true, rng),
            enc1: CBcrnn::new(store, "unet.enc1", ch, k, rng),
            enc2: CBcrnn::new(store, "unet.enc2", ch, k, rng),
            bottleneck: CBcrnn::new(store, "unet.bottleneck", ch, k, rng),
            skip2: ComplexConv::new(store, "unet.skip2", 2 * ch, ch, 1, true, rng),
            dec2: CBcrnn::new(store, "unet.dec2", ch, k, rng),
            skip1: ComplexConv::new(store, "unet.skip1", 2 * ch, ch, 1, true, rng),
            dec1: CBcrnn::new(store, "unet.dec1", ch, k, rng),
            tail: ComplexConv::new(store, "unet.tail", ch, coils, k, true, rng),
        })
    }

    /// Builds a fresh parameter set from a seed (standalone use and tests).
    pub fn init<T: Real>(config: &UNetConfig, coils: usize, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Self::new(&mut store, config, coils, &mut rng)?;
        Ok((net, store))
    }

    /// `x: [T, 2C, H, W]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<UNetOutput> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != 2 * self.coils {
            return Err(NnError::Shape(format!("U-Net expects [T, {}, H, W], got {s:?}", 2 * self.coils)));
        }
        let h0 = self.head.bind(g, store)?.apply(g, x)?;
        let e1 = self.enc1.forward(g, store, h0)?;
        let e2 = self.enc2.forward(g, store, e1)?;
        let bn = self.bottleneck.forward(g, store, e2)?;
        let cat2 = g.concat_complex(&[bn, e2], 1)?;
        let in2 = self.skip2.bind(g, store)?.apply(g, cat2)?;
        let dec2 = self.dec2.forward(g, store, in2)?;
        let cat1 = g.concat_complex(&[dec2, e1], 1)?;
        let in1 = self.skip1.bind(g, store)?.apply(g, cat1)?;
        let dec1 = self.dec1.forward(g, store, in1)?;
        let auto = self.tail.bind(g, store)?.apply(g, dec1)?;
        let features = g.add(dec1, dec2)?;
        for (what, id) in [("U-Net output", auto), ("U-Net features", features)] {
            if g.value(id).iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite(what.into()));
            }
        }
        Ok(UNetOutput { auto, features, dec1, dec2 })
    }

    /// Runs the network on a `[H, W, C, T]` volume, returning the auto-encoded
    /// volume and both decoder feature maps as `[H, W, F, T]` complex.
    pub fn run(
        &self,
        store: &ParamStore<f32>,
        ksp: &Array4<Complex32>,
    ) -> Result<(Array4<Complex32>, [Array4<Complex32>; 2])> {
        let mut g = Graph::new();
        let x = g.input(volume_to_tensor(ksp));
        let out = self.forward(&mut g, store, x)?;
        Ok((
            tensor_to_volume(g.value(out.auto)),
            [tensor_to_volume(g.value(out.dec1)), tensor_to_volume(g.value(out.dec2))],
        ))
    }
}

/// Feature embedding per query: the element-wise sum of all decoder levels at
/// `(t, x, y)`, split real then imaginary, `[N, 2F]`.
pub fn sample_features(decoder_feats: &[Array4<Complex32>], coords: &[[usize; 3]]) -> Result<ndarray::Array2<f32>> {
    let first = decoder_feats.first().ok_or_else(|| NnError::Shape("no decoder levels".into()))?;
    let (h, w, f, t) = first.dim();
    if decoder_feats.iter().any(|d| d.dim() != (h, w, f, t)) {
        return Err(NnError::Shape("decoder levels differ in shape".into()));
    }
    let mut out = ndarray::Array2::<f32>::zeros((coords.len(), 2 * f));
    for (n, p) in coords.iter().enumerate() {
        if p[0] >= t || p[1] >= h || p[2] >= w {
            return Err(NnError::OutOfBounds(format!("{p:?} outside t<{t}, x<{h}, y<{w}")));
        }
        for k in 0..f {
            let z: Complex32 = decoder_feats.iter().map(|d| d[[p[1], p[2], k, p[0]]]).sum();
            out[[n, k]] = z.re;
            out[[n, k + f]] = z.im;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_check, rand_array};

    fn rand_volume(dims: (usize, usize, usize, usize), seed: u64) -> Array4<Complex32> {
        let re = rand_array::<f32>(&[dims.0, dims.1, dims.2, dims.3], seed);
        let im = rand_array::<f32>(&[dims.0, dims.1, dims.2, dims.3], seed + 1000);
        Array4::from_shape_fn(dims, |(a, b, c, d)| Complex32::new(re[[a, b, c, d]], im[[a, b, c, d]]))
    }

    #[test]
    fn identity_and_rotation_kernels() {
        let x = rand_volume((4, 5, 2, 3), 1);
        let eye = Array4::from_shape_fn((2, 2, 1, 1), |(o, i, _, _)| if o == i { 1.0f32 } else { 0.0 });
        let zero = Array4::<f32>::zeros((2, 2, 1, 1));
        let id = complex_conv(&x, &ComplexConvSpec { real_weights: eye.clone(), imag_weights: zero.clone(), bias: None }).unwrap();
        assert_eq!(id, x);
        let rot = complex_conv(&x, &ComplexConvSpec { real_weights: zero, imag_weights: eye, bias: None }).unwrap();
        for (a, b) in rot.iter().zip(x.iter()) {
            assert!((a - b * Complex32::i()).norm() < 1e-7);
        }
    }

    #[test]
    fn matches_naive_complex_convolution() {
        let x = rand_volume((5, 5, 2, 1), 3);
        let wr = rand_array::<f32>(&[3, 2, 3, 3], 4).into_dimensionality().unwrap();
        let wi = rand_array::<f32>(&[3, 2, 3, 3], 5).into_dimensionality().unwrap();
        let bias = Array1::from_vec(vec![Complex32::new(0.1, -0.2), Complex32::new(0.0, 0.3), Complex32::new(-0.5, 0.0)]);
        let spec = ComplexConvSpec { real_weights: wr, imag_weights: wi, bias: Some(bias.clone()) };
        let y = complex_conv(&x, &spec).unwrap();
        for o in 0..3 {
            for yy in 0..5 {
                for xx in 0..5 {
                    let mut acc = bias[o];
                    for i in 0..2 {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let (sy, sx) = (yy as isize + dy as isize - 1, xx as isize + dx as isize - 1);
                                if (0..5).contains(&sy) && (0..5).contains(&sx) {
                                    let wgt = Complex32::new(spec.real_weights[[o, i, dy, dx]], spec.imag_weights[[o, i, dy, dx]]);
                                    acc += wgt * x[[sy as usize, sx as usize, i, 0]];
                                }
                            }
                        }
                    }
                    assert!((y[[yy, xx, o, 0]] - acc).norm() <= 1e-5, "{} vs {}", y[[yy, xx, o, 0]], acc);
                }
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let x = rand_volume((4, 4, 3, 1), 1);
        let w = Array4::<f32>::zeros((2, 2, 3, 3));
        assert!(complex_conv(&x, &ComplexConvSpec { real_weights: w.clone(), imag_weights: w, bias: None }).is_err());
    }

    #[test]
    fn kernel_larger_than_input_is_zero_padded() {
        let x = rand_volume((2, 2, 1, 1), 9);
        let mut wr = Array4::<f32>::zeros((1, 1, 5, 5));
        wr[[0, 0, 2, 2]] = 1.0;
        let y = complex_conv(&x, &ComplexConvSpec { real_weights: wr, imag_weights: Array4::zeros((1, 1, 5, 5)), bias: None }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn global_phase_equivariance() {
        let x = rand_volume((6, 6, 2, 2), 11);
        let spec = ComplexConvSpec {
            real_weights: rand_array::<f32>(&[2, 2, 3, 3], 12).into_dimensionality().unwrap(),
            imag_weights: rand_array::<f32>(&[2, 2, 3, 3], 13).into_dimensionality().unwrap(),
            bias: None,
        };
        let phase = Complex32::from_polar(1.0, 0.7);
        let a = complex_conv(&x.mapv(|v| v * phase), &spec).unwrap();
        let b = complex_conv(&x, &spec).unwrap().mapv(|v| v * phase);
        for (p, q) in a.iter().zip(b.iter()) {
            assert!((p - q).norm() < 1e-5);
        }
    }

    fn crnn_setup(seed: u64) -> (CCrnn, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cell = CCrnn::new(&mut store, "c", 2, 3, &mut rng);
        // non-trivial activation bias so modReLU actually gates
        *store.get_mut(cell.act_bias) = ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.05, 0.1]).unwrap();
        (cell, store)
    }

    fn run_crnn(cell: &CCrnn, store: &ParamStore<f64>, x: &ArrayD<f64>, dir: Direction) -> ArrayD<f64> {
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let y = cell.forward(&mut g, store, xi, dir).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn recurrence_is_causal_in_its_direction() {
        let (cell, store) = crnn_setup(1);
        let x = rand_array::<f64>(&[3, 4, 5, 5], 2);
        let mut tail = x.clone();
        tail.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(1..)).mapv_inplace(|v| v * -3.0 + 0.5);
        let a = run_crnn(&cell, &store, &x, Direction::Forward);
        let b = run_crnn(&cell, &store, &tail, Direction::Forward);
        assert_eq!(a.index_axis(ndarray::Axis(0), 0), b.index_axis(ndarray::Axis(0), 0));
        assert_ne!(a.index_axis(ndarray::Axis(0), 2), b.index_axis(ndarray::Axis(0), 2));

        let mut head = x.clone();
        head.slice_axis_mut(ndarray::Axis(0), ndarray::Slice::from(..2)).mapv_inplace(|v| v * 2.0 - 0.3);
        let a = run_crnn(&cell, &store, &x, Direction::Backward);
        let b = run_crnn(&cell, &store, &head, Direction::Backward);
        assert_eq!(a.index_axis(ndarray::Axis(0), 2), b.index_axis(ndarray::Axis(0), 2));
        assert_ne!(a.index_axis(ndarray::Axis(0), 0), b.index_axis(ndarray::Axis(0), 0));
    }

    #[test]
    fn single_frame_has_no_recurrent_contribution() {
        let (cell, store) = crnn_setup(3);
        let x = rand_array::<f64>(&[1, 4, 4, 4], 4);
        let y = run_crnn(&cell, &store, &x, Direction::Forward);
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let conv = cell.conv_in.bind(&mut g, &store).unwrap();
        let pre = conv.apply(&mut g, xi).unwrap();
        let act = g.param(&store, cell.act_bias);
        let oracle = g.mod_relu(pre, act, 1).unwrap();
        assert_eq!(&y, g.value(oracle));
        assert_eq!(y, run_crnn(&cell, &store, &x, Direction::Backward));
    }

    #[test]
    fn bidirectional_block_is_time_reversal_symmetric() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let block = CBcrnn::new(&mut store, "b", 2, 3, &mut rng);
        // random biases so the check is not trivially linear
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).ndim() == 1 {
                let n = store.get(id).len();
                *store.get_mut(id) = rand_array::<f64>(&[n], 100 + id.0 as u64).mapv(|v| v * 0.1);
            }
        }
        // swap direction weights; mirror the fusion so it sees [bwd | fwd]
        let mut swapped = store.clone();
        let pairs = [
            (block.fwd.conv_in.wr, block.bwd.conv_in.wr),
            (block.fwd.conv_in.wi, block.bwd.conv_in.wi),
            (block.fwd.conv_in.bias.unwrap().0, block.bwd.conv_in.bias.unwrap().0),
            (block.fwd.conv_in.bias.unwrap().1, block.bwd.conv_in.bias.unwrap().1),
            (block.fwd.conv_hid.wr, block.bwd.conv_hid.wr),
            (block.fwd.conv_hid.wi, block.bwd.conv_hid.wi),
            (block.fwd.act_bias, block.bwd.act_bias),
        ];
        for (a, b) in pairs {
            *swapped.get_mut(a) = store.get(b).clone();
            *swapped.get_mut(b) = store.get(a).clone();
        }
        for id in [block.fuse.wr, block.fuse.wi] {
            let w = store.get(id);
            let mut m = w.clone();
            m.slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(..2)).assign(&w.slice_axis(ndarray::Axis(1), ndarray::Slice::from(2..)));
            m.slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(2..)).assign(&w.slice_axis(ndarray::Axis(1), ndarray::Slice::from(..2)));
            *swapped.get_mut(id) = m;
        }
        let x = rand_array::<f64>(&[2, 4, 4, 4], 6);
        let mut rev = x.clone();
        rev.invert_axis(ndarray::Axis(0));
        let run = |s: &ParamStore<f64>, x: &ArrayD<f64>| {
            let mut g = Graph::new();
            let xi = g.input(x.clone());
            let y = block.forward(&mut g, s, xi).unwrap();
            g.value(y).clone()
        };
        let mut expected = run(&store, &x);
        expected.invert_axis(ndarray::Axis(0));
        let got = run(&swapped, &rev);
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let (net, store) = UNet::init::<f32>(&UNetConfig { channels: 4, kernel: 3 }, 2, 0).unwrap();
        let x = Array4::<Complex32>::zeros((6, 6, 2, 3));
        let (auto, feats) = net.run(&store, &x).unwrap();
        assert_eq!(auto.dim(), (6, 6, 2, 3));
        assert!(auto.iter().all(|v| v.norm() == 0.0));
        assert!(feats.iter().all(|f| f.dim() == (6, 6, 4, 3) && f.iter().all(|v| v.norm() == 0.0)));
        let (cell, mut zs) = crnn_setup(0);
        for id in zs.ids().collect::<Vec<_>>() {
            if zs.get(id).ndim() == 1 {
                zs.get_mut(id).fill(0.0);
            }
        }
        let y = run_crnn(&cell, &zs, &ArrayD::zeros(IxDyn(&[3, 4, 4, 4])), Direction::Forward);
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unet_gradient_matches_finite_differences() {
        let (net, mut store) = UNet::init::<f64>(&UNetConfig { channels: 2, kernel: 3 }, 1, 7).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).ndim() == 1 {
                let n = store.get(id).len();
                *store.get_mut(id) = rand_array::<f64>(&[n], 50 + id.0 as u64).mapv(|v| v * 0.05);
            }
        }
        let x = rand_array::<f64>(&[2, 2, 6, 6], 8);
        let worst = finite_difference_check(
            &store,
            |g, s| {
                let xi = g.input(x.clone());
                let out = net.forward(g, s, xi).unwrap();
                let w = ArrayD::from_elem(IxDyn(&[2, 2, 6, 6]), 1.0);
                g.weighted_sse(out.auto, x.clone(), w).unwrap()
            },
            1e-5,
            12,
        );
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn sample_features_sums_levels() {
        let a = rand_volume((4, 3, 2, 2), 20);
        let b = rand_volume((4, 3, 2, 2), 21);
        let coords = [[1, 3, 2], [0, 0, 0]];
        let f = sample_features(&[a.clone(), b.clone()], &coords).unwrap();
        assert_eq!(f.dim(), (2, 4));
        for (n, p) in coords.iter().enumerate() {
            for k in 0..2 {
                let z = a[[p[1], p[2], k, p[0]]] + b[[p[1], p[2], k, p[0]]];
                assert_eq!(f[[n, k]], z.re);
                assert_eq!(f[[n, k + 2]], z.im);
            }
        }
        let c1 = Array4::from_elem((2, 2, 1, 1), Complex32::new(1.0, 2.0));
        let c2 = Array4::from_elem((2, 2, 1, 1), Complex32::new(-0.5, 0.25));
        let f = sample_features(&[c1, c2], &[[0, 1, 1]]).unwrap();
        assert_eq!(f.row(0).to_vec(), vec![0.5, 2.25]);
        assert!(matches!(sample_features(&[a], &[[2, 0, 0]]), Err(NnError::OutOfBounds(_))));
    }

    #[test]
    fn overfits_a_small_input() {
        use crate::optim::{AdamW, AdamWConfig};
        let (net, mut store) = UNet::init::<f32>(&UNetConfig { channels: 4, kernel: 3 }, 2, 1).unwrap();
        let x = rand_volume((8, 8, 2, 2), 30);
        let xt = volume_to_tensor::<f32>(&x);
        let w = ArrayD::from_elem(xt.raw_dim(), 1.0f32 / xt.len() as f32);
        let mut opt = AdamW::new(&store, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..500 {
            let mut g = Graph::new();
            let xi = g.input(xt.clone());
            let out = net.forward(&mut g, &store, xi).unwrap();
            let loss = g.weighted_sse(out.auto, xt.clone(), w.clone()).unwrap();
            let grads = g.backward(loss, store.len());
            opt.step(&mut store, &grads, 3e-3);
        }
        let (auto, _) = net.run(&store, &x).unwrap();
        let err: f32 = auto.iter().zip(x.iter()).map(|(a, b)| (a - b).norm_sqr()).sum::<f32>().sqrt();
        let norm: f32 = x.iter().map(|v| v.norm_sqr()).sum::<f32>().sqrt();
        assert!(err / norm <= 0.1, "relative auto-encoding error {}", err / norm);
    }
}
