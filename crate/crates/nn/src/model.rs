//! Dual-branch coordinate network.
//!
//! The positional branch maps encoded `(t, x, y)` coordinates through complex
//! layers with Gabor wavelet activations. The feature branch maps U-Net
//! k-space embeddings through leaky-ReLU layers. The two branches exchange
//! their inputs through linear maps and share a fusion MLP at mid depth.

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use num_complex::{Complex, Complex32};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use kpinr_core::CoordinateSet;

use crate::error::{NnError, Result};
use crate::tape::{Graph, NodeId, ParamId, ParamStore, Real};
use crate::unet::{volume_to_tensor, UNet, UNetConfig};

pub const SPATIAL_ENCODING_LEN: usize = 480;
pub const TEMPORAL_ENCODING_LEN: usize = 96;
pub const ENCODING_LEN: usize = SPATIAL_ENCODING_LEN + TEMPORAL_ENCODING_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMode {
    /// Both branches, U-Net features, exchange and fusion.
    Dual,
    /// Positional branch alone (no U-Net, no feature branch).
    PositionalOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub mode: BranchMode,
    pub unet: UNetConfig,
    /// Frequency levels per spatial coordinate.
    pub spatial_levels: usize,
    /// Rows of the random temporal projection.
    pub temporal_features: usize,
    /// Affine layers per branch, input and output layers included.
    pub depth: usize,
    /// Layer after which both branches tap their mid features.
    pub mid_layer: usize,
    /// Real width of hidden activations (positional branch: half as many complex units).
    pub hidden: usize,
    /// Feature-branch width before fusion.
    pub kinr_initial_width: usize,
    /// Output width of the fusion MLP.
    pub fusion_width: usize,
    pub wire_omega: f64,
    pub wire_sigma: f64,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mode: BranchMode::Dual,
            unet: UNetConfig::default(),
            spatial_levels: 120,
            temporal_features: 48,
            depth: 7,
            mid_layer: 3,
            hidden: 512,
            kinr_initial_width: 64,
            fusion_width: 512,
            wire_omega: 10.0,
            wire_sigma: 5.0,
            leaky_slope: 0.01,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::Config(m));
        if 4 * self.spatial_levels != SPATIAL_ENCODING_LEN || 2 * self.temporal_features != TEMPORAL_ENCODING_LEN {
            return bad(format!(
                "encoding lengths must be {SPATIAL_ENCODING_LEN} + {TEMPORAL_ENCODING_LEN}, got {} + {}",
                4 * self.spatial_levels,
                2 * self.temporal_features
            ));
        }
        if self.mid_layer < 1 || self.depth < self.mid_layer + 2 {
            return bad(format!("depth {} leaves no layers after mid layer {}", self.depth, self.mid_layer));
        }
        if self.hidden == 0 || self.hidden % 2 != 0 || self.fusion_width == 0 || self.fusion_width % 2 != 0 {
            return bad("hidden and fusion widths must be positive and even".into());
        }
        if self.kinr_initial_width == 0 {
            return bad("feature branch width must be positive".into());
        }
        if !(self.wire_omega > 0.0 && self.wire_sigma > 0.0) {
            return bad("wavelet frequency and width must be positive".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad(format!("leaky slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }

    /// Length of the k-space feature embedding (real and imaginary parts).
    pub fn feature_len(&self) -> usize {
        2 * self.unet.channels
    }
}

/// Fixed positional encodings: NeRF-style frequencies for the two spatial
/// coordinates and random Fourier features for time.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub levels: usize,
    /// Temporal projection, one entry per feature (the 48x1 matrix).
    pub b: Vec<f64>,
}

impl Encoding {
    pub fn new(levels: usize, temporal_features: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = (0..temporal_features).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self { levels, b }
    }

    pub fn len(&self) -> usize {
        4 * self.levels + 2 * self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Writes every query's `[spatial | temporal]` encoding as a row.
    pub fn encode(&self, coords: &CoordinateSet) -> Result<Array2<f32>> {
        let ps: Vec<[f64; 2]> = coords.norm.iter().map(|n| [n[1] as f64, n[2] as f64]).collect();
        let pt: Vec<f64> = coords.norm.iter().map(|n| n[0] as f64).collect();
        let s = encode_spatial(&ps, self.levels)?;
        let t = encode_temporal(&pt, &self.b)?;
        Ok(ndarray::concatenate(Axis(1), &[s.view(), t.view()]).expect("row counts agree"))
    }
}

fn check_unit_range(v: f64) -> Result<()> {
    if !(-1.0..=1.0).contains(&v) {
        return Err(NnError::Config(format!("normalized coordinate {v} outside [-1, 1]")));
    }
    Ok(())
}

/// `[sin(2^l pi p), cos(2^l pi p)]` per coordinate and level; coordinate-major,
/// level-minor, sine before cosine. Output `[N, 4 L]`.
pub fn encode_spatial(ps: &[[f64; 2]], levels: usize) -> Result<Array2<f32>> {
    let mut out = Array2::<f32>::zeros((ps.len(), 4 * levels));
    for (n, p) in ps.iter().enumerate() {
        for (c, &v) in p.iter().enumerate() {
            check_unit_range(v)?;
            for l in 0..levels {
                let arg = 2f64.powi(l as i32) * std::f64::consts::PI * v;
                let base = c * 2 * levels + 2 * l;
                out[[n, base]] = arg.sin() as f32;
                out[[n, base + 1]] = arg.cos() as f32;
            }
        }
    }
    Ok(out)
}

/// `[cos(2 pi B p), sin(2 pi B p)]`, cosine block first. Output `[N, 2 len(B)]`.
pub fn encode_temporal(pt: &[f64], b: &[f64]) -> Result<Array2<f32>> {
    let f = b.len();
    let mut out = Array2::<f32>::zeros((pt.len(), 2 * f));
    for (n, &p) in pt.iter().enumerate() {
        check_unit_range(p)?;
        for (k, &bk) in b.iter().enumerate() {
            let arg = 2.0 * std::f64::consts::PI * bk * p;
            out[[n, k]] = arg.cos() as f32;
            out[[n, k + f]] = arg.sin() as f32;
        }
    }
    Ok(out)
}

/// Complex Gabor wavelet `exp(i w0 z) exp(-|s0 z|^2)`.
pub fn wire_activate(z: Complex<f64>, omega: f64, sigma: f64) -> Complex<f64> {
    crate::tape::wire_scalar(z, omega, sigma)
}

/// An affine layer; complex layers act on `[re | im]` stacked rows.
#[derive(Debug, Clone, Copy)]
pub enum Dense {
    Real { w: ParamId, b: ParamId },
    Complex { wr: ParamId, wi: ParamId, br: ParamId, bi: ParamId },
}

fn uniform<T: Real>(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit((rng.random::<f64>() * 2.0 - 1.0) * bound))
}

impl Dense {
    pub fn real<T: Real>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        Dense::Real {
            w: store.add(format!("{name}.w"), uniform(&[fout, fin], bound, rng)),
            b: store.add(format!("{name}.b"), uniform(&[fout], bound, rng)),
        }
    }

    pub fn zeros<T: Real>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize) -> Self {
        Dense::Real {
            w: store.add(format!("{name}.w"), ArrayD::zeros(IxDyn(&[fout, fin]))),
            b: store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[fout]))),
        }
    }

    /// `fin`, `fout` count complex units.
    pub fn complex<T: Real>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fin as f64).sqrt();
        Dense::Complex {
            wr: store.add(format!("{name}.wr"), uniform(&[fout, fin], bound, rng)),
            wi: store.add(format!("{name}.wi"), uniform(&[fout, fin], bound, rng)),
            br: store.add(format!("{name}.br"), uniform(&[fout], bound, rng)),
            bi: store.add(format!("{name}.bi"), uniform(&[fout], bound, rng)),
        }
    }

    pub fn apply<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: NodeId) -> Result<NodeId> {
        match *self {
            Dense::Real { w, b } => {
                let (w, b) = (g.param(store, w), g.param(store, b));
                g.linear(x, w, Some(b))
            }
            Dense::Complex { wr, wi, br, bi } => {
                let (wr, wi) = (g.param(store, wr), g.param(store, wi));
                let w = g.complex_weight(wr, wi)?;
                let (br, bi) = (g.param(store, br), g.param(store, bi));
                let b = g.concat(&[br, bi], 0)?;
                g.linear(x, w, Some(b))
            }
        }
    }

    pub fn weight(&self) -> ParamId {
        match *self {
            Dense::Real { w, .. } => w,
            Dense::Complex { wr, .. } => wr,
        }
    }
}

/// Graph nodes of one forward pass over a batch of queries.
#[derive(Debug, Clone, Copy)]
pub struct BranchNodes {
    /// Positional-branch prediction `[N, 2C]`.
    pub y_pv: NodeId,
    /// Feature-branch prediction `[N, 2C]`, absent in positional-only mode.
    pub y_kv: Option<NodeId>,
    pub mid_p: NodeId,
    pub mid_k: Option<NodeId>,
}

/// Concrete branch outputs, each `[N, 2C]` (real parts of all coils, then
/// imaginary parts).
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs {
    pub y_kv: Option<Array2<f32>>,
    pub y_pv: Array2<f32>,
}

impl BranchOutputs {
    /// Average of the available branch predictions.
    pub fn average(&self) -> Array2<f32> {
        match &self.y_kv {
            Some(k) => (k + &self.y_pv) * 0.5,
            None => self.y_pv.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct KpinrModel {
    pub config: ModelConfig,
    pub coils: usize,
    pub encoding: Encoding,
    pub unet: Option<UNet>,
    pub exchange_k_to_p: Option<Dense>,
    pub exchange_p_to_k: Option<Dense>,
    pub pinr: Vec<Dense>,
    pub kinr: Vec<Dense>,
    pub fusion: Vec<Dense>,
}

impl KpinrModel {
    /// Builds the model and its parameters. `seed` drives weight init and the
    /// temporal projection.
    pub fn new<T: Real>(config: &ModelConfig, coils: usize, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        if coils == 0 {
            return Err(NnError::Config("model needs at least one coil".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoding = Encoding::new(config.spatial_levels, config.temporal_features, rng.random());
        let mut store = ParamStore::new();
        let dual = config.mode == BranchMode::Dual;
        let (hc, fc) = (config.hidden / 2, config.fusion_width / 2);
        let kf_len = config.feature_len();

        let unet = if dual { Some(UNet::new(&mut store, &config.unet, coils, &mut rng)?) } else { None };
        let (exchange_k_to_p, exchange_p_to_k) = if dual {
            (
                Some(Dense::zeros(&mut store, "exchange.k2p", kf_len, ENCODING_LEN)),
                Some(Dense::zeros(&mut store, "exchange.p2k", ENCODING_LEN, kf_len)),
            )
        } else {
            (None, None)
        };

        let mut pinr = vec![Dense::real(&mut store, "pinr.1", ENCODING_LEN, 2 * hc, &mut rng)];
        for l in 2..=config.depth - 1 {
            let fin = if dual && l == config.mid_layer + 1 { hc + fc } else { hc };
            pinr.push(Dense::complex(&mut store, &format!("pinr.{l}"), fin, hc, &mut rng));
        }
        pinr.push(Dense::real(&mut store, &format!("pinr.{}", config.depth), 2 * hc, 2 * coils, &mut rng));

        let (mut kinr, mut fusion) = (Vec::new(), Vec::new());
        if dual {
            let k0 = config.kinr_initial_width;
            for l in 1..=config.depth {
                let (fin, fout) = match l {
                    1 => (kf_len, k0),
                    l if l <= config.mid_layer => (k0, k0),
                    l if l == config.mid_layer + 1 => (k0 + config.fusion_width, config.hidden),
                    l if l == config.depth => (config.hidden, 2 * coils),
                    _ => (config.hidden, config.hidden),
                };
                kinr.push(Dense::real(&mut store, &format!("kinr.{l}"), fin, fout, &mut rng));
            }
            fusion.push(Dense::real(&mut store, "fusion.1", config.hidden + k0, config.fusion_width, &mut rng));
            fusion.push(Dense::real(&mut store, "fusion.2", config.fusion_width, config.fusion_width, &mut rng));
        }
        let model = Self {
            config: config.clone(),
            coils,
            encoding,
            unet,
            exchange_k_to_p,
            exchange_p_to_k,
            pinr,
            kinr,
            fusion,
        };
        Ok((model, store))
    }

    fn wire<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        g.wire(x, T::lit(self.config.wire_omega), T::lit(self.config.wire_sigma))
    }

    fn leaky<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> NodeId {
        g.leaky_relu(x, T::lit(self.config.leaky_slope))
    }

    /// `pe' = pe + Lin(kf)`, `kf' = kf + Lin(pe)`.
    pub fn cross_exchange<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pe: NodeId,
        kf: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let (k2p, p2k) = match (self.exchange_k_to_p, self.exchange_p_to_k) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(NnError::Config("cross exchange needs the dual-branch model".into())),
        };
        let to_p = k2p.apply(g, store, kf)?;
        let to_k = p2k.apply(g, store, pe)?;
        Ok((g.add(pe, to_p)?, g.add(kf, to_k)?))
    }

    /// Fused block from both mid features; returns the post-fusion inputs
    /// `(p_in, k_in)`.
    pub fn mid_fusion<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mid_p: NodeId,
        mid_k: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let both = g.concat(&[mid_p, mid_k], 1)?;
        let h = self.fusion[0].apply(g, store, both)?;
        let h = self.leaky(g, h);
        let fused = self.fusion[1].apply(g, store, h)?;
        let p_in = g.concat_complex(&[mid_p, fused], 1)?;
        let k_in = g.concat(&[mid_k, fused], 1)?;
        Ok((p_in, k_in))
    }

    fn pinr_head<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pe: NodeId) -> Result<NodeId> {
        let mut h = pe;
        for layer in &self.pinr[..self.config.mid_layer] {
            let z = layer.apply(g, store, h)?;
            h = self.wire(g, z)?;
        }
        Ok(h)
    }

    fn pinr_tail<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, p_in: NodeId) -> Result<NodeId> {
        let mut h = p_in;
        let (hidden, last) = self.pinr[self.config.mid_layer..].split_at(self.config.depth - self.config.mid_layer - 1);
        for layer in hidden {
            let z = layer.apply(g, store, h)?;
            h = self.wire(g, z)?;
        }
        last[0].apply(g, store, h)
    }

    fn kinr_head<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, kf: NodeId) -> Result<NodeId> {
        let mut h = kf;
        for layer in &self.kinr[..self.config.mid_layer] {
            let z = layer.apply(g, store, h)?;
            h = self.leaky(g, z);
        }
        Ok(h)
    }

    fn kinr_tail<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, k_in: NodeId) -> Result<NodeId> {
        let mut h = k_in;
        let (hidden, last) = self.kinr[self.config.mid_layer..].split_at(self.config.depth - self.config.mid_layer - 1);
        for layer in hidden {
            let z = layer.apply(g, store, h)?;
            h = self.leaky(g, z);
        }
        last[0].apply(g, store, h)
    }

    /// Positional branch alone: `(y_pv, mid_p)`.
    pub fn pinr_forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, pe: NodeId) -> Result<(NodeId, NodeId)> {
        if self.config.mode != BranchMode::PositionalOnly {
            return Err(NnError::Config("the standalone positional branch needs positional-only mode".into()));
        }
        let mid = self.pinr_head(g, store, pe)?;
        Ok((self.pinr_tail(g, store, mid)?, mid))
    }

    /// Both branch stacks given their (already exchanged) inputs.
    pub fn branches<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pe: NodeId,
        kf: Option<NodeId>,
    ) -> Result<BranchNodes> {
        if g.shape(pe).get(1) != Some(&ENCODING_LEN) {
            return Err(NnError::Shape(format!("positional input {:?}, expected [N, {ENCODING_LEN}]", g.shape(pe))));
        }
        let nodes = match (self.config.mode, kf) {
            (BranchMode::PositionalOnly, _) => {
                let (y_pv, mid_p) = self.pinr_forward(g, store, pe)?;
                BranchNodes { y_pv, y_kv: None, mid_p, mid_k: None }
            }
            (BranchMode::Dual, Some(kf)) => {
                let (pe, kf) = self.cross_exchange(g, store, pe, kf)?;
                let mid_p = self.pinr_head(g, store, pe)?;
                let mid_k = self.kinr_head(g, store, kf)?;
                let (p_in, k_in) = self.mid_fusion(g, store, mid_p, mid_k)?;
                let y_pv = self.pinr_tail(g, store, p_in)?;
                let y_kv = self.kinr_tail(g, store, k_in)?;
                BranchNodes { y_pv, y_kv: Some(y_kv), mid_p, mid_k: Some(mid_k) }
            }
            (BranchMode::Dual, None) => {
                return Err(NnError::Config("dual-branch model needs k-space features".into()));
            }
        };
        for id in [Some(nodes.y_pv), nodes.y_kv].into_iter().flatten() {
            if g.value(id).iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFinite("branch output".into()));
            }
        }
        Ok(nodes)
    }

    /// Evaluates both branches at `coords` given the current U-Net input
    /// `[H, W, C, T]`, without recording gradients for later use.
    pub fn kpinr_forward(
        &self,
        store: &ParamStore<f32>,
        coords: &CoordinateSet,
        ksp_in: &Array4<Complex32>,
    ) -> Result<BranchOutputs> {
        let (h, w, c, t) = ksp_in.dim();
        if c != self.coils || coords.dims != (t, h, w) {
            return Err(NnError::Shape(format!(
                "coordinates over {:?} and {c}-coil input {:?} do not match the model ({} coils)",
                coords.dims,
                (h, w, c, t),
                self.coils
            )));
        }
        let pe = self.encoding.encode(coords)?;
        let mut g = Graph::new();
        let pe = g.input(pe.into_dyn());
        let kf = match &self.unet {
            Some(unet) => {
                let x = g.input(volume_to_tensor(ksp_in));
                let out = unet.forward(&mut g, store, x)?;
                Some(g.gather(out.features, &coords.grid)?)
            }
            None => None,
        };
        let nodes = self.branches(&mut g, store, pe, kf)?;
        let to2 = |a: &ArrayD<f32>| a.clone().into_dimensionality::<ndarray::Ix2>().expect("2-D output");
        Ok(BranchOutputs { y_kv: nodes.y_kv.map(|k| to2(g.value(k))), y_pv: to2(g.value(nodes.y_pv)) })
    }
}
