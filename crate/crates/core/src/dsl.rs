//! Dynamically-scaled layers.
//!
//! A [`DslLayer`] is a dense layer `y = Ŵᵀz + b̂` whose parameters are the
//! element-wise product of conventional parameters `(W, b)` and per-sample
//! scale factors `(S_W, S_b)` produced by a scaling network. During warm-up
//! the scaling network is detached and the layer is an ordinary dense layer.
//!
//! The ablation variants share the same plumbing:
//!
//! | variant         | active-phase output                          |
//! |-----------------|----------------------------------------------|
//! | `Conventional`  | `Wᵀz + b` (no scaling network at all)        |
//! | `Dynamic`       | `(S_W(i) ⊙ W)ᵀ z_i + S_b(i) ⊙ b`             |
//! | `GlobalScale`   | `(s_W ⊙ W)ᵀ z_i + s_b ⊙ b`, `s` learned, static |
//! | `ScaleOutputs`  | `s(i) ⊙ (Wᵀ z_i + b)`, `s(i) ∈ R^{d_out}`    |
//! | `Hypernet`      | `Ŵ(i)ᵀ z_i + b̂(i)` taken directly from the scaler |

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::nn::{
    init_network_with, row_sums, Activation, BatchNorm, BatchNormCache, DenseGrads, DenseLayer,
    MlpGrads, MlpNetwork, MlpSpec, MlpTape, Mode, Rmsprop,
};

/// Gain applied to the He-initialized last layer of a scaling network, so
/// that freshly enabled scales start close to their bias.
pub const SCALER_OUTPUT_GAIN: f64 = 0.1;

/// Input of the scaling network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Activations `z` entering the layer.
    ZOnly,
    /// Raw network input `x`.
    XOnly,
    /// Row-wise concatenation `[z; x]`.
    ZAndX,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DslVariant {
    Conventional,
    Dynamic,
    GlobalScale,
    ScaleOutputs,
    Hypernet,
}

impl DslVariant {
    pub fn uses_scaler(self) -> bool {
        matches!(
            self,
            DslVariant::Dynamic | DslVariant::ScaleOutputs | DslVariant::Hypernet
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Active,
}

/// Builds the scaling network's input.
pub fn conditioning_vector(mode: Conditioning, z: &Matrix, x: &Matrix) -> Result<Matrix> {
    if z.cols() != x.cols() {
        return Err(Error::dim(format!(
            "z has {} samples but x has {}",
            z.cols(),
            x.cols()
        )));
    }
    match mode {
        Conditioning::ZOnly => Ok(z.clone()),
        Conditioning::XOnly => Ok(x.clone()),
        Conditioning::ZAndX => Matrix::vstack(z, x),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingNetwork {
    pub net: MlpNetwork,
    pub conditioning: Conditioning,
}

impl ScalingNetwork {
    pub fn output_dim(&self) -> usize {
        self.net.out_dim().unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.net.in_dim().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DslLayer {
    /// Conventional parameters `θᶜ = (W, b)`.
    pub base: DenseLayer,
    pub variant: DslVariant,
    pub phase: Phase,
    pub scaler: Option<ScalingNetwork>,
    /// Static scales for [`DslVariant::GlobalScale`], laid out as `vec(W)` then `b`.
    pub global_scales: Option<Vec<f64>>,
}

/// Shape of a [`DslLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DslSpec {
    pub d_in: usize,
    pub d_out: usize,
    /// Dimension of the raw network input, used by `x_only` / `z_and_x`.
    pub x_dim: usize,
    pub variant: DslVariant,
    pub conditioning: Conditioning,
    /// Hidden sizes of the scaling network; its output size is implied by the variant.
    pub scaler_hidden: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct DslTape {
    phase: Phase,
    variant: DslVariant,
    z: Matrix,
    scales: Option<Matrix>,
    scaler_tape: Option<MlpTape>,
    unscaled: Option<Matrix>,
}

/// Parameter gradients of a [`DslLayer`]. Parameters that took no part in the
/// forward pass (the scaling network during warm-up, `θᶜ` of an active
/// hypernetwork) have no entry and are not updated.
#[derive(Debug, Clone)]
pub struct DslGrads {
    pub base: Option<DenseGrads>,
    pub scaler: Option<MlpGrads>,
    pub global_scales: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct DslBackward {
    pub grads: DslGrads,
    pub dz: Matrix,
    /// Gradient reaching the raw input through the scaling network.
    pub dx: Option<Matrix>,
}

impl DslLayer {
    pub fn conventional(base: DenseLayer) -> Self {
        DslLayer {
            base,
            variant: DslVariant::Conventional,
            phase: Phase::Warmup,
            scaler: None,
            global_scales: None,
        }
    }

    pub fn new(spec: &DslSpec, base_rng: &mut impl rand::Rng, scaler_rng: &mut impl rand::Rng) -> Result<Self> {
        let base = DenseLayer::he_uniform(spec.d_in, spec.d_out, base_rng);
        let scaled_params = spec.d_in * spec.d_out + spec.d_out;
        let mut layer = DslLayer::conventional(base);
        layer.variant = spec.variant;
        match spec.variant {
            DslVariant::Conventional => {}
            DslVariant::GlobalScale => layer.global_scales = Some(vec![1.0; scaled_params]),
            DslVariant::Dynamic | DslVariant::ScaleOutputs | DslVariant::Hypernet => {
                let cond_dim = match spec.conditioning {
                    Conditioning::ZOnly => spec.d_in,
                    Conditioning::XOnly => spec.x_dim,
                    Conditioning::ZAndX => spec.d_in + spec.x_dim,
                };
                let (out_dim, bias) = match spec.variant {
                    DslVariant::Dynamic => (scaled_params, vec![1.0; scaled_params]),
                    DslVariant::ScaleOutputs => (spec.d_out, vec![1.0; spec.d_out]),
                    _ => (scaled_params, flatten_params(&layer.base)),
                };
                let mut sizes = vec![cond_dim];
                sizes.extend(&spec.scaler_hidden);
                sizes.push(out_dim);
                let mlp = MlpSpec {
                    sizes,
                    hidden_norm: true,
                    output_norm: false,
                    output_activation: Activation::Identity,
                };
                let mut net = init_network_with(&mlp, 0, scaler_rng)?;
                let last = net.layers.last_mut().expect("scaler has a layer");
                last.dense.w.scale_mut(SCALER_OUTPUT_GAIN);
                last.dense.b = bias;
                layer.scaler = Some(ScalingNetwork {
                    net,
                    conditioning: spec.conditioning,
                });
            }
        }
        Ok(layer)
    }

    pub fn d_in(&self) -> usize {
        self.base.in_dim()
    }

    pub fn d_out(&self) -> usize {
        self.base.out_dim()
    }

    /// Number of conventional parameters that get scaled, `d_in·d_out + d_out`.
    pub fn scaled_param_count(&self) -> usize {
        self.base.param_count()
    }

    /// Parameters added on top of the conventional layer.
    pub fn extra_param_count(&self) -> usize {
        self.scaler.as_ref().map_or(0, |s| s.net.param_count())
            + self.global_scales.as_ref().map_or(0, Vec::len)
    }

    fn is_active(&self) -> bool {
        self.variant != DslVariant::Conventional && self.phase == Phase::Active
    }

    /// Switches from warm-up to the active phase. A hypernetwork head starts
    /// from the warmed-up conventional parameters by copying them into the
    /// bias of its output layer.
    pub fn activate(&mut self) {
        if self.phase == Phase::Active {
            return;
        }
        self.phase = Phase::Active;
        if self.variant == DslVariant::Hypernet {
            let flat = flatten_params(&self.base);
            if let Some(s) = &mut self.scaler {
                if let Some(last) = s.net.layers.last_mut() {
                    last.dense.b = flat;
                }
            }
        }
    }

    fn check_input(&self, z: &Matrix) -> Result<()> {
        if z.rows() != self.d_in() {
            return Err(Error::dim(format!(
                "layer expects {} inputs, got {}",
                self.d_in(),
                z.rows()
            )));
        }
        Ok(())
    }

    fn check_scales(&self, s: &Matrix) -> Result<()> {
        let expected = match self.variant {
            DslVariant::ScaleOutputs => self.d_out(),
            _ => self.scaled_param_count(),
        };
        if s.rows() != expected {
            return Err(Error::dim(format!(
                "scaling network produced {} outputs, layer needs {expected}",
                s.rows()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, z: &Matrix, x: &Matrix, mode: Mode) -> Result<(Matrix, DslTape)> {
        self.check_input(z)?;
        let mut tape = DslTape {
            phase: self.phase,
            variant: self.variant,
            z: z.clone(),
            scales: None,
            scaler_tape: None,
            unscaled: None,
        };
        if !self.is_active() {
            return Ok((self.base.forward(z)?, tape));
        }
        if self.variant == DslVariant::GlobalScale {
            let (w, b) = self.global_params();
            return Ok((DenseLayer { w, b }.forward(z)?, tape));
        }
        let scaler = self.scaler.as_mut().ok_or_else(|| Error::invalid("missing scaling network"))?;
        let cond = conditioning_vector(scaler.conditioning, z, x)?;
        let (s, stape) = scaler.net.forward(&cond, mode)?;
        let (y, unscaled) = self.apply_scales(z, &s)?;
        tape.scales = Some(s);
        tape.scaler_tape = Some(stape);
        tape.unscaled = unscaled;
        Ok((y, tape))
    }

    /// Eval-mode forward; every column depends only on its own `(z, x)`.
    pub fn infer(&self, z: &Matrix, x: &Matrix) -> Result<Matrix> {
        self.check_input(z)?;
        if !self.is_active() {
            return self.base.forward(z);
        }
        if self.variant == DslVariant::GlobalScale {
            let (w, b) = self.global_params();
            return DenseLayer { w, b }.forward(z);
        }
        let scaler = self.scaler.as_ref().ok_or_else(|| Error::invalid("missing scaling network"))?;
        let cond = conditioning_vector(scaler.conditioning, z, x)?;
        let s = scaler.net.infer(&cond)?;
        Ok(self.apply_scales(z, &s)?.0)
    }

    /// Output of the layer for externally supplied per-sample scales.
    pub fn forward_with_scales(&self, z: &Matrix, scales: &Matrix) -> Result<Matrix> {
        self.check_input(z)?;
        Ok(self.apply_scales(z, scales)?.0)
    }

    fn global_params(&self) -> (Matrix, Vec<f64>) {
        let s = self.global_scales.as_ref().expect("global scale variant has scales");
        let p = self.base.w.data().len();
        let w = Matrix::from_col_major(
            self.d_in(),
            self.d_out(),
            self.base.w.data().iter().zip(&s[..p]).map(|(a, b)| a * b).collect(),
        )
        .expect("shape preserved");
        let b = self.base.b.iter().zip(&s[p..]).map(|(a, b)| a * b).collect();
        (w, b)
    }

    fn apply_scales(&self, z: &Matrix, s: &Matrix) -> Result<(Matrix, Option<Matrix>)> {
        self.check_scales(s)?;
        if s.cols() != z.cols() {
            return Err(Error::dim("one column of scales is needed per sample"));
        }
        let (d_in, d_out, n) = (self.d_in(), self.d_out(), z.cols());
        let p = d_in * d_out;
        let w = self.base.w.data();
        let b = &self.base.b;
        let mut y = Matrix::zeros(d_out, n);
        match self.variant {
            DslVariant::Dynamic => {
                for i in 0..n {
                    let (si, zi) = (s.col(i), z.col(i));
                    let yi = y.col_mut(i);
                    for o in 0..d_out {
                        let sw = &si[o * d_in..(o + 1) * d_in];
                        let wc = &w[o * d_in..(o + 1) * d_in];
                        let mut acc = 0.0;
                        for a in 0..d_in {
                            acc += sw[a] * wc[a] * zi[a];
                        }
                        yi[o] = acc + si[p + o] * b[o];
                    }
                }
                Ok((y, None))
            }
            DslVariant::Hypernet => {
                for i in 0..n {
                    let (si, zi) = (s.col(i), z.col(i));
                    let yi = y.col_mut(i);
                    for o in 0..d_out {
                        let wc = &si[o * d_in..(o + 1) * d_in];
                        let acc: f64 = wc.iter().zip(zi).map(|(w, z)| w * z).sum();
                        yi[o] = acc + si[p + o];
                    }
                }
                Ok((y, None))
            }
            DslVariant::ScaleOutputs => {
                let pre = self.base.forward(z)?;
                Ok((pre.hadamard(s), Some(pre)))
            }
            DslVariant::Conventional | DslVariant::GlobalScale => {
                Err(Error::invalid("variant does not take per-sample scales"))
            }
        }
    }

    pub fn backward(&self, tape: &DslTape, dy: &Matrix) -> Result<DslBackward> {
        if tape.phase != self.phase || tape.variant != self.variant {
            return Err(Error::invalid(format!(
                "tape recorded in {:?}/{:?}, layer is {:?}/{:?}",
                tape.variant, tape.phase, self.variant, self.phase
            )));
        }
        let z = &tape.z;
        if dy.shape() != (self.d_out(), z.cols()) {
            return Err(Error::dim(format!(
                "output gradient is {}x{}, expected {}x{}",
                dy.rows(),
                dy.cols(),
                self.d_out(),
                z.cols()
            )));
        }
        if !self.is_active() {
            let (g, dz) = self.base.backward(z, dy, true);
            return Ok(DslBackward {
                grads: DslGrads {
                    base: Some(g),
                    scaler: None,
                    global_scales: None,
                },
                dz: dz.expect("requested"),
                dx: None,
            });
        }
        if self.variant == DslVariant::GlobalScale {
            return Ok(self.backward_global(z, dy));
        }

        let s = tape.scales.as_ref().ok_or_else(|| Error::invalid("tape has no scales"))?;
        let (d_in, d_out, n) = (self.d_in(), self.d_out(), z.cols());
        let p = d_in * d_out;
        let w = self.base.w.data();
        let b = &self.base.b;
        let mut ds = Matrix::zeros(s.rows(), n);
        let mut dz = Matrix::zeros(d_in, n);
        let base_grads = match self.variant {
            DslVariant::Dynamic => {
                let mut dw = vec![0.0; p];
                let mut db = vec![0.0; d_out];
                for i in 0..n {
                    let (si, zi, gi) = (s.col(i), z.col(i), dy.col(i));
                    let dsi = ds.col_mut(i);
                    let mut dzi = vec![0.0; d_in];
                    for o in 0..d_out {
                        let g = gi[o];
                        let off = o * d_in;
                        for a in 0..d_in {
                            let sw = si[off + a];
                            let wv = w[off + a];
                            dsi[off + a] = g * wv * zi[a];
                            dw[off + a] += g * sw * zi[a];
                            dzi[a] += g * sw * wv;
                        }
                        dsi[p + o] = g * b[o];
                        db[o] += g * si[p + o];
                    }
                    dz.col_mut(i).copy_from_slice(&dzi);
                }
                Some(DenseGrads {
                    w: Matrix::from_col_major(d_in, d_out, dw)?,
                    b: db,
                })
            }
            DslVariant::Hypernet => {
                for i in 0..n {
                    let (si, zi, gi) = (s.col(i), z.col(i), dy.col(i));
                    let dsi = ds.col_mut(i);
                    let mut dzi = vec![0.0; d_in];
                    for o in 0..d_out {
                        let g = gi[o];
                        let off = o * d_in;
                        for a in 0..d_in {
                            dsi[off + a] = g * zi[a];
                            dzi[a] += g * si[off + a];
                        }
                        dsi[p + o] = g;
                    }
                    dz.col_mut(i).copy_from_slice(&dzi);
                }
                None
            }
            DslVariant::ScaleOutputs => {
                let pre = tape.unscaled.as_ref().ok_or_else(|| Error::invalid("tape has no outputs"))?;
                ds = pre.hadamard(dy);
                let dpre = s.hadamard(dy);
                let (g, dzb) = self.base.backward(z, &dpre, true);
                dz = dzb.expect("requested");
                Some(g)
            }
            DslVariant::Conventional | DslVariant::GlobalScale => unreachable!("handled above"),
        };

        let scaler = self.scaler.as_ref().ok_or_else(|| Error::invalid("missing scaling network"))?;
        let stape = tape.scaler_tape.as_ref().ok_or_else(|| Error::invalid("tape has no scaler record"))?;
        let (sgrads, dcond) = scaler.net.backward(stape, &ds, true)?;
        let dcond = dcond.expect("requested");
        let dx = match scaler.conditioning {
            Conditioning::ZOnly => {
                dz.add_assign(&dcond);
                None
            }
            Conditioning::XOnly => Some(dcond),
            Conditioning::ZAndX => {
                dz.add_assign(&dcond.row_range(0, d_in));
                Some(dcond.row_range(d_in, dcond.rows()))
            }
        };
        Ok(DslBackward {
            grads: DslGrads {
                base: base_grads,
                scaler: Some(sgrads),
                global_scales: None,
            },
            dz,
            dx,
        })
    }

    fn backward_global(&self, z: &Matrix, dy: &Matrix) -> DslBackward {
        let (w_hat, _) = self.global_params();
        let s = self.global_scales.as_ref().expect("global scales");
        let p = self.base.w.data().len();
        let dw_hat = z.matmul_t(dy);
        let db_hat = row_sums(dy);
        let dz = w_hat.matmul(dy);
        let w = self.base.w.data();
        let mut ds = Vec::with_capacity(s.len());
        ds.extend(dw_hat.data().iter().zip(w).map(|(g, w)| g * w));
        ds.extend(db_hat.iter().zip(&self.base.b).map(|(g, b)| g * b));
        let dw: Vec<f64> = dw_hat.data().iter().zip(&s[..p]).map(|(g, s)| g * s).collect();
        let db = db_hat.iter().zip(&s[p..]).map(|(g, s)| g * s).collect();
        DslBackward {
            grads: DslGrads {
                base: Some(DenseGrads {
                    w: Matrix::from_col_major(self.d_in(), self.d_out(), dw).expect("shape"),
                    b: db,
                }),
                scaler: None,
                global_scales: Some(ds),
            },
            dz,
            dx: None,
        }
    }

    pub fn apply_gradients(&mut self, grads: &DslGrads, prefix: &str, opt: &mut Rmsprop) -> Result<()> {
        if let Some(g) = &grads.base {
            opt.step(&format!("{prefix}.w"), self.base.w.data_mut(), g.w.data())?;
            opt.step(&format!("{prefix}.b"), &mut self.base.b, &g.b)?;
        }
        if let (Some(g), Some(s)) = (&grads.scaler, &mut self.scaler) {
            s.net.apply_gradients(g, &format!("{prefix}.scaler"), opt)?;
        }
        if let (Some(g), Some(s)) = (&grads.global_scales, &mut self.global_scales) {
            opt.step(&format!("{prefix}.global_scales"), s, g)?;
        }
        Ok(())
    }
}

fn flatten_params(layer: &DenseLayer) -> Vec<f64> {
    let mut v = layer.w.data().to_vec();
    v.extend_from_slice(&layer.b);
    v
}

/// Layout of a [`DslNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DslNetworkSpec {
    pub input_dim: usize,
    /// Widths of the backbone layers (each dense → BN → ReLU).
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub variant: DslVariant,
    pub conditioning: Conditioning,
    pub scaler_hidden: Vec<usize>,
}

/// Feature extractor `f(x) = BN(g(z(x)))`: an MLP backbone `z`, a
/// dynamically-scaled head `g` and a final batch normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DslNetwork {
    pub backbone: MlpNetwork,
    pub head: DslLayer,
    pub feature_norm: BatchNorm,
}

#[derive(Debug, Clone)]
pub struct DslNetworkTape {
    x: Matrix,
    backbone: MlpTape,
    head: DslTape,
    norm: BatchNormCache,
}

#[derive(Debug, Clone)]
pub struct DslNetworkGrads {
    pub backbone: MlpGrads,
    pub head: DslGrads,
}

impl DslNetworkGrads {
    /// Gradient blocks named like [`DslNetwork::parameters_mut`]. Blocks
    /// that received no gradient are absent.
    pub fn entries(&self, prefix: &str) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, g) in self.backbone.layers.iter().enumerate() {
            out.push((format!("{prefix}.backbone.{i}.w"), g.w.data()));
            out.push((format!("{prefix}.backbone.{i}.b"), &g.b));
        }
        if let Some(g) = &self.head.base {
            out.push((format!("{prefix}.head.w"), g.w.data()));
            out.push((format!("{prefix}.head.b"), &g.b));
        }
        if let Some(s) = &self.head.scaler {
            for (i, g) in s.layers.iter().enumerate() {
                out.push((format!("{prefix}.head.scaler.{i}.w"), g.w.data()));
                out.push((format!("{prefix}.head.scaler.{i}.b"), &g.b));
            }
        }
        if let Some(g) = &self.head.global_scales {
            out.push((format!("{prefix}.head.global_scales"), g));
        }
        out
    }
}

impl DslNetwork {
    /// Backbone, head and scaling network draw from separate streams of
    /// `seed`, so the conventional parameters do not depend on the variant.
    pub fn new(spec: &DslNetworkSpec, seed: u64) -> Result<Self> {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        let backbone = if spec.hidden.is_empty() {
            MlpNetwork::empty()
        } else {
            let mut sizes = vec![spec.input_dim];
            sizes.extend(&spec.hidden);
            let mlp = MlpSpec {
                sizes,
                hidden_norm: true,
                output_norm: true,
                output_activation: Activation::Relu,
            };
            init_network_with(&mlp, seed, &mut crate::rng::stream(seed, 0))?
        };
        let d_in = spec.hidden.last().copied().unwrap_or(spec.input_dim);
        let head = DslLayer::new(
            &DslSpec {
                d_in,
                d_out: spec.output_dim,
                x_dim: spec.input_dim,
                variant: spec.variant,
                conditioning: spec.conditioning,
                scaler_hidden: spec.scaler_hidden.clone(),
            },
            &mut crate::rng::stream(seed, 1),
            &mut crate::rng::stream(seed, 2),
        )?;
        Ok(DslNetwork {
            backbone,
            head,
            feature_norm: BatchNorm::new(spec.output_dim),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.in_dim().unwrap_or_else(|| self.head.d_in())
    }

    pub fn output_dim(&self) -> usize {
        self.head.d_out()
    }

    pub fn phase(&self) -> Phase {
        self.head.phase
    }

    pub fn set_phase(&mut self, phase: Phase) {
        match phase {
            Phase::Active => self.head.activate(),
            Phase::Warmup => self.head.phase = Phase::Warmup,
        }
    }

    /// Parameters of the backbone and the conventional head.
    pub fn conventional_param_count(&self) -> usize {
        self.backbone.param_count() + self.head.base.param_count()
    }

    pub fn extra_param_count(&self) -> usize {
        self.head.extra_param_count()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.rows() != self.input_dim() {
            return Err(Error::dim(format!(
                "network expects {} input features, got {}",
                self.input_dim(),
                x.rows()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, DslNetworkTape)> {
        self.check_input(x)?;
        if mode == Mode::Eval {
            return Err(Error::invalid("use DslNetwork::infer for eval-mode outputs"));
        }
        let (z, btape) = self.backbone.forward(x, mode)?;
        let (g, htape) = self.head.forward(&z, x, mode)?;
        let (f, ncache) = self.feature_norm.forward_train(&g)?;
        Ok((
            f,
            DslNetworkTape {
                x: x.clone(),
                backbone: btape,
                head: htape,
                norm: ncache,
            },
        ))
    }

    /// Eval-mode features; per-sample deterministic.
    pub fn infer(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let z = self.backbone.infer(x)?;
        let g = self.head.infer(&z, x)?;
        self.feature_norm.forward_eval(&g)
    }

    pub fn backward(&self, tape: &DslNetworkTape, df: &Matrix) -> Result<DslNetworkGrads> {
        if df.shape() != (self.output_dim(), tape.x.cols()) {
            return Err(Error::dim("feature gradient shape mismatch"));
        }
        let dg = BatchNorm::backward(&tape.norm, df);
        let head = self.head.backward(&tape.head, &dg)?;
        let (backbone, _) = self.backbone.backward(&tape.backbone, &head.dz, false)?;
        Ok(DslNetworkGrads {
            backbone,
            head: head.grads,
        })
    }

    pub fn apply_gradients(&mut self, grads: &DslNetworkGrads, prefix: &str, opt: &mut Rmsprop) -> Result<()> {
        self.backbone
            .apply_gradients(&grads.backbone, &format!("{prefix}.backbone"), opt)?;
        self.head.apply_gradients(&grads.head, &format!("{prefix}.head"), opt)
    }

    /// Every trainable parameter block, named as in [`DslNetwork::apply_gradients`].
    pub fn parameters_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, l) in self.backbone.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.backbone.{i}.w"), l.dense.w.data_mut()));
            out.push((format!("{prefix}.backbone.{i}.b"), &mut l.dense.b));
        }
        let head = &mut self.head;
        out.push((format!("{prefix}.head.w"), head.base.w.data_mut()));
        out.push((format!("{prefix}.head.b"), &mut head.base.b));
        if let Some(s) = &mut head.scaler {
            for (i, l) in s.net.layers.iter_mut().enumerate() {
                out.push((format!("{prefix}.head.scaler.{i}.w"), l.dense.w.data_mut()));
                out.push((format!("{prefix}.head.scaler.{i}.b"), &mut l.dense.b));
            }
        }
        if let Some(g) = &mut head.global_scales {
            out.push((format!("{prefix}.head.global_scales"), g));
        }
        out
    }

    /// The same computation as a plain MLP. Only meaningful while the head
    /// is conventional or in warm-up.
    pub fn as_plain_mlp(&self) -> MlpNetwork {
        let mut layers = self.backbone.layers.clone();
        layers.push(crate::nn::MlpLayer {
            dense: self.head.base.clone(),
            norm: Some(self.feature_norm.clone()),
            activation: Activation::Identity,
        });
        MlpNetwork {
            layers,
            seed: self.backbone.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::stream(seed, 5);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn layer(variant: DslVariant, conditioning: Conditioning) -> DslLayer {
        let spec = DslSpec {
            d_in: 3,
            d_out: 2,
            x_dim: 4,
            variant,
            conditioning,
            scaler_hidden: vec![5],
        };
        DslLayer::new(&spec, &mut crate::rng::stream(1, 1), &mut crate::rng::stream(1, 2)).unwrap()
    }

    #[test]
    fn conditioning_shapes() {
        let z = gaussian(10, 4, 1);
        let x = gaussian(784, 4, 2);
        assert_eq!(conditioning_vector(Conditioning::ZOnly, &z, &x).unwrap(), z);
        assert_eq!(conditioning_vector(Conditioning::ZAndX, &z, &x).unwrap().shape(), (794, 4));
        let x2 = gaussian(784, 4, 3);
        assert_eq!(
            conditioning_vector(Conditioning::XOnly, &z, &x2).unwrap(),
            conditioning_vector(Conditioning::XOnly, &gaussian(10, 4, 9), &x2).unwrap()
        );
        assert!(conditioning_vector(Conditioning::ZOnly, &z, &gaussian(3, 5, 1)).is_err());
    }

    #[test]
    fn scaler_output_counts_every_scaled_parameter() {
        for cond in [Conditioning::ZOnly, Conditioning::XOnly, Conditioning::ZAndX] {
            let l = layer(DslVariant::Dynamic, cond);
            assert_eq!(l.scaler.as_ref().unwrap().output_dim(), 3 * 2 + 2);
            let last = l.scaler.as_ref().unwrap().net.layers.last().unwrap();
            assert_eq!(last.activation, Activation::Identity);
            assert!(last.norm.is_none());
        }
        assert_eq!(layer(DslVariant::Hypernet, Conditioning::ZOnly).scaler.unwrap().output_dim(), 8);
        assert_eq!(layer(DslVariant::ScaleOutputs, Conditioning::ZOnly).scaler.unwrap().output_dim(), 2);
    }

    #[test]
    fn unit_scales_reproduce_warmup() {
        let l = layer(DslVariant::Dynamic, Conditioning::ZOnly);
        let z = gaussian(3, 6, 4);
        let ones = Matrix::filled(8, 6, 1.0);
        let dynamic = l.forward_with_scales(&z, &ones).unwrap();
        let plain = l.base.forward(&z).unwrap();
        assert!(dynamic.max_abs_diff(&plain) < 1e-12);
        let zeros = Matrix::zeros(8, 6);
        assert!(l.forward_with_scales(&z, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn per_sample_scales_match_literal_loop() {
        let l = layer(DslVariant::Dynamic, Conditioning::ZOnly);
        let z = gaussian(3, 2, 5);
        let s = gaussian(8, 2, 6);
        let y = l.forward_with_scales(&z, &s).unwrap();
        for i in 0..2 {
            // Ŵ = S_W ⊙ W, b̂ = S_b ⊙ b, y = Ŵᵀz + b̂
            let w_hat = Matrix::from_fn(3, 2, |a, o| s[(a + 3 * o, i)] * l.base.w[(a, o)]);
            for o in 0..2 {
                let mut acc = 0.0;
                for a in 0..3 {
                    acc += w_hat[(a, o)] * z[(a, i)];
                }
                acc += s[(6 + o, i)] * l.base.b[o];
                assert!((y[(o, i)] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wrong_scale_count_is_rejected() {
        let l = layer(DslVariant::Dynamic, Conditioning::ZOnly);
        assert!(l.forward_with_scales(&gaussian(3, 2, 1), &gaussian(7, 2, 1)).is_err());
    }

    #[test]
    fn warmup_detaches_scaler() {
        let mut l = layer(DslVariant::Dynamic, Conditioning::ZOnly);
        let z = gaussian(3, 4, 7);
        let x = gaussian(4, 4, 8);
        let (y, tape) = l.forward(&z, &x, Mode::Train).unwrap();
        assert_eq!(y, l.base.forward(&z).unwrap());
        let back = l.backward(&tape, &gaussian(2, 4, 9)).unwrap();
        assert!(back.grads.scaler.is_none());
        assert!(back.dx.is_none());
    }

    #[test]
    fn tape_phase_mismatch_is_an_error() {
        let mut l = layer(DslVariant::Dynamic, Conditioning::ZOnly);
        let z = gaussian(3, 4, 7);
        let (_, tape) = l.forward(&z, &z, Mode::Train).unwrap();
        l.activate();
        assert!(l.backward(&tape, &gaussian(2, 4, 9)).is_err());
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let mut l = layer(DslVariant::Dynamic, Conditioning::ZAndX);
        l.activate();
        let z = gaussian(3, 4, 10);
        let x = gaussian(4, 4, 11);
        let (_, tape) = l.forward(&z, &x, Mode::Train).unwrap();
        let back = l.backward(&tape, &Matrix::zeros(2, 4)).unwrap();
        let base = back.grads.base.unwrap();
        assert!(base.w.data().iter().chain(&base.b).all(|&v| v == 0.0));
        for g in &back.grads.scaler.unwrap().layers {
            assert!(g.w.data().iter().chain(&g.b).all(|&v| v == 0.0));
        }
        assert!(back.dz.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_columns_are_independent_and_permute() {
        for variant in [DslVariant::Dynamic, DslVariant::ScaleOutputs, DslVariant::Hypernet] {
            let mut l = layer(variant, Conditioning::ZAndX);
            l.activate();
            let z = gaussian(3, 5, 12);
            let x = gaussian(4, 5, 13);
            let y = l.infer(&z, &x).unwrap();
            let perm = [3, 0, 4, 1, 2];
            let yp = l.infer(&z.select_columns(&perm), &x.select_columns(&perm)).unwrap();
            assert_eq!(yp, y.select_columns(&perm));
        }
    }

    #[test]
    fn warmup_network_equals_plain_mlp() {
        let spec = DslNetworkSpec {
            input_dim: 6,
            hidden: vec![5, 4],
            output_dim: 3,
            variant: DslVariant::Dynamic,
            conditioning: Conditioning::ZOnly,
            scaler_hidden: vec![7],
        };
        let mut net = DslNetwork::new(&spec, 3).unwrap();
        let mut plain = net.as_plain_mlp();
        let x = gaussian(6, 10, 14);
        let (a, _) = net.forward(&x, Mode::Train).unwrap();
        let (b, _) = plain.forward(&x, Mode::Train).unwrap();
        assert_eq!(a, b);
        assert_eq!(net.infer(&x).unwrap(), plain.infer(&x).unwrap());
    }

    #[test]
    fn conventional_init_does_not_depend_on_variant() {
        let mut spec = DslNetworkSpec {
            input_dim: 6,
            hidden: vec![5],
            output_dim: 3,
            variant: DslVariant::Conventional,
            conditioning: Conditioning::ZOnly,
            scaler_hidden: vec![7],
        };
        let plain = DslNetwork::new(&spec, 9).unwrap();
        spec.variant = DslVariant::Dynamic;
        let dynamic = DslNetwork::new(&spec, 9).unwrap();
        assert_eq!(plain.backbone, dynamic.backbone);
        assert_eq!(plain.head.base, dynamic.head.base);
    }
}
